use autograd::{clamp, concat_channels, leaky_relu, log, mean_all, sigmoid, upsample2, ConvGeometry, Var};
use serde::{Deserialize, Serialize};

use super::{conv_layer, conv_layout, expect_rank4, Architecture, Discriminator, Init, VarMap};
use crate::error::{Error, Result};

const DOWN: ConvGeometry = ConvGeometry { kernel: 4, stride: 2, pad: 1 };
const HEAD: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
const BLOCKS: usize = 3;
const LEAK: f64 = 0.2;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Conditional patch critic. The source is upsampled (nearest) to the target
/// resolution and stacked with it; three stride-2 4x4 blocks with leaky ReLU
/// and a 3x3 sigmoid head give one probability per `8x8` patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDiscSpec {
    pub base_width: usize,
    pub source_channels: usize,
    pub target_channels: usize,
}

impl Default for PatchDiscSpec {
    fn default() -> Self {
        Self { base_width: 64, source_channels: 3, target_channels: 1 }
    }
}

impl PatchDiscSpec {
    pub fn new(base_width: usize, source_channels: usize, target_channels: usize) -> Self {
        Self { base_width, source_channels, target_channels }
    }

    pub fn forward(&self, params: &VarMap, source: &Var, target: &Var) -> Result<Var> {
        let s = expect_rank4("source", source)?;
        let t = expect_rank4("target", target)?;
        if s[0] != t[0] || s[1] != self.source_channels || t[1] != self.target_channels {
            return Err(Error::Shape(format!("discriminator cannot pair source {s:?} with target {t:?}")));
        }
        if t[2] != 2 * s[2] || t[3] != 2 * s[3] {
            return Err(Error::Shape(format!("target {}x{} is not twice source {}x{}", t[2], t[3], s[2], s[3])));
        }
        if t[2] < 8 || t[3] < 8 {
            return Err(Error::Shape(format!("target {}x{} is smaller than one patch", t[2], t[3])));
        }
        let mut x = concat_channels(&[upsample2(source), target.clone()]);
        for i in 1..=BLOCKS {
            x = leaky_relu(&conv_layer(params, &format!("d{i}"), &x, DOWN)?, LEAK);
        }
        Ok(sigmoid(&conv_layer(params, "dhead", &x, HEAD)?))
    }

    /// The probability map together with its mean (clamped) log.
    pub fn forward_with_mean_log(&self, params: &VarMap, source: &Var, target: &Var) -> Result<(Var, Var)> {
        let map = self.forward(params, source, target)?;
        let ml = mean_log_prob(&map);
        Ok((map, ml))
    }
}

/// Mean over batch and patches of `log(clamp(p))`.
pub fn mean_log_prob(map: &Var) -> Var {
    mean_all(&log(&clamp(map, PROB_CLAMP, 1.0 - PROB_CLAMP)))
}

impl Architecture for PatchDiscSpec {
    fn arch_tag(&self) -> String {
        format!("patchdisc(b={},src={},tgt={})", self.base_width, self.source_channels, self.target_channels)
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut c = self.source_channels + self.target_channels;
        let mut out = Vec::new();
        for i in 0..BLOCKS {
            let w = self.base_width << i;
            out.extend(conv_layout(&format!("d{}", i + 1), c, w, DOWN.kernel));
            c = w;
        }
        out.extend(conv_layout("dhead", c, 1, HEAD.kernel));
        out
    }
}

impl Discriminator for PatchDiscSpec {
    fn discriminate(&self, params: &VarMap, source: &Var, target: &Var) -> Result<Var> {
        self.forward(params, source, target)
    }
}
