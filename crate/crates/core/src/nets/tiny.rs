//! Pointwise two-layer networks with smooth activations. They honour the same
//! I/O contracts as the full models while having only a handful of
//! parameters, which makes finite-difference checks cheap.

use autograd::{concat_channels, sigmoid, upsample2, ConvGeometry, Var};

use super::{conv_layer, conv_layout, expect_rank4, Architecture, Discriminator, Generator, Init, VarMap};
use crate::error::{Error, Result};

const POINT: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };

/// `source -> 1x1 conv -> sigmoid -> 1x1 conv -> nearest x2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TinyGenerator {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
}

/// `(upsampled source, target) -> 1x1 conv -> sigmoid -> 1x1 conv -> sigmoid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TinyDiscriminator {
    pub source_channels: usize,
    pub hidden: usize,
    pub target_channels: usize,
}

impl Architecture for TinyGenerator {
    fn arch_tag(&self) -> String {
        format!("tinygen({}-{}-{})", self.in_channels, self.hidden, self.out_channels)
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut l = conv_layout("l1", self.in_channels, self.hidden, 1).to_vec();
        l.extend(conv_layout("l2", self.hidden, self.out_channels, 1));
        l
    }
}

impl Generator for TinyGenerator {
    fn generate(&self, params: &VarMap, source: &Var) -> Result<Var> {
        let s = expect_rank4("source", source)?;
        if s[1] != self.in_channels {
            return Err(Error::Shape(format!("source has {} channels, expected {}", s[1], self.in_channels)));
        }
        let h = sigmoid(&conv_layer(params, "l1", source, POINT)?);
        Ok(upsample2(&conv_layer(params, "l2", &h, POINT)?))
    }
}

impl Architecture for TinyDiscriminator {
    fn arch_tag(&self) -> String {
        format!("tinydisc({}+{}-{})", self.source_channels, self.target_channels, self.hidden)
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut l = conv_layout("l1", self.source_channels + self.target_channels, self.hidden, 1).to_vec();
        l.extend(conv_layout("l2", self.hidden, 1, 1));
        l
    }
}

impl Discriminator for TinyDiscriminator {
    fn discriminate(&self, params: &VarMap, source: &Var, target: &Var) -> Result<Var> {
        let s = expect_rank4("source", source)?;
        let t = expect_rank4("target", target)?;
        if t[0] != s[0] || t[2] != 2 * s[2] || t[3] != 2 * s[3] {
            return Err(Error::Shape(format!("cannot pair source {s:?} with target {t:?}")));
        }
        let x = concat_channels(&[upsample2(source), target.clone()]);
        let h = sigmoid(&conv_layer(params, "l1", &x, POINT)?);
        Ok(sigmoid(&conv_layer(params, "l2", &h, POINT)?))
    }
}
