use autograd::{add_scalar, broadcast_channels, matmul, mul, recip, relu, scale, sqrt, sub, sum_channels, Var};
use serde::{Deserialize, Serialize};

use super::{Architecture, Init, VarMap};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over the rows of `[N, F]` using the batch's own
/// statistics (biased variance). `affine` is an optional `(gamma, beta)`.
pub fn batch_norm(x: &Var, affine: Option<(&Var, &Var)>) -> Var {
    let n = x.shape()[0] as f64;
    let shape = x.shape().to_vec();
    let mean = scale(&sum_channels(x), 1.0 / n);
    let centred = sub(x, &broadcast_channels(&mean, &shape));
    let var = scale(&sum_channels(&mul(&centred, &centred)), 1.0 / n);
    let inv = recip(&sqrt(&add_scalar(&var, BN_EPS)));
    let y = mul(&centred, &broadcast_channels(&inv, &shape));
    match affine {
        Some((g, b)) => autograd::add(&mul(&y, &broadcast_channels(g, &shape)), &broadcast_channels(b, &shape)),
        None => y,
    }
}

/// Two-layer MLP head: `Linear -> BN -> ReLU -> Linear`, optionally followed
/// by a non-affine BN. Linear layers carry no bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpHeadSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub final_bn: bool,
}

impl MlpHeadSpec {
    pub fn projector(in_dim: usize) -> Self {
        Self { in_dim, hidden_dim: 2048, out_dim: 128, final_bn: true }
    }

    pub fn predictor() -> Self {
        Self { in_dim: 128, hidden_dim: 2048, out_dim: 128, final_bn: false }
    }
}

impl MlpHeadSpec {
    pub fn forward(&self, params: &VarMap, x: &Var) -> Result<Var> {
        match *x.shape() {
            [n, f] if f == self.in_dim && n >= 2 => {}
            ref s => {
                return Err(Error::Shape(format!(
                    "head expects [N >= 2, {}] (batch statistics), got {s:?}",
                    self.in_dim
                )))
            }
        }
        let h = matmul(x, params.get("fc1.weight")?);
        let h = relu(&batch_norm(&h, Some((params.get("bn1.weight")?, params.get("bn1.bias")?))));
        let y = matmul(&h, params.get("fc2.weight")?);
        Ok(if self.final_bn { batch_norm(&y, None) } else { y })
    }
}

impl Architecture for MlpHeadSpec {
    fn arch_tag(&self) -> String {
        format!("mlp({}-{}-{}{})", self.in_dim, self.hidden_dim, self.out_dim, if self.final_bn { ",bn" } else { "" })
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        vec![
            ("fc1.weight".into(), vec![self.in_dim, self.hidden_dim], Init::Normal),
            ("bn1.weight".into(), vec![self.hidden_dim], Init::Ones),
            ("bn1.bias".into(), vec![self.hidden_dim], Init::Zeros),
            ("fc2.weight".into(), vec![self.hidden_dim, self.out_dim], Init::Normal),
        ]
    }
}
