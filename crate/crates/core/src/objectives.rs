//! Scalar training objectives.

use autograd::{
    abs, add, clamp, concat_channels, exp, expand_trailing, log, matmul, mean_all, mul, recip, scale, sqrt,
    sub, sum_keep, transpose, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::nets::{mean_log_prob, Discriminator, VarMap};

const NORM_FLOOR: f64 = 1e-12;
/// Added to excluded logits; large enough that `exp` underflows to exactly zero.
const EXCLUDED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the L1 term in the generator objective.
    pub lambda_l1: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_l1: 100.0, tau: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return arg_err(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return arg_err(format!("tau must be finite and > 0, got {}", self.tau));
        }
        Ok(())
    }
}

fn check_finite(what: &str, v: &Var) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains NaN or Inf")))
    }
}

fn check_pair(t_gen: &Var, t: &Var) -> Result<()> {
    if t_gen.shape() != t.shape() {
        return Err(Error::Shape(format!("generated {:?} vs target {:?}", t_gen.shape(), t.shape())));
    }
    check_finite("generated target", t_gen)?;
    check_finite("target", t)
}

/// Mean absolute error.
pub fn reconstruction_loss(t_gen: &Var, t: &Var) -> Result<Var> {
    check_pair(t_gen, t)?;
    Ok(mean_all(&abs(&sub(t_gen, t))))
}

/// Non-saturating generator objective `-mean log D(s, t_gen) + lambda * MAE`.
pub fn generator_loss(
    t_gen: &Var,
    t: &Var,
    s: &Var,
    disc: &dyn Discriminator,
    disc_params: &VarMap,
    lambda_l1: f64,
) -> Result<Var> {
    check_pair(t_gen, t)?;
    check_finite("source", s)?;
    let fake = disc.discriminate(disc_params, s, t_gen)?;
    let adversarial = scale(&mean_log_prob(&fake), -1.0);
    if lambda_l1 == 0.0 {
        return Ok(adversarial);
    }
    Ok(add(&adversarial, &scale(&mean_all(&abs(&sub(t_gen, t))), lambda_l1)))
}

/// `0.5 * (mean log D(s, t_gen) - mean log D(s, t))`.
pub fn discriminator_loss(t_gen: &Var, t: &Var, s: &Var, disc: &dyn Discriminator, disc_params: &VarMap) -> Result<Var> {
    check_pair(t_gen, t)?;
    check_finite("source", s)?;
    let fake = mean_log_prob(&disc.discriminate(disc_params, s, t_gen)?);
    let real = mean_log_prob(&disc.discriminate(disc_params, s, t)?);
    Ok(scale(&sub(&fake, &real), 0.5))
}

/// Rows of `[N, d]` scaled to unit length (norms floored at 1e-12).
pub fn l2_normalize_rows(x: &Var) -> Var {
    let norm = sqrt(&sum_keep(&mul(x, x), 1));
    let inv = recip(&clamp(&norm, NORM_FLOOR, f64::INFINITY));
    mul(x, &expand_trailing(&inv, x.shape()))
}

fn as_rows(what: &str, x: &Var) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::Shape(format!("{what} must be [N, d], got {s:?}"))),
    }
}

/// Mean over rows of `logsumexp(logits_i) - logits_i0`; column 0 holds the positive.
fn cross_entropy_first(logits: &Var) -> Var {
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let v = logits.value().data();
    let row_max: Vec<f64> = (0..n).map(|i| v[i * m..(i + 1) * m].iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    let shift = Var::constant(Tensor::new([n], row_max));
    let lse = add(&log(&sum_keep(&exp(&sub(logits, &expand_trailing(&shift, &[n, m]))), 1)), &shift);
    let first = sum_keep(&mul(logits, &Var::constant(Tensor::new([n, m], (0..n * m).map(|k| if k % m == 0 { 1.0 } else { 0.0 }).collect()))), 1);
    mean_all(&sub(&lse, &first))
}

fn nce(pq: &Var, k_plus: &Var, k_negs: &Var, tau: f64, exclude_own: bool) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return arg_err(format!("tau must be > 0, got {tau}"));
    }
    let (n, d) = as_rows("predicted queries", pq)?;
    let (np, dp) = as_rows("positive keys", k_plus)?;
    let (m, dn) = as_rows("negative keys", k_negs)?;
    if np != n || dp != d || (m > 0 && dn != d) || (exclude_own && m != n) {
        return Err(Error::Shape(format!(
            "queries {:?}, positives {:?}, negatives {:?} do not line up",
            pq.shape(),
            k_plus.shape(),
            k_negs.shape()
        )));
    }
    for (what, v) in [("query", pq), ("positive key", k_plus), ("negative key", k_negs)] {
        check_finite(what, v)?;
    }
    let q = l2_normalize_rows(pq);
    let kp = l2_normalize_rows(&k_plus.detach());
    let pos = scale(&sum_keep(&mul(&q, &kp), 1), 1.0 / tau);
    let pos = expand_trailing(&pos, &[n, 1]);
    if m == 0 {
        return Ok(cross_entropy_first(&pos));
    }
    let kn = l2_normalize_rows(&k_negs.detach());
    let mut neg = scale(&matmul(&q, &transpose(&kn)), 1.0 / tau);
    if exclude_own {
        let mask = Tensor::new([n, n], (0..n * n).map(|k| if k / n == k % n { EXCLUDED } else { 0.0 }).collect());
        neg = add(&neg, &Var::constant(mask));
    }
    Ok(cross_entropy_first(&concat_channels(&[pos, neg])))
}

/// InfoNCE where every query shares the same negative pool.
///
/// `pq` are predictor outputs `[N, d]`, `k_plus` the matching positive keys
/// `[N, d]` and `k_negs` the pool `[K, d]` (K may be 0). Keys never receive
/// gradient. Averaged over queries.
pub fn info_nce(pq: &Var, k_plus: &Var, k_negs: &Var, tau: f64) -> Result<Var> {
    nce(pq, k_plus, k_negs, tau, false)
}

/// InfoNCE over a mini-batch of triples: the negatives of query `i` are the
/// negative-view keys of every other triple `j != i`.
pub fn info_nce_in_batch(pq: &Var, k_plus: &Var, k_minus: &Var, tau: f64) -> Result<Var> {
    nce(pq, k_plus, k_minus, tau, true)
}
