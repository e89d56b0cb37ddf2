//! Joint and second-order meta-learned training of translators, plus few-shot
//! evaluation.

mod adam;
mod eval;
mod joint;
mod maml;
mod state;

pub use adam::{Adam, AdamConfig};
pub use eval::{evaluate_few_shot, mean_mae, TaskEval};
pub use joint::{joint_epoch, joint_step};
pub use maml::{inner_adapt, maml_epoch, maml_outer_step, meta_gradients, meta_objective, MetaGradients, MetaObjective};
pub use state::{MetricsRecord, TrainState};

use autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::nets::{Discriminator, Generator, VarMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Reconstruction,
    Adversarial,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Reconstruction => "reconstruction",
            LossMode::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(LossMode::Reconstruction),
            "adversarial" => Ok(LossMode::Adversarial),
            other => arg_err(format!("unknown loss mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Events per outer step.
    pub meta_batch: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Support-set steps taken before generating at evaluation time.
    pub eval_inner_steps: usize,
    pub adam: AdamConfig,
    /// Discriminator optimizer; the generator's settings when unset.
    #[serde(default)]
    pub disc_adam: Option<AdamConfig>,
    pub lambda_l1: f64,
    /// Frame pairs per joint-training step.
    pub joint_batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_batch: 2,
            inner_lr: 1e-4,
            inner_steps: 1,
            eval_inner_steps: 1,
            adam: AdamConfig::default(),
            disc_adam: None,
            lambda_l1: 100.0,
            joint_batch: 8,
            epochs: 1,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch == 0 {
            return arg_err("meta_batch must be at least 1");
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return arg_err(format!("inner_lr must be positive, got {}", self.inner_lr));
        }
        if self.inner_steps == 0 {
            return arg_err("inner_steps must be at least 1");
        }
        if self.joint_batch == 0 {
            return arg_err("joint_batch must be at least 1");
        }
        for a in std::iter::once(&self.adam).chain(&self.disc_adam) {
            if !(a.lr >= 0.0 && a.lr.is_finite() && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
                return arg_err(format!("invalid Adam settings {a:?}"));
            }
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return arg_err(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1));
        }
        Ok(())
    }

    pub fn disc_adam(&self) -> AdamConfig {
        self.disc_adam.unwrap_or(self.adam)
    }
}

/// The networks being trained: a generator and, in adversarial mode, a critic.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub generator: &'a dyn Generator,
    pub discriminator: Option<&'a dyn Discriminator>,
}

impl<'a> Models<'a> {
    pub fn reconstruction(generator: &'a dyn Generator) -> Self {
        Self { generator, discriminator: None }
    }

    pub fn adversarial(generator: &'a dyn Generator, discriminator: &'a dyn Discriminator) -> Self {
        Self { generator, discriminator: Some(discriminator) }
    }

    pub(crate) fn critic(&self, mode: LossMode) -> Result<Option<&'a dyn Discriminator>> {
        match (mode, self.discriminator) {
            (LossMode::Reconstruction, _) => Ok(None),
            (LossMode::Adversarial, Some(d)) => Ok(Some(d)),
            (LossMode::Adversarial, None) => arg_err("adversarial mode needs a discriminator"),
        }
    }
}

pub(crate) fn values(vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| v.value().clone()).collect()
}

pub(crate) fn check_grads(what: &str, params: &VarMap, grads: &[Var]) -> Result<()> {
    for (name, g) in params.names().zip(grads) {
        if !g.value().is_finite() {
            return Err(Error::Numeric(format!("{what}: non-finite gradient for {name}")));
        }
    }
    Ok(())
}

pub(crate) fn autograd_err(e: autograd::AutogradError) -> Error {
    Error::Numeric(e.to_string())
}
