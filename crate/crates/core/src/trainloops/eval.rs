use autograd::{Tensor, Var};

use super::maml::adapt_on_support;
use super::{LossMode, MetaConfig, Models, TrainState};
use crate::data::ModalitySchema;
use crate::error::{arg_err, Result};
use crate::tasks::{FewShotTask, NormStats};

/// Query-set result for one task, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEval {
    pub event_id: String,
    pub mae: f64,
    /// De-normalized and clipped to the target channel's range.
    pub prediction: Tensor,
    pub target: Tensor,
}

/// Generates every task's query targets, optionally after
/// `config.eval_inner_steps` support-set steps on throwaway copies of the
/// parameters. The state is never modified.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_few_shot(
    state: &TrainState,
    models: Models,
    tasks: &[FewShotTask],
    config: &MetaConfig,
    mode: LossMode,
    adapt: bool,
    stats: &NormStats,
    schema: &ModalitySchema,
) -> Result<Vec<TaskEval>> {
    let critic = models.critic(mode)?;
    if critic.is_some() && state.discriminator.is_none() {
        return arg_err("adversarial evaluation needs discriminator parameters");
    }
    let ch = schema.target_index;
    let range = schema.target_range();
    let physical = |z: &Tensor, clip: bool| {
        z.map(|v| {
            let x = stats.dezscore_value(ch, v);
            match range {
                Some((lo, hi)) if clip => x.clamp(lo, hi),
                _ => x,
            }
        })
    };
    let wg = state.generator.constants();
    let wd = state.discriminator.as_ref().map(|d| d.constants());
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let phi = if adapt && config.eval_inner_steps > 0 {
            let s = Var::constant(task.support_source.clone());
            let t = Var::constant(task.support_target.clone());
            adapt_on_support(
                models,
                critic,
                &wg,
                wd.as_ref(),
                &s,
                &t,
                config.inner_lr,
                config.eval_inner_steps,
                config.lambda_l1,
                false,
            )
            .map_err(|e| e.with_context(format!("task {}", task.event_id)))?
            .0
        } else {
            wg.clone()
        };
        let generated = models.generator.generate(&phi, &Var::constant(task.query_source.clone()))?;
        let prediction = physical(generated.value(), true);
        let target = physical(&task.query_target, false);
        let mae = prediction.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.numel() as f64;
        out.push(TaskEval { event_id: task.event_id.clone(), mae, prediction, target });
    }
    Ok(out)
}

pub fn mean_mae(evals: &[TaskEval]) -> f64 {
    evals.iter().map(|e| e.mae).sum::<f64>() / evals.len().max(1) as f64
}
