use autograd::{grad, scale, sub, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{autograd_err, check_grads, LossMode, MetaConfig, Models, TrainState};
use crate::data::derive_seed;
use crate::error::{arg_err, Error, Result};
use crate::nets::{Discriminator, ParamSet, VarMap};
use crate::objectives::{discriminator_loss, generator_loss, reconstruction_loss};
use crate::tasks::FewShotTask;

fn gradient_step(params: &VarMap, loss: &Var, eta: f64, create_graph: bool) -> Result<VarMap> {
    let vars = params.vars();
    let grads = grad(loss, &vars, create_graph).map_err(autograd_err)?;
    check_grads("inner step", params, &grads)?;
    Ok(params.with_vars(vars.iter().zip(&grads).map(|(w, g)| sub(w, &scale(g, eta))).collect()))
}

/// Without a retained graph the inner loop still needs gradients, so
/// constant parameters are swapped for fresh leaves holding the same values.
fn trainable(params: &VarMap, create_graph: bool) -> VarMap {
    if create_graph {
        params.clone()
    } else {
        params.with_vars(params.vars().iter().map(|v| Var::leaf(v.value().clone())).collect())
    }
}

/// `steps` sequential gradient steps `phi <- phi - eta * grad loss(phi)`.
///
/// With `create_graph` the result stays differentiable with respect to
/// `params`, which is what the outer meta-update needs.
pub fn inner_adapt(
    params: &VarMap,
    loss: impl Fn(&VarMap) -> Result<Var>,
    eta: f64,
    steps: usize,
    create_graph: bool,
) -> Result<VarMap> {
    let mut phi = trainable(params, create_graph);
    for step in 0..steps {
        phi = gradient_step(&phi, &loss(&phi)?, eta, create_graph).map_err(|e| e.with_context(format!("inner step {step}")))?;
    }
    Ok(phi)
}

/// Support-set adaptation of the generator and, in adversarial mode, the
/// critic. Both losses of a step use the same generator output, produced by
/// the generator parameters from before that step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adapt_on_support(
    models: Models,
    critic: Option<&dyn Discriminator>,
    wg: &VarMap,
    wd: Option<&VarMap>,
    source: &Var,
    target: &Var,
    eta: f64,
    steps: usize,
    lambda: f64,
    create_graph: bool,
) -> Result<(VarMap, Option<VarMap>)> {
    let mut g = trainable(wg, create_graph);
    let mut d = wd.map(|d| trainable(d, create_graph));
    for _ in 0..steps {
        let fake = models.generator.generate(&g, source)?;
        match (critic, &d) {
            (Some(disc), Some(dp)) => {
                let lg = generator_loss(&fake, target, source, disc, dp, lambda)?;
                let ld = discriminator_loss(&fake, target, source, disc, dp)?;
                let next_g = gradient_step(&g, &lg, eta, create_graph)?;
                d = Some(gradient_step(dp, &ld, eta, create_graph)?);
                g = next_g;
            }
            _ => {
                let l = reconstruction_loss(&fake, target)?;
                g = gradient_step(&g, &l, eta, create_graph)?;
            }
        }
    }
    Ok((g, d))
}

/// Mean query losses over a meta-batch, as functions of the initial parameters.
pub struct MetaObjective {
    pub gen_loss: Var,
    pub disc_loss: Option<Var>,
    pub per_task_gen: Vec<f64>,
    pub per_task_disc: Vec<f64>,
}

fn task_objective(
    models: Models,
    mode: LossMode,
    wg: &VarMap,
    wd: Option<&VarMap>,
    task: &FewShotTask,
    config: &MetaConfig,
    create_graph: bool,
) -> Result<(Var, Option<Var>)> {
    let critic = models.critic(mode)?;
    let wd = if critic.is_some() { wd } else { None };
    if critic.is_some() && wd.is_none() {
        return arg_err("adversarial mode needs discriminator parameters");
    }
    let s = Var::constant(task.support_source.clone());
    let t = Var::constant(task.support_target.clone());
    let (phi_g, phi_d) =
        adapt_on_support(models, critic, wg, wd, &s, &t, config.inner_lr, config.inner_steps, config.lambda_l1, create_graph)?;
    let sq = Var::constant(task.query_source.clone());
    let tq = Var::constant(task.query_target.clone());
    let fake = models.generator.generate(&phi_g, &sq)?;
    match (critic, phi_d) {
        (Some(disc), Some(pd)) => Ok((
            generator_loss(&fake, &tq, &sq, disc, &pd, config.lambda_l1)?,
            Some(discriminator_loss(&fake, &tq, &sq, disc, &pd)?),
        )),
        _ => Ok((reconstruction_loss(&fake, &tq)?, None)),
    }
}

/// Builds the meta-objective: per task, adapt on the support set, then
/// evaluate the query losses with the adapted parameters; average over tasks.
pub fn meta_objective(
    models: Models,
    mode: LossMode,
    wg: &VarMap,
    wd: Option<&VarMap>,
    tasks: &[&FewShotTask],
    config: &MetaConfig,
    create_graph: bool,
) -> Result<MetaObjective> {
    if tasks.is_empty() {
        return arg_err("meta-batch is empty");
    }
    let inv = 1.0 / tasks.len() as f64;
    let mut gen_terms = Vec::new();
    let mut disc_terms = Vec::new();
    for task in tasks {
        let (lg, ld) = task_objective(models, mode, wg, wd, task, config, create_graph)
            .map_err(|e| e.with_context(format!("task {}", task.event_id)))?;
        gen_terms.push(lg);
        disc_terms.extend(ld);
    }
    let mean = |terms: &[Var]| {
        let total = terms[1..].iter().fold(terms[0].clone(), |acc, t| autograd::add(&acc, t));
        scale(&total, inv)
    };
    Ok(MetaObjective {
        per_task_gen: gen_terms.iter().map(Var::item).collect(),
        per_task_disc: disc_terms.iter().map(Var::item).collect(),
        gen_loss: mean(&gen_terms),
        disc_loss: (!disc_terms.is_empty()).then(|| mean(&disc_terms)),
    })
}

/// Outer gradients of the mean query losses with respect to the initial
/// parameters, differentiated through the inner adaptation.
#[derive(Clone, Debug)]
pub struct MetaGradients {
    pub generator: Vec<Tensor>,
    pub discriminator: Option<Vec<Tensor>>,
    pub per_task_gen: Vec<f64>,
    pub per_task_disc: Vec<f64>,
}

/// Accumulates one task at a time so only a single task's graph is alive.
pub fn meta_gradients(
    models: Models,
    mode: LossMode,
    generator: &ParamSet,
    discriminator: Option<&ParamSet>,
    tasks: &[&FewShotTask],
    config: &MetaConfig,
) -> Result<MetaGradients> {
    if tasks.is_empty() {
        return arg_err("meta-batch is empty");
    }
    let adversarial = models.critic(mode)?.is_some();
    if adversarial && discriminator.is_none() {
        return arg_err("adversarial mode needs discriminator parameters");
    }
    let inv = 1.0 / tasks.len() as f64;
    let wg = generator.leaves();
    let wd = discriminator.filter(|_| adversarial).map(ParamSet::leaves);
    let mut g_acc: Vec<Tensor> = generator.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
    let mut d_acc: Option<Vec<Tensor>> = wd.as_ref().map(|d| d.vars().iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect());
    let mut per_task_gen = Vec::with_capacity(tasks.len());
    let mut per_task_disc = Vec::new();
    for task in tasks {
        let ctx = |e: Error| e.with_context(format!("task {}", task.event_id));
        let (lg, ld) = task_objective(models, mode, &wg, wd.as_ref(), task, config, true).map_err(ctx)?;
        let gg = grad(&lg, &wg.vars(), false).map_err(autograd_err).map_err(ctx)?;
        check_grads("outer generator step", &wg, &gg).map_err(ctx)?;
        accumulate(&mut g_acc, &gg, inv);
        per_task_gen.push(lg.item());
        if let (Some(ld), Some(wd), Some(acc)) = (ld, wd.as_ref(), d_acc.as_mut()) {
            let gd = grad(&ld, &wd.vars(), false).map_err(autograd_err).map_err(ctx)?;
            check_grads("outer discriminator step", wd, &gd).map_err(ctx)?;
            accumulate(acc, &gd, inv);
            per_task_disc.push(ld.item());
        }
    }
    Ok(MetaGradients { generator: g_acc, discriminator: d_acc, per_task_gen, per_task_disc })
}

fn accumulate(acc: &mut [Tensor], grads: &[Var], weight: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.data_mut().iter_mut().zip(g.value().data()).for_each(|(a, g)| *a += weight * g);
    }
}

/// One second-order meta-update on a meta-batch of exactly `meta_batch` tasks.
/// Returns the per-task generator query losses.
pub fn maml_outer_step(
    state: &mut TrainState,
    models: Models,
    tasks: &[&FewShotTask],
    config: &MetaConfig,
    mode: LossMode,
) -> Result<Vec<f64>> {
    if tasks.len() != config.meta_batch {
        return arg_err(format!("meta-batch has {} tasks, config expects {}", tasks.len(), config.meta_batch));
    }
    let grads = meta_gradients(models, mode, &state.generator, state.discriminator.as_ref(), tasks, config)?;
    state.gen_opt.step(&mut state.generator, &grads.generator)?;
    if let Some(dg) = &grads.discriminator {
        let (Some(d), Some(opt)) = (state.discriminator.as_mut(), state.disc_opt.as_mut()) else {
            return arg_err("adversarial mode needs a discriminator and its optimizer in the state");
        };
        opt.step(d, dg)?;
    }
    state.steps += 1;
    let mean = grads.per_task_gen.iter().sum::<f64>() / grads.per_task_gen.len() as f64;
    state.loss_history.push(mean);
    Ok(grads.per_task_gen)
}

/// One pass over `tasks` in a seeded per-epoch order, in meta-batches of
/// `config.meta_batch` (a trailing partial batch is skipped). Returns the mean
/// generator query loss.
pub fn maml_epoch(
    state: &mut TrainState,
    models: Models,
    tasks: &[FewShotTask],
    config: &MetaConfig,
    mode: LossMode,
) -> Result<f64> {
    if tasks.len() < config.meta_batch {
        return arg_err(format!("{} tasks cannot fill a meta-batch of {}", tasks.len(), config.meta_batch));
    }
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, state.epoch as u64)));
    let mut losses = Vec::new();
    for (b, chunk) in order.chunks_exact(config.meta_batch).enumerate() {
        let batch: Vec<&FewShotTask> = chunk.iter().map(|&i| &tasks[i]).collect();
        let l = maml_outer_step(state, models, &batch, config, mode)
            .map_err(|e| e.with_context(format!("epoch {} meta-batch {b}", state.epoch)))?;
        losses.extend(l);
    }
    state.epoch += 1;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::{mul, Var};

    fn scalar_map(v: f64) -> VarMap {
        VarMap::from_pairs([("w".to_string(), Var::leaf(Tensor::new([1], vec![v])))])
    }

    fn sq(v: &Var) -> Var {
        autograd::sum_all(&mul(v, v))
    }

    fn toy_inner(p: &VarMap) -> Result<Var> {
        Ok(sq(&autograd::add_scalar(p.get("w")?, -1.0)))
    }

    #[test]
    fn inner_adapt_analytic_steps() {
        let w = scalar_map(0.0);
        let one = inner_adapt(&w, toy_inner, 0.25, 1, true).unwrap();
        assert_eq!(one.get("w").unwrap().item(), 0.5);
        let two = inner_adapt(&w, toy_inner, 0.25, 2, true).unwrap();
        assert_eq!(two.get("w").unwrap().item(), 0.75);
        let none = inner_adapt(&w, toy_inner, 0.0, 3, true).unwrap();
        assert_eq!(none.get("w").unwrap().value(), w.get("w").unwrap().value());
    }

    #[test]
    fn scalar_meta_gradient() {
        let w = scalar_map(0.0);
        let meta = |w: &VarMap, eta: f64| {
            let phi = inner_adapt(w, toy_inner, eta, 1, true).unwrap();
            sq(phi.get("w").unwrap())
        };
        let g = grad(&meta(&w, 0.25), &w.vars(), false).unwrap()[0].item();
        assert_eq!(g, 0.5);
        // eta = 0: plain query gradient 2w at w = 0.3.
        let w3 = scalar_map(0.3);
        let g0 = grad(&meta(&w3, 0.0), &w3.vars(), false).unwrap()[0].item();
        assert!((g0 - 0.6).abs() < 1e-15);
        let eps = 1e-4;
        let f = |v: f64| meta(&scalar_map(v), 0.25).item();
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!((fd - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_inner_gradient_is_reported() {
        let w = scalar_map(0.0);
        let bad = |p: &VarMap| Ok(autograd::sqrt(&autograd::abs(p.get("w")?)));
        assert!(matches!(inner_adapt(&w, |p| Ok(autograd::sum_all(&bad(p)?)), 0.1, 1, false), Err(Error::Numeric(_))));
    }
}
