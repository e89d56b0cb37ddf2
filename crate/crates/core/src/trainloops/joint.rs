use autograd::{grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{autograd_err, check_grads, values, LossMode, MetaConfig, Models, TrainState};
use crate::data::derive_seed;
use crate::error::{arg_err, Result};
use crate::objectives::{discriminator_loss, generator_loss, reconstruction_loss};
use crate::tasks::JointDataset;

/// One optimizer step on a batch of frame pairs. Reconstruction mode takes an
/// Adam step on the MAE; adversarial mode first steps the discriminator on
/// its loss, then steps the generator against the updated discriminator.
/// Returns the generator loss before the update.
pub fn joint_step(
    state: &mut TrainState,
    models: Models,
    source: &Tensor,
    target: &Tensor,
    config: &MetaConfig,
    mode: LossMode,
) -> Result<f64> {
    if source.dim(0) == 0 {
        return arg_err("joint batch is empty");
    }
    let s = Var::constant(source.clone());
    let t = Var::constant(target.clone());
    let critic = models.critic(mode)?;
    if let Some(disc) = critic {
        let (Some(dparams), Some(dopt)) = (state.discriminator.as_mut(), state.disc_opt.as_mut()) else {
            return arg_err("adversarial mode needs a discriminator and its optimizer in the state");
        };
        let fake = models.generator.generate(&state.generator.constants(), &s)?;
        let wd = dparams.leaves();
        let ld = discriminator_loss(&fake, &t, &s, disc, &wd)?;
        let gd = grad(&ld, &wd.vars(), false).map_err(autograd_err)?;
        check_grads("discriminator step", &wd, &gd)?;
        dopt.step(dparams, &values(&gd))?;
    }
    let wg = state.generator.leaves();
    let fake = models.generator.generate(&wg, &s)?;
    let lg = match critic {
        Some(disc) => {
            let wd = state.discriminator.as_ref().expect("checked above").constants();
            generator_loss(&fake, &t, &s, disc, &wd, config.lambda_l1)?
        }
        None => reconstruction_loss(&fake, &t)?,
    };
    let gg = grad(&lg, &wg.vars(), false).map_err(autograd_err)?;
    check_grads("generator step", &wg, &gg)?;
    state.gen_opt.step(&mut state.generator, &values(&gg))?;
    state.steps += 1;
    state.loss_history.push(lg.item());
    Ok(lg.item())
}

/// One shuffled pass over the frame pairs in batches of `config.joint_batch`
/// (the last batch may be smaller). Returns the mean generator loss.
pub fn joint_epoch(
    state: &mut TrainState,
    models: Models,
    data: &JointDataset,
    config: &MetaConfig,
    mode: LossMode,
) -> Result<f64> {
    if data.is_empty() {
        return arg_err("joint dataset is empty");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, state.epoch as u64)));
    let mut total = 0.0;
    let mut n = 0;
    for (b, rows) in order.chunks(config.joint_batch).enumerate() {
        let (s, t) = data.batch(rows);
        total += joint_step(state, models, &s, &t, config, mode)
            .map_err(|e| e.with_context(format!("epoch {} batch {b}", state.epoch)))?;
        n += 1;
    }
    state.epoch += 1;
    Ok(total / n as f64)
}
