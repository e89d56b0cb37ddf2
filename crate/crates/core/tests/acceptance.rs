//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use autograd::{grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormmeta::data::{derive_seed, read_archive, synth_event, write_archive, EventTensor, ModalitySchema};
use stormmeta::nets::tiny::{TinyDiscriminator, TinyGenerator};
use stormmeta::nets::{init_params, Discriminator, Generator, ParamSet, PatchDiscSpec, UNetSpec, VarMap};
use stormmeta::objectives::{discriminator_loss, generator_loss, info_nce, reconstruction_loss};
use stormmeta::skillmetrics::{evaluate_archive, frames_of, Aggregation};
use stormmeta::sslpretrain::{
    contrastive_loss, cosine_warmup_lr, export_encoder, make_contrastive_batch, momentum_update, pretrain_epoch,
    AugmentationSpec, MocoConfig, MocoState,
};
use stormmeta::tasks::{build_task, collapse_joint, compute_norm_stats, split_events, FewShotTask, JointDataset, NormStats};
use stormmeta::trainloops::{
    evaluate_few_shot, inner_adapt, joint_epoch, joint_step, maml_epoch, mean_mae, meta_gradients, meta_objective, LossMode,
    MetaConfig, Models, TrainState,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within_time(start: Instant, limit_s: f64) -> Result<(), String> {
    let t = start.elapsed().as_secs_f64();
    ensure(t < limit_s, format!("took {t:.1}s, limit {limit_s}s"))
}

// 1

fn brute_counts(p: &[f64], t: &[f64], th: f64) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (a, b) in p.iter().zip(t) {
        match (*a >= th, *b >= th) {
            (true, true) => c[0] += 1,
            (false, true) => c[1] += 1,
            (true, false) => c[2] += 1,
            (false, false) => c[3] += 1,
        }
    }
    c
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        // mix of continuous values and exact threshold hits
        let mut draw = || -> Vec<f64> {
            (0..256)
                .map(|_| match rng.gen_range(0..10) {
                    0 => 74.0,
                    1 => 133.0,
                    _ => rng.gen_range(0.0..=255.0),
                })
                .collect()
        };
        let (p, t) = (draw(), draw());
        let r = ok(evaluate_archive(
            &[Tensor::new([16, 16], p.clone())],
            &[Tensor::new([16, 16], t.clone())],
            &[74.0, 133.0],
            Aggregation::Pooled,
        ))?;
        for ts in &r.thresholds {
            let [h, m, f, tn] = brute_counts(&p, &t, ts.threshold);
            let c = ts.counts;
            ensure(
                [c.hits, c.misses, c.false_alarms, c.true_negatives] == [h, m, f, tn],
                format!("pair {k} threshold {}: counts differ", ts.threshold),
            )?;
            let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
            for (got, want) in [(ts.skill.csi, ratio(h, h + m + f)), (ts.skill.pod, ratio(h, h + m)), (ts.skill.sucr, ratio(h, h + f))] {
                match (got, want) {
                    (Some(g), Some(w)) => worst = worst.max(if w == 0.0 { g.abs() } else { ((g - w) / w).abs() }),
                    (None, None) => {}
                    _ => return Err(format!("pair {k}: definedness differs")),
                }
            }
        }
    }
    ensure(worst < 1e-12, format!("metric relative error {worst:e}"))?;
    within_time(start, 5.0)?;
    Ok(format!("200 pairs exact, worst metric rel err {worst:e}"))
}

// 2

/// Probability `real` for the stored real target, `fake` for anything else.
struct FixedDisc {
    real_target: Tensor,
    real: f64,
    fake: f64,
}

impl Discriminator for FixedDisc {
    fn discriminate(&self, _: &VarMap, _: &Var, target: &Var) -> stormmeta::Result<Var> {
        let t = target.value();
        let p = if t.data() == self.real_target.data() { self.real } else { self.fake };
        Ok(Var::constant(Tensor::new(t.shape().to_vec(), vec![p; t.numel()])))
    }
}

fn closed_form_losses() -> Check {
    let start = Instant::now();
    let s = Var::constant(Tensor::new([1, 1, 2, 2], vec![0.3, -0.2, 0.1, 0.9]));
    let t_data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let t = Var::constant(Tensor::new([1, 1, 4, 4], t_data.clone()));
    let none = VarMap::from_pairs(Vec::new());
    let half = FixedDisc { real_target: t.value().clone(), real: 0.5, fake: 0.5 };
    let mut out = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        ensure((got - want).abs() < 1e-6, format!("{name}: {got} vs {want}"))?;
        out.push(format!("{name}={got:.4}"));
        Ok(())
    };
    for lambda in [0.0, 1.0, 100.0] {
        let l = ok(generator_loss(&t, &t, &s, &half, &none, lambda))?.item();
        check(&format!("G(t,t,l={lambda})"), l, 2f64.ln())?;
    }
    let shifted = Var::constant(Tensor::new([1, 1, 4, 4], t_data.iter().map(|v| v + 2.0).collect()));
    check("G(mae=2,l=1)", ok(generator_loss(&shifted, &t, &s, &half, &none, 1.0))?.item(), 2f64.ln() + 2.0)?;
    let split = FixedDisc { real_target: t.value().clone(), real: 0.9, fake: 0.1 };
    check("D(0.1,0.9)", ok(discriminator_loss(&shifted, &t, &s, &split, &none))?.item(), 0.5 * (0.1f64.ln() - 0.9f64.ln()))?;
    let a = Var::constant(Tensor::new([1, 2], vec![1.0, 0.0]));
    let b = Var::constant(Tensor::new([1, 2], vec![0.0, 1.0]));
    check(
        "reconstruction",
        ok(reconstruction_loss(&Var::constant(Tensor::new([2], vec![0.0, 2.0])), &Var::constant(Tensor::new([2], vec![1.0, 1.0]))))?
            .item(),
        1.0,
    )?;
    check("nce(uniform,K=1)", ok(info_nce(&a, &b, &b, 0.7))?.item(), 2f64.ln())?;
    check("nce(sim 1 vs 0,tau=1)", ok(info_nce(&a, &a, &b, 1.0))?.item(), (1.0 + (-1f64).exp()).ln())?;
    within_time(start, 1.0)?;
    Ok(out.join(" "))
}

// 3

const TINY_G: TinyGenerator = TinyGenerator { in_channels: 3, hidden: 2, out_channels: 1 };
const TINY_D: TinyDiscriminator = TinyDiscriminator { source_channels: 3, hidden: 2, target_channels: 1 };

fn scaled(p: ParamSet, k: f64) -> ParamSet {
    let mut p = p;
    p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= k));
    p
}

fn nudged(p: &ParamSet, flat: usize, d: f64) -> ParamSet {
    let mut q = p.clone();
    let mut seen = 0;
    for (_, t) in q.iter_mut() {
        if flat < seen + t.numel() {
            t.data_mut()[flat - seen] += d;
            break;
        }
        seen += t.numel();
    }
    q
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn bilevel_gradients() -> Check {
    let start = Instant::now();
    let events: Vec<_> = (0..2).map(|i| synth_event(40 + i, 6, 8, 2).unwrap()).collect();
    let stats = ok(compute_norm_stats(&events))?;
    let schema = ModalitySchema::default();
    let tasks: Vec<FewShotTask> = ok(events.iter().map(|e| build_task(e, 3, 3, &schema, &stats)).collect())?;
    let refs: Vec<&FewShotTask> = tasks.iter().collect();
    let cfg = MetaConfig { inner_lr: 0.1, lambda_l1: 1.0, meta_batch: 2, ..MetaConfig::default() };
    let models = Models::adversarial(&TINY_G, &TINY_D);
    let wg = scaled(init_params(&TINY_G, 7), 40.0);
    let wd = scaled(init_params(&TINY_D, 8), 40.0);
    ensure(wg.param_count() + wd.param_count() <= 100, "toy models exceed 100 parameters")?;
    let eps = 1e-4;
    let mut report = Vec::new();
    for mode in [LossMode::Reconstruction, LossMode::Adversarial] {
        let g = ok(meta_gradients(models, mode, &wg, Some(&wd), &refs, &cfg))?;
        let obj = |a: &ParamSet, b: &ParamSet| -> Result<(f64, Option<f64>), String> {
            let o = ok(meta_objective(models, mode, &a.constants(), Some(&b.constants()), &refs, &cfg, false))?;
            Ok((o.gen_loss.item(), o.disc_loss.map(|v| v.item())))
        };
        let mut fd = Vec::new();
        for i in 0..wg.param_count() {
            fd.push((obj(&nudged(&wg, i, eps), &wd)?.0 - obj(&nudged(&wg, i, -eps), &wd)?.0) / (2.0 * eps));
        }
        let e = rel_err(&flat(&g.generator), &fd);
        ensure(e < 1e-4, format!("{mode:?} generator rel err {e:e}"))?;
        report.push(format!("{}:G {e:.1e}", mode.as_str()));
        if mode == LossMode::Adversarial {
            let mut fd = Vec::new();
            for i in 0..wd.param_count() {
                let p = obj(&wg, &nudged(&wd, i, eps))?.1.ok_or("no discriminator loss")?;
                let m = obj(&wg, &nudged(&wd, i, -eps))?.1.ok_or("no discriminator loss")?;
                fd.push((p - m) / (2.0 * eps));
            }
            let e = rel_err(&flat(g.discriminator.as_ref().ok_or("no discriminator gradient")?), &fd);
            ensure(e < 1e-4, format!("discriminator rel err {e:e}"))?;
            report.push(format!("D {e:.1e}"));
        }
    }

    let toy = |w0: f64, create: bool| -> Result<(f64, Option<f64>), String> {
        let w = VarMap::from_pairs([("w".to_string(), Var::leaf(Tensor::new([1], vec![w0])))]);
        let inner = |p: &VarMap| -> stormmeta::Result<Var> {
            let d = autograd::add_scalar(p.get("w")?, -1.0);
            Ok(autograd::sum_all(&autograd::mul(&d, &d)))
        };
        let phi = ok(inner_adapt(&w, inner, 0.25, 1, create))?;
        let p = ok(phi.get("w"))?.clone();
        let q = autograd::sum_all(&autograd::mul(&p, &p));
        let g = if create { Some(ok(grad(&q, &w.vars(), false))?[0].item()) } else { None };
        Ok((q.item(), g))
    };
    let (_, g) = toy(0.0, true)?;
    let g = g.ok_or("no gradient")?;
    ensure(g == 0.5, format!("scalar toy meta-gradient {g}, expected 0.5"))?;
    let fd = (toy(1e-4, false)?.0 - toy(-1e-4, false)?.0) / 2e-4;
    ensure((fd - 0.5).abs() < 1e-6, format!("scalar toy finite difference {fd}"))?;
    within_time(start, 30.0)?;
    report.push("scalar toy 0.5".into());
    Ok(report.join(", "))
}

// 4

fn stop_gradient_and_momentum() -> Check {
    let start = Instant::now();
    let cfg = MocoConfig { base_width: 2, hidden_dim: 16, out_dim: 8, seed: 4, ..MocoConfig::default() };
    let mut state = ok(MocoState::new(cfg.clone()))?;
    // make the key branch differ from the query branch
    state.key = scaled(state.key.clone(), 1.5);
    let events: Vec<_> = (0..3).map(|i| synth_event(60 + i, 4, 32, 2).unwrap()).collect();
    let stats = ok(compute_norm_stats(&events))?;
    let batch = ok(make_contrastive_batch(&events, &ok(AugmentationSpec::standard(3))?, &ModalitySchema::default(), &stats, 1))?;
    let q = state.query.leaves();
    let k = state.key.leaves();
    let loss = ok(contrastive_loss(&cfg, &q, &k, &batch))?;
    let mut all = q.vars();
    all.extend(k.vars());
    let grads = ok(grad(&loss, &all, false))?;
    let (gq, gk) = grads.split_at(q.len());
    ensure(gk.iter().all(|g| g.value().data().iter().all(|&v| v == 0.0)), "nonzero gradient reached the key branch")?;
    ensure(gq.iter().any(|g| g.value().max_abs() > 0.0), "query branch received no gradient")?;

    let a = Var::leaf(Tensor::new([2, 3], vec![0.3, -0.1, 0.8, 0.2, 0.5, -0.4]));
    let kp = Var::leaf(Tensor::new([2, 3], vec![0.1, 0.9, 0.2, -0.3, 0.4, 0.6]));
    let kn = Var::leaf(Tensor::new([4, 3], (0..12).map(|i| (i as f64).cos()).collect()));
    let l = ok(info_nce(&a, &kp, &kn, 0.1))?;
    let g = ok(grad(&l, &[kp.clone(), kn.clone()], false))?;
    ensure(g.iter().all(|g| g.value().max_abs() == 0.0), "InfoNCE leaked gradient into keys")?;

    let dist = |x: &ParamSet, y: &ParamSet| -> f64 {
        x.iter().map(|(n, t)| t.data().iter().zip(y.get(n).unwrap().data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>().sqrt()
    };
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.5, 0.9, 0.999, 1.0] {
        let next = ok(momentum_update(&state.key, &state.query, m))?;
        let want = m * dist(&state.key, &state.query);
        let got = dist(&next, &state.query);
        worst = worst.max((got - want).abs() / want.max(f64::MIN_POSITIVE));
        if m == 0.0 {
            ensure(next.iter().all(|(n, t)| t == state.query.get(n).unwrap()), "m = 0 must copy the query branch")?;
        }
        if m == 1.0 {
            ensure(next == state.key, "m = 1 must keep the key branch")?;
        }
    }
    ensure(worst < 1e-12, format!("momentum contraction rel err {worst:e}"))?;
    within_time(start, 5.0)?;
    Ok(format!("key gradients exactly zero, contraction rel err {worst:.1e}, m in {{0,1}} exact"))
}

// 5

fn infonce_init_level() -> Check {
    let start = Instant::now();
    let events: Vec<_> = (0..30).map(|i| synth_event(derive_seed(500, i), 49, 64, 3).unwrap()).collect();
    let stats = ok(compute_norm_stats(&events))?;
    let state = ok(MocoState::new(MocoConfig { seed: 11, ..MocoConfig::default() }))?;
    let spec = ok(AugmentationSpec::standard(3))?;
    let schema = ModalitySchema::default();
    let mut losses = Vec::new();
    for (b, chunk) in events.chunks(3).enumerate() {
        let batch = ok(make_contrastive_batch(chunk, &spec, &schema, &stats, b as u64))?;
        ensure(batch.len() == 72, format!("batch of {}", batch.len()))?;
        losses.push(ok(contrastive_loss(&state.config, &state.query.constants(), &state.key.constants(), &batch))?.item());
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let target = 72f64.ln();
    ensure((mean - target).abs() <= 0.5, format!("mean loss {mean:.4}, expected {target:.4} +- 0.5"))?;
    within_time(start, 120.0)?;
    Ok(format!("mean over 10 batches {mean:.4} (ln 72 = {target:.4})"))
}

// 6-8 share one synthetic archive: 200 train and 40 val events at 64x64.

const N_TRAIN: usize = 200;
const N_VAL: usize = 40;
const FRAMES: usize = 20;
const N_SHOT: usize = 5;
const SEEDS: [u64; 3] = [0, 1, 2];
const GEN_WIDTH: usize = 4;
const DISC_WIDTH: usize = 8;
const META_BATCH: usize = 4;
const JOINT_BATCH: usize = META_BATCH * 2 * N_SHOT;
const EPOCHS: usize = 6;
const INNER_LR: f64 = 0.01;

struct Bench {
    train_events: Vec<EventTensor>,
    stats: NormStats,
    schema: ModalitySchema,
    train: Vec<FewShotTask>,
    val: Vec<FewShotTask>,
    joint: JointDataset,
}

fn bench() -> Result<Bench, String> {
    let events: Vec<_> = ok((0..N_TRAIN + N_VAL).map(|i| synth_event(derive_seed(9001, i as u64), FRAMES, 64, 3)).collect())?;
    let (tr, va) = events.split_at(N_TRAIN);
    let stats = ok(compute_norm_stats(tr))?;
    let schema = ModalitySchema::default();
    let train: Vec<_> = ok(tr.iter().map(|e| build_task(e, N_SHOT, N_SHOT, &schema, &stats)).collect())?;
    let val: Vec<_> = ok(va.iter().map(|e| build_task(e, N_SHOT, N_SHOT, &schema, &stats)).collect())?;
    let joint = ok(collapse_joint(&train))?;
    Ok(Bench { train_events: tr.to_vec(), stats, schema, train, val, joint })
}

fn val_mae(b: &Bench, st: &TrainState, models: Models, cfg: &MetaConfig, mode: LossMode, adapt: bool) -> Result<f64, String> {
    Ok(mean_mae(&ok(evaluate_few_shot(st, models, &b.val, cfg, mode, adapt, &b.stats, &b.schema))?))
}

fn maml_vs_joint(b: &Bench) -> Check {
    let start = Instant::now();
    let g = UNetSpec::new(GEN_WIDTH, 3, 1);
    let models = Models::reconstruction(&g);
    let mode = LossMode::Reconstruction;
    let (mut maml_sum, mut joint_sum) = (0.0, 0.0);
    let mut rows = Vec::new();
    for seed in SEEDS {
        let cfg = MetaConfig { meta_batch: META_BATCH, inner_lr: INNER_LR, joint_batch: JOINT_BATCH, epochs: EPOCHS, seed, ..MetaConfig::default() };
        let p0 = init_params(&g, derive_seed(seed, 100));
        let mut m = TrainState::new(p0.clone(), None, &cfg);
        let mut j = TrainState::new(p0, None, &cfg);
        let (mut lm, mut lj) = (0.0, 0.0);
        for _ in 0..EPOCHS {
            lm = ok(maml_epoch(&mut m, models, &b.train, &cfg, mode))?;
            lj = ok(joint_epoch(&mut j, models, &b.joint, &cfg, mode))?;
        }
        ensure(m.steps == j.steps && m.steps >= 300, format!("outer steps {} vs {}", m.steps, j.steps))?;
        let (vm, vj) = (val_mae(b, &m, models, &cfg, mode, true)?, val_mae(b, &j, models, &cfg, mode, false)?);
        rows.push(format!("seed {seed}: maml {vm:.3} joint {vj:.3} (train obj {lm:.3} vs {lj:.3})"));
        maml_sum += vm;
        joint_sum += vj;
    }
    let (vm, vj) = (maml_sum / 3.0, joint_sum / 3.0);
    eprintln!("  {}", rows.join("\n  "));
    ensure(vm <= vj, format!("adapted MAML val MAE {vm:.3} > joint {vj:.3}"))?;
    within_time(start, 1800.0)?;
    Ok(format!("{} outer steps each; mean val MAE maml(adapted) {vm:.3} <= joint {vj:.3}", EPOCHS * N_TRAIN / META_BATCH))
}

fn lambda_tradeoff(b: &Bench) -> Check {
    let g = UNetSpec::new(GEN_WIDTH, 3, 1);
    let d = PatchDiscSpec::new(DISC_WIDTH, 3, 1);
    let models = Models::adversarial(&g, &d);
    let mode = LossMode::Adversarial;
    let mut mean = [[0.0; 2]; 2];
    let mut unstable = Vec::new();
    for seed in SEEDS {
        for (k, lambda) in [1e2, 1e4].into_iter().enumerate() {
            let cfg = MetaConfig { joint_batch: JOINT_BATCH, lambda_l1: lambda, seed, ..MetaConfig::default() };
            let mut st = TrainState::new(init_params(&g, derive_seed(seed, 100)), Some(init_params(&d, derive_seed(seed, 101))), &cfg);
            let mut trained = Ok(0.0);
            for _ in 0..EPOCHS {
                trained = joint_epoch(&mut st, models, &b.joint, &cfg, mode);
                if trained.is_err() {
                    break;
                }
            }
            if let Err(e) = trained {
                unstable.push(format!("seed {seed} lambda {lambda}: {e}"));
                continue;
            }
            let evals = ok(evaluate_few_shot(&st, models, &b.val, &cfg, mode, false, &b.stats, &b.schema))?;
            let p: Vec<Tensor> = evals.iter().flat_map(|e| frames_of(&e.prediction)).collect();
            let t: Vec<Tensor> = evals.iter().flat_map(|e| frames_of(&e.target)).collect();
            let r = ok(evaluate_archive(&p, &t, &[74.0], Aggregation::Pooled))?;
            let s = r.thresholds[0].skill;
            let (pod, sucr) = (s.pod.ok_or("POD undefined")?, s.sucr.ok_or("SUCR undefined")?);
            eprintln!("  seed {seed} lambda {lambda:e}: POD74 {pod:.4} SUCR74 {sucr:.4} MAE {:.3}", r.mae);
            mean[k][0] += pod / 3.0;
            mean[k][1] += sucr / 3.0;
        }
    }
    let summary = format!(
        "POD74 {:.4} -> {:.4}, SUCR74 {:.4} -> {:.4} (lambda 1e2 -> 1e4)",
        mean[0][0], mean[1][0], mean[0][1], mean[1][1]
    );
    if !unstable.is_empty() {
        return Ok(format!("informational, training instability logged: {}; {summary}", unstable.join("; ")));
    }
    ensure(mean[1][0] <= mean[0][0] && mean[1][1] >= mean[0][1], summary.clone())?;
    Ok(summary)
}

const EVAL_EVERY: usize = 25;
const FINETUNE_STEPS: usize = 300;
const PRETRAIN_EPOCHS: usize = 20;

/// Joint reconstruction finetuning; validation MAE every `EVAL_EVERY` steps.
fn finetune_curve(b: &Bench, init: ParamSet, seed: u64) -> Result<Vec<f64>, String> {
    let g = UNetSpec::new(GEN_WIDTH, 3, 1);
    let models = Models::reconstruction(&g);
    let cfg = MetaConfig { joint_batch: JOINT_BATCH, seed, ..MetaConfig::default() };
    let mut st = TrainState::new(init, None, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::new();
    for step in 1..=FINETUNE_STEPS {
        if order.len() < JOINT_BATCH {
            let mut o: Vec<usize> = (0..b.joint.len()).collect();
            o.shuffle(&mut rng);
            order.extend(o);
        }
        let rows: Vec<usize> = order.drain(..JOINT_BATCH).collect();
        let (x, y) = b.joint.batch(&rows);
        ok(joint_step(&mut st, models, &x, &y, &cfg, LossMode::Reconstruction))?;
        if step % EVAL_EVERY == 0 {
            curve.push(val_mae(b, &st, models, &cfg, LossMode::Reconstruction, false)?);
        }
    }
    Ok(curve)
}

/// Steps until the curve first reaches `target`; one interval past the
/// budget when it never does.
fn steps_to(curve: &[f64], target: f64) -> usize {
    curve.iter().position(|&v| v <= target).map_or(FINETUNE_STEPS + EVAL_EVERY, |i| (i + 1) * EVAL_EVERY)
}

fn pretraining_handoff(b: &Bench) -> Check {
    let g = UNetSpec::new(GEN_WIDTH, 3, 1);
    let spec = ok(AugmentationSpec::standard(3))?;
    let (mut pre_sum, mut scratch_sum) = (0, 0);
    for seed in SEEDS {
        let mc = MocoConfig {
            base_width: GEN_WIDTH,
            hidden_dim: 256,
            out_dim: 4 * GEN_WIDTH,
            epochs: PRETRAIN_EPOCHS,
            warmup_epochs: 2,
            seed,
            ..MocoConfig::default()
        };
        let mut ms = ok(MocoState::new(mc))?;
        for _ in 0..PRETRAIN_EPOCHS {
            ok(pretrain_epoch(&mut ms, &b.train_events, &spec, &b.schema, &b.stats))?;
        }
        let scratch = finetune_curve(b, init_params(&g, derive_seed(seed, 100)), seed)?;
        let pre = finetune_curve(b, ok(export_encoder(&ms, &g, derive_seed(seed, 100)))?, seed)?;
        let target = *scratch.last().ok_or("empty curve")?;
        let (sp, ss) = (steps_to(&pre, target), steps_to(&scratch, target));
        eprintln!("  seed {seed}: target {target:.3}, pretrained {sp} steps, scratch {ss} steps");
        pre_sum += sp;
        scratch_sum += ss;
    }
    let (p, s) = (pre_sum as f64 / 3.0, scratch_sum as f64 / 3.0);
    ensure(p <= s, format!("pretrained needs {p:.1} steps on average, scratch {s:.1}"))?;
    Ok(format!("mean steps to the scratch run's final val MAE: pretrained {p:.1} <= scratch {s:.1}"))
}

// 9

fn determinism_and_persistence() -> Check {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let events: Vec<_> = ok((0..4).map(|i| synth_event(derive_seed(3, i), 4, 32, 2)).collect())?;
    let schema = ModalitySchema::default();
    ok(write_archive(&events, &schema, &dir.path().join("arch"), None))?;
    let arch = ok(read_archive(&dir.path().join("arch")))?;
    for e in &events {
        let back = ok(arch.load(&e.event_id))?;
        ensure(back.data().iter().zip(e.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "archive round trip differs")?;
    }

    let g = UNetSpec::new(2, 3, 1);
    let d = PatchDiscSpec::new(2, 3, 1);
    let p = init_params(&g, 5);
    ok(p.save(&dir.path().join("params")))?;
    let back = ok(ParamSet::load(&dir.path().join("params")))?;
    ensure(
        back.iter().zip(p.iter()).all(|((n1, a), (n2, b))| n1 == n2 && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())),
        "ParamSet round trip differs",
    )?;

    let stats = ok(compute_norm_stats(&events))?;
    let tasks: Vec<_> = ok(events.iter().map(|e| build_task(e, 2, 2, &schema, &stats)).collect())?;
    let cfg = MetaConfig { meta_batch: 2, inner_lr: 0.01, seed: 9, ..MetaConfig::default() };
    let models = Models::adversarial(&g, &d);
    let fresh = || TrainState::new(init_params(&g, 1), Some(init_params(&d, 2)), &cfg);
    let mut straight = fresh();
    for _ in 0..3 {
        ok(maml_epoch(&mut straight, models, &tasks, &cfg, LossMode::Adversarial))?;
    }
    let mut resumed = fresh();
    ok(maml_epoch(&mut resumed, models, &tasks, &cfg, LossMode::Adversarial))?;
    ok(resumed.save(&dir.path().join("state")))?;
    let mut resumed = ok(TrainState::load(&dir.path().join("state")))?;
    for _ in 0..2 {
        ok(maml_epoch(&mut resumed, models, &tasks, &cfg, LossMode::Adversarial))?;
    }
    ensure(resumed == straight, "resumed training diverged from uninterrupted training")?;

    let ids: Vec<String> = (0..11479).map(|i| format!("e{i}")).collect();
    let s = ok(split_events(&ids, 0, [0.7988, 0.1012, 0.1]))?;
    ensure(s.counts == [9169, 1162, 1148], format!("benchmark split counts {:?}", s.counts))?;
    within_time(start, 60.0)?;
    Ok("archive, ParamSet and resume bit-exact; split (9169, 1162, 1148)".into())
}

// 10

fn schedule_and_shapes() -> Check {
    let lr = |t: f64| cosine_warmup_lr(t, 100.0, 5.0, 0.015).map_err(|e| e.to_string());
    for (t, want) in [(0.0, 0.0), (5.0, 0.015), (52.5, 0.0075), (100.0, 0.0)] {
        let got = lr(t)?;
        ensure(got == want, format!("lr({t}) = {got:e}, expected {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = UNetSpec::new(2, 3, 1);
    let d = PatchDiscSpec::new(2, 3, 1);
    let wg = init_params(&g, 3).constants();
    let wd = init_params(&d, 4).constants();
    for (h, w) in [(16, 16), (32, 48)] {
        let s = Var::constant(Tensor::new([2, 3, h, w], (0..6 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()));
        let out = ok(g.generate(&wg, &s))?;
        ensure(out.shape() == [2, 1, 2 * h, 2 * w], format!("generator {:?} -> {:?}", s.shape(), out.shape()))?;
        let t = Var::constant(Tensor::new([2, 1, 2 * h, 2 * w], (0..4 * h * w * 2).map(|_| rng.gen_range(-3.0..3.0)).collect()));
        let map = ok(d.discriminate(&wd, &s, &t))?;
        ensure(map.shape() == [2, 1, h / 4, w / 4], format!("patch map {:?}", map.shape()))?;
        ensure(map.value().data().iter().all(|&p| p > 0.0 && p < 1.0), "discriminator output outside (0, 1)")?;
    }
    let odd = Var::constant(Tensor::zeros([1, 3, 24, 24]));
    ensure(g.generate(&wg, &odd).is_err(), "indivisible resolution accepted")?;
    Ok("lr fixed points exact, generator doubles H and W, patch map in (0, 1)".into())
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut bench_cache: Option<Result<Bench, String>> = None;
    let mut failed = 0;
    let names = [
        "metric oracle equivalence",
        "closed-form loss values",
        "bilevel gradient correctness",
        "stop-gradient and momentum contracts",
        "InfoNCE initialization level",
        "MAML vs joint validation MAE",
        "lambda trade-off",
        "pretraining hand-off",
        "determinism and persistence",
        "schedule and shape contracts",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let needs_bench = (6..=8).contains(&n);
        if needs_bench && bench_cache.is_none() {
            bench_cache = Some(bench());
        }
        let result = catch_unwind(AssertUnwindSafe(|| -> Check {
            let b = || bench_cache.as_ref().expect("built above").as_ref().map_err(|e| format!("benchmark setup: {e}"));
            match n {
                1 => metric_oracle(),
                2 => closed_form_losses(),
                3 => bilevel_gradients(),
                4 => stop_gradient_and_momentum(),
                5 => infonce_init_level(),
                6 => maml_vs_joint(b()?),
                7 => lambda_tradeoff(b()?),
                8 => pretraining_handoff(b()?),
                9 => determinism_and_persistence(),
                _ => schedule_and_shapes(),
            }
        }))
        .unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
