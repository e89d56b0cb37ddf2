use std::path::Path;

use autograd::{grad, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_warmup_lr, make_contrastive_batch, AugmentationSpec, ContrastiveBatch};
use crate::data::{derive_seed, EventTensor, ModalitySchema};
use crate::error::{arg_err, Error, Result};
use crate::nets::{init_params, load_checkpoint, save_checkpoint, Architecture, Checkpoint, MlpHeadSpec, ParamSet, UNetSpec, VarMap};
use crate::objectives::info_nce_in_batch;
use crate::tasks::NormStats;

const ENCODER: &str = "encoder.";
const PROJECTOR: &str = "projector.";
const PREDICTOR: &str = "predictor.";
const KIND: &str = "moco-state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MocoConfig {
    /// Encoder of a `UNetSpec` with this base width and input channel count.
    pub base_width: usize,
    pub in_channels: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub momentum: f64,
    pub tau: f64,
    pub base_lr: f64,
    /// Schedule length `T` in epochs.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub events_per_batch: usize,
    pub seed: u64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            in_channels: 3,
            hidden_dim: 2048,
            out_dim: 128,
            momentum: 0.999,
            tau: 0.1,
            base_lr: 0.015,
            epochs: 100,
            warmup_epochs: 5,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            events_per_batch: 3,
            seed: 0,
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.in_channels == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return arg_err("pretraining widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return arg_err(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return arg_err(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return arg_err("invalid optimizer settings");
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return arg_err(format!("warmup ({}) must be shorter than the schedule ({})", self.warmup_epochs, self.epochs));
        }
        if self.events_per_batch == 0 {
            return arg_err("events_per_batch must be at least 1");
        }
        Ok(())
    }

    pub fn unet(&self) -> UNetSpec {
        UNetSpec::new(self.base_width, self.in_channels, 1)
    }

    pub fn projector(&self) -> MlpHeadSpec {
        MlpHeadSpec { in_dim: self.unet().embed_dim(), hidden_dim: self.hidden_dim, out_dim: self.out_dim, final_bn: true }
    }

    pub fn predictor(&self) -> MlpHeadSpec {
        MlpHeadSpec { in_dim: self.out_dim, hidden_dim: self.hidden_dim, out_dim: self.out_dim, final_bn: false }
    }

    fn encoder_tag(&self) -> String {
        format!("{}:encoder", self.unet().arch_tag())
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `b <- mu b + (g + wd p)` (`b = g + wd p` on the first step), `p <- p - lr b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buf: ParamSet,
    pub steps: u64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &ParamSet) -> Self {
        Self { momentum, weight_decay, buf: params.zeros_like(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || !self.buf.same_layout(params) {
            return Err(Error::Shape("gradients do not match the parameters".into()));
        }
        let first = self.steps == 0;
        for (((_, p), (_, b)), g) in params.iter_mut().zip(self.buf.iter_mut()).zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (mu, wd) = (self.momentum, self.weight_decay);
            for ((p, b), g) in p.data_mut().iter_mut().zip(b.data_mut()).zip(g.data()) {
                let d = g + wd * *p;
                *b = if first { d } else { mu * *b + d };
                *p -= lr * *b;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// `m theta_k + (1 - m) theta_q` for every key tensor; the query set may hold
/// extra tensors (the predictor) but must contain every key name.
pub fn momentum_update(key: &ParamSet, query: &ParamSet, m: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&m) {
        return arg_err(format!("momentum must lie in [0, 1], got {m}"));
    }
    let mut out = ParamSet::new(key.arch.clone());
    for (name, k) in key.iter() {
        let q = query.get(name).ok_or_else(|| Error::Argument(format!("query branch has no tensor {name}")))?;
        if q.shape() != k.shape() {
            return arg_err(format!("{name}: key {:?} vs query {:?}", k.shape(), q.shape()));
        }
        out.insert(name, k.zip_map(q, |k, q| m * k + (1.0 - m) * q))?;
    }
    Ok(out)
}

/// Query branch: encoder, projector and predictor. Key branch: encoder and
/// projector, moved only by `momentum_update`.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoState {
    pub config: MocoConfig,
    pub query: ParamSet,
    pub key: ParamSet,
    pub opt: Sgd,
    pub epoch: usize,
    pub steps: u64,
    pub loss_history: Vec<f64>,
}

fn prefixed(into: &mut ParamSet, prefix: &str, part: &ParamSet) -> Result<()> {
    for (name, t) in part.iter() {
        into.insert(format!("{prefix}{name}"), t.clone())?;
    }
    Ok(())
}

impl MocoState {
    pub fn new(config: MocoConfig) -> Result<Self> {
        config.validate()?;
        let unet = config.unet();
        let full = init_params(&unet, config.seed);
        let mut query = ParamSet::new("moco-query");
        for name in unet.encoder_param_names() {
            query.insert(format!("{ENCODER}{name}"), full.get(&name).expect("encoder tensor").clone())?;
        }
        prefixed(&mut query, PROJECTOR, &init_params(&config.projector(), derive_seed(config.seed, 1)))?;
        prefixed(&mut query, PREDICTOR, &init_params(&config.predictor(), derive_seed(config.seed, 2)))?;
        let mut key = ParamSet::new("moco-key");
        for (name, t) in query.iter().filter(|(n, _)| !n.starts_with(PREDICTOR)) {
            key.insert(name, t.clone())?;
        }
        let opt = Sgd::new(config.sgd_momentum, config.weight_decay, &query);
        Ok(Self { config, query, key, opt, epoch: 0, steps: 0, loss_history: Vec::new() })
    }

    /// The query encoder under the generator's parameter names.
    pub fn encoder(&self) -> ParamSet {
        self.query.strip_prefix(ENCODER, self.config.encoder_tag())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": KIND,
            "config": self.config,
            "epoch": self.epoch,
            "steps": self.steps,
            "sgd_steps": self.opt.steps,
            "loss_history": self.loss_history,
            "subsets": {
                "encoder": ["query.encoder", "key.encoder"],
                "projector": ["query.projector", "key.projector"],
                "predictor": ["query.predictor"],
            },
        });
        let c = &self.config;
        let parts = [(ENCODER, c.encoder_tag()), (PROJECTOR, c.projector().arch_tag()), (PREDICTOR, c.predictor().arch_tag())];
        let mut ckpt = Checkpoint::new(meta);
        for (branch, set) in [("query", &self.query), ("key", &self.key), ("sgd", &self.opt.buf)] {
            for (prefix, tag) in &parts {
                let part = set.strip_prefix(prefix, tag.clone());
                if !part.is_empty() {
                    ckpt = ckpt.with(format!("{branch}.{}", prefix.trim_end_matches('.')), part);
                }
            }
        }
        save_checkpoint(dir, &ckpt)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            config: MocoConfig,
            epoch: usize,
            steps: u64,
            sgd_steps: u64,
            loss_history: Vec<f64>,
        }
        let ckpt = load_checkpoint(dir)?;
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: not a pretraining state: {e}", dir.display())))?;
        if meta.kind != KIND {
            return Err(Error::Checkpoint(format!("{}: checkpoint kind is {}", dir.display(), meta.kind)));
        }
        let mut state = MocoState::new(meta.config)?;
        let rebuild = |branch: &str, like: &ParamSet| -> Result<ParamSet> {
            let mut out = ParamSet::new(like.arch.clone());
            for prefix in [ENCODER, PROJECTOR, PREDICTOR] {
                let name = format!("{branch}.{}", prefix.trim_end_matches('.'));
                if let Ok(part) = ckpt.section(&name) {
                    prefixed(&mut out, prefix, part)?;
                }
            }
            if !out.same_layout(like) {
                return Err(Error::Checkpoint(format!("{}: {branch} branch does not fit the stored configuration", dir.display())));
            }
            Ok(out)
        };
        state.query = rebuild("query", &state.query)?;
        state.key = rebuild("key", &state.key)?;
        state.opt.buf = rebuild("sgd", &state.opt.buf)?;
        state.opt.steps = meta.sgd_steps;
        state.epoch = meta.epoch;
        state.steps = meta.steps;
        state.loss_history = meta.loss_history;
        Ok(state)
    }
}

fn branch_forward(config: &MocoConfig, params: &VarMap, views: &Tensor, predict: bool) -> Result<Var> {
    let x = Var::constant(views.clone());
    let e = config.unet().encoder_embed(&params.strip_prefix(ENCODER), &x)?;
    let z = config.projector().forward(&params.strip_prefix(PROJECTOR), &e)?;
    if predict {
        config.predictor().forward(&params.strip_prefix(PREDICTOR), &z)
    } else {
        Ok(z)
    }
}

/// In-batch InfoNCE of the predicted query views against the key branch's
/// embeddings of the positive and negative views. The key branch is detached.
pub fn contrastive_loss(config: &MocoConfig, query: &VarMap, key: &VarMap, batch: &ContrastiveBatch) -> Result<Var> {
    let key = key.detach();
    let pq = branch_forward(config, query, &batch.queries, true)?;
    let kp = branch_forward(config, &key, &batch.positives, false)?;
    let km = branch_forward(config, &key, &batch.keys, false)?;
    info_nce_in_batch(&pq, &kp, &km, config.tau)
}

/// One pass over `events` in mini-batches of `events_per_batch`, in a seeded
/// per-epoch order: an SGD step on the query branch, then a momentum update
/// of the key branch. Returns the mean loss.
pub fn pretrain_epoch(
    state: &mut MocoState,
    events: &[EventTensor],
    spec: &AugmentationSpec,
    schema: &ModalitySchema,
    stats: &NormStats,
) -> Result<f64> {
    if events.is_empty() {
        return arg_err("pretraining needs at least one event");
    }
    let cfg = state.config.clone();
    let lr = cosine_warmup_lr(state.epoch as f64, cfg.epochs as f64, cfg.warmup_epochs as f64, cfg.base_lr)?;
    let epoch_seed = derive_seed(cfg.seed, state.epoch as u64);
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let mut losses = Vec::new();
    for (b, chunk) in order.chunks(cfg.events_per_batch).enumerate() {
        let ctx = |e: Error| e.with_context(format!("epoch {} batch {b}", state.epoch));
        let batch_events: Vec<EventTensor> = chunk.iter().map(|&i| events[i].clone()).collect();
        let batch = make_contrastive_batch(&batch_events, spec, schema, stats, derive_seed(epoch_seed, b as u64)).map_err(ctx)?;
        let wq = state.query.leaves();
        let loss = contrastive_loss(&cfg, &wq, &state.key.constants(), &batch).map_err(ctx)?;
        let grads = grad(&loss, &wq.vars(), false).map_err(|e| ctx(Error::Numeric(e.to_string())))?;
        if let Some((name, _)) = wq.names().zip(&grads).find(|(_, g)| !g.value().is_finite()) {
            return Err(ctx(Error::Numeric(format!("non-finite gradient for {name}"))));
        }
        let grads: Vec<Tensor> = grads.iter().map(|g| g.value().clone()).collect();
        state.opt.step(&mut state.query, &grads, lr).map_err(ctx)?;
        state.key = momentum_update(&state.key, &state.query, cfg.momentum)?;
        state.steps += 1;
        state.loss_history.push(loss.item());
        losses.push(loss.item());
    }
    state.epoch += 1;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn graft_encoder(encoder: &ParamSet, target: &UNetSpec, seed: u64) -> Result<ParamSet> {
    let mut fresh = init_params(target, seed);
    let names = target.encoder_param_names();
    if encoder.len() != names.len() {
        return Err(Error::Checkpoint(format!("encoder has {} tensors, {} expects {}", encoder.len(), target.arch_tag(), names.len())));
    }
    for name in names {
        let src = encoder.get(&name).ok_or_else(|| Error::Checkpoint(format!("pretrained encoder lacks {name}")))?;
        let dst = fresh.get_mut(&name).expect("layout has encoder tensors");
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!("{name}: pretrained {:?} vs generator {:?}", src.shape(), dst.shape())));
        }
        *dst = src.clone();
    }
    Ok(fresh)
}

/// A fresh generator for `target` (initialized with `seed`) whose encoder is
/// the pretrained query encoder.
pub fn export_encoder(state: &MocoState, target: &UNetSpec, seed: u64) -> Result<ParamSet> {
    graft_encoder(&state.encoder(), target, seed)
}

/// As `export_encoder`, reading the encoder from a saved pretraining state.
pub fn load_pretrained_encoder(dir: &Path, target: &UNetSpec, seed: u64) -> Result<ParamSet> {
    let ckpt = load_checkpoint(dir)?;
    graft_encoder(ckpt.section("query.encoder")?, target, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_event;
    use crate::sslpretrain::AugmentationSpec;
    use crate::tasks::compute_norm_stats;

    fn small() -> MocoConfig {
        MocoConfig { base_width: 2, hidden_dim: 16, out_dim: 8, events_per_batch: 2, ..MocoConfig::default() }
    }

    fn set(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new("t");
        p.insert("a", Tensor::new([vals.len()], vals.to_vec())).unwrap();
        p
    }

    #[test]
    fn momentum_edge_cases() {
        let k = set(&[0.0, 2.0, -1.0]);
        let q = set(&[1.0, 5.0, 3.0]);
        assert_eq!(momentum_update(&k, &q, 1.0).unwrap(), k);
        assert_eq!(momentum_update(&k, &q, 0.0).unwrap().get("a").unwrap(), q.get("a").unwrap());
        assert!((momentum_update(&set(&[0.0]), &set(&[1.0]), 0.999).unwrap().get("a").unwrap().data()[0] - 0.001).abs() < 1e-15);
        assert!(matches!(momentum_update(&k, &set(&[1.0]), 0.5), Err(Error::Argument(_))));
        assert!(matches!(momentum_update(&k, &q, 1.5), Err(Error::Argument(_))));
    }

    #[test]
    fn sgd_matches_the_reference_update() {
        let mut p = set(&[1.0]);
        let mut opt = Sgd::new(0.9, 0.1, &p);
        opt.step(&mut p, &[Tensor::new([1], vec![2.0])], 0.5).unwrap();
        // b = 2 + 0.1 = 2.1, p = 1 - 1.05
        assert!((p.get("a").unwrap().data()[0] + 0.05).abs() < 1e-15);
        opt.step(&mut p, &[Tensor::new([1], vec![1.0])], 0.5).unwrap();
        // b = 0.9 * 2.1 + (1 - 0.005) = 2.885, p = -0.05 - 1.4425
        assert!((p.get("a").unwrap().data()[0] + 1.4925).abs() < 1e-14);
    }

    #[test]
    fn key_branch_mirrors_query_shapes() {
        let s = MocoState::new(small()).unwrap();
        assert_eq!(s.key.len() + 4, s.query.len());
        for (name, t) in s.key.iter() {
            assert_eq!(s.query.get(name).unwrap(), t);
        }
        assert!(s.key.names().all(|n| !n.starts_with(PREDICTOR)));
    }

    fn events() -> (Vec<EventTensor>, NormStats) {
        let ev: Vec<_> = (0..3).map(|i| synth_event(30 + i, 8, 32, 2).unwrap()).collect();
        let stats = compute_norm_stats(&ev).unwrap();
        (ev, stats)
    }

    #[test]
    fn no_gradient_reaches_the_key_branch() {
        let (ev, stats) = events();
        let s = MocoState::new(small()).unwrap();
        let batch = make_contrastive_batch(&ev, &AugmentationSpec::standard(2).unwrap(), &ModalitySchema::default(), &stats, 3).unwrap();
        let wk = s.key.leaves();
        let wq = s.query.leaves();
        let loss = contrastive_loss(&s.config, &wq, &wk, &batch).unwrap();
        let gk = grad(&loss, &wk.vars(), false).unwrap();
        assert!(gk.iter().all(|g| g.value().max_abs() == 0.0));
        let gq = grad(&loss, &wq.vars(), false).unwrap();
        assert!(gq.iter().any(|g| g.value().max_abs() > 0.0));
    }

    #[test]
    fn frozen_schedules() {
        let (ev, stats) = events();
        let spec = AugmentationSpec::standard(2).unwrap();
        let schema = ModalitySchema::default();
        let mut s = MocoState::new(MocoConfig { momentum: 1.0, ..small() }).unwrap();
        s.epoch = 10;
        let key = s.key.clone();
        pretrain_epoch(&mut s, &ev, &spec, &schema, &stats).unwrap();
        assert_eq!(s.key, key);
        assert_ne!(s.query.strip_prefix(ENCODER, ""), key.strip_prefix(ENCODER, ""));

        // epoch 0 sits at the start of warmup: learning rate 0.
        let mut z = MocoState::new(small()).unwrap();
        let q = z.query.clone();
        pretrain_epoch(&mut z, &ev, &spec, &schema, &stats).unwrap();
        assert_eq!(z.query, q);
        assert_eq!(z.steps, 2);
    }

    #[test]
    fn state_round_trip_and_export() {
        let (ev, stats) = events();
        let mut s = MocoState::new(small()).unwrap();
        s.epoch = 6;
        pretrain_epoch(&mut s, &ev, &AugmentationSpec::standard(1).unwrap(), &ModalitySchema::default(), &stats).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = MocoState::load(dir.path()).unwrap();
        assert_eq!(back, s);

        let target = s.config.unet();
        let g = export_encoder(&s, &target, 77).unwrap();
        g.check_layout(&target).unwrap();
        let fresh = init_params(&target, 77);
        for (name, t) in g.iter() {
            if name.starts_with("enc") {
                assert_eq!(t, s.query.get(&format!("{ENCODER}{name}")).unwrap());
            } else {
                assert_eq!(t, fresh.get(name).unwrap());
            }
        }
        assert_eq!(load_pretrained_encoder(dir.path(), &target, 77).unwrap(), g);
        assert!(matches!(export_encoder(&s, &UNetSpec::new(4, 3, 1), 0), Err(Error::Checkpoint(_))));
    }
}
