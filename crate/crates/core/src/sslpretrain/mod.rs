//! Momentum-contrast pretraining of the translator's encoder on temporally
//! adjacent frames, and the hand-off of the learned encoder to finetuning.

mod augment;
mod moco;

pub use augment::{apply_augmentations, AugmentationSpec, Transform, MAX_LEVEL};
pub use moco::{
    contrastive_loss, export_encoder, load_pretrained_encoder, momentum_update, pretrain_epoch, MocoConfig, MocoState, Sgd,
};

use autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EventTensor, ModalitySchema};
use crate::error::{arg_err, Result};
use crate::tasks::{resize_half, NormStats};

/// Query anchors per event (even frames `0, 2, .., 46`).
pub const PAIRS_PER_EVENT: usize = 24;

/// Linear warmup over `warmup` epochs, then half-cosine decay to zero at `total`.
pub fn cosine_warmup_lr(t: f64, total: f64, warmup: f64, base: f64) -> Result<f64> {
    if !(0.0..=total).contains(&t) {
        return arg_err(format!("schedule position {t} outside [0, {total}]"));
    }
    if !(warmup >= 0.0 && warmup < total) {
        return arg_err(format!("warmup {warmup} must lie in [0, {total})"));
    }
    Ok(if t < warmup {
        base * t / warmup
    } else {
        base * 0.5 * (1.0 + (std::f64::consts::PI * (t - warmup) / (total - warmup)).cos())
    })
}

/// Stacked `[N, C, h, w]` views; row `i` of each tensor belongs to triple `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Tensor,
    pub positives: Tensor,
    pub keys: Tensor,
    /// `(event id, query frame, key frame)` per triple.
    pub pairs: Vec<(String, usize, usize)>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Source channels of one frame, z-scored and halved: `[C_in, h/2, w/2]`.
pub fn source_view(event: &EventTensor, frame: usize, schema: &ModalitySchema, stats: &NormStats) -> Result<Tensor> {
    let (h, w) = (event.height(), event.width());
    let mut data = Vec::with_capacity(schema.in_channels() * h * w / 4);
    for &ch in &schema.input_indices {
        data.extend(resize_half(&stats.zscore(ch, event.plane(frame, ch)), h, w)?);
    }
    Ok(Tensor::new([schema.in_channels(), h / 2, w / 2], data))
}

/// Pairs even frame `2j` (query) with odd frame `2j + 1` (key), `j < 24`.
/// The query frame is augmented twice (q and k+), the key frame once (k-).
/// Triple `i`, view `v` draws from stream `3i + v` of a generator seeded with
/// `seed`, so any triple can be rebuilt on its own.
pub fn make_contrastive_batch(
    events: &[EventTensor],
    spec: &AugmentationSpec,
    schema: &ModalitySchema,
    stats: &NormStats,
    seed: u64,
) -> Result<ContrastiveBatch> {
    let mut q = Vec::new();
    let mut kp = Vec::new();
    let mut km = Vec::new();
    let mut pairs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ev in events {
        if ev.frames() < 2 {
            log::warn!("event {} has {} frame(s); skipped for pretraining", ev.event_id, ev.frames());
            continue;
        }
        let n = (ev.frames() / 2).min(PAIRS_PER_EVENT);
        for j in 0..n {
            let (tq, tk) = (2 * j, 2 * j + 1);
            let anchor = source_view(ev, tq, schema, stats)?;
            let key = source_view(ev, tk, schema, stats)?;
            let i = pairs.len() as u64;
            rng.set_stream(3 * i);
            q.push(apply_augmentations(&anchor, spec, &mut rng)?);
            rng.set_stream(3 * i + 1);
            kp.push(apply_augmentations(&anchor, spec, &mut rng)?);
            rng.set_stream(3 * i + 2);
            km.push(apply_augmentations(&key, spec, &mut rng)?);
            pairs.push((ev.event_id.clone(), tq, tk));
        }
    }
    if pairs.is_empty() {
        return arg_err("no event in the mini-batch has two frames");
    }
    let stack = |views: &[Tensor]| {
        let mut shape = vec![views.len()];
        shape.extend_from_slice(views[0].shape());
        Tensor::new(shape, views.iter().flat_map(|v| v.data().iter().copied()).collect())
    };
    Ok(ContrastiveBatch { queries: stack(&q), positives: stack(&kp), keys: stack(&km), pairs })
}
