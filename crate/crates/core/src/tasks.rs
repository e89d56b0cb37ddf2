//! The few-shot benchmark built from an archive: event splits, normalization,
//! support/query tasks and the flattened joint-training dataset.

use std::collections::BTreeMap;

use autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EventTensor, ModalitySchema, SplitLabel};
use crate::error::{arg_err, Error, Result};
use crate::raster::resize_window;

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: [f64; 3],
    /// Resolved (train, val, test) sizes.
    pub counts: [usize; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn labels(&self) -> BTreeMap<String, SplitLabel> {
        let mut out = BTreeMap::new();
        for (ids, label) in [(&self.train, SplitLabel::Train), (&self.val, SplitLabel::Val), (&self.test, SplitLabel::Test)] {
            out.extend(ids.iter().map(|id| (id.clone(), label)));
        }
        out
    }

    pub fn ids(&self, label: SplitLabel) -> &[String] {
        match label {
            SplitLabel::Train => &self.train,
            SplitLabel::Val => &self.val,
            SplitLabel::Test => &self.test,
        }
    }
}

/// Hamilton apportionment of `n` items by `fractions`.
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles `event_ids` with `seed` and cuts the result into train/val/test.
pub fn split_events(event_ids: &[String], seed: u64, fractions: [f64; 3]) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return arg_err(format!("split fractions must be non-negative, got {fractions:?}"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg_err(format!("split fractions must sum to 1, got {fractions:?}"));
    }
    let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
    if event_ids.len() < nonzero {
        return arg_err(format!("{} events cannot fill {nonzero} non-empty splits", event_ids.len()));
    }
    let counts = largest_remainder(event_ids.len(), fractions);
    let mut shuffled = event_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(counts[0] + counts[1]);
    let val = shuffled.split_off(counts[0]);
    Ok(SplitSpec { seed, fractions, counts, train: shuffled, val, test })
}

/// Per-channel mean and standard deviation in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Statistics over every frame and pixel of the given (training) events.
pub fn compute_norm_stats<'a>(events: impl IntoIterator<Item = &'a EventTensor>) -> Result<NormStats> {
    let events: Vec<&EventTensor> = events.into_iter().collect();
    let Some(first) = events.first() else {
        return arg_err("normalization statistics need at least one event");
    };
    let c = first.channels();
    if let Some(bad) = events.iter().find(|e| e.channels() != c) {
        return Err(Error::Schema(format!("event {} has {} channels, expected {c}", bad.event_id, bad.channels())));
    }
    let mut count = vec![0usize; c];
    let mut sum = vec![0.0f64; c];
    for ev in &events {
        for t in 0..ev.frames() {
            for ch in 0..c {
                let p = ev.plane(t, ch);
                sum[ch] += p.iter().map(|&v| v as f64).sum::<f64>();
                count[ch] += p.len();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect();
    let mut sq = vec![0.0f64; c];
    for ev in &events {
        for t in 0..ev.frames() {
            for ch in 0..c {
                sq[ch] += ev.plane(t, ch).iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(ch, (s, n))| {
            let sd = (s / *n as f64).sqrt();
            if sd < STD_FLOOR {
                log::warn!("channel {ch} is (nearly) constant; std floored at {STD_FLOOR}");
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn zscore_value(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn dezscore_value(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }

    pub fn zscore(&self, channel: usize, plane: &[f32]) -> Vec<f64> {
        plane.iter().map(|&v| self.zscore_value(channel, v as f64)).collect()
    }

    pub fn dezscore(&self, channel: usize, plane: &[f64]) -> Vec<f64> {
        plane.iter().map(|&z| self.dezscore_value(channel, z)).collect()
    }
}

/// Bilinear downscale by two (half-pixel centres, corners not aligned).
pub fn resize_half(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return arg_err(format!("resize_half needs even, non-zero dimensions, got {h}x{w}"));
    }
    if plane.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} plane", plane.len())));
    }
    Ok(resize_window(plane, h, w, (0.0, 0.0, h as f64, w as f64), h / 2, w / 2))
}

/// One event as a translation task. Sources are `[n, C_in, h/2, w/2]`,
/// targets `[n, 1, h, w]`, both z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub event_id: String,
    pub support_source: Tensor,
    pub support_target: Tensor,
    pub query_source: Tensor,
    pub query_target: Tensor,
}

impl FewShotTask {
    pub fn n_support(&self) -> usize {
        self.support_source.dim(0)
    }

    pub fn n_query(&self) -> usize {
        self.query_source.dim(0)
    }
}

fn frame_block(
    event: &EventTensor,
    frames: std::ops::Range<usize>,
    schema: &ModalitySchema,
    stats: &NormStats,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (event.height(), event.width());
    let n = frames.len();
    let mut source = Vec::with_capacity(n * schema.in_channels() * h * w / 4);
    let mut target = Vec::with_capacity(n * h * w);
    for t in frames {
        for &ch in &schema.input_indices {
            source.extend(resize_half(&stats.zscore(ch, event.plane(t, ch)), h, w)?);
        }
        target.extend(stats.zscore(schema.target_index, event.plane(t, schema.target_index)));
    }
    Ok((
        Tensor::new([n, schema.in_channels(), h / 2, w / 2], source),
        Tensor::new([n, 1, h, w], target),
    ))
}

/// Support = frames `[0, n_support)`, query = the next `n_query` frames.
pub fn build_task(
    event: &EventTensor,
    n_support: usize,
    n_query: usize,
    schema: &ModalitySchema,
    stats: &NormStats,
) -> Result<FewShotTask> {
    if n_support == 0 || n_query == 0 {
        return arg_err("support and query sets need at least one frame each");
    }
    if event.frames() < n_support + n_query {
        return arg_err(format!(
            "event {} has {} frames, task needs {}",
            event.event_id,
            event.frames(),
            n_support + n_query
        ));
    }
    if event.channels() != schema.channels() || stats.mean.len() != schema.channels() {
        return Err(Error::Schema(format!(
            "event {} has {} channels, schema {}, stats {}",
            event.event_id,
            event.channels(),
            schema.channels(),
            stats.mean.len()
        )));
    }
    let (support_source, support_target) = frame_block(event, 0..n_support, schema, stats)?;
    let (query_source, query_target) = frame_block(event, n_support..n_support + n_query, schema, stats)?;
    Ok(FewShotTask { event_id: event.event_id.clone(), support_source, support_target, query_source, query_target })
}

/// Frame pairs with event boundaries removed.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDataset {
    pub source: Tensor,
    pub target: Tensor,
}

impl JointDataset {
    pub fn len(&self) -> usize {
        self.source.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor) {
        (self.source.select_rows(rows), self.target.select_rows(rows))
    }
}

/// Support then query frames of each task, tasks in the given order.
pub fn collapse_joint(tasks: &[FewShotTask]) -> Result<JointDataset> {
    if tasks.is_empty() {
        return arg_err("cannot collapse an empty task list");
    }
    let mut sources = Vec::with_capacity(2 * tasks.len());
    let mut targets = Vec::with_capacity(2 * tasks.len());
    for task in tasks {
        sources.extend([task.support_source.clone(), task.query_source.clone()]);
        targets.extend([task.support_target.clone(), task.query_target.clone()]);
    }
    Ok(JointDataset { source: Tensor::stack_rows(&sources), target: Tensor::stack_rows(&targets) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_event;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn benchmark_split_sizes() {
        let s = split_events(&ids(11479), 0, [0.7988, 0.1012, 0.1]).unwrap();
        assert_eq!(s.counts, [9169, 1162, 1148]);
        let s = split_events(&ids(100), 0, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(s.counts, [80, 10, 10]);
    }

    #[test]
    fn split_is_seeded() {
        let a = split_events(&ids(50), 3, [0.6, 0.2, 0.2]).unwrap();
        assert_eq!(a, split_events(&ids(50), 3, [0.6, 0.2, 0.2]).unwrap());
        assert_ne!(a.train, split_events(&ids(50), 4, [0.6, 0.2, 0.2]).unwrap().train);
    }

    #[test]
    fn split_errors() {
        assert!(split_events(&ids(2), 0, [0.5, 0.25, 0.25]).is_err());
        assert!(split_events(&ids(10), 0, [0.5, 0.5, 0.5]).is_err());
        assert!(split_events(&ids(10), 0, [1.2, -0.1, -0.1]).is_err());
        assert!(split_events(&ids(2), 0, [0.5, 0.5, 0.0]).is_ok());
    }

    proptest! {
        #[test]
        fn split_partitions(n in 3usize..400, a in 0.05f64..1.0, b in 0.05f64..1.0, c in 0.05f64..1.0, seed: u64) {
            let total = a + b + c;
            let fr = [a / total, b / total, 1.0 - a / total - b / total];
            let s = split_events(&ids(n), seed, fr).unwrap();
            prop_assert_eq!(s.counts.iter().sum::<usize>(), n);
            for i in 0..3 {
                prop_assert!((s.counts[i] as f64 - fr[i] * n as f64).abs() <= 1.0 + 1e-9);
            }
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            let mut expect = ids(n);
            expect.sort();
            prop_assert_eq!(all, expect);
        }

        #[test]
        fn zscore_round_trip(mean in -300.0f64..300.0, std in 0.01f64..100.0, x in -1000.0f64..1000.0) {
            let stats = NormStats { mean: vec![mean], std: vec![std] };
            let back = stats.dezscore_value(0, stats.zscore_value(0, x));
            prop_assert!((back - x).abs() <= 1e-5 * x.abs().max(1.0));
        }

        #[test]
        fn resize_half_keeps_constants(v in -1e3f64..1e3, h in 1usize..10, w in 1usize..10) {
            let out = resize_half(&vec![v; 4 * h * w], 2 * h, 2 * w).unwrap();
            prop_assert_eq!(out.len(), h * w);
            prop_assert!(out.iter().all(|o| *o == v));
        }
    }

    #[test]
    fn zscore_fixed_points() {
        let stats = NormStats { mean: vec![10.0], std: vec![4.0] };
        assert_eq!(stats.zscore_value(0, 10.0), 0.0);
        assert_eq!(stats.zscore_value(0, 14.0), 1.0);
    }

    #[test]
    fn norm_stats_round_trip_and_floor() {
        let ev = synth_event(5, 4, 16, 2).unwrap();
        let stats = compute_norm_stats([&ev]).unwrap();
        for ch in 0..4 {
            let plane = ev.plane(2, ch);
            let back = stats.dezscore(ch, &stats.zscore(ch, plane));
            let err = back.iter().zip(plane).map(|(b, p)| (b - *p as f64).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "channel {ch}: {err}");
        }
        let calm = synth_event(5, 2, 16, 0).unwrap();
        let stats = compute_norm_stats([&calm]).unwrap();
        assert_eq!(stats.std[3], STD_FLOOR);
        assert_eq!(stats.std[2], STD_FLOOR);
    }

    #[test]
    fn resize_half_cases() {
        assert_eq!(resize_half(&[0.0, 0.0, 4.0, 4.0], 2, 2).unwrap(), vec![2.0]);
        assert_eq!(resize_half(&vec![7.0; 64], 8, 8).unwrap(), vec![7.0; 16]);
        assert_eq!(resize_half(&vec![0.0; 384 * 384], 384, 384).unwrap().len(), 192 * 192);
        assert!(resize_half(&[0.0; 9], 3, 3).is_err());
    }

    #[test]
    fn task_frames_and_shapes() {
        let ev = synth_event(1, 49, 32, 2).unwrap();
        let schema = ModalitySchema::default();
        let stats = compute_norm_stats([&ev]).unwrap();
        let task = build_task(&ev, 10, 10, &schema, &stats).unwrap();
        assert_eq!(task.support_source.shape(), &[10, 3, 16, 16]);
        assert_eq!(task.query_target.shape(), &[10, 1, 32, 32]);
        // query frame 0 is event frame 10
        let expect = stats.zscore(3, ev.plane(10, 3));
        assert_eq!(&task.query_target.data()[..1024], &expect[..]);
        let expect = stats.zscore(3, ev.plane(9, 3));
        assert_eq!(&task.support_target.data()[9 * 1024..], &expect[..]);

        let small = build_task(&ev, 1, 1, &schema, &stats).unwrap();
        assert_eq!(&small.query_target.data()[..], &stats.zscore(3, ev.plane(1, 3))[..]);

        let short = synth_event(1, 15, 32, 2).unwrap();
        assert!(matches!(build_task(&short, 10, 10, &schema, &stats), Err(Error::Argument(_))));
    }

    #[test]
    fn collapse_keeps_order() {
        let schema = ModalitySchema::default();
        let events: Vec<_> = (0..3).map(|s| synth_event(s, 20, 16, 2).unwrap()).collect();
        let stats = compute_norm_stats(&events).unwrap();
        let tasks: Vec<_> = events.iter().map(|e| build_task(e, 10, 10, &schema, &stats).unwrap()).collect();
        let joint = collapse_joint(&tasks).unwrap();
        assert_eq!(joint.len(), 60);
        assert_eq!(joint.target.slice_rows(20, 10), tasks[1].support_target);
        assert_eq!(joint.target.slice_rows(30, 10), tasks[1].query_target);

        let reversed: Vec<_> = tasks.iter().rev().cloned().collect();
        let joint_rev = collapse_joint(&reversed).unwrap();
        assert_eq!(joint_rev.source.slice_rows(0, 20), joint.source.slice_rows(40, 20));
        assert!(collapse_joint(&[]).is_err());
    }
}
