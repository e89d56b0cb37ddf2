//! Categorical verification of generated fields: threshold masks, confusion
//! counts, CSI / POD / SUCR, and archive-level reports.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [74.0, 133.0];

/// `pixel >= threshold`, for thresholds in `[0, 255]`.
pub fn binarize(image: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(0.0..=255.0).contains(&threshold) {
        return arg_err(format!("threshold {threshold} outside [0, 255]"));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot binarize a non-finite image".into()));
    }
    Ok(image.iter().map(|&v| v >= threshold).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub true_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.true_negatives
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            hits: self.hits + o.hits,
            misses: self.misses + o.misses,
            false_alarms: self.false_alarms + o.false_alarms,
            true_negatives: self.true_negatives + o.true_negatives,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return arg_err(format!("masks of {} and {} pixels", pred.len(), truth.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.hits += 1,
            (true, false) => c.false_alarms += 1,
            (false, true) => c.misses += 1,
            (false, false) => c.true_negatives += 1,
        }
    }
    Ok(c)
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub csi: Option<f64>,
    pub pod: Option<f64>,
    pub sucr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn skill(c: &ConfusionCounts) -> Skill {
    let (h, m, f) = (c.hits, c.misses, c.false_alarms);
    Skill { csi: ratio(h, h + m + f), pod: ratio(h, h + m), sucr: ratio(h, h + f) }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One confusion matrix over every pixel of every frame.
    #[default]
    Pooled,
    /// Mean of the per-frame metrics that are defined.
    PerFrameMean,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Pooled => "pooled",
            Aggregation::PerFrameMean => "per-frame-mean",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Aggregation::Pooled),
            "per-frame-mean" => Ok(Aggregation::PerFrameMean),
            other => arg_err(format!("unknown aggregation {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSkill {
    pub threshold: f64,
    /// Pooled counts, whatever the aggregation.
    pub counts: ConfusionCounts,
    pub skill: Skill,
    /// Frames on which CSI, POD and SUCR were defined.
    pub defined_frames: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub aggregation: Aggregation,
    pub frames: usize,
    pub pixels: u64,
    /// Pooled over all pixels.
    pub mae: f64,
    pub thresholds: Vec<ThresholdSkill>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.flatten().collect();
    let n = defined.len();
    ((n > 0).then(|| defined.iter().sum::<f64>() / n as f64), n)
}

/// Verifies aligned prediction/target frames given in physical units.
pub fn evaluate_archive(
    predictions: &[Tensor],
    targets: &[Tensor],
    thresholds: &[f64],
    aggregation: Aggregation,
) -> Result<SkillReport> {
    if predictions.len() != targets.len() {
        return arg_err(format!("{} predictions for {} targets", predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return arg_err("nothing to evaluate");
    }
    if let Some(i) = (0..predictions.len()).find(|&i| predictions[i].shape() != targets[i].shape()) {
        return arg_err(format!("frame {i}: prediction {:?} vs target {:?}", predictions[i].shape(), targets[i].shape()));
    }
    let mut abs_sum = 0.0;
    let mut pixels = 0u64;
    for (p, t) in predictions.iter().zip(targets) {
        if !p.is_finite() || !t.is_finite() {
            return Err(Error::Numeric("non-finite values in evaluated frames".into()));
        }
        abs_sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        pixels += p.numel() as u64;
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let per_frame: Vec<ConfusionCounts> = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| confusion(&binarize(p.data(), th)?, &binarize(t.data(), th)?))
            .collect::<Result<_>>()?;
        let counts = per_frame.iter().fold(ConfusionCounts::default(), |a, &c| a + c);
        let skills: Vec<Skill> = per_frame.iter().map(skill).collect();
        let (csi, n_csi) = mean_defined(skills.iter().map(|s| s.csi));
        let (pod, n_pod) = mean_defined(skills.iter().map(|s| s.pod));
        let (sucr, n_sucr) = mean_defined(skills.iter().map(|s| s.sucr));
        let skill = match aggregation {
            Aggregation::Pooled => skill(&counts),
            Aggregation::PerFrameMean => Skill { csi, pod, sucr },
        };
        out.push(ThresholdSkill { threshold: th, counts, skill, defined_frames: [n_csi, n_pod, n_sucr] });
    }
    Ok(SkillReport { aggregation, frames: predictions.len(), pixels, mae: abs_sum / pixels as f64, thresholds: out })
}

/// Splits `[N, ...]` into its `N` rows.
pub fn frames_of(t: &Tensor) -> Vec<Tensor> {
    (0..t.dim(0)).map(|i| t.slice_rows(i, 1)).collect()
}

fn label(th: f64) -> String {
    if th.fract() == 0.0 {
        format!("{}", th as i64)
    } else {
        format!("{th}")
    }
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

impl SkillReport {
    /// `key=value` lines, e.g. `CSI74=0.2900`; undefined metrics read `undefined`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "aggregation={}", self.aggregation.as_str());
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "pixels={}", self.pixels);
        let _ = writeln!(s, "MAE={:.4}", self.mae);
        for t in &self.thresholds {
            let l = label(t.threshold);
            let _ = writeln!(s, "CSI{l}={}", metric(t.skill.csi));
            let _ = writeln!(s, "POD{l}={}", metric(t.skill.pod));
            let _ = writeln!(s, "SUCR{l}={}", metric(t.skill.sucr));
            let c = t.counts;
            let _ = writeln!(s, "H{l}={}\nM{l}={}\nF{l}={}\nTN{l}={}", c.hits, c.misses, c.false_alarms, c.true_negatives);
        }
        s
    }
}

/// Reads `key=value` lines back; `undefined` becomes `None`. Non-numeric
/// values (the aggregation name) are skipped.
pub fn parse_report(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Argument(format!("malformed report line {line:?}")))?;
        if v == "undefined" {
            out.push((k.to_string(), None));
        } else if let Ok(x) = v.parse::<f64>() {
            out.push((k.to_string(), Some(x)));
        }
    }
    Ok(out)
}
