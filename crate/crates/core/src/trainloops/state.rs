use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, MetaConfig};
use crate::error::{Error, Result};
use crate::nets::{load_checkpoint, save_checkpoint, Checkpoint, ParamSet};

/// Everything needed to continue training exactly where it stopped. Data
/// order is derived from `(seed, epoch)`, so no generator state is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: ParamSet,
    pub discriminator: Option<ParamSet>,
    pub gen_opt: Adam,
    pub disc_opt: Option<Adam>,
    pub epoch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Generator loss after every optimizer step.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    epoch: usize,
    steps: u64,
    seed: u64,
    loss_history: Vec<f64>,
    gen_adam: AdamConfig,
    gen_adam_t: u64,
    disc_adam: Option<AdamConfig>,
    disc_adam_t: Option<u64>,
}

const KIND: &str = "train-state";

impl TrainState {
    pub fn new(generator: ParamSet, discriminator: Option<ParamSet>, config: &MetaConfig) -> Self {
        let gen_opt = Adam::new(config.adam, &generator);
        let disc_opt = discriminator.as_ref().map(|d| Adam::new(config.disc_adam(), d));
        Self { generator, discriminator, gen_opt, disc_opt, epoch: 0, steps: 0, seed: config.seed, loss_history: Vec::new() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = StateMeta {
            kind: KIND.into(),
            epoch: self.epoch,
            steps: self.steps,
            seed: self.seed,
            loss_history: self.loss_history.clone(),
            gen_adam: self.gen_opt.config,
            gen_adam_t: self.gen_opt.t,
            disc_adam: self.disc_opt.as_ref().map(|o| o.config),
            disc_adam_t: self.disc_opt.as_ref().map(|o| o.t),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ckpt = Checkpoint::new(meta)
            .with("generator", self.generator.clone())
            .with("adam.m.generator", self.gen_opt.m.clone())
            .with("adam.v.generator", self.gen_opt.v.clone());
        if let (Some(d), Some(o)) = (&self.discriminator, &self.disc_opt) {
            ckpt = ckpt.with("discriminator", d.clone()).with("adam.m.discriminator", o.m.clone()).with("adam.v.discriminator", o.v.clone());
        }
        save_checkpoint(dir, &ckpt)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ckpt = load_checkpoint(dir)?;
        let meta: StateMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: not a training state: {e}", dir.display())))?;
        if meta.kind != KIND {
            return Err(Error::Checkpoint(format!("{}: checkpoint kind is {}", dir.display(), meta.kind)));
        }
        let generator = ckpt.take("generator")?;
        let gen_opt = Adam { config: meta.gen_adam, m: ckpt.take("adam.m.generator")?, v: ckpt.take("adam.v.generator")?, t: meta.gen_adam_t };
        let (discriminator, disc_opt) = match (meta.disc_adam, meta.disc_adam_t) {
            (Some(config), Some(t)) => {
                let d = ckpt.take("discriminator")?;
                let opt = Adam { config, m: ckpt.take("adam.m.discriminator")?, v: ckpt.take("adam.v.discriminator")?, t };
                (Some(d), Some(opt))
            }
            _ => (None, None),
        };
        Ok(Self {
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            epoch: meta.epoch,
            steps: meta.steps,
            seed: meta.seed,
            loss_history: meta.loss_history,
        })
    }
}

/// One row of the tab-separated metrics log: `epoch  split  mode  mae`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub mode: String,
    pub mae: f64,
}

impl MetricsRecord {
    pub const HEADER: &'static str = "epoch\tsplit\tmode\tmae";

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.split, self.mode, self.mae)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Argument(format!("malformed metrics line {line:?}"));
        if fields.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            epoch: fields[0].parse().map_err(|_| bad())?,
            split: fields[1].to_string(),
            mode: fields[2].to_string(),
            mae: fields[3].parse().map_err(|_| bad())?,
        })
    }

    /// Parses a whole log, skipping the header and blank lines.
    pub fn parse_log(text: &str) -> Result<Vec<Self>> {
        text.lines().filter(|l| !l.trim().is_empty() && *l != Self::HEADER).map(Self::parse_line).collect()
    }
}
