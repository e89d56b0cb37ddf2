//! Network definitions over named parameter sets.
//!
//! Every forward pass is written with differentiable ops from the autograd
//! crate, so gradients of any scalar built on top are themselves
//! differentiable.

mod checkpoint;
mod heads;
mod patch;
pub mod tiny;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_DTYPE};
pub use heads::{batch_norm, MlpHeadSpec, BN_EPS};
pub use patch::{mean_log_prob, PatchDiscSpec, PROB_CLAMP};
pub use unet::{UNetSpec, ENCODER_BLOCKS};

use autograd::{Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// How a parameter tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// A network layout: a tag naming the architecture plus its parameter shapes.
pub trait Architecture {
    fn arch_tag(&self) -> String;
    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)>;

    fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Maps a source batch `[B, C_in, h, w]` to a target batch.
pub trait Generator {
    fn generate(&self, params: &VarMap, source: &Var) -> Result<Var>;
}

/// Scores `(source, target)` pairs with a probability map in `(0, 1)`.
pub trait Discriminator {
    fn discriminate(&self, params: &VarMap, source: &Var, target: &Var) -> Result<Var>;
}

/// Ordered named tensors plus the tag of the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub arch: String,
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(arch: impl Into<String>) -> Self {
        Self { arch: arch.into(), tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Gradient-tracking leaves, one per tensor.
    pub fn leaves(&self) -> VarMap {
        VarMap(self.tensors.iter().map(|(k, v)| (k.clone(), Var::leaf(v.clone()))).collect())
    }

    pub fn constants(&self) -> VarMap {
        VarMap(self.tensors.iter().map(|(k, v)| (k.clone(), Var::constant(v.clone()))).collect())
    }

    /// Parameters whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str, arch: impl Into<String>) -> ParamSet {
        ParamSet {
            arch: arch.into(),
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Checks that names and shapes match `arch`'s layout exactly.
    pub fn check_layout(&self, arch: &impl Architecture) -> Result<()> {
        let layout = arch.param_layout();
        let ok = self.arch == arch.arch_tag()
            && layout.len() == self.tensors.len()
            && layout.iter().zip(&self.tensors).all(|((n, s, _), (k, t))| n == k && s.as_slice() == t.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("parameters tagged {} do not fit architecture {}", self.arch, arch.arch_tag())))
        }
    }
}

/// Parameters as graph variables, keyed like the `ParamSet` they came from.
#[derive(Clone, Debug)]
pub struct VarMap(IndexMap<String, Var>);

impl VarMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.0.get(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.0.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rebuilds a map with the same names from `vars` given in key order.
    pub fn with_vars(&self, vars: Vec<Var>) -> VarMap {
        assert_eq!(vars.len(), self.0.len(), "VarMap::with_vars length mismatch");
        VarMap(self.0.keys().cloned().zip(vars).collect())
    }

    pub fn detach(&self) -> VarMap {
        VarMap(self.0.iter().map(|(k, v)| (k.clone(), v.detach())).collect())
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> VarMap {
        VarMap(self.0.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))).collect())
    }

    pub fn to_param_set(&self, arch: impl Into<String>) -> ParamSet {
        ParamSet { arch: arch.into(), tensors: self.0.iter().map(|(k, v)| (k.clone(), v.value().clone())).collect() }
    }
}

/// Draws every `Init::Normal` tensor from `N(0, 0.02)` in layout order.
pub fn init_params(arch: &impl Architecture, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid init std");
    let mut out = ParamSet::new(arch.arch_tag());
    for (name, shape, init) in arch.param_layout() {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        out.insert(name, Tensor::new(shape, data)).expect("layout names are unique");
    }
    out
}

pub(crate) fn conv_layout(name: &str, c_in: usize, c_out: usize, k: usize) -> [(String, Vec<usize>, Init); 2] {
    [
        (format!("{name}.weight"), vec![c_out, c_in, k, k], Init::Normal),
        (format!("{name}.bias"), vec![c_out], Init::Zeros),
    ]
}

pub(crate) fn conv_layer(params: &VarMap, name: &str, x: &Var, geo: autograd::ConvGeometry) -> Result<Var> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    if w.shape().len() != 4 || w.shape()[1] != x.shape()[1] || w.shape()[2] != geo.kernel {
        return Err(Error::Shape(format!("{name}: weight {:?} cannot take input {:?}", w.shape(), x.shape())));
    }
    Ok(autograd::add_channel_bias(&autograd::conv2d(x, w, geo), b))
}

pub(crate) fn expect_rank4(what: &str, x: &Var) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::Shape(format!("{what} must be [B, C, H, W], got {s:?}"))),
    }
}
