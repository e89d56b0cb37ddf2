//! Differentiable operations.
//!
//! Ops come in closed families so every backward rule stays inside the op set:
//! `conv2d` / `conv2d_input_grad` / `conv2d_weight_grad`, `upsample2` /
//! `sum_pool2`, `sum_keep` / `expand_trailing`, `sum_channels` /
//! `broadcast_channels`, and `slice_channels` / `pad_channels`.

use crate::tensor::{self, ConvGeometry, Tensor};
use crate::var::{Backward, Var};

fn mask(t: &Tensor, f: impl Fn(f64) -> f64) -> Var {
    Var::constant(t.map(f))
}

macro_rules! unary_op {
    ($name:ident, $label:literal, |$g:ident, $a:ident, $out:ident| $body:expr) => {
        struct $name;
        impl Backward for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn backward(&self, $g: &Var, parents: &[Var], $out: &Var, _needs: &[bool]) -> Vec<Option<Var>> {
                let $a = &parents[0];
                let _ = $out;
                vec![Some($body)]
            }
        }
    };
}

// ---- elementwise binary ----

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &Var, _p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }
}

pub fn add(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x + y);
    Var::from_op(v, vec![a.clone(), b.clone()], AddOp)
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &Var, _p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| neg(g))]
    }
}

pub fn sub(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x - y);
    Var::from_op(v, vec![a.clone(), b.clone()], SubOp)
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![needs[0].then(|| mul(g, &p[1])), needs[1].then(|| mul(g, &p[0]))]
    }
}

pub fn mul(a: &Var, b: &Var) -> Var {
    let v = a.value().zip_map(b.value(), |x, y| x * y);
    Var::from_op(v, vec![a.clone(), b.clone()], MulOp)
}

// ---- elementwise unary ----

unary_op!(NegOp, "neg", |g, _a, _o| neg(g));

pub fn neg(a: &Var) -> Var {
    Var::from_op(a.value().map(|x| -x), vec![a.clone()], NegOp)
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &Var, _p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(scale(g, self.0))]
    }
}

pub fn scale(a: &Var, c: f64) -> Var {
    Var::from_op(a.value().map(|x| x * c), vec![a.clone()], ScaleOp(c))
}

unary_op!(AddScalarOp, "add_scalar", |g, _a, _o| g.clone());

pub fn add_scalar(a: &Var, c: f64) -> Var {
    Var::from_op(a.value().map(|x| x + c), vec![a.clone()], AddScalarOp)
}

unary_op!(ExpOp, "exp", |g, _a, out| mul(g, out));

pub fn exp(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::exp), vec![a.clone()], ExpOp)
}

unary_op!(LogOp, "log", |g, a, _o| mul(g, &recip(a)));

pub fn log(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::ln), vec![a.clone()], LogOp)
}

unary_op!(RecipOp, "recip", |g, _a, out| neg(&mul(g, &mul(out, out))));

pub fn recip(a: &Var) -> Var {
    Var::from_op(a.value().map(|x| 1.0 / x), vec![a.clone()], RecipOp)
}

unary_op!(SqrtOp, "sqrt", |g, _a, out| mul(g, &scale(&recip(out), 0.5)));

pub fn sqrt(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::sqrt), vec![a.clone()], SqrtOp)
}

unary_op!(ReluOp, "relu", |g, a, _o| mul(g, &mask(a.value(), |x| if x > 0.0 { 1.0 } else { 0.0 })));

pub fn relu(a: &Var) -> Var {
    Var::from_op(a.value().map(|x| x.max(0.0)), vec![a.clone()], ReluOp)
}

struct LeakyReluOp(f64);
impl Backward for LeakyReluOp {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        let slope = self.0;
        vec![Some(mul(g, &mask(p[0].value(), |x| if x > 0.0 { 1.0 } else { slope })))]
    }
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let v = a.value().map(|x| if x > 0.0 { x } else { slope * x });
    Var::from_op(v, vec![a.clone()], LeakyReluOp(slope))
}

unary_op!(AbsOp, "abs", |g, a, _o| mul(g, &mask(a.value(), |x| if x > 0.0 {
    1.0
} else if x < 0.0 {
    -1.0
} else {
    0.0
})));

pub fn abs(a: &Var) -> Var {
    Var::from_op(a.value().map(f64::abs), vec![a.clone()], AbsOp)
}

unary_op!(SigmoidOp, "sigmoid", |g, _a, out| mul(g, &mul(out, &add_scalar(&neg(out), 1.0))));

pub fn sigmoid(a: &Var) -> Var {
    let v = a.value().map(|x| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    });
    Var::from_op(v, vec![a.clone()], SigmoidOp)
}

struct ClampOp(f64, f64);
impl Backward for ClampOp {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        let (lo, hi) = (self.0, self.1);
        vec![Some(mul(g, &mask(p[0].value(), |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })))]
    }
}

/// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
pub fn clamp(a: &Var, lo: f64, hi: f64) -> Var {
    Var::from_op(a.value().map(|x| x.clamp(lo, hi)), vec![a.clone()], ClampOp(lo, hi))
}

// ---- reductions and broadcasts ----

struct SumKeepOp;
impl Backward for SumKeepOp {
    fn name(&self) -> &'static str {
        "sum_keep"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(expand_trailing(g, p[0].shape()))]
    }
}

/// Sums over every axis after the first `keep` axes.
pub fn sum_keep(a: &Var, keep: usize) -> Var {
    let shape = a.shape();
    assert!(keep <= shape.len(), "sum_keep({keep}) on rank {}", shape.len());
    let outer: usize = shape[..keep].iter().product();
    let inner: usize = shape[keep..].iter().product();
    let data = a.value().data();
    let out: Vec<f64> = (0..outer).map(|o| data[o * inner..(o + 1) * inner].iter().sum()).collect();
    Var::from_op(Tensor::new(shape[..keep].to_vec(), out), vec![a.clone()], SumKeepOp)
}

struct ExpandTrailingOp;
impl Backward for ExpandTrailingOp {
    fn name(&self) -> &'static str {
        "expand_trailing"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_keep(g, p[0].value().rank()))]
    }
}

/// Repeats `a` over trailing axes so that the result has `shape`;
/// `a.shape()` must be a prefix of `shape`.
pub fn expand_trailing(a: &Var, shape: &[usize]) -> Var {
    let keep = a.value().rank();
    assert_eq!(&shape[..keep], a.shape(), "expand_trailing prefix mismatch");
    let inner: usize = shape[keep..].iter().product();
    let mut out = Vec::with_capacity(a.value().numel() * inner);
    for &v in a.value().data() {
        out.extend(std::iter::repeat(v).take(inner));
    }
    Var::from_op(Tensor::new(shape.to_vec(), out), vec![a.clone()], ExpandTrailingOp)
}

pub fn sum_all(a: &Var) -> Var {
    sum_keep(a, 0)
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.value().numel() as f64;
    scale(&sum_all(a), 1.0 / n)
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel ops need [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

struct SumChannelsOp;
impl Backward for SumChannelsOp {
    fn name(&self) -> &'static str {
        "sum_channels"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(broadcast_channels(g, p[0].shape()))]
    }
}

/// Sums `[N, C, ...]` down to `[C]`.
pub fn sum_channels(a: &Var) -> Var {
    let (n, c, inner) = channel_layout(a.shape());
    let data = a.value().data();
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * inner;
            *o += data[base..base + inner].iter().sum::<f64>();
        }
    }
    Var::from_op(Tensor::new([c], out), vec![a.clone()], SumChannelsOp)
}

struct BroadcastChannelsOp;
impl Backward for BroadcastChannelsOp {
    fn name(&self) -> &'static str {
        "broadcast_channels"
    }
    fn backward(&self, g: &Var, _p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(sum_channels(g))]
    }
}

/// Broadcasts a per-channel vector `[C]` to `shape = [N, C, ...]`.
pub fn broadcast_channels(b: &Var, shape: &[usize]) -> Var {
    let (n, c, inner) = channel_layout(shape);
    assert_eq!(b.shape(), &[c], "broadcast_channels expects [{c}]");
    let bd = b.value().data();
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &v in bd {
            out.extend(std::iter::repeat(v).take(inner));
        }
    }
    Var::from_op(Tensor::new(shape.to_vec(), out), vec![b.clone()], BroadcastChannelsOp)
}

/// `x + b` with `b` broadcast along the channel axis.
pub fn add_channel_bias(x: &Var, b: &Var) -> Var {
    add(x, &broadcast_channels(b, x.shape()))
}

// ---- linear algebra ----

struct MatMulOp;
impl Backward for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        vec![
            needs[0].then(|| matmul(g, &transpose(&p[1]))),
            needs[1].then(|| matmul(&transpose(&p[0]), g)),
        ]
    }
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    Var::from_op(tensor::matmul(a.value(), b.value()), vec![a.clone(), b.clone()], MatMulOp)
}

unary_op!(TransposeOp, "transpose", |g, _a, _o| transpose(g));

pub fn transpose(a: &Var) -> Var {
    Var::from_op(tensor::transpose(a.value()), vec![a.clone()], TransposeOp)
}

// ---- convolution family ----

struct Conv2dOp(ConvGeometry);
impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, w) = (&p[0], &p[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        vec![
            needs[0].then(|| conv2d_input_grad(g, w, hw, self.0)),
            needs[1].then(|| conv2d_weight_grad(x, g, self.0)),
        ]
    }
}

/// Cross-correlation of `x [N, Ci, H, W]` with `w [Co, Ci, k, k]`.
pub fn conv2d(x: &Var, w: &Var, geo: ConvGeometry) -> Var {
    let v = tensor::conv2d(x.value(), w.value(), geo);
    Var::from_op(v, vec![x.clone(), w.clone()], Conv2dOp(geo))
}

struct ConvInputGradOp(ConvGeometry);
impl Backward for ConvInputGradOp {
    fn name(&self) -> &'static str {
        "conv2d_input_grad"
    }
    fn backward(&self, gz: &Var, p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (g, w) = (&p[0], &p[1]);
        vec![needs[0].then(|| conv2d(gz, w, self.0)), needs[1].then(|| conv2d_weight_grad(gz, g, self.0))]
    }
}

/// Transposed convolution: the adjoint of [`conv2d`] in its input.
pub fn conv2d_input_grad(g: &Var, w: &Var, in_hw: (usize, usize), geo: ConvGeometry) -> Var {
    let v = tensor::conv2d_input_grad(g.value(), w.value(), in_hw, geo);
    Var::from_op(v, vec![g.clone(), w.clone()], ConvInputGradOp(geo))
}

struct ConvWeightGradOp(ConvGeometry);
impl Backward for ConvWeightGradOp {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, gz: &Var, p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let (x, g) = (&p[0], &p[1]);
        let hw = (x.shape()[2], x.shape()[3]);
        vec![needs[0].then(|| conv2d_input_grad(g, gz, hw, self.0)), needs[1].then(|| conv2d(x, gz, self.0))]
    }
}

/// The adjoint of [`conv2d`] in its weight.
pub fn conv2d_weight_grad(x: &Var, g: &Var, geo: ConvGeometry) -> Var {
    let v = tensor::conv2d_weight_grad(x.value(), g.value(), geo);
    Var::from_op(v, vec![x.clone(), g.clone()], ConvWeightGradOp(geo))
}

unary_op!(Upsample2Op, "upsample2", |g, _a, _o| sum_pool2(g));

/// Nearest-neighbour x2 upsampling of the last two axes.
pub fn upsample2(a: &Var) -> Var {
    Var::from_op(tensor::upsample2(a.value()), vec![a.clone()], Upsample2Op)
}

unary_op!(SumPool2Op, "sum_pool2", |g, _a, _o| upsample2(g));

pub fn sum_pool2(a: &Var) -> Var {
    Var::from_op(tensor::sum_pool2(a.value()), vec![a.clone()], SumPool2Op)
}

// ---- channel concatenation ----

struct ConcatOp(Vec<usize>);
impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, g: &Var, _p: &[Var], _o: &Var, needs: &[bool]) -> Vec<Option<Var>> {
        let mut start = 0;
        self.0
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let s = start;
                start += len;
                need.then(|| slice_channels(g, s, len))
            })
            .collect()
    }
}

/// Concatenates `[N, Ci, ...]` tensors along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let (n, _, inner) = channel_layout(parts[0].shape());
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (pn, pc, pi) = channel_layout(p.shape());
            assert!(pn == n && pi == inner, "concat_channels shape mismatch");
            pc
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total * inner);
    for s in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.value().data()[s * c * inner..(s + 1) * c * inner]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[1] = total;
    Var::from_op(Tensor::new(shape, out), parts.to_vec(), ConcatOp(widths))
}

struct SliceChannelsOp(usize);
impl Backward for SliceChannelsOp {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(pad_channels(g, self.0, p[0].shape()[1]))]
    }
}

/// Channels `[start, start + len)` of `[N, C, ...]`.
pub fn slice_channels(a: &Var, start: usize, len: usize) -> Var {
    let (n, c, inner) = channel_layout(a.shape());
    assert!(start + len <= c, "slice_channels out of range");
    let data = a.value().data();
    let mut out = Vec::with_capacity(n * len * inner);
    for s in 0..n {
        out.extend_from_slice(&data[(s * c + start) * inner..(s * c + start + len) * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = len;
    Var::from_op(Tensor::new(shape, out), vec![a.clone()], SliceChannelsOp(start))
}

struct PadChannelsOp(usize);
impl Backward for PadChannelsOp {
    fn name(&self) -> &'static str {
        "pad_channels"
    }
    fn backward(&self, g: &Var, p: &[Var], _o: &Var, _n: &[bool]) -> Vec<Option<Var>> {
        vec![Some(slice_channels(g, self.0, p[0].shape()[1]))]
    }
}

/// Embeds `[N, C, ...]` at channel offset `start` of a zero tensor with `total` channels.
pub fn pad_channels(a: &Var, start: usize, total: usize) -> Var {
    let (n, c, inner) = channel_layout(a.shape());
    assert!(start + c <= total, "pad_channels out of range");
    let data = a.value().data();
    let mut out = vec![0.0; n * total * inner];
    for s in 0..n {
        out[(s * total + start) * inner..(s * total + start + c) * inner]
            .copy_from_slice(&data[s * c * inner..(s + 1) * c * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = total;
    Var::from_op(Tensor::new(shape, out), vec![a.clone()], PadChannelsOp(start))
}
