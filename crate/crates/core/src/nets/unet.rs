use autograd::{concat_channels, relu, scale, sum_keep, upsample2, ConvGeometry, Var};
use serde::{Deserialize, Serialize};

use super::{conv_layer, conv_layout, expect_rank4, Architecture, Generator, Init, VarMap};
use crate::error::{Error, Result};

pub const ENCODER_BLOCKS: usize = 4;
const DOWN: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
const SAME: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
const POINT: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };

/// U-Net translator: four stride-2 encoder blocks, five upsampling decoder
/// blocks and a linear 1x1 head, so the output is twice the input resolution.
///
/// Decoder block `i` upsamples by 2, applies a 3x3 conv + ReLU and then
/// concatenates the matching encoder map (block 4 concatenates the raw input,
/// block 5 has no skip).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub base_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self { base_width: 32, in_channels: 3, out_channels: 1 }
    }
}

impl UNetSpec {
    pub fn new(base_width: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { base_width, in_channels, out_channels }
    }

    /// Output width of encoder block `i` (0-based).
    pub fn encoder_width(&self, i: usize) -> usize {
        (self.base_width << i).min(8 * self.base_width)
    }

    /// Dimension of `encoder_embed`.
    pub fn embed_dim(&self) -> usize {
        self.encoder_width(ENCODER_BLOCKS - 1)
    }

    /// `(name, in, out)` for every conv, encoder first.
    fn convs(&self) -> Vec<(String, usize, usize, usize)> {
        let e: Vec<usize> = (0..ENCODER_BLOCKS).map(|i| self.encoder_width(i)).collect();
        let b = self.base_width;
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for (i, &w) in e.iter().enumerate() {
            out.push((format!("enc{}", i + 1), c, w, 3));
            c = w;
        }
        // dec1..dec3 output the width of the skip they are joined with.
        for (i, skip) in [e[2], e[1], e[0]].into_iter().enumerate() {
            out.push((format!("dec{}", i + 1), c, skip, 3));
            c = 2 * skip;
        }
        out.push(("dec4".into(), c, b, 3));
        c = b + self.in_channels;
        out.push(("dec5".into(), c, b, 3));
        out.push(("head".into(), b, self.out_channels, 1));
        out
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        (1..=ENCODER_BLOCKS).flat_map(|i| [format!("enc{i}.weight"), format!("enc{i}.bias")]).collect()
    }

    fn check_source(&self, source: &Var) -> Result<[usize; 4]> {
        let s = expect_rank4("source", source)?;
        if s[1] != self.in_channels {
            return Err(Error::Shape(format!("source has {} channels, generator expects {}", s[1], self.in_channels)));
        }
        let m = 1 << ENCODER_BLOCKS;
        if s[2] == 0 || s[3] == 0 || s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::Shape(format!("source resolution {}x{} is not divisible by {m}", s[2], s[3])));
        }
        Ok(s)
    }

    fn encode(&self, params: &VarMap, source: &Var) -> Result<Vec<Var>> {
        self.check_source(source)?;
        let mut maps = Vec::with_capacity(ENCODER_BLOCKS);
        let mut x = source.clone();
        for i in 1..=ENCODER_BLOCKS {
            x = relu(&conv_layer(params, &format!("enc{i}"), &x, DOWN)?);
            maps.push(x.clone());
        }
        Ok(maps)
    }

    pub fn forward(&self, params: &VarMap, source: &Var) -> Result<Var> {
        let e = self.encode(params, source)?;
        let up = |name: &str, x: &Var| -> Result<Var> { Ok(relu(&conv_layer(params, name, &upsample2(x), SAME)?)) };
        let mut x = e[3].clone();
        for (i, skip) in [&e[2], &e[1], &e[0], source].into_iter().enumerate() {
            x = concat_channels(&[up(&format!("dec{}", i + 1), &x)?, skip.clone()]);
        }
        x = up("dec5", &x)?;
        conv_layer(params, "head", &x, POINT)
    }

    /// Deepest encoder map, global-average-pooled to `[B, embed_dim]`.
    pub fn encoder_embed(&self, params: &VarMap, source: &Var) -> Result<Var> {
        let deepest = self.encode(params, source)?.pop().expect("four encoder blocks");
        let [_, _, h, w] = expect_rank4("encoder map", &deepest)?;
        Ok(scale(&sum_keep(&deepest, 2), 1.0 / (h * w) as f64))
    }
}

impl Architecture for UNetSpec {
    fn arch_tag(&self) -> String {
        format!("unet(b={},in={},out={})", self.base_width, self.in_channels, self.out_channels)
    }

    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        self.convs().into_iter().flat_map(|(n, i, o, k)| conv_layout(&n, i, o, k)).collect()
    }
}

impl Generator for UNetSpec {
    fn generate(&self, params: &VarMap, source: &Var) -> Result<Var> {
        self.forward(params, source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;
    use autograd::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Var::constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()))
    }

    /// 3x3 conv: in*out*9 + out.
    fn conv(i: usize, o: usize) -> usize {
        i * o * 9 + o
    }

    #[test]
    fn closed_form_parameter_count() {
        let spec = UNetSpec::default();
        let (b, c_in, c_out) = (32, 3, 1);
        let expected = conv(c_in, b)
            + conv(b, 2 * b)
            + conv(2 * b, 4 * b)
            + conv(4 * b, 8 * b)
            + conv(8 * b, 4 * b)
            + conv(8 * b, 2 * b)
            + conv(4 * b, b)
            + conv(2 * b, b)
            + conv(b + c_in, b)
            + (b * c_out + c_out);
        assert_eq!(expected, 896 + 18496 + 73856 + 295168 + 295040 + 147520 + 36896 + 18464 + 10112 + 33);
        assert_eq!(spec.param_count(), expected);
        assert_eq!(init_params(&spec, 0).param_count(), expected);
    }

    #[test]
    fn doubles_resolution() {
        let spec = UNetSpec::new(4, 3, 1);
        let p = init_params(&spec, 3).constants();
        let x = random([2, 3, 32, 32], 0);
        let y = spec.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 64]);
        assert_eq!(spec.forward(&p, &x).unwrap().value(), y.value());
        let x = random([1, 3, 16, 48], 1);
        assert_eq!(spec.forward(&p, &x).unwrap().shape(), &[1, 1, 32, 96]);
    }

    #[test]
    fn shape_errors() {
        let spec = UNetSpec::new(4, 3, 1);
        let p = init_params(&spec, 3).constants();
        assert!(matches!(spec.forward(&p, &random([1, 3, 24, 24], 0)), Err(Error::Shape(_))));
        assert!(matches!(spec.forward(&p, &random([1, 2, 32, 32], 0)), Err(Error::Shape(_))));
        assert!(matches!(spec.encoder_embed(&p, &random([1, 3, 8, 8], 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = UNetSpec::new(4, 3, 1);
        let p = init_params(&spec, 3).zeros_like().constants();
        let y = spec.forward(&p, &random([1, 3, 16, 16], 2)).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_shape_and_homogeneity() {
        let spec = UNetSpec::default();
        let p = init_params(&spec, 9).constants();
        let x = random([4, 3, 32, 32], 4);
        let e1 = spec.encoder_embed(&p, &x).unwrap();
        assert_eq!(e1.shape(), &[4, 256]);
        let x2 = Var::constant(x.value().map(|v| 2.0 * v));
        let e2 = spec.encoder_embed(&p, &x2).unwrap();
        for (a, b) in e1.value().data().iter().zip(e2.value().data()) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1e-12), "{a} {b}");
        }
        assert_eq!(spec.encoder_embed(&p, &x).unwrap().value(), e1.value());
    }
}
