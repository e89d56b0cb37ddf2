use std::f64::consts::PI;

use autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::raster::{blur_plane, gaussian_kernel, resize_window, sample_bilinear};

/// One stochastic transform. Geometric draws are shared by every channel of a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Crop covering `scale` of the area with aspect ratio in `ratio`, resized back.
    ResizedCrop { scale: (f64, f64), ratio: (f64, f64) },
    HorizontalFlip { p: f64 },
    /// Per-pixel `N(0, sigma)` noise, applied with probability `p`.
    GaussianNoise { sigma: f64, p: f64 },
    /// Separable blur with `sigma ~ U(sigma.0, sigma.1)`.
    GaussianBlur { kernel: usize, sigma: (f64, f64) },
    VerticalFlip { p: f64 },
    /// Rotation about the frame centre by `U(-max_angle, max_angle)` radians.
    Rotation { max_angle: f64 },
}

pub const MAX_LEVEL: usize = 6;

/// An ordered transform list of which the first `level` entries are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub transforms: Vec<Transform>,
    pub level: usize,
}

impl AugmentationSpec {
    /// crop, horizontal flip, noise, blur, vertical flip, rotation.
    pub fn standard(level: usize) -> Result<Self> {
        let spec = Self {
            transforms: vec![
                Transform::ResizedCrop { scale: (0.8, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0) },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::GaussianNoise { sigma: 0.1, p: 0.5 },
                Transform::GaussianBlur { kernel: 19, sigma: (0.1, 2.0) },
                Transform::VerticalFlip { p: 0.2 },
                Transform::Rotation { max_angle: PI / 6.0 },
            ],
            level,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn active(&self) -> &[Transform] {
        &self.transforms[..self.level.min(self.transforms.len())]
    }

    pub fn validate(&self) -> Result<()> {
        if self.level > self.transforms.len() {
            return arg_err(format!("augmentation level {} exceeds the {} listed transforms", self.level, self.transforms.len()));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        for t in &self.transforms {
            let ok = match *t {
                Transform::ResizedCrop { scale, ratio } => range(scale) && scale.0 > 0.0 && scale.1 <= 1.0 && range(ratio) && ratio.0 > 0.0,
                Transform::HorizontalFlip { p } | Transform::VerticalFlip { p } => prob(p),
                Transform::GaussianNoise { sigma, p } => sigma >= 0.0 && prob(p),
                Transform::GaussianBlur { kernel, sigma } => kernel % 2 == 1 && range(sigma) && sigma.0 > 0.0,
                Transform::Rotation { max_angle } => max_angle.is_finite() && max_angle >= 0.0,
            };
            if !ok {
                return arg_err(format!("invalid transform {t:?}"));
            }
        }
        Ok(())
    }
}

fn per_plane(frame: &Tensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let [c, h, w] = [frame.dim(0), frame.dim(1), frame.dim(2)];
    let mut out = Vec::with_capacity(c * h * w);
    for plane in frame.data().chunks(h * w) {
        out.extend(f(plane));
    }
    Tensor::new([c, h, w], out)
}

fn flip(frame: &Tensor, horizontal: bool) -> Tensor {
    let (h, w) = (frame.dim(1), frame.dim(2));
    per_plane(frame, |p| {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if horizontal {
                    p[y * w + (w - 1 - x)]
                } else {
                    p[(h - 1 - y) * w + x]
                }
            })
            .collect()
    })
}

/// Window `(top, left, height, width)` in pixels, drawn like torchvision's
/// RandomResizedCrop (ten attempts, then the whole frame).
fn crop_window(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

fn rotate(frame: &Tensor, angle: f64) -> Tensor {
    let (h, w) = (frame.dim(1), frame.dim(2));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    per_plane(frame, |p| {
        (0..h * w)
            .map(|i| {
                let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                sample_bilinear(p, h, w, cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
            .collect()
    })
}

/// Applies the active transforms of `spec` in order to a `[C, H, W]` frame.
/// Every random draw comes from `rng`, so equal streams give equal outputs.
pub fn apply_augmentations(frame: &Tensor, spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<Tensor> {
    if frame.shape().len() != 3 {
        return Err(Error::Shape(format!("frame must be [C, H, W], got {:?}", frame.shape())));
    }
    if !frame.is_finite() {
        return Err(Error::Numeric("augmentation input is not finite".into()));
    }
    spec.validate()?;
    let (h, w) = (frame.dim(1), frame.dim(2));
    let mut out = frame.clone();
    for t in spec.active() {
        out = match *t {
            Transform::ResizedCrop { scale, ratio } => {
                let (top, left, ch, cw) = crop_window(h, w, scale, ratio, rng);
                per_plane(&out, |p| resize_window(p, h, w, (top as f64, left as f64, ch as f64, cw as f64), h, w))
            }
            Transform::HorizontalFlip { p } => {
                if rng.gen::<f64>() < p {
                    flip(&out, true)
                } else {
                    out
                }
            }
            Transform::GaussianNoise { sigma, p } => {
                if rng.gen::<f64>() < p {
                    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
                    let noise: Vec<f64> = (0..out.numel()).map(|_| normal.sample(rng)).collect();
                    let data = out.data().iter().zip(noise).map(|(v, n)| v + n).collect();
                    Tensor::new(out.shape().to_vec(), data)
                } else {
                    out
                }
            }
            Transform::GaussianBlur { kernel, sigma } => {
                if kernel > h || kernel > w {
                    return arg_err(format!("blur kernel {kernel} is larger than the {h}x{w} frame"));
                }
                let k = gaussian_kernel(kernel, rng.gen_range(sigma.0..=sigma.1));
                per_plane(&out, |p| blur_plane(p, h, w, &k))
            }
            Transform::VerticalFlip { p } => {
                if rng.gen::<f64>() < p {
                    flip(&out, false)
                } else {
                    out
                }
            }
            Transform::Rotation { max_angle } => {
                let angle = if max_angle > 0.0 { rng.gen_range(-max_angle..=max_angle) } else { 0.0 };
                rotate(&out, angle)
            }
        };
    }
    Ok(out)
}
