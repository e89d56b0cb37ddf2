//! Small single-plane raster helpers shared by the generator and the augmentations.

/// Mirror index into `[0, n)` without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size).map(|i| (-0.5 * ((i as f64 - half) / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with a symmetric odd-length kernel and reflected borders.
pub(crate) fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * src[y * w + reflect(x as isize + i as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[reflect(y as isize + i as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear sample at continuous pixel-centre coordinates with reflected borders.
pub(crate) fn sample_bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| src[reflect(yy, h) * w + reflect(xx, w)];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize (half-pixel centres, no corner alignment) of a sub-window
/// `[top, top + crop_h) x [left, left + crop_w)` to `out_h x out_w`.
pub(crate) fn resize_window(
    src: &[f64],
    h: usize,
    w: usize,
    (top, left, crop_h, crop_w): (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let sy = crop_h / out_h as f64;
    let sx = crop_w / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = top + (oy as f64 + 0.5) * sy - 0.5;
        let y = y.clamp(0.0, (h - 1) as f64);
        for ox in 0..out_w {
            let x = left + (ox as f64 + 0.5) * sx - 0.5;
            let x = x.clamp(0.0, (w - 1) as f64);
            out.push(sample_bilinear(src, h, w, y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(2, 4), 2);
        assert_eq!(reflect(7, 1), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let k = gaussian_kernel(5, 1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = blur_plane(&vec![3.0; 36], 6, 6, &k);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn identity_window_resize() {
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        let out = resize_window(&src, 4, 4, (0.0, 0.0, 4.0, 4.0), 4, 4);
        assert_eq!(out, src);
    }
}
