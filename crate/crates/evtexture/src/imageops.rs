//! Image buffers and the resampling/filtering primitives shared across the
//! pipeline. Frames are channel-first `(C, H, W)` arrays of `f64` in `[0,1]`.

use ndarray::{Array2, Array3};

use crate::error::{EvError, Result};

pub type Image = Array3<f64>;

/// A time-ordered sequence of frames with frame-rate metadata.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, fps: f64) -> Result<Self> {
        if let Some(first) = frames.first() {
            let dim = first.dim();
            if frames.iter().any(|f| f.dim() != dim) {
                return Err(EvError::invalid("frames have inconsistent shapes"));
            }
        }
        if !(fps > 0.0) {
            return Err(EvError::invalid("fps must be positive"));
        }
        Ok(FrameSequence { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(C, H, W)` of one frame.
    pub fn frame_dim(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    /// Timestamp of frame `t` in seconds.
    pub fn timestamp(&self, t: usize) -> f64 {
        t as f64 / self.fps
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps for one axis of a separable bicubic resample.
/// Downscaling widens the kernel (antialias prefilter); weights are
/// normalized so constants are preserved exactly.
fn bicubic_taps(src: usize, dst: usize) -> Vec<(isize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = if scale > 1.0 { 2.0 * scale } else { 2.0 };
    let kscale = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = cubic_kernel((i as f64 - center) / kscale);
                weights.push(w);
                sum += w;
            }
            for w in &mut weights {
                *w /= sum;
            }
            (lo, weights)
        })
        .collect()
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn resample_axis_rows(img: &Array2<f64>, dst: usize) -> Array2<f64> {
    // resamples axis 0 (rows)
    let (h, w) = img.dim();
    let taps = bicubic_taps(h, dst);
    let mut out = Array2::zeros((dst, w));
    for (oy, (lo, weights)) in taps.iter().enumerate() {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &wt) in weights.iter().enumerate() {
                acc += wt * img[[clamp_idx(lo + j as isize, h), x]];
            }
            out[[oy, x]] = acc;
        }
    }
    out
}

/// Separable bicubic resampling of a `(C,H,W)` image to `(C, oh, ow)`.
/// The same routine serves frame up/downscaling and per-bin voxel
/// downscaling, keeping the two pipelines on one kernel.
pub fn bicubic_resize(img: &Image, oh: usize, ow: usize) -> Image {
    let c = img.dim().0;
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ci).to_owned();
        let rows = resample_axis_rows(&plane, oh);
        let cols = resample_axis_rows(&rows.t().to_owned(), ow);
        out.index_axis_mut(ndarray::Axis(0), ci).assign(&cols.t());
    }
    out
}

/// 2D Gaussian blur with reflect padding.
pub fn gaussian_blur(plane: &Array2<f64>, ksize: usize, sigma: f64) -> Array2<f64> {
    assert!(ksize % 2 == 1, "kernel size must be odd");
    let r = (ksize / 2) as isize;
    let mut kernel = Vec::with_capacity(ksize);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (h, w) = plane.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[[y, reflect(x as isize + j as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(y as isize + j as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// BT.601 full-swing luma on `[0,1]` inputs: (65.481 R + 128.553 G + 24.966 B + 16) / 255.
pub fn rgb_to_y(img: &Image) -> Array2<f64> {
    let (c, h, w) = img.dim();
    if c == 1 {
        return img.index_axis(ndarray::Axis(0), 0).to_owned();
    }
    assert_eq!(c, 3, "expected 1 or 3 channels");
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            out[[y, x]] = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0;
        }
    }
    out
}

/// Mirror a `(C,H,W)` image along the horizontal (x) axis.
pub fn flip_h(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Mirror a `(C,H,W)` image along the vertical (y) axis.
pub fn flip_v(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

/// Shift an image by a subpixel offset with bilinear sampling and edge clamp.
pub fn translate_bilinear(img: &Image, dx: f64, dy: f64) -> Image {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for x in 0..w {
            let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            for ci in 0..c {
                let a = img[[ci, y0, x0]] * (1.0 - wx) + img[[ci, y0, x1]] * wx;
                let b = img[[ci, y1, x0]] * (1.0 - wx) + img[[ci, y1, x1]] * wx;
                out[[ci, y, x]] = a * (1.0 - wy) + b * wy;
            }
        }
    }
    out
}

/// Linear-interpolation percentile (`q` in `[0,100]`) of a value list.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn bicubic_constant_preserved() {
        let img = Array3::from_elem((3, 16, 16), 0.37);
        let out = bicubic_resize(&img, 4, 4);
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_shape_contract() {
        let img = Array3::zeros((3, 128, 128));
        let out = bicubic_resize(&img, 32, 32);
        assert_eq!(out.dim(), (3, 32, 32));
    }

    #[test]
    fn bicubic_ramp_midpoint() {
        // downsampling a linear ramp keeps the midpoint of the endpoints
        let w = 64;
        let mut img = Array3::zeros((1, 8, w));
        for x in 0..w {
            let v = x as f64 / (w - 1) as f64;
            img.slice_mut(ndarray::s![0, .., x]).fill(v);
        }
        let out = bicubic_resize(&img, 8, 16);
        let mid = (out[[0, 4, 7]] + out[[0, 4, 8]]) / 2.0;
        assert!((mid - 0.5).abs() < 1e-3, "midpoint {mid}");
    }

    #[test]
    fn blur_constant_is_identity() {
        let plane = ndarray::Array2::from_elem((10, 10), 0.8);
        let out = gaussian_blur(&plane, 5, 1.5);
        for v in out.iter() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_single_value() {
        let mut vals = vec![4.0];
        assert_eq!(percentile(&mut vals, 98.0), 4.0);
    }

    #[test]
    fn flip_is_involution() {
        let img = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64);
        assert_eq!(flip_h(&flip_h(&img)), img);
        assert_eq!(flip_v(&flip_v(&img)), img);
    }
}
