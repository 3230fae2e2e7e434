//! Quantitative metrics: PSNR and SSIM with Y/RGB channel modes and border
//! cropping, the texture-magnitude score with difficulty bucketing, and
//! temporal-profile extraction.

use ndarray::{Array2, Array3};

use crate::error::{EvError, Result};
use crate::imageops::{gaussian_blur, rgb_to_y, FrameSequence, Image};

/// Channel convention for metric computation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum ChannelMode {
    Y,
    #[serde(rename = "RGB")]
    Rgb,
}

impl std::str::FromStr for ChannelMode {
    type Err = EvError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "Y" => Ok(ChannelMode::Y),
            "RGB" => Ok(ChannelMode::Rgb),
            other => Err(EvError::invalid(format!("unknown channel mode {other:?}"))),
        }
    }
}

/// JSON mapping for the +inf PSNR sentinel: infinity <-> null.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct FrameMetrics {
    #[serde(with = "inf_as_null")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-clip PSNR/SSIM report.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub clip: String,
    pub per_frame: Vec<FrameMetrics>,
    #[serde(with = "inf_as_null")]
    pub psnr: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
    pub border_crop: usize,
}

/// Texture difficulty levels (corpus-relative; Appendix-F style split).
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureLevel {
    Easy,
    Medium,
    Hard,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TextureReport {
    pub magnitude: f64,
    pub per_frame_contrast: Vec<f64>,
    pub level: Option<TextureLevel>,
    /// true when the raw score exceeded 1 and was clamped
    pub clamped: bool,
}

fn crop_border(img: &Image, border: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if 2 * border >= h || 2 * border >= w {
        return Err(EvError::invalid(format!(
            "border crop {border} leaves no pixels in a {h}x{w} frame"
        )));
    }
    Ok(img.slice(ndarray::s![.., border..h - border, border..w - border]).to_owned())
}

/// Collapse to the comparison planes: one Y plane or three RGB planes.
fn metric_planes(img: &Image, mode: ChannelMode) -> Vec<Array2<f64>> {
    match mode {
        ChannelMode::Y => vec![rgb_to_y(img)],
        ChannelMode::Rgb => (0..img.dim().0)
            .map(|c| img.index_axis(ndarray::Axis(0), c).to_owned())
            .collect(),
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs return `+inf`.
pub fn psnr(pred: &Image, gt: &Image, mode: ChannelMode, border: usize) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(EvError::invalid("psnr shape mismatch"));
    }
    let p = crop_border(pred, border)?;
    let g = crop_border(gt, border)?;
    let pp = metric_planes(&p, mode);
    let gp = metric_planes(&g, mode);
    let mut se = 0.0;
    let mut n = 0usize;
    for (a, b) in pp.iter().zip(gp.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            let d = x - y;
            se += d * d;
            n += 1;
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Single-scale SSIM: 11x11 Gaussian window, sigma 1.5, C1=(0.01)^2,
/// C2=(0.03)^2 on the unit peak; mean over the full (reflect-padded) map.
pub fn ssim(pred: &Image, gt: &Image, mode: ChannelMode) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(EvError::invalid("ssim shape mismatch"));
    }
    let (_, h, w) = pred.dim();
    if h < 11 || w < 11 {
        return Err(EvError::invalid("image smaller than the 11x11 SSIM window"));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let blur = |p: &Array2<f64>| gaussian_blur(p, 11, 1.5);
    let pp = metric_planes(pred, mode);
    let gp = metric_planes(gt, mode);
    let mut acc = 0.0;
    for (x, y) in pp.iter().zip(gp.iter()) {
        let mu_x = blur(x);
        let mu_y = blur(y);
        let xx = blur(&(x * x));
        let yy = blur(&(y * y));
        let xy = blur(&(x * y));
        let mut sum = 0.0;
        for i in 0..x.len() {
            let (mx, my) = (mu_x.as_slice().unwrap()[i], mu_y.as_slice().unwrap()[i]);
            let vx = xx.as_slice().unwrap()[i] - mx * mx;
            let vy = yy.as_slice().unwrap()[i] - my * my;
            let cxy = xy.as_slice().unwrap()[i] - mx * my;
            sum += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
        acc += sum / x.len() as f64;
    }
    Ok(acc / pp.len() as f64)
}

/// PSNR + SSIM over a clip, with per-frame detail.
pub fn evaluate_clip(
    name: &str,
    pred: &FrameSequence,
    gt: &FrameSequence,
    mode: ChannelMode,
    border: usize,
) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvError::invalid("clip length mismatch or empty clip"));
    }
    let mut per_frame = Vec::with_capacity(pred.len());
    for (p, g) in pred.frames.iter().zip(gt.frames.iter()) {
        per_frame.push(FrameMetrics {
            psnr: psnr(p, g, mode, border)?,
            ssim: ssim(p, g, mode)?,
        });
    }
    let n = per_frame.len() as f64;
    let psnr_mean = per_frame.iter().map(|x| x.psnr).sum::<f64>() / n;
    let ssim_mean = per_frame.iter().map(|x| x.ssim).sum::<f64>() / n;
    Ok(MetricReport {
        clip: name.to_string(),
        per_frame,
        psnr: psnr_mean,
        ssim: ssim_mean,
        channel_mode: mode,
        border_crop: border,
    })
}

/// Clip-level texture magnitude: per frame, the RMS contrast between the
/// luma plane and its 5x5 sigma-1.5 Gaussian blur; averaged over frames,
/// scaled by `alpha` and clamped to `[0,1]`.
pub fn texture_magnitude(frames: &FrameSequence, alpha: f64) -> Result<TextureReport> {
    if frames.is_empty() {
        return Err(EvError::invalid("texture magnitude of an empty clip"));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in &frames.frames {
        let luma = rgb_to_y(f);
        let blurred = gaussian_blur(&luma, 5, 1.5);
        let ms = luma
            .iter()
            .zip(blurred.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / luma.len() as f64;
        per_frame.push(ms.sqrt());
    }
    let raw = alpha * per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let clamped = raw > 1.0;
    Ok(TextureReport {
        magnitude: raw.min(1.0),
        per_frame_contrast: per_frame,
        level: None,
        clamped,
    })
}

pub const TEXTURE_ALPHA: f64 = 10.0;

/// Corpus-relative difficulty split: sorted ascending, bottom 50% easy,
/// next 30% medium, top 20% hard. Returns one level per input, in input
/// order.
pub fn bucket_levels(magnitudes: &[f64]) -> Result<Vec<TextureLevel>> {
    if magnitudes.is_empty() {
        return Err(EvError::invalid("cannot bucket an empty corpus"));
    }
    let n = magnitudes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| magnitudes[a].partial_cmp(&magnitudes[b]).unwrap());
    let easy_end = (n as f64 * 0.5).round() as usize;
    let medium_end = (n as f64 * 0.8).round() as usize;
    let mut out = vec![TextureLevel::Easy; n];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = if rank < easy_end {
            TextureLevel::Easy
        } else if rank < medium_end {
            TextureLevel::Medium
        } else {
            TextureLevel::Hard
        };
    }
    Ok(out)
}

/// Stack one pixel column from each frame into a `(C, T, H)` image (time on
/// the vertical axis).
pub fn temporal_profile(frames: &FrameSequence, column: usize) -> Result<Image> {
    if frames.is_empty() {
        return Err(EvError::invalid("temporal profile of an empty clip"));
    }
    let (c, h, w) = frames.frame_dim();
    if column >= w {
        return Err(EvError::invalid(format!("column {column} out of range (W={w})")));
    }
    let t = frames.len();
    let mut out = Array3::zeros((c, t, h));
    for (ti, f) in frames.frames.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                out[[ci, ti, y]] = f[[ci, y, column]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::RngExt;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_img(v: f64) -> Image {
        Array3::from_elem((3, 32, 32), v)
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = const_img(0.5);
        assert_eq!(psnr(&a, &a, ChannelMode::Rgb, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        // 0.1 offset in all channels: MSE = 0.01 -> exactly 20 dB
        let a = const_img(0.5);
        let b = const_img(0.6);
        let v = psnr(&a, &b, ChannelMode::Rgb, 0).unwrap();
        assert!((v - 20.0).abs() < 0.01, "got {v}");
    }

    #[test]
    fn psnr_border_crop_evaluates_interior() {
        // difference confined to an 8-px border vanishes under border=8
        let gt = const_img(0.5);
        let mut pred = gt.clone();
        for y in 0..32 {
            for x in 0..32 {
                if y < 8 || y >= 24 || x < 8 || x >= 24 {
                    pred[[0, y, x]] = 0.9;
                }
            }
        }
        assert_eq!(psnr(&pred, &gt, ChannelMode::Rgb, 8).unwrap(), f64::INFINITY);
        assert!(psnr(&pred, &gt, ChannelMode::Rgb, 0).unwrap() < 30.0);
    }

    #[test]
    fn psnr_symmetry_and_y_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0..1.0));
        let b = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0..1.0));
        for mode in [ChannelMode::Rgb, ChannelMode::Y] {
            let ab = psnr(&a, &b, mode, 0).unwrap();
            let ba = psnr(&b, &a, mode, 0).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
        // Y mode differs from RGB mode on chromatic differences
        let mut c = a.clone();
        c.index_axis_mut(ndarray::Axis(0), 0).mapv_inplace(|v| (v + 0.2).min(1.0));
        let y = psnr(&c, &a, ChannelMode::Y, 0).unwrap();
        let rgb = psnr(&c, &a, ChannelMode::Rgb, 0).unwrap();
        assert!(y > rgb, "Y-mode PSNR should exceed RGB for red-only error");
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(0.0..1.0));
        assert_eq!(ssim(&a, &a, ChannelMode::Y).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        // zero variance everywhere: SSIM = (2 m1 m2 + C1)/(m1^2 + m2^2 + C1)
        let a = const_img(0.3);
        let b = const_img(0.7);
        let got = ssim(&a, &b, ChannelMode::Rgb).unwrap();
        let (m1, m2) = (0.3, 0.7);
        let c1 = 0.0001;
        let expected = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
    }

    #[test]
    fn ssim_inverted_checkerboard_is_low() {
        let gt = Array3::from_shape_fn((1, 32, 32), |(_, y, _)| if y < 16 { 0.0 } else { 1.0 });
        let inv = gt.mapv(|v| 1.0 - v);
        let v = ssim(&inv, &gt, ChannelMode::Y).unwrap();
        assert!(v < 0.2, "got {v}");
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Array3::zeros((3, 8, 8));
        assert!(ssim(&a, &a, ChannelMode::Y).is_err());
    }

    #[test]
    fn texture_magnitude_constant_is_zero() {
        let frames = FrameSequence::new(vec![const_img(0.4); 3], 25.0).unwrap();
        let r = texture_magnitude(&frames, TEXTURE_ALPHA).unwrap();
        assert_eq!(r.magnitude, 0.0);
        assert!(!r.clamped);
    }

    #[test]
    fn texture_magnitude_matches_scalar_oracle() {
        // independent per-pixel evaluation of the same formula
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Image> = (0..3)
            .map(|_| Array3::from_shape_fn((3, 12, 12), |_| rng.random_range(0.0..1.0)))
            .collect();
        let seq = FrameSequence::new(frames.clone(), 25.0).unwrap();
        let got = texture_magnitude(&seq, TEXTURE_ALPHA).unwrap();

        let mut acc = 0.0;
        for f in &frames {
            let luma = rgb_to_y(f);
            let blurred = gaussian_blur(&luma, 5, 1.5);
            let mut ms = 0.0;
            for (a, b) in luma.iter().zip(blurred.iter()) {
                ms += (a - b).powi(2);
            }
            acc += (ms / luma.len() as f64).sqrt();
        }
        let expected = (TEXTURE_ALPHA * acc / 3.0).min(1.0);
        assert!((got.magnitude - expected).abs() < 1e-9);
    }

    #[test]
    fn texture_magnitude_flip_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Image> = (0..4)
            .map(|_| Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(0.0..1.0)))
            .collect();
        let seq = FrameSequence::new(frames.clone(), 25.0).unwrap();
        let base = texture_magnitude(&seq, TEXTURE_ALPHA).unwrap().magnitude;

        let mut rev = frames.clone();
        rev.reverse();
        let rev_seq = FrameSequence::new(rev, 25.0).unwrap();
        assert!((texture_magnitude(&rev_seq, TEXTURE_ALPHA).unwrap().magnitude - base).abs() < 1e-12);

        let flipped: Vec<Image> = frames.iter().map(crate::imageops::flip_h).collect();
        let flip_seq = FrameSequence::new(flipped, 25.0).unwrap();
        assert!((texture_magnitude(&flip_seq, TEXTURE_ALPHA).unwrap().magnitude - base).abs() < 1e-9);
    }

    #[test]
    fn checkerboard_beats_blurred_clone() {
        let board = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((x + y) % 2) as f64);
        let blurred_plane = gaussian_blur(&board.index_axis(ndarray::Axis(0), 0).to_owned(), 5, 1.5);
        let blurred = blurred_plane.insert_axis(ndarray::Axis(0));
        let sharp = FrameSequence::new(vec![board; 3], 25.0).unwrap();
        let soft = FrameSequence::new(vec![blurred; 3], 25.0).unwrap();
        let a = texture_magnitude(&sharp, TEXTURE_ALPHA).unwrap();
        let b = texture_magnitude(&soft, TEXTURE_ALPHA).unwrap();
        assert!(a.magnitude > b.magnitude);
    }

    #[test]
    fn bucketing_partition_sizes() {
        for n in [10, 20, 33, 7] {
            let mags: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let levels = bucket_levels(&mags).unwrap();
            let count = |l: TextureLevel| levels.iter().filter(|&&x| x == l).count() as f64;
            let (e, m, h) = (count(TextureLevel::Easy), count(TextureLevel::Medium), count(TextureLevel::Hard));
            assert_eq!(e + m + h, n as f64);
            assert!((e - 0.5 * n as f64).abs() <= 1.0, "easy {e} of {n}");
            assert!((m - 0.3 * n as f64).abs() <= 1.0, "medium {m} of {n}");
            assert!((h - 0.2 * n as f64).abs() <= 1.0, "hard {h} of {n}");
        }
    }

    #[test]
    fn temporal_profile_shapes_and_motion() {
        // static clip: all profile rows identical
        let frames = FrameSequence::new(vec![const_img(0.2); 4], 25.0).unwrap();
        let prof = temporal_profile(&frames, 3).unwrap();
        assert_eq!(prof.dim(), (3, 4, 32));
        for t in 1..4 {
            for y in 0..32 {
                assert_eq!(prof[[0, t, y]], prof[[0, 0, y]]);
            }
        }
        // a horizontal edge translating 1 px/frame traces a diagonal
        let edge: Vec<Image> = (0..5)
            .map(|t| {
                Array3::from_shape_fn((1, 16, 16), |(_, y, _)| if y < 5 + t { 1.0 } else { 0.0 })
            })
            .collect();
        let seq = FrameSequence::new(edge, 25.0).unwrap();
        let prof = temporal_profile(&seq, 8).unwrap();
        for t in 0..5 {
            assert_eq!(prof[[0, t, 5 + t - 1]], 1.0);
            assert_eq!(prof[[0, t, 5 + t]], 0.0);
        }
        // out-of-range column errors
        assert!(temporal_profile(&seq, 99).is_err());
    }

    #[test]
    fn report_json_schema_round_trip() {
        let pred = FrameSequence::new(vec![const_img(0.5); 2], 25.0).unwrap();
        let mut gt_frames = vec![const_img(0.5); 2];
        gt_frames[1][[0, 16, 16]] = 0.9;
        let gt = FrameSequence::new(gt_frames, 25.0).unwrap();
        let report = evaluate_clip("clip0", &pred, &gt, ChannelMode::Y, 8).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.clip, "clip0");
        assert_eq!(back.border_crop, 8);
        assert_eq!(back.per_frame.len(), 2);
    }
}
