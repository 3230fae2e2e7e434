//! Dataset plumbing: bicubic LR generation, a synthetic texture-rich clip
//! generator, and clip-directory ingestion (`clip/hr/%06d.png` +
//! `clip/events.evt1` + `clip/meta.json`).

use std::path::Path;

use ndarray::Array3;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EvError, Result};
use crate::evaluation::{texture_magnitude, TEXTURE_ALPHA};
use crate::events::{
    downsample_voxel, normalize_voxel, simulate_events, voxelize, Event, EventStream,
    SimulatorConfig, VoxelGrid,
};
use crate::imageops::{bicubic_resize, translate_bilinear, FrameSequence, Image};
use crate::io;

/// One clip with everything the trainer consumes: HR/LR frames, per-interval
/// HR event streams, and normalized LR voxel grids.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub name: String,
    pub hr_frames: FrameSequence,
    pub lr_frames: FrameSequence,
    pub hr_events: Vec<EventStream>,
    pub lr_voxels: Vec<VoxelGrid>,
    pub texture_magnitude: f64,
}

/// Synthetic pattern families standing in for real texture-rich footage.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Checkerboard,
    PerlinTexture,
    MovingText,
}

impl std::str::FromStr for SynthKind {
    type Err = EvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(SynthKind::Checkerboard),
            "perlin-texture" | "perlin" => Ok(SynthKind::PerlinTexture),
            "moving-text" | "text" => Ok(SynthKind::MovingText),
            other => Err(EvError::invalid(format!("unknown synth kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// (vx, vy) pixels per frame
    pub velocity: (f64, f64),
    pub seed: u64,
    pub scale: usize,
    pub bins: usize,
    pub fps: f64,
    /// Checkerboard cell size in HR pixels. Cells should stay resolvable
    /// after downsampling (cell >= 2 * scale) for a learnable task.
    pub cell: usize,
    pub simulator: SimulatorConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Checkerboard,
            frames: 5,
            height: 128,
            width: 128,
            velocity: (1.0, 0.0),
            seed: 0,
            scale: 4,
            bins: 5,
            fps: 25.0,
            cell: 8,
            simulator: SimulatorConfig::default(),
        }
    }
}

/// Bicubic downsampling of a frame sequence (Catmull-Rom, antialiased) —
/// the same kernel used for per-bin voxel downsampling.
pub fn make_lr(hr: &FrameSequence, scale: usize) -> Result<FrameSequence> {
    if hr.is_empty() {
        return Err(EvError::invalid("empty sequence"));
    }
    let (_, h, w) = hr.frame_dim();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(EvError::invalid(format!("{h}x{w} not divisible by scale {scale}")));
    }
    let frames = hr
        .frames
        .iter()
        .map(|f| bicubic_resize(f, h / scale, w / scale))
        .collect();
    FrameSequence::new(frames, hr.fps)
}

/// Quantize to the 8-bit grid, matching what PNG export will store.
fn quantize(img: &Image) -> Image {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn render_checkerboard(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Image {
    // square cells with per-cell brightness jitter for texture richness
    let (ch, cw) = (h.div_ceil(cell), w.div_ceil(cell));
    let jitter = Array3::from_shape_fn((1, ch, cw), |_| rng.random_range(-0.12..0.12));
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let (cy, cx) = (y / cell, x / cell);
        let base = if (cy + cx) % 2 == 0 { 0.85 } else { 0.15 };
        let v: f64 = base + jitter[[0, cy, cx]];
        let tint = match c {
            0 => 1.0,
            1 => 0.95,
            _ => 0.9,
        };
        (v * tint).clamp(0.0, 1.0)
    })
}

fn render_value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    // multi-octave bilinear value noise (perlin-style texture)
    let mut plane = ndarray::Array2::<f64>::zeros((h, w));
    let mut amp = 0.5;
    for octave in 0..4 {
        let step = (16 >> octave).max(2);
        let (gh, gw) = (h / step + 2, w / step + 2);
        let lattice = ndarray::Array2::from_shape_fn((gh, gw), |_| rng.random_range(0.0..1.0));
        for y in 0..h {
            let fy = y as f64 / step as f64;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / step as f64;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let a = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
                let b = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
                plane[[y, x]] += amp * (a * (1.0 - ty) + b * ty);
            }
        }
        amp *= 0.5;
    }
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let v = plane[[y, x]].clamp(0.0, 1.0);
        match c {
            0 => v,
            1 => (v * 0.8 + 0.1).clamp(0.0, 1.0),
            _ => (1.0 - v * 0.6).clamp(0.0, 1.0),
        }
    })
}

fn render_text(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    // bright glyph-like strokes on a dark background
    let mut img = Array3::from_elem((3, h, w), 0.08);
    let glyphs = (h * w) / 256;
    for _ in 0..glyphs.max(4) {
        let gy = rng.random_range(0..h.saturating_sub(8).max(1));
        let gx = rng.random_range(0..w.saturating_sub(6).max(1));
        let vertical = rng.random_range(0..2) == 0;
        let len = rng.random_range(4..8);
        let lum = rng.random_range(0.7..1.0);
        for i in 0..len {
            let (y, x) = if vertical { (gy + i, gx) } else { (gy, gx + i) };
            if y < h && x < w {
                for c in 0..3 {
                    img[[c, y, x]] = lum;
                }
                // 2-px stroke width
                let (y2, x2) = if vertical { (y, (x + 1).min(w - 1)) } else { ((y + 1).min(h - 1), x) };
                for c in 0..3 {
                    img[[c, y2, x2]] = lum;
                }
            }
        }
    }
    img
}

/// Split a stream at frame timestamps into `T-1` interval streams:
/// `[t_i, t_{i+1})`, with the final interval closed on the right.
pub fn split_events(stream: &EventStream, timestamps: &[f64]) -> Result<Vec<EventStream>> {
    if timestamps.len() < 2 {
        return Err(EvError::invalid("need at least two frame timestamps"));
    }
    let n = timestamps.len() - 1;
    let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); n];
    for e in &stream.events {
        let idx = if e.t >= timestamps[n] {
            if e.t == timestamps[n] { Some(n - 1) } else { None }
        } else {
            // linear scan is fine at desk scale
            (0..n).find(|&i| e.t >= timestamps[i] && e.t < timestamps[i + 1])
        };
        if let Some(i) = idx {
            buckets[i].push(*e);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, events)| {
            EventStream::new(events, stream.width, stream.height, timestamps[i], timestamps[i + 1])
        })
        .collect()
}

/// Voxelize, spatially downsample, and normalize one interval stream.
pub fn interval_voxel(stream: &EventStream, bins: usize, scale: usize) -> Result<VoxelGrid> {
    let hr = voxelize(stream, bins)?;
    let lr = downsample_voxel(&hr, scale)?;
    normalize_voxel(&lr)
}

/// Render a translating textured clip and build the complete record:
/// HR frames (8-bit quantized), simulated events, LR frames, LR voxels.
pub fn synth_clip(cfg: &SynthConfig) -> Result<ClipRecord> {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    if t < 2 {
        return Err(EvError::invalid("need at least two frames"));
    }
    if cfg.cell == 0 {
        return Err(EvError::invalid("checkerboard cell must be positive"));
    }
    if h % (4 * cfg.scale) != 0 || w % (4 * cfg.scale) != 0 {
        return Err(EvError::invalid(format!(
            "{h}x{w} must be divisible by 4*scale = {}",
            4 * cfg.scale
        )));
    }
    let (vx, vy) = cfg.velocity;
    if vx.abs() > 4.0 || vy.abs() > 4.0 {
        return Err(EvError::invalid("|velocity| must be <= 4 px/frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = match cfg.kind {
        SynthKind::Checkerboard => render_checkerboard(&mut rng, h, w, cfg.cell),
        SynthKind::PerlinTexture => render_value_noise(&mut rng, h, w),
        SynthKind::MovingText => render_text(&mut rng, h, w),
    };
    let frames: Vec<Image> = (0..t)
        .map(|i| quantize(&translate_bilinear(&base, vx * i as f64, vy * i as f64)))
        .collect();
    let hr_frames = FrameSequence::new(frames, cfg.fps)?;

    let mut sim = cfg.simulator.clone();
    sim.rng_seed = cfg.seed ^ 0x5eed;
    let stream = simulate_events(&hr_frames, &sim)?;
    let timestamps: Vec<f64> = (0..t).map(|i| hr_frames.timestamp(i)).collect();
    let hr_events = split_events(&stream, &timestamps)?;
    let lr_voxels = hr_events
        .iter()
        .map(|s| interval_voxel(s, cfg.bins, cfg.scale))
        .collect::<Result<Vec<_>>>()?;
    let lr_frames = make_lr(&hr_frames, cfg.scale)?;
    let tm = texture_magnitude(&hr_frames, TEXTURE_ALPHA)?.magnitude;

    Ok(ClipRecord {
        name: format!("{:?}-{}", cfg.kind, cfg.seed).to_lowercase(),
        hr_frames,
        lr_frames,
        hr_events,
        lr_voxels,
        texture_magnitude: tm,
    })
}

/// Clip directory metadata.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct ClipMeta {
    pub fps: f64,
    pub scale: usize,
}

/// Write a clip to the standard layout: `dir/hr/%06d.png`,
/// `dir/events.evt1` (all intervals merged), `dir/meta.json`.
pub fn write_clip(dir: &Path, clip: &ClipRecord, scale: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EvError::io(dir, e))?;
    io::save_frame_dir(&dir.join("hr"), &clip.hr_frames)?;
    let mut events: Vec<Event> = Vec::new();
    let (mut width, mut height) = (1u16, 1u16);
    for s in &clip.hr_events {
        events.extend_from_slice(&s.events);
        width = s.width;
        height = s.height;
    }
    events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    let (t0, t1) = match (events.first(), events.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0.0, 0.0),
    };
    let merged = EventStream::new(events, width, height, t0, t1)?;
    io::write_evt1(&dir.join("events.evt1"), &merged)?;
    let meta = ClipMeta { fps: clip.hr_frames.fps, scale };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(dir.join("meta.json"), json).map_err(|e| EvError::io(dir.join("meta.json"), e))?;
    Ok(())
}

/// Load frames + events, split events at frame timestamps, voxelize and
/// normalize each interval, and downsample frames and voxels. Intervals
/// without events produce zero voxels and a warning on stderr.
pub fn ingest_clip(
    frame_dir: &Path,
    event_file: &Path,
    scale: usize,
    bins: usize,
    fps: f64,
) -> Result<ClipRecord> {
    let hr_frames = io::load_frame_dir(frame_dir, fps)?;
    if hr_frames.len() < 2 {
        return Err(EvError::invalid("a clip needs at least two frames"));
    }
    let stream = io::read_evt1(event_file)?;
    let timestamps: Vec<f64> = (0..hr_frames.len()).map(|i| hr_frames.timestamp(i)).collect();
    let hr_events = split_events(&stream, &timestamps)?;
    for (i, s) in hr_events.iter().enumerate() {
        if s.is_empty() {
            eprintln!(
                "warning: no events in interval {i} [{:.4}, {:.4}] of {}; using a zero voxel",
                timestamps[i],
                timestamps[i + 1],
                event_file.display()
            );
        }
    }
    let lr_voxels = hr_events
        .iter()
        .map(|s| interval_voxel(s, bins, scale))
        .collect::<Result<Vec<_>>>()?;
    let lr_frames = make_lr(&hr_frames, scale)?;
    let tm = texture_magnitude(&hr_frames, TEXTURE_ALPHA)?.magnitude;
    let name = frame_dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("clip")
        .to_string();
    Ok(ClipRecord { name, hr_frames, lr_frames, hr_events, lr_voxels, texture_magnitude: tm })
}

/// Convenience: ingest from the standard clip directory layout.
pub fn ingest_clip_dir(dir: &Path, bins: usize) -> Result<ClipRecord> {
    let meta_path = dir.join("meta.json");
    let meta: ClipMeta = serde_json::from_slice(
        &std::fs::read(&meta_path).map_err(|e| EvError::io(&meta_path, e))?,
    )
    .map_err(|e| EvError::Format { format: "clip meta", reason: e.to_string() })?;
    ingest_clip(&dir.join("hr"), &dir.join("events.evt1"), meta.scale, bins, meta.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn make_lr_constant_and_shapes() {
        let frames = FrameSequence::new(vec![Array3::from_elem((3, 128, 128), 0.42); 2], 25.0).unwrap();
        let lr = make_lr(&frames, 4).unwrap();
        assert_eq!(lr.frame_dim(), (3, 32, 32));
        for v in lr.frames[0].iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
        // non-divisible dims rejected
        let odd = FrameSequence::new(vec![Array3::zeros((3, 30, 30))], 25.0).unwrap();
        assert!(make_lr(&odd, 4).is_err());
    }

    #[test]
    fn synth_static_clip_has_no_events() {
        let cfg = SynthConfig {
            velocity: (0.0, 0.0),
            frames: 3,
            height: 32,
            width: 32,
            scale: 2,
            bins: 3,
            ..Default::default()
        };
        let clip = synth_clip(&cfg).unwrap();
        assert!(clip.hr_events.iter().all(|s| s.is_empty()));
        for t in 1..3 {
            assert_eq!(clip.hr_frames.frames[t], clip.hr_frames.frames[0]);
        }
        // zero-event intervals still yield (zero) voxels of the right shape
        assert_eq!(clip.lr_voxels.len(), 2);
        assert!(clip.lr_voxels[0].bins.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn synth_shape_contract() {
        let cfg = SynthConfig { frames: 5, height: 128, width: 128, scale: 4, ..Default::default() };
        let clip = synth_clip(&cfg).unwrap();
        assert_eq!(clip.lr_frames.len(), 5);
        assert_eq!(clip.lr_frames.frame_dim(), (3, 32, 32));
        assert_eq!(clip.lr_voxels.len(), 4);
        assert_eq!(clip.lr_voxels[0].bins.dim(), (5, 32, 32));
        assert!(clip.lr_voxels.iter().all(|v| v.normalized));
        assert!(!clip.hr_events.iter().all(|s| s.is_empty()), "motion should fire events");
    }

    #[test]
    fn synth_integer_velocity_shift_consistency() {
        let cfg = SynthConfig {
            kind: SynthKind::PerlinTexture,
            velocity: (1.0, 0.0),
            frames: 3,
            height: 64,
            width: 64,
            scale: 2,
            ..Default::default()
        };
        let clip = synth_clip(&cfg).unwrap();
        // frame t shifted by the velocity equals frame t+1 in the interior
        let f0 = &clip.hr_frames.frames[0];
        let f1 = &clip.hr_frames.frames[1];
        for y in 0..64 {
            for x in 1..64 {
                for c in 0..3 {
                    assert!((f1[[c, y, x]] - f0[[c, y, x - 1]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkerboard_beats_its_blur() {
        let cfg = SynthConfig { frames: 3, height: 32, width: 32, scale: 2, bins: 3, ..Default::default() };
        let clip = synth_clip(&cfg).unwrap();
        let blurred: Vec<Image> = clip
            .hr_frames
            .frames
            .iter()
            .map(|f| {
                let mut out = f.clone();
                for c in 0..3 {
                    let plane = f.index_axis(ndarray::Axis(0), c).to_owned();
                    out.index_axis_mut(ndarray::Axis(0), c)
                        .assign(&crate::imageops::gaussian_blur(&plane, 5, 1.5));
                }
                out
            })
            .collect();
        let soft = FrameSequence::new(blurred, 25.0).unwrap();
        let soft_mag = texture_magnitude(&soft, TEXTURE_ALPHA).unwrap().magnitude;
        assert!(clip.texture_magnitude > soft_mag);
    }

    #[test]
    fn split_events_partition() {
        let events = vec![
            Event { x: 0, y: 0, t: 0.00, p: 1 },
            Event { x: 0, y: 0, t: 0.039, p: 1 },
            Event { x: 0, y: 0, t: 0.04, p: -1 },
            Event { x: 0, y: 0, t: 0.08, p: 1 }, // exactly the final timestamp
        ];
        let s = EventStream::new(events, 2, 2, 0.0, 0.08).unwrap();
        let parts = split_events(&s, &[0.0, 0.04, 0.08]).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].len(), 2);
        // boundary event goes to the later interval; the final closed
        // interval keeps the end-timestamp event
        assert_eq!(parts[1].len(), 2);
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, s.len());
    }

    #[test]
    fn ingest_round_trip_matches_synth() {
        let cfg = SynthConfig {
            frames: 3,
            height: 64,
            width: 64,
            scale: 2,
            bins: 3,
            seed: 9,
            ..Default::default()
        };
        let clip = synth_clip(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("evtx_clip_{}", std::process::id()));
        write_clip(&dir, &clip, cfg.scale).unwrap();
        let back = ingest_clip_dir(&dir, cfg.bins).unwrap();
        assert_eq!(back.lr_frames.len(), clip.lr_frames.len());
        for (a, b) in back.lr_frames.frames.iter().zip(clip.lr_frames.frames.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "LR frames differ after round trip");
            }
        }
        for (a, b) in back.lr_voxels.iter().zip(clip.lr_voxels.iter()) {
            for (x, y) in a.bins.iter().zip(b.bins.iter()) {
                assert!((x - y).abs() < 1e-9, "voxels differ after round trip");
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn events_outside_span_yield_zero_voxels() {
        let dir = std::env::temp_dir().join(format!("evtx_outside_{}", std::process::id()));
        let frames = FrameSequence::new(vec![Array3::from_elem((3, 16, 16), 0.5); 3], 25.0).unwrap();
        io::save_frame_dir(&dir.join("hr"), &frames).unwrap();
        // all events after the last frame timestamp (2/25 s)
        let events = vec![
            Event { x: 0, y: 0, t: 5.0, p: 1 },
            Event { x: 1, y: 1, t: 6.0, p: -1 },
        ];
        let s = EventStream::new(events, 16, 16, 5.0, 6.0).unwrap();
        io::write_evt1(&dir.join("events.evt1"), &s).unwrap();
        let clip = ingest_clip(&dir.join("hr"), &dir.join("events.evt1"), 2, 3, 25.0).unwrap();
        assert_eq!(clip.lr_voxels.len(), 2);
        for v in &clip.lr_voxels {
            assert!(v.bins.iter().all(|x| *x == 0.0));
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
