//! Event data model, ESIM-style event simulation from frame sequences, and
//! voxel-grid construction/normalization.

use ndarray::Array3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EvError, Result};
use crate::imageops::{bicubic_resize, percentile, rgb_to_y, FrameSequence};

/// One brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// seconds
    pub t: f64,
    /// +1 or -1
    pub p: i8,
}

/// Time-ordered events with spatial bounds.
#[derive(Clone, Debug)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub t_start: f64,
    pub t_end: f64,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u16, height: u16, t_start: f64, t_end: f64) -> Result<Self> {
        for pair in events.windows(2) {
            if pair[1].t < pair[0].t {
                return Err(EvError::invalid("events not sorted by timestamp"));
            }
        }
        for e in &events {
            if e.x >= width || e.y >= height {
                return Err(EvError::invalid(format!(
                    "event at ({}, {}) outside {}x{}",
                    e.x, e.y, width, height
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(EvError::invalid(format!("polarity {} not in {{+1, -1}}", e.p)));
            }
            if e.t < t_start || e.t > t_end {
                return Err(EvError::invalid("event timestamp outside stream span"));
            }
        }
        Ok(EventStream { events, width, height, t_start, t_end })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Signed event mass binned over `B` temporal bins.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    /// `(B, H, W)`
    pub bins: Array3<f64>,
    pub normalized: bool,
    /// 98th-percentile clip level used at normalization time.
    pub eta: Option<f64>,
}

impl VoxelGrid {
    pub fn num_bins(&self) -> usize {
        self.bins.dim().0
    }
}

/// Event simulator configuration. Per-pixel contrast thresholds are drawn
/// from a Gaussian and clamped to at least 0.01.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SimulatorConfig {
    pub contrast_mean: f64,
    pub contrast_std: f64,
    pub interp_steps: u32,
    pub log_eps: f64,
    pub rng_seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            contrast_mean: 1.0,
            contrast_std: 0.1,
            interp_steps: 8,
            log_eps: 1e-3,
            rng_seed: 0,
        }
    }
}

const MIN_THRESHOLD: f64 = 0.01;

/// Simulate an event stream from a frame sequence.
///
/// Per pixel, a reference log-intensity tracks the signal; intensity is
/// linearly interpolated in log space over `interp_steps` sub-steps between
/// consecutive frames, and one event is emitted per threshold crossing with
/// its timestamp linearly interpolated within the sub-step.
pub fn simulate_events(frames: &FrameSequence, cfg: &SimulatorConfig) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(EvError::invalid("simulation needs at least two frames"));
    }
    if !(cfg.contrast_mean > 0.0) || cfg.contrast_std < 0.0 {
        return Err(EvError::invalid("contrast_mean must be > 0 and contrast_std >= 0"));
    }
    if cfg.interp_steps < 1 {
        return Err(EvError::invalid("interp_steps must be >= 1"));
    }
    for f in &frames.frames {
        if f.iter().any(|v| !v.is_finite()) {
            return Err(EvError::invalid("non-finite pixel values"));
        }
    }

    let (_, h, w) = frames.frame_dim();
    let luma: Vec<_> = frames.frames.iter().map(rgb_to_y).collect();

    // per-pixel thresholds, row-major, deterministic in rng_seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let normal = Normal::new(cfg.contrast_mean, cfg.contrast_std)
        .map_err(|e| EvError::invalid(format!("bad threshold distribution: {e}")))?;
    let thresholds: Vec<f64> = (0..h * w)
        .map(|_| normal.sample(&mut rng).max(MIN_THRESHOLD))
        .collect();

    let t_end = frames.timestamp(frames.len() - 1);
    let mut events: Vec<Event> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = thresholds[y * w + x];
            let mut ref_l = (luma[0][[y, x]] + cfg.log_eps).ln();
            for k in 0..frames.len() - 1 {
                let la_frame = (luma[k][[y, x]] + cfg.log_eps).ln();
                let lb_frame = (luma[k + 1][[y, x]] + cfg.log_eps).ln();
                let (ta_frame, tb_frame) = (frames.timestamp(k), frames.timestamp(k + 1));
                for j in 0..cfg.interp_steps {
                    let fa = j as f64 / cfg.interp_steps as f64;
                    let fb = (j + 1) as f64 / cfg.interp_steps as f64;
                    let la = la_frame + (lb_frame - la_frame) * fa;
                    let lb = la_frame + (lb_frame - la_frame) * fb;
                    let ta = ta_frame + (tb_frame - ta_frame) * fa;
                    let tb = ta_frame + (tb_frame - ta_frame) * fb;
                    if lb > la {
                        while lb - ref_l >= c {
                            let lc = ref_l + c;
                            let t = ta + (tb - ta) * (lc - la) / (lb - la);
                            events.push(Event { x: x as u16, y: y as u16, t, p: 1 });
                            ref_l = lc;
                        }
                    } else if lb < la {
                        while ref_l - lb >= c {
                            let lc = ref_l - c;
                            let t = ta + (tb - ta) * (la - lc) / (la - lb);
                            events.push(Event { x: x as u16, y: y as u16, t, p: -1 });
                            ref_l = lc;
                        }
                    }
                }
            }
        }
    }
    events.sort_by(|a, b| {
        (a.t, a.y, a.x, a.p)
            .partial_cmp(&(b.t, b.y, b.x, b.p))
            .unwrap()
    });
    EventStream::new(events, w as u16, h as u16, 0.0, t_end)
}

/// Bin an event stream into a `B x H x W` voxel grid with a triangular
/// (bilinear-in-time) kernel. An empty stream yields an all-zero grid.
pub fn voxelize(stream: &EventStream, num_bins: usize) -> Result<VoxelGrid> {
    if num_bins < 2 {
        return Err(EvError::invalid("voxelize needs B >= 2"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut bins = Array3::<f64>::zeros((num_bins, h, w));
    if stream.is_empty() {
        return Ok(VoxelGrid { bins, normalized: false, eta: None });
    }
    let t0 = stream.events.first().unwrap().t;
    let tn = stream.events.last().unwrap().t;
    if tn == t0 && stream.len() >= 2 {
        return Err(EvError::DegenerateStream(
            "all events share one timestamp".to_string(),
        ));
    }
    let span = tn - t0;
    for e in &stream.events {
        // scaled time in [0, B-1]; a single-event stream sits at bin 1
        let u = if span > 0.0 { (e.t - t0) / span * (num_bins - 1) as f64 } else { 0.0 };
        for i in 0..num_bins {
            let wgt = (1.0 - (i as f64 - u).abs()).max(0.0);
            if wgt > 0.0 {
                bins[[i, e.y as usize, e.x as usize]] += e.p as f64 * wgt;
            }
        }
    }
    Ok(VoxelGrid { bins, normalized: false, eta: None })
}

/// Clip a voxel grid at the 98th percentile of its non-zero magnitudes and
/// rescale to `[-1, 1]`. An all-zero grid passes through unchanged.
pub fn normalize_voxel(grid: &VoxelGrid) -> Result<VoxelGrid> {
    if grid.normalized {
        return Err(EvError::invalid("grid is already normalized"));
    }
    let mut nonzero: Vec<f64> = grid.bins.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    if nonzero.is_empty() {
        return Ok(VoxelGrid { bins: grid.bins.clone(), normalized: true, eta: None });
    }
    let eta = percentile(&mut nonzero, 98.0);
    let bins = grid.bins.mapv(|v| v.clamp(-eta, eta) / eta);
    Ok(VoxelGrid { bins, normalized: true, eta: Some(eta) })
}

/// Bicubic per-bin spatial downsampling of a voxel grid; the kernel is the
/// one used for frame downsampling.
pub fn downsample_voxel(grid: &VoxelGrid, scale: usize) -> Result<VoxelGrid> {
    let (b, h, w) = grid.bins.dim();
    if h % scale != 0 || w % scale != 0 {
        return Err(EvError::invalid("voxel dims not divisible by scale"));
    }
    let mut bins = Array3::zeros((b, h / scale, w / scale));
    for i in 0..b {
        let plane = grid
            .bins
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        let small = bicubic_resize(&plane, h / scale, w / scale);
        bins.index_axis_mut(ndarray::Axis(0), i)
            .assign(&small.index_axis(ndarray::Axis(0), 0));
    }
    Ok(VoxelGrid { bins, normalized: grid.normalized, eta: grid.eta })
}
