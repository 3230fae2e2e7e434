//! Loss, optimizer schedule, augmentation, and the desk-scale training loop
//! with CSV metrics and checkpointing.

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ClipRecord;
use crate::error::{EvError, Result};
use crate::evaluation::{psnr, ChannelMode};
use crate::events::VoxelGrid;
use crate::imageops::{flip_h, flip_v, FrameSequence};
use crate::io;
use crate::network::EvTextureModel;
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Graph, Scalar};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_flow: f64,
    pub flow_freeze_iters: usize,
    pub total_iters: usize,
    pub batch: usize,
    /// LR patch side, divisible by 4
    pub crop: usize,
    pub seq_len: usize,
    pub charbonnier_eps: f64,
    pub seed: u64,
    pub val_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_main: 2e-4,
            lr_flow: 2.5e-5,
            flow_freeze_iters: 500,
            total_iters: 2000,
            batch: 2,
            crop: 32,
            seq_len: 5,
            charbonnier_eps: 1e-3,
            seed: 0,
            val_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// The full-scale protocol, exposed but not defaulted.
    pub fn paper() -> Self {
        TrainConfig {
            flow_freeze_iters: 5000,
            total_iters: 300_000,
            batch: 8,
            crop: 64,
            seq_len: 15,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_main <= 0.0 || self.lr_flow <= 0.0 {
            return Err(EvError::invalid("learning rates must be positive"));
        }
        if self.crop % 4 != 0 || self.crop == 0 {
            return Err(EvError::invalid("crop must be a positive multiple of 4"));
        }
        if self.batch == 0 || self.seq_len < 2 {
            return Err(EvError::invalid("batch >= 1 and seq_len >= 2 required"));
        }
        Ok(())
    }
}

/// Mean Charbonnier penalty over two sequences (host-side; the graph op
/// mirrors this formula).
pub fn charbonnier_loss(pred: &FrameSequence, gt: &FrameSequence, eps: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(EvError::invalid("sequence length mismatch or empty"));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.frames.iter().zip(gt.frames.iter()) {
        if p.dim() != g.dim() {
            return Err(EvError::invalid("frame shape mismatch"));
        }
        for (a, b) in p.iter().zip(g.iter()) {
            let d = a - b;
            acc += (d * d + eps * eps).sqrt();
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Jointly flip LR frames, HR frames, and every voxel bin. A horizontal
/// flip mirrors x; polarities are untouched.
pub fn augment(
    lr: &FrameSequence,
    hr: &FrameSequence,
    voxels: &[VoxelGrid],
    rng: &mut ChaCha8Rng,
) -> Result<(FrameSequence, FrameSequence, Vec<VoxelGrid>)> {
    let do_h = rng.random_range(0..2) == 1;
    let do_v = rng.random_range(0..2) == 1;
    let flip_img = |img: &crate::imageops::Image| {
        let mut out = img.clone();
        if do_h {
            out = flip_h(&out);
        }
        if do_v {
            out = flip_v(&out);
        }
        out
    };
    let lr2 = FrameSequence::new(lr.frames.iter().map(flip_img).collect(), lr.fps)?;
    let hr2 = FrameSequence::new(hr.frames.iter().map(flip_img).collect(), hr.fps)?;
    let voxels2 = voxels
        .iter()
        .map(|v| {
            let mut bins = v.bins.clone();
            if do_h {
                bins.invert_axis(ndarray::Axis(2));
            }
            if do_v {
                bins.invert_axis(ndarray::Axis(1));
            }
            VoxelGrid { bins, normalized: v.normalized, eta: v.eta }
        })
        .collect();
    Ok((lr2, hr2, voxels2))
}

/// Adam with per-group learning rates, cosine annealing to zero, and a flow
/// freeze window.
pub struct Adam<S: Scalar> {
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { m, v, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Cosine annealing from `lr0` to zero over `total` iterations.
    pub fn cosine_lr(lr0: f64, iter: usize, total: usize) -> f64 {
        if total == 0 {
            return lr0;
        }
        let progress = (iter as f64 / total as f64).min(1.0);
        lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Apply one step. `grads` is indexed like the store; `None` entries and
    /// frozen groups are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<ArrayD<S>>],
        lr_main: f64,
        lr_flow: f64,
        flow_frozen: bool,
    ) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let eps = S::from_f64(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads[id.0].as_ref() else { continue };
            let lr = match store.group(id) {
                ParamGroup::Flow => {
                    if flow_frozen {
                        continue;
                    }
                    lr_flow
                }
                ParamGroup::Main => lr_main,
            };
            let lr = S::from_f64(lr);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    /// populated on validation iterations
    pub val_psnr: Option<f64>,
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub final_loss: f64,
}

fn crop_sample<S: Scalar>(
    clip: &ClipRecord,
    cfg: &TrainConfig,
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FrameSequence, FrameSequence, Vec<VoxelGrid>)> {
    let _ = std::marker::PhantomData::<S>;
    let t_total = clip.lr_frames.len();
    let seq = cfg.seq_len.min(t_total);
    let t0 = if t_total > seq { rng.random_range(0..=t_total - seq) } else { 0 };
    let (_, lh, lw) = clip.lr_frames.frame_dim();
    let c = cfg.crop.min(lh).min(lw);
    let y0 = if lh > c { rng.random_range(0..=lh - c) } else { 0 };
    let x0 = if lw > c { rng.random_range(0..=lw - c) } else { 0 };
    let lr_frames: Vec<_> = (t0..t0 + seq)
        .map(|t| {
            clip.lr_frames.frames[t]
                .slice(ndarray::s![.., y0..y0 + c, x0..x0 + c])
                .to_owned()
        })
        .collect();
    let hr_frames: Vec<_> = (t0..t0 + seq)
        .map(|t| {
            clip.hr_frames.frames[t]
                .slice(ndarray::s![
                    ..,
                    scale * y0..scale * (y0 + c),
                    scale * x0..scale * (x0 + c)
                ])
                .to_owned()
        })
        .collect();
    let voxels: Vec<VoxelGrid> = (t0..t0 + seq - 1)
        .map(|t| {
            let v = &clip.lr_voxels[t];
            VoxelGrid {
                bins: v.bins.slice(ndarray::s![.., y0..y0 + c, x0..x0 + c]).to_owned(),
                normalized: v.normalized,
                eta: v.eta,
            }
        })
        .collect();
    let lr = FrameSequence::new(lr_frames, clip.lr_frames.fps)?;
    let hr = FrameSequence::new(hr_frames, clip.hr_frames.fps)?;
    augment(&lr, &hr, &voxels, rng)
}

/// Mean Y-channel PSNR of the model against HR over validation clips.
pub fn validate<S: Scalar>(
    model: &EvTextureModel,
    store: &ParamStore<S>,
    val: &[ClipRecord],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for clip in val {
        let out = model.forward_sequence(store, &clip.lr_frames, &clip.lr_voxels)?;
        for (p, g) in out.frames.iter().zip(clip.hr_frames.frames.iter()) {
            let p = p.mapv(|v| v.clamp(0.0, 1.0));
            let v = psnr(&p, g, ChannelMode::Y, 0)?;
            if v.is_finite() {
                acc += v;
            } else {
                acc += 100.0; // cap the +inf sentinel for averaging
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvError::invalid("no validation frames"));
    }
    Ok(acc / n as f64)
}

/// Seeded training loop. Writes `metrics.csv` and periodic checkpoints
/// under `out_dir` when given; returns the in-memory log either way.
pub fn train<S: Scalar>(
    model: &EvTextureModel,
    store: &mut ParamStore<S>,
    dataset: &[ClipRecord],
    val: &[ClipRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(EvError::invalid("empty training dataset"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| EvError::io(dir, e))?;
    }
    let csv_path: Option<PathBuf> = out_dir.map(|d| d.join("metrics.csv"));
    if let Some(p) = &csv_path {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| EvError::io(p, e))?;
        }
    }
    let scale = model.cfg.scale;
    let mut adam = Adam::new(store);
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut last_loss = f64::NAN;

    for iter in 0..cfg.total_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(iter as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut grad_acc: Vec<Option<ArrayD<S>>> = (0..store.len()).map(|_| None).collect();
        let mut loss_acc = 0.0;
        for b in 0..cfg.batch {
            let clip = &dataset[rng.random_range(0..dataset.len())];
            let (lr, hr, voxels) = crop_sample::<S>(clip, cfg, scale, &mut rng)?;
            let mut g = Graph::new(store);
            let outs = model.forward_graph(&mut g, &lr, &voxels)?;
            let mut loss = None;
            for (t, &o) in outs.iter().enumerate() {
                let target = g.constant3(hr.frames[t].mapv(S::from_f64));
                let l = g.charbonnier(o, target, cfg.charbonnier_eps);
                loss = Some(match loss {
                    None => l,
                    Some(prev) => g.add(prev, l),
                });
            }
            let loss = loss.expect("non-empty sequence");
            let loss = g.affine(loss, 1.0 / (outs.len() as f64 * cfg.batch as f64), 0.0);
            let loss_val = Scalar::to_f64(g.scalar(loss));
            if !loss_val.is_finite() {
                let dump = format!(
                    "iter={iter} batch_item={b} clip={} loss={loss_val}\n",
                    clip.name
                );
                if let Some(dir) = out_dir {
                    let _ = std::fs::write(dir.join("diverged.txt"), &dump);
                }
                return Err(EvError::Diverged(dump));
            }
            loss_acc += loss_val * cfg.batch as f64;
            let grads = g.backward(loss).into_param_grads();
            for (slot, g) in grad_acc.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => *acc += &g,
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        let loss = loss_acc / cfg.batch as f64;
        last_loss = loss;
        let lr_main = Adam::<S>::cosine_lr(cfg.lr_main, iter, cfg.total_iters);
        let lr_flow = Adam::<S>::cosine_lr(cfg.lr_flow, iter, cfg.total_iters);
        let frozen = iter < cfg.flow_freeze_iters;
        adam.step(store, &grad_acc, lr_main, lr_flow, frozen);

        let val_psnr = if !val.is_empty() && cfg.val_every > 0 && (iter + 1) % cfg.val_every == 0 {
            Some(validate(model, store, val)?)
        } else {
            None
        };
        let row = LogRow { iter, loss, lr: lr_main, val_psnr };
        if let Some(p) = &csv_path {
            let val_s = row.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default();
            io::append_csv_line(
                p,
                "iter,loss,lr,val_psnr",
                &format!("{},{:.10},{:.10},{}", row.iter, row.loss, row.lr, val_s),
            )?;
        }
        log.push(row);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.total_iters)
            {
                io::save_checkpoint(&dir.join(format!("ckpt_{:06}.bin", iter + 1)), &model.cfg, store)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        io::save_checkpoint(&dir.join("ckpt_final.bin"), &model.cfg, store)?;
    }
    Ok(TrainOutcome { log, final_loss: last_loss })
}
