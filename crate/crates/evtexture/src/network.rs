//! The EvTexture architecture: bidirectional recurrent propagation with a
//! motion branch (flow + warp), a texture branch built around the iterative
//! texture-enhancement (ITE) module, feature fusion and sub-pixel
//! upsampling, plus the optional event-flow extension.

use ndarray::Array3;

use crate::error::{EvError, Result};
use crate::events::VoxelGrid;
use crate::imageops::{bicubic_resize, FrameSequence, Image};
use crate::nn::{
    apply_stack, res_stack, Builder, Conv2d, ConvGru, GruTrace, ParamGroup, ParamId, ParamStore,
    ResBlock, LEAKY_SLOPE,
};
use crate::tensor::{Graph, Scalar, Var};

/// Texture-updater flavor (one of the ablation axes).
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdaterKind {
    ConvGru,
    Conv,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// feature width
    pub channels: usize,
    /// upsampling factor, 2 or 4
    pub scale: usize,
    /// voxel bins; also the ITE iteration count
    pub bins: usize,
    pub context_blocks: usize,
    pub updater_blocks: usize,
    pub fusion_blocks: usize,
    pub gru_layers: usize,
    pub use_event_flow: bool,
    pub flow_levels: usize,
    pub updater: UpdaterKind,
    /// false: one direct pass over the whole voxel grid
    pub iterative: bool,
    /// false: drop the residual accumulation in the updater
    pub residual: bool,
    pub texture_branch: bool,
    pub motion_branch: bool,
    pub bidirectional: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: 16,
            scale: 4,
            bins: 5,
            context_blocks: 2,
            updater_blocks: 2,
            fusion_blocks: 2,
            gru_layers: 3,
            use_event_flow: false,
            flow_levels: 3,
            updater: UpdaterKind::ConvGru,
            iterative: true,
            residual: true,
            texture_branch: true,
            motion_branch: true,
            bidirectional: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(EvError::invalid("scale must be 2 or 4"));
        }
        if self.bins < 1 {
            return Err(EvError::invalid("bins must be >= 1"));
        }
        if self.channels < 4 || self.channels % 2 != 0 {
            return Err(EvError::invalid("channels must be >= 4 and even"));
        }
        if self.flow_levels < 1 || self.gru_layers < 1 {
            return Err(EvError::invalid("flow_levels and gru_layers must be >= 1"));
        }
        if !self.texture_branch && !self.motion_branch {
            return Err(EvError::invalid("at least one branch must be enabled"));
        }
        Ok(())
    }
}

/// Dense per-pixel displacement field from timestamp t toward its neighbor.
#[derive(Clone, Debug)]
pub struct FlowField {
    /// `(2, H, W)`: u (x displacement) then v (y displacement), in pixels
    pub uv: Array3<f64>,
}

fn to_s<S: Scalar>(img: &Array3<f64>) -> Array3<S> {
    img.mapv(S::from_f64)
}

/// Coarse-to-fine convolutional flow estimator; each level refines an
/// upsampled coarser estimate through a zero-initialized head.
pub struct FlowNet {
    levels: Vec<FlowLevel>,
}

struct FlowLevel {
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

impl FlowNet {
    fn new<S: Scalar>(b: &mut Builder<S>, name: &str, ch: usize, levels: usize) -> Self {
        let levels = (0..levels)
            .map(|l| FlowLevel {
                c1: Conv2d::new(b, &format!("{name}.level{l}.conv1"), 8, ch, 3, 1, ParamGroup::Flow, false),
                c2: Conv2d::new(b, &format!("{name}.level{l}.conv2"), ch, ch, 3, 1, ParamGroup::Flow, false),
                head: Conv2d::new(b, &format!("{name}.level{l}.head"), ch, 2, 3, 1, ParamGroup::Flow, true),
            })
            .collect();
        FlowNet { levels }
    }

    /// Estimate flow from `frame_t` toward `frame_prev`. Frames enter the
    /// graph as constants; gradients reach only the flow parameters.
    pub fn estimate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        frame_t: &Image,
        frame_prev: &Image,
    ) -> Result<Var> {
        if frame_t.dim() != frame_prev.dim() {
            return Err(EvError::invalid("flow input frames differ in shape"));
        }
        let (_, h, w) = frame_t.dim();
        let n = self.levels.len();
        let div = 1 << (n - 1);
        if h % div != 0 || w % div != 0 {
            return Err(EvError::invalid(format!(
                "frame dims must be divisible by {div} for {n} flow levels"
            )));
        }
        // image pyramids, coarsest first
        let mut pyr_t = Vec::with_capacity(n);
        let mut pyr_p = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let (lh, lw) = (h >> l, w >> l);
            pyr_t.push(bicubic_resize(frame_t, lh, lw));
            pyr_p.push(bicubic_resize(frame_prev, lh, lw));
        }
        let mut flow: Option<Var> = None;
        for (l, level) in self.levels.iter().enumerate() {
            let ft = g.constant3(to_s::<S>(&pyr_t[l]));
            let fp = g.constant3(to_s::<S>(&pyr_p[l]));
            let up = match flow {
                Some(f) => {
                    let f2 = g.upsample2x(f);
                    g.affine(f2, 2.0, 0.0)
                }
                None => g.constant3(Array3::zeros((2, pyr_t[l].dim().1, pyr_t[l].dim().2))),
            };
            let x = g.concat(&[ft, fp, up]);
            let y = level.c1.apply(g, x);
            let y = g.leaky_relu(y, LEAKY_SLOPE);
            let y = level.c2.apply(g, y);
            let y = g.leaky_relu(y, LEAKY_SLOPE);
            let delta = level.head.apply(g, y);
            flow = Some(g.add(up, delta));
        }
        Ok(flow.unwrap())
    }
}

/// Small encoder-decoder with skip connections: two stride-2 descents, a
/// bottleneck, two bilinear ascents (five stages). Inputs whose sides are
/// not divisible by 4 are reflect-padded and cropped back.
pub struct UNet {
    inc: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

impl UNet {
    fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        cin: usize,
        ch: usize,
        cout: usize,
        group: ParamGroup,
        zero_head: bool,
    ) -> Self {
        UNet {
            inc: Conv2d::new(b, &format!("{name}.inc"), cin, ch, 3, 1, group, false),
            down1: Conv2d::new(b, &format!("{name}.down1"), ch, ch, 3, 2, group, false),
            down2: Conv2d::new(b, &format!("{name}.down2"), ch, ch, 3, 2, group, false),
            up1: Conv2d::new(b, &format!("{name}.up1"), 2 * ch, ch, 3, 1, group, false),
            up2: Conv2d::new(b, &format!("{name}.up2"), 2 * ch, ch, 3, 1, group, false),
            out: Conv2d::new(b, &format!("{name}.out"), ch, cout, 3, 1, group, zero_head),
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let x = if ph != h || pw != w {
            g.reflect_pad(x, 0, ph - h, 0, pw - w)
        } else {
            x
        };
        let e0 = self.inc.apply(g, x);
        let e0 = g.leaky_relu(e0, LEAKY_SLOPE);
        let e1 = self.down1.apply(g, e0);
        let e1 = g.leaky_relu(e1, LEAKY_SLOPE);
        let e2 = self.down2.apply(g, e1);
        let e2 = g.leaky_relu(e2, LEAKY_SLOPE);
        let u1 = g.upsample2x(e2);
        let u1 = g.concat(&[u1, e1]);
        let d1 = self.up1.apply(g, u1);
        let d1 = g.leaky_relu(d1, LEAKY_SLOPE);
        let u2 = g.upsample2x(d1);
        let u2 = g.concat(&[u2, e0]);
        let d2 = self.up2.apply(g, u2);
        let d2 = g.leaky_relu(d2, LEAKY_SLOPE);
        let y = self.out.apply(g, d2);
        if ph != h || pw != w {
            g.crop(y, 0, 0, h, w)
        } else {
            y
        }
    }
}

/// Per-iteration record from the texture updater.
pub struct IteTrace {
    pub deltas: Vec<Var>,
    pub gates: Vec<GruTrace>,
}

/// Iterative texture enhancement: context + texture extractors and a
/// GRU-based updater applied once per voxel bin, all parameters shared
/// across iterations.
pub struct IteModule {
    context_in: Conv2d,
    context_blocks: Vec<ResBlock>,
    pub texture: UNet,
    grus: Vec<ConvGru>,
    plain: Vec<Conv2d>,
    updater_blocks: Vec<ResBlock>,
    delta_head: Conv2d,
    updater: UpdaterKind,
    iterative: bool,
    residual: bool,
    channels: usize,
}

impl IteModule {
    fn new<S: Scalar>(b: &mut Builder<S>, name: &str, cfg: &NetworkConfig) -> Self {
        let ch = cfg.channels;
        let texture_cin = if cfg.iterative { 1 } else { cfg.bins };
        let mut grus = Vec::new();
        let mut plain = Vec::new();
        match cfg.updater {
            UpdaterKind::ConvGru => {
                for l in 0..cfg.gru_layers {
                    let input = if l == 0 { 2 * ch } else { ch };
                    grus.push(ConvGru::new(b, &format!("{name}.gru{l}"), ch, input, ParamGroup::Main));
                }
            }
            UpdaterKind::Conv => {
                for l in 0..cfg.gru_layers {
                    let cin = if l == 0 { 3 * ch } else { ch };
                    plain.push(Conv2d::new(
                        b,
                        &format!("{name}.plain{l}"),
                        cin,
                        ch,
                        3,
                        1,
                        ParamGroup::Main,
                        false,
                    ));
                }
            }
        }
        IteModule {
            context_in: Conv2d::new(b, &format!("{name}.context.inc"), 3, ch, 3, 1, ParamGroup::Main, false),
            context_blocks: res_stack(b, &format!("{name}.context"), ch, cfg.context_blocks, ParamGroup::Main),
            texture: UNet::new(b, &format!("{name}.texture"), texture_cin, ch, ch, ParamGroup::Main, false),
            grus,
            plain,
            updater_blocks: res_stack(b, &format!("{name}.updater"), ch, cfg.updater_blocks, ParamGroup::Main),
            delta_head: Conv2d::new(b, &format!("{name}.delta_head"), ch, ch, 3, 1, ParamGroup::Main, true),
            updater: cfg.updater,
            iterative: cfg.iterative,
            residual: cfg.residual,
            channels: ch,
        }
    }

    /// Context feature from the current frame; computed once per timestamp.
    pub fn extract_context<S: Scalar>(&self, g: &mut Graph<S>, frame: Var) -> Var {
        let y = self.context_in.apply(g, frame);
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        apply_stack(&self.context_blocks, g, y)
    }

    /// Texture feature from one voxel bin (or the whole grid in the direct
    /// variant).
    pub fn extract_texture<S: Scalar>(&self, g: &mut Graph<S>, voxel_bin: Var) -> Var {
        self.texture.apply(g, voxel_bin)
    }

    /// One updater step. `hidden` carries one state per GRU layer.
    pub fn ite_step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        hidden: &[Var],
        f_prev_iter: Var,
        context: Var,
        texture: Var,
    ) -> (Vec<Var>, Var, Var, Vec<GruTrace>) {
        let x = g.concat(&[context, texture]);
        let mut new_hidden = Vec::with_capacity(hidden.len());
        let mut gates = Vec::new();
        let top = match self.updater {
            UpdaterKind::ConvGru => {
                let mut inp = x;
                for (l, gru) in self.grus.iter().enumerate() {
                    let (h_new, trace) = gru.step(g, hidden[l], inp);
                    gates.push(trace);
                    inp = h_new;
                    new_hidden.push(h_new);
                }
                *new_hidden.last().unwrap()
            }
            UpdaterKind::Conv => {
                let mut y = g.concat(&[hidden[0], x]);
                for conv in &self.plain {
                    y = conv.apply(g, y);
                    y = g.leaky_relu(y, LEAKY_SLOPE);
                }
                new_hidden.push(y);
                y
            }
        };
        let u = apply_stack(&self.updater_blocks, g, top);
        let delta = self.delta_head.apply(g, u);
        let f_new = if self.residual { g.add(f_prev_iter, delta) } else { delta };
        (new_hidden, f_new, delta, gates)
    }

    fn initial_hidden(&self, f_prev: Var) -> Vec<Var> {
        let n = match self.updater {
            UpdaterKind::ConvGru => self.grus.len(),
            UpdaterKind::Conv => 1,
        };
        vec![f_prev; n]
    }

    /// Full texture branch at one timestamp: N iterations over the voxel
    /// bins (one direct pass in the non-iterative variant).
    pub fn run<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        f_prev: Var,
        voxel: &VoxelGrid,
        frame: Var,
        reverse_bins: bool,
    ) -> Result<(Var, IteTrace)> {
        if !voxel.normalized {
            return Err(EvError::invalid("ITE expects a normalized voxel grid"));
        }
        let context = self.extract_context(g, frame);
        let mut hidden = self.initial_hidden(f_prev);
        let mut f = f_prev;
        let mut trace = IteTrace { deltas: Vec::new(), gates: Vec::new() };

        if self.iterative {
            let b = voxel.num_bins();
            let order: Vec<usize> = if reverse_bins { (0..b).rev().collect() } else { (0..b).collect() };
            for i in order {
                let bin = voxel
                    .bins
                    .index_axis(ndarray::Axis(0), i)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                let bin = g.constant3(to_s::<S>(&bin));
                let texture = self.extract_texture(g, bin);
                let (h_new, f_new, delta, gates) = self.ite_step(g, &hidden, f, context, texture);
                hidden = h_new;
                f = f_new;
                trace.deltas.push(delta);
                trace.gates.extend(gates);
            }
        } else {
            let whole = if reverse_bins {
                let mut flipped = voxel.bins.clone();
                flipped.invert_axis(ndarray::Axis(0));
                flipped
            } else {
                voxel.bins.clone()
            };
            let whole = g.constant3(to_s::<S>(&whole));
            let texture = self.extract_texture(g, whole);
            let (h_new, f_new, delta, gates) = self.ite_step(g, &hidden, f, context, texture);
            hidden = h_new;
            f = f_new;
            trace.deltas.push(delta);
            trace.gates.extend(gates);
        }
        let _ = hidden;
        Ok((f, trace))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parameter ids that are shared across iterations (texture extractor
    /// input conv and delta head), for the sharing assertion.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        vec![self.texture.inc.w, self.delta_head.w]
    }
}

/// Eq-8 style fusion: lift the frame, concatenate all incoming features,
/// mix and refine with residual blocks.
pub struct Fusion {
    lift: Conv2d,
    mix: Conv2d,
    blocks: Vec<ResBlock>,
}

impl Fusion {
    fn new<S: Scalar>(b: &mut Builder<S>, name: &str, ch: usize, extra_inputs: usize, blocks: usize) -> Self {
        Fusion {
            lift: Conv2d::new(b, &format!("{name}.lift"), 3, ch, 3, 1, ParamGroup::Main, false),
            mix: Conv2d::new(b, &format!("{name}.mix"), (1 + extra_inputs) * ch, ch, 3, 1, ParamGroup::Main, false),
            blocks: res_stack(b, &format!("{name}.res"), ch, blocks, ParamGroup::Main),
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, frame: Var, features: &[Var]) -> Var {
        let lifted = self.lift.apply(g, frame);
        let lifted = g.leaky_relu(lifted, LEAKY_SLOPE);
        let mut parts = vec![lifted];
        parts.extend_from_slice(features);
        let x = g.concat(&parts);
        let y = self.mix.apply(g, x);
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        apply_stack(&self.blocks, g, y)
    }
}

/// Pixel-shuffle upsampler with a zero-initialized RGB head and the bicubic
/// additive skip.
pub struct Upsampler {
    stages: Vec<Conv2d>,
    out: Conv2d,
    scale: usize,
}

impl Upsampler {
    fn new<S: Scalar>(b: &mut Builder<S>, name: &str, ch: usize, scale: usize) -> Self {
        let n_stages = match scale {
            2 => 1,
            4 => 2,
            _ => unreachable!("validated"),
        };
        let stages = (0..n_stages)
            .map(|i| Conv2d::new(b, &format!("{name}.up{i}"), ch, 4 * ch, 3, 1, ParamGroup::Main, false))
            .collect();
        Upsampler {
            stages,
            out: Conv2d::new(b, &format!("{name}.out"), ch, 3, 3, 1, ParamGroup::Main, true),
            scale,
        }
    }

    /// `bicubic` is the precomputed bicubic upsample of the input frame.
    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, f: Var, bicubic: Var) -> Var {
        let mut y = f;
        for stage in &self.stages {
            y = stage.apply(g, y);
            y = g.pixel_shuffle(y, 2);
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let y = self.out.apply(g, y);
        g.add(y, bicubic)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }
}

/// One propagation direction: its ITE module and fusion head.
pub struct DirectionBranch {
    pub ite: IteModule,
    pub fusion: Fusion,
}

/// The full model. Parameters live in an external [`ParamStore`]; the model
/// holds ids only, so one description serves f32 training and f64 checking.
pub struct EvTextureModel {
    pub cfg: NetworkConfig,
    pub flow: FlowNet,
    pub event_flow: Option<UNet>,
    /// 1x1 fusion of event-warped and RGB-warped features, initialized to
    /// pass the RGB path through unchanged.
    pub motion_fuse: Option<Conv2d>,
    pub forward: DirectionBranch,
    pub backward: Option<DirectionBranch>,
    pub upsampler: Upsampler,
}

impl EvTextureModel {
    pub fn build<S: Scalar>(store: &mut ParamStore<S>, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let ch = cfg.channels;
        let flow = FlowNet::new(&mut b, "flow", ch, cfg.flow_levels);
        let (event_flow, motion_fuse) = if cfg.use_event_flow {
            let unet = UNet::new(&mut b, "event_flow", cfg.bins, ch, 2, ParamGroup::Main, true);
            let fuse = Conv2d::new(&mut b, "motion_fuse", 2 * ch, ch, 1, 1, ParamGroup::Main, true);
            // identity on the RGB-warped half so a zero event flow is a no-op
            {
                let w = b.store.value_mut(fuse.w);
                for o in 0..ch {
                    w[[o, ch + o, 0, 0]] = S::one();
                }
            }
            (Some(unet), Some(fuse))
        } else {
            (None, None)
        };
        let n_branch_feats =
            cfg.motion_branch as usize + cfg.texture_branch as usize;
        let forward = DirectionBranch {
            ite: IteModule::new(&mut b, "forward.ite", cfg),
            fusion: Fusion::new(
                &mut b,
                "forward.fusion",
                ch,
                n_branch_feats + cfg.bidirectional as usize,
                cfg.fusion_blocks,
            ),
        };
        let backward = if cfg.bidirectional {
            Some(DirectionBranch {
                ite: IteModule::new(&mut b, "backward.ite", cfg),
                fusion: Fusion::new(&mut b, "backward.fusion", ch, n_branch_feats, cfg.fusion_blocks),
            })
        } else {
            None
        };
        let upsampler = Upsampler::new(&mut b, "upsampler", ch, cfg.scale);
        Ok(EvTextureModel { cfg: cfg.clone(), flow, event_flow, motion_fuse, forward, backward, upsampler })
    }

    /// Event-driven flow from a normalized voxel grid (EvTexture+ only).
    pub fn event_flow_var<S: Scalar>(&self, g: &mut Graph<S>, voxel: &VoxelGrid) -> Result<Var> {
        let Some(net) = &self.event_flow else {
            return Err(EvError::Unsupported(
                "event flow requested but use_event_flow is disabled".to_string(),
            ));
        };
        if !voxel.normalized {
            return Err(EvError::invalid("event flow expects a normalized voxel grid"));
        }
        let v = g.constant3(to_s::<S>(&voxel.bins));
        Ok(net.apply(g, v))
    }

    /// Motion feature: warp the propagated feature by RGB flow, optionally
    /// fused with an event-flow-warped copy through the 1x1 conv.
    fn motion_feature<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        f_prev: Var,
        frame_t: &Image,
        frame_neighbor: &Image,
        voxel: &VoxelGrid,
    ) -> Result<Var> {
        let rgb_flow = self.flow.estimate(g, frame_t, frame_neighbor)?;
        let warped_rgb = g.warp(f_prev, rgb_flow);
        if let (Some(_), Some(fuse)) = (&self.event_flow, &self.motion_fuse) {
            let ev_flow = self.event_flow_var(g, voxel)?;
            let warped_ev = g.warp(f_prev, ev_flow);
            let cat = g.concat(&[warped_ev, warped_rgb]);
            Ok(fuse.apply(g, cat))
        } else {
            Ok(warped_rgb)
        }
    }

    /// Build the full bidirectional graph over a sequence; returns one SR
    /// output var per input frame.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        frames: &FrameSequence,
        voxels: &[VoxelGrid],
    ) -> Result<Vec<Var>> {
        let t_len = frames.len();
        if t_len < 2 {
            return Err(EvError::invalid("need at least two frames"));
        }
        if voxels.len() != t_len - 1 {
            return Err(EvError::invalid(format!(
                "expected {} voxel grids, got {}",
                t_len - 1,
                voxels.len()
            )));
        }
        for v in voxels {
            if !v.normalized {
                return Err(EvError::invalid("all voxel grids must be normalized"));
            }
            if self.cfg.iterative && v.num_bins() != self.cfg.bins {
                return Err(EvError::invalid(format!(
                    "voxel has {} bins, config expects {}",
                    v.num_bins(),
                    self.cfg.bins
                )));
            }
        }
        let (c, h, w) = frames.frame_dim();
        if c != 3 {
            return Err(EvError::invalid("frames must be RGB"));
        }
        let ch = self.cfg.channels;
        let zero_feat = || Array3::<S>::zeros((ch, h, w));

        let frame_vars: Vec<Var> = frames
            .frames
            .iter()
            .map(|f| g.constant3(to_s::<S>(f)))
            .collect();

        // backward sweep: f_b[t] from t = T-1 down to 0
        let mut f_b: Vec<Option<Var>> = vec![None; t_len];
        if let Some(branch) = &self.backward {
            let mut f_next: Option<Var> = None;
            for t in (0..t_len).rev() {
                let mut feats = Vec::new();
                if t + 1 < t_len {
                    let f_prev = f_next.unwrap();
                    if self.cfg.motion_branch {
                        feats.push(self.motion_feature(
                            g,
                            f_prev,
                            &frames.frames[t],
                            &frames.frames[t + 1],
                            &voxels[t],
                        )?);
                    }
                    if self.cfg.texture_branch {
                        let (f_t, _) = branch.ite.run(g, f_prev, &voxels[t], frame_vars[t], true)?;
                        feats.push(f_t);
                    }
                } else {
                    // boundary: no successor, neutral zero features
                    for _ in 0..(self.cfg.motion_branch as usize + self.cfg.texture_branch as usize) {
                        feats.push(g.constant3(zero_feat()));
                    }
                }
                let fused = branch.fusion.apply(g, frame_vars[t], &feats);
                f_b[t] = Some(fused);
                f_next = Some(fused);
            }
        }

        // forward sweep with upsampling
        let mut outputs = Vec::with_capacity(t_len);
        let mut f_prev: Option<Var> = None;
        for t in 0..t_len {
            let mut feats = Vec::new();
            if let Some(fb) = f_b[t] {
                feats.push(fb);
            }
            if t == 0 {
                for _ in 0..(self.cfg.motion_branch as usize + self.cfg.texture_branch as usize) {
                    feats.push(g.constant3(zero_feat()));
                }
            } else {
                let fp = f_prev.unwrap();
                if self.cfg.motion_branch {
                    feats.push(self.motion_feature(
                        g,
                        fp,
                        &frames.frames[t],
                        &frames.frames[t - 1],
                        &voxels[t - 1],
                    )?);
                }
                if self.cfg.texture_branch {
                    let (f_t, _) =
                        self.forward.ite.run(g, fp, &voxels[t - 1], frame_vars[t], false)?;
                    feats.push(f_t);
                }
            }
            let fused = self.forward.fusion.apply(g, frame_vars[t], &feats);
            f_prev = Some(fused);
            let bicubic = bicubic_resize(&frames.frames[t], h * self.cfg.scale, w * self.cfg.scale);
            let bicubic = g.constant3(to_s::<S>(&bicubic));
            outputs.push(self.upsampler.apply(g, fused, bicubic));
        }
        Ok(outputs)
    }

    /// Inference: run the graph and return super-resolved frames (unclipped).
    pub fn forward_sequence<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        frames: &FrameSequence,
        voxels: &[VoxelGrid],
    ) -> Result<FrameSequence> {
        let mut g = Graph::new(store);
        let outs = self.forward_graph(&mut g, frames, voxels)?;
        let frames_out: Vec<Image> = outs
            .iter()
            .map(|&v| g.value3(v).mapv(|x| x.to_f64()))
            .collect();
        FrameSequence::new(frames_out, frames.fps)
    }
}
