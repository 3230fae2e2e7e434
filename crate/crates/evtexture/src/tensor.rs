//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] records operations on channel-first feature maps `(C, H, W)`
//! and produces gradients with respect to both parameters and marked leaf
//! inputs. The op set is exactly what the network needs: convolutions,
//! gated activations, bilinear warping/upsampling, pixel shuffle and the
//! Charbonnier loss. Graphs are cheap, built per forward pass and dropped
//! after `backward`.

use ndarray::{concatenate, Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix3, Ix4};

use crate::nn::{ParamId, ParamStore};

/// Element type the graph is generic over. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in the graph.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&ArrayD<S>, &[&ArrayD<S>], &ArrayD<S>) -> Vec<ArrayD<S>>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<usize>,
    backward: Option<BackFn<S>>,
    param: Option<usize>,
}

pub struct Graph<'p, S: Scalar> {
    store: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    // one node per parameter so sharing across iterations accumulates grads
    param_nodes: std::collections::HashMap<usize, Var>,
}

/// Gradients of a scalar loss, indexable by parameter or by leaf var.
pub struct Gradients<S: Scalar> {
    by_node: Vec<Option<ArrayD<S>>>,
    by_param: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<S>> {
        self.by_node[v.0].as_ref()
    }

    pub fn wrt_param(&self, p: ParamId) -> Option<&ArrayD<S>> {
        self.by_param[p.0].as_ref()
    }

    pub fn into_param_grads(self) -> Vec<Option<ArrayD<S>>> {
        self.by_param
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: Default::default() }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn value3(&self, v: Var) -> Array3<S> {
        self.nodes[v.0]
            .value
            .clone()
            .into_dimensionality::<Ix3>()
            .expect("expected a (C,H,W) value")
    }

    pub fn scalar(&self, v: Var) -> S {
        *self.nodes[v.0].value.iter().next().expect("empty scalar node")
    }

    fn push(&mut self, value: ArrayD<S>, parents: Vec<usize>, backward: Option<BackFn<S>>) -> Var {
        self.nodes.push(Node { value, parents, backward, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, vec![], None)
    }

    pub fn constant3(&mut self, value: Array3<S>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Differentiable leaf; its gradient is retrievable from [`Gradients::wrt`].
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, vec![], None)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node,
    /// so weight sharing accumulates gradients naturally.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node { value, parents: vec![], backward: None, param: Some(id.0) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    /// True when `id` maps to exactly one node in this graph.
    pub fn param_node_count(&self, id: ParamId) -> usize {
        self.nodes.iter().filter(|n| n.param == Some(id.0)).count()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    /// `alpha * x + beta`
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let (a, b) = (S::from_f64(alpha), S::from_f64(beta));
        let value = self.nodes[x.0].value.mapv(|v| a * v + b);
        self.push(value, vec![x.0], Some(Box::new(move |g, _, _| vec![g.mapv(|v| a * v)])))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let value = self.nodes[x.0].value.mapv(|v| one / (one + (-v).exp()));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, out| vec![g * &out.mapv(|y| y * (one - y))])),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let one = S::one();
        let value = self.nodes[x.0].value.mapv(|v| v.tanh());
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, out| vec![g * &out.mapv(|y| one - y * y)])),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = S::from_f64(slope);
        let zero = S::zero();
        let value = self.nodes[x.0].value.mapv(|v| if v >= zero { v } else { a * v });
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let mask = p[0].mapv(|v| if v >= zero { S::one() } else { a });
                vec![g * &mask]
            })),
        )
    }

    /// Concatenate `(C, H, W)` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|v| self.nodes[v.0].value.view().into_dimensionality::<Ix3>().unwrap())
            .collect();
        let value = concatenate(Axis(0), &views).unwrap().into_dyn();
        let channels: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |g, _, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut out = Vec::with_capacity(channels.len());
                let mut at = 0;
                for &c in &channels {
                    out.push(g3.slice(ndarray::s![at..at + c, .., ..]).to_owned().into_dyn());
                    at += c;
                }
                out
            })),
        )
    }

    /// 2D convolution: `x (C,H,W)`, `w (O,C,k,k)`, `b (O)`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let (o, c, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, xv.shape()[0], "conv2d channel mismatch");
        assert_eq!(kh, kw, "only square kernels");
        let (h, wid) = (xv.shape()[1], xv.shape()[2]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv.to_owned(), kh, pad, stride);
        let wmat = wv.to_shape((o, c * kh * kw)).unwrap().to_owned();
        let mut out2 = wmat.dot(&cols);
        for (mut row, &bi) in out2.outer_iter_mut().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bi);
        }
        let value = out2.into_shape_with_order((o, ho, wo)).unwrap().into_dyn();

        let (k, s, p) = (kh, stride, pad);
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, pv, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = pv[0].view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let w4 = pv[1].view().into_dimensionality::<Ix4>().unwrap();
                let (o, c) = (w4.shape()[0], w4.shape()[1]);
                let (ho, wo) = (g3.shape()[1], g3.shape()[2]);
                let g2 = g3.to_shape((o, ho * wo)).unwrap().to_owned();
                let cols = im2col(&x3, k, p, s);
                let dw = g2.dot(&cols.t());
                let db = g2.sum_axis(Axis(1));
                let wmat = w4.to_shape((o, c * k * k)).unwrap().to_owned();
                let dcols = wmat.t().dot(&g2);
                let dx = col2im(&dcols, x3.shape()[0], x3.shape()[1], x3.shape()[2], k, p, s);
                vec![
                    dx.into_dyn(),
                    dw.into_shape_with_order((o, c, k, k)).unwrap().into_dyn(),
                    db.into_dyn(),
                ]
            })),
        )
    }

    /// Bilinear 2x upsampling (half-pixel alignment).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let x3 = self.value3(x);
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let (ho, wo) = (h * 2, w * 2);
        let ty = axis_taps(h, ho);
        let tx = axis_taps(w, wo);
        let mut out = Array3::<S>::zeros((c, ho, wo));
        for ci in 0..c {
            for oy in 0..ho {
                let (y0, y1, wy) = ty[oy];
                for ox in 0..wo {
                    let (x0, x1, wx) = tx[ox];
                    let a = x3[[ci, y0, x0]] * (S::one() - wx) + x3[[ci, y0, x1]] * wx;
                    let b = x3[[ci, y1, x0]] * (S::one() - wx) + x3[[ci, y1, x1]] * wx;
                    out[[ci, oy, ox]] = a * (S::one() - wy) + b * wy;
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let shape = p[0].shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut dx = Array3::<S>::zeros((c, h, w));
                let ty = axis_taps(h, h * 2);
                let tx = axis_taps(w, w * 2);
                for ci in 0..c {
                    for oy in 0..h * 2 {
                        let (y0, y1, wy) = ty[oy];
                        for ox in 0..w * 2 {
                            let (x0, x1, wx) = tx[ox];
                            let gv = g3[[ci, oy, ox]];
                            dx[[ci, y0, x0]] += gv * (S::one() - wy) * (S::one() - wx);
                            dx[[ci, y0, x1]] += gv * (S::one() - wy) * wx;
                            dx[[ci, y1, x0]] += gv * wy * (S::one() - wx);
                            dx[[ci, y1, x1]] += gv * wy * wx;
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Sub-pixel rearrangement: `(C·r², H, W)` -> `(C, rH, rW)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let x3 = self.value3(x);
        let (cin, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        assert_eq!(cin % (r * r), 0, "channels not divisible by r^2");
        let c = cin / (r * r);
        let mut out = Array3::<S>::zeros((c, h * r, w * r));
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src = ci * r * r + dy * r + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[[ci, y * r + dy, x_ * r + dx]] = x3[[src, y, x_]];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let shape = p[0].shape();
                let (cin, h, w) = (shape[0], shape[1], shape[2]);
                let c = cin / (r * r);
                let mut dx = Array3::<S>::zeros((cin, h, w));
                for ci in 0..c {
                    for dy in 0..r {
                        for dxo in 0..r {
                            let src = ci * r * r + dy * r + dxo;
                            for y in 0..h {
                                for x_ in 0..w {
                                    dx[[src, y, x_]] = g3[[ci, y * r + dy, x_ * r + dxo]];
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Backward bilinear warping with border clamping.
    ///
    /// `out(c,y,x)` samples `feature` at `(y + v(y,x), x + u(y,x))` where
    /// `flow` is `(2,H,W)` with `u = flow[0]`, `v = flow[1]`. Differentiable
    /// in both arguments; the flow gradient vanishes where the sample site
    /// clamps to the border.
    pub fn warp(&mut self, feature: Var, flow: Var) -> Var {
        let f3 = self.value3(feature);
        let fl = self.value3(flow);
        assert_eq!(fl.shape()[0], 2, "flow must have 2 channels");
        assert_eq!(&f3.shape()[1..], &fl.shape()[1..], "warp shape mismatch");
        assert!(fl.iter().all(|v| v.is_finite()), "non-finite flow");
        let value = warp_forward(&f3, &fl);
        self.push(
            value.into_dyn(),
            vec![feature.0, flow.0],
            Some(Box::new(|g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let f3 = p[0].view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let fl = p[1].view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (df, dfl) = warp_backward(&g3, &f3, &fl);
                vec![df.into_dyn(), dfl.into_dyn()]
            })),
        )
    }

    /// Reflect-pad the spatial axes (without repeating the edge sample).
    pub fn reflect_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let x3 = self.value3(x);
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut out = Array3::<S>::zeros((c, ho, wo));
        for ci in 0..c {
            for oy in 0..ho {
                let sy = reflect_index(oy as isize - top as isize, h);
                for ox in 0..wo {
                    let sx = reflect_index(ox as isize - left as isize, w);
                    out[[ci, oy, ox]] = x3[[ci, sy, sx]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let shape = p[0].shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut dx = Array3::<S>::zeros((c, h, w));
                for ci in 0..c {
                    for oy in 0..h + top + bottom {
                        let sy = reflect_index(oy as isize - top as isize, h);
                        for ox in 0..w + left + right {
                            let sx = reflect_index(ox as isize - left as isize, w);
                            dx[[ci, sy, sx]] += g3[[ci, oy, ox]];
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Crop the spatial axes to `h x w` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let x3 = self.value3(x);
        let value = x3.slice(ndarray::s![.., top..top + h, left..left + w]).to_owned();
        self.push(
            value.into_dyn(),
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let shape = p[0].shape();
                let mut dx = Array3::<S>::zeros((shape[0], shape[1], shape[2]));
                dx.slice_mut(ndarray::s![.., top..top + h, left..left + w]).assign(&g3);
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Sum of all entries, as a 1-element node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().fold(S::zero(), |a, &b| a + b);
        let value = ArrayD::from_elem(ndarray::IxDyn(&[1]), s);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, p, _| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    /// Mean Charbonnier penalty `mean(sqrt((a-b)^2 + eps^2))` as a 1-element node.
    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "charbonnier shape mismatch");
        let e2 = S::from_f64(eps * eps);
        let n = S::from_f64(self.value(a).len() as f64);
        let mut acc = S::zero();
        ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .for_each(|&x, &y| {
                let d = x - y;
                acc += (d * d + e2).sqrt();
            });
        let value = ArrayD::from_elem(ndarray::IxDyn(&[1]), acc / n);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, p, _| {
                let gv = *g.iter().next().unwrap();
                let mut da = p[0].clone();
                ndarray::Zip::from(&mut da).and(p[1]).for_each(|x, &y| {
                    let d = *x - y;
                    *x = gv * d / ((d * d + e2).sqrt() * n);
                });
                let db = da.mapv(|v| -v);
                vec![da, db]
            })),
        )
    }

    /// Reverse sweep from a 1-element loss node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut by_node: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
        by_node[loss.0] = Some(ArrayD::from_elem(ndarray::IxDyn(&[1]), S::one()));
        let mut by_param: Vec<Option<ArrayD<S>>> = (0..self.store.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            if by_node[i].is_none() {
                continue;
            }
            if let Some(pid) = self.nodes[i].param {
                let g = by_node[i].as_ref().unwrap().clone();
                match &mut by_param[pid] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
            let Some(back) = self.nodes[i].backward.as_ref() else { continue };
            let parents = self.nodes[i].parents.clone();
            let (pgrads, _g_taken) = {
                let g = by_node[i].as_ref().unwrap();
                let pvals: Vec<&ArrayD<S>> = parents.iter().map(|&p| &self.nodes[p].value).collect();
                (back(g, &pvals, &self.nodes[i].value), ())
            };
            debug_assert_eq!(pgrads.len(), parents.len());
            for (p, pg) in parents.into_iter().zip(pgrads) {
                debug_assert_eq!(self.nodes[p].value.shape(), pg.shape());
                match &mut by_node[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { by_node, by_param }
    }
}

/// `(i0, i1, frac)` taps for linear resampling along one axis.
fn axis_taps<S: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, S)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, S::from_f64(s - i0 as f64))
        })
        .collect()
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // period 2(n-1) reflection, valid for the small paddings used here
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn im2col<S: Scalar>(x: &Array3<S>, k: usize, pad: usize, stride: usize) -> Array2<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<S>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(
    cols: &Array2<S>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> Array3<S> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<S>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    x
}

fn warp_forward<S: Scalar>(f: &Array3<S>, flow: &Array3<S>) -> Array3<S> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = Array3::<S>::zeros((c, h, w));
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let sx = clamp_coord(S::from_f64(x as f64) + flow[[0, y, x]], w);
            let sy = clamp_coord(S::from_f64(y as f64) + flow[[1, y, x]], h);
            let (x0, x1, wx) = split_coord(sx, w);
            let (y0, y1, wy) = split_coord(sy, h);
            for ci in 0..c {
                let a = f[[ci, y0, x0]] * (one - wx) + f[[ci, y0, x1]] * wx;
                let b = f[[ci, y1, x0]] * (one - wx) + f[[ci, y1, x1]] * wx;
                out[[ci, y, x]] = a * (one - wy) + b * wy;
            }
        }
    }
    out
}

fn warp_backward<S: Scalar>(
    g: &Array3<S>,
    f: &Array3<S>,
    flow: &Array3<S>,
) -> (Array3<S>, Array3<S>) {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut df = Array3::<S>::zeros((c, h, w));
    let mut dflow = Array3::<S>::zeros((2, h, w));
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let rx = S::from_f64(x as f64) + flow[[0, y, x]];
            let ry = S::from_f64(y as f64) + flow[[1, y, x]];
            let x_in = rx >= S::zero() && rx <= S::from_f64((w - 1) as f64);
            let y_in = ry >= S::zero() && ry <= S::from_f64((h - 1) as f64);
            let sx = clamp_coord(rx, w);
            let sy = clamp_coord(ry, h);
            let (x0, x1, wx) = split_coord(sx, w);
            let (y0, y1, wy) = split_coord(sy, h);
            let mut du = S::zero();
            let mut dv = S::zero();
            for ci in 0..c {
                let gv = g[[ci, y, x]];
                df[[ci, y0, x0]] += gv * (one - wy) * (one - wx);
                df[[ci, y0, x1]] += gv * (one - wy) * wx;
                df[[ci, y1, x0]] += gv * wy * (one - wx);
                df[[ci, y1, x1]] += gv * wy * wx;
                let f00 = f[[ci, y0, x0]];
                let f01 = f[[ci, y0, x1]];
                let f10 = f[[ci, y1, x0]];
                let f11 = f[[ci, y1, x1]];
                du += gv * ((one - wy) * (f01 - f00) + wy * (f11 - f10));
                dv += gv * ((one - wx) * (f10 - f00) + wx * (f11 - f01));
            }
            if x_in {
                dflow[[0, y, x]] = du;
            }
            if y_in {
                dflow[[1, y, x]] = dv;
            }
        }
    }
    (df, dflow)
}

fn clamp_coord<S: Scalar>(v: S, n: usize) -> S {
    let hi = S::from_f64((n - 1) as f64);
    if v < S::zero() {
        S::zero()
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn split_coord<S: Scalar>(v: S, n: usize) -> (usize, usize, S) {
    let i0 = v.floor().to_f64() as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, v - S::from_f64(i0 as f64))
}

/// Host-side bias add used by tests; kept here so the conv path and the
/// oracle agree on broadcasting.
pub fn bias_view<S: Scalar>(b: &ArrayD<S>) -> Array1<S> {
    b.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

/// Host-side conv reference used by gradient-check oracles in tests.
pub fn conv2d_reference<S: Scalar>(
    x: &Array3<S>,
    w: &Array4<S>,
    b: &Array1<S>,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (h, wid) = (x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wid + 2 * pad - k) / stride + 1;
    let mut out = Array3::<S>::zeros((o, ho, wo));
    for oi in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[oi];
                for ci in 0..c {
                    for ky in 0..k {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= wid as isize {
                                continue;
                            }
                            acc += w[[oi, ci, ky, kx]] * x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
                out[[oi, oy, ox]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};
    use ndarray::{Array1, Array3, Array4};
    use rand::RngExt;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a scalar-loss graph
    /// built around one differentiable leaf.
    fn gradcheck<F>(input: Array3<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let leaf = g.leaf(input.clone().into_dyn());
        let loss = build(&mut g, leaf);
        let grads = g.backward(loss);
        let analytic = grads.wrt(leaf).expect("missing input gradient").clone();

        let eval = |x: &Array3<f64>| -> f64 {
            let mut g = Graph::new(&store);
            let leaf = g.leaf(x.clone().into_dyn());
            let loss = build(&mut g, leaf);
            g.scalar(loss)
        };
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < tol, "max relative gradient error {max_rel}");
    }

    #[test]
    fn conv2d_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand3(&mut rng, 3, 7, 9);
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let xv = g.constant3(x.clone());
            let wv = g.constant(w.clone().into_dyn());
            let bv = g.constant(b.clone().into_dyn());
            let y = g.conv2d(xv, wv, bv, stride, pad);
            let expected = conv2d_reference(&x, &w, &b, stride, pad);
            let got = g.value3(y);
            assert_eq!(got.dim(), expected.dim());
            for (a, e) in got.iter().zip(expected.iter()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv2d_input_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand3(&mut rng, 2, 6, 6);
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        gradcheck(
            x,
            move |g, leaf| {
                let wv = g.constant(w.clone().into_dyn());
                let bv = g.constant(b.clone().into_dyn());
                let y = g.conv2d(leaf, wv, bv, 1, 1);
                let y = g.tanh(y);
                g.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn conv2d_param_gradcheck() {
        // weight and bias gradients against finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand3(&mut rng, 2, 5, 5);
        let mut store = ParamStore::<f64>::new();
        let w0 = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b0 = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let wid = store.register("w", w0.clone().into_dyn(), ParamGroup::Main);
        let bid = store.register("b", b0.into_dyn(), ParamGroup::Main);

        let eval = |store: &ParamStore<f64>| -> (f64, Option<(ArrayD<f64>, ArrayD<f64>)>) {
            let mut g = Graph::new(store);
            let xv = g.constant3(x.clone());
            let wv = g.param(wid);
            let bv = g.param(bid);
            let y = g.conv2d(xv, wv, bv, 1, 1);
            let y = g.sigmoid(y);
            let loss = g.sum_all(y);
            let grads = g.backward(loss);
            let l = g.scalar(loss);
            let dw = grads.wrt_param(wid).cloned();
            let db = grads.wrt_param(bid).cloned();
            (l, dw.zip(db))
        };
        let (_, grads) = eval(&store);
        let (dw, db) = grads.unwrap();
        let h = 1e-5;
        for idx in 0..w0.len() {
            let orig = store.value(wid).as_slice().unwrap()[idx];
            store.value_mut(wid).as_slice_mut().unwrap()[idx] = orig + h;
            let (lp, _) = eval(&store);
            store.value_mut(wid).as_slice_mut().unwrap()[idx] = orig - h;
            let (lm, _) = eval(&store);
            store.value_mut(wid).as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dw.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4) < 1e-5);
        }
        for idx in 0..2 {
            let orig = store.value(bid).as_slice().unwrap()[idx];
            store.value_mut(bid).as_slice_mut().unwrap()[idx] = orig + h;
            let (lp, _) = eval(&store);
            store.value_mut(bid).as_slice_mut().unwrap()[idx] = orig - h;
            let (lm, _) = eval(&store);
            store.value_mut(bid).as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = db.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4) < 1e-5);
        }
    }

    #[test]
    fn elementwise_and_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand3(&mut rng, 2, 4, 4);
        gradcheck(
            x,
            |g, leaf| {
                let s = g.sigmoid(leaf);
                let t = g.tanh(leaf);
                let l = g.leaky_relu(leaf, 0.1);
                let c = g.concat(&[s, t, l]);
                let a = g.affine(c, 0.7, -0.2);
                let m = g.mul(a, a);
                g.sum_all(m)
            },
            1e-5,
        );
    }

    #[test]
    fn upsample_pixel_shuffle_pad_crop_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand3(&mut rng, 4, 4, 4);
        gradcheck(
            x,
            |g, leaf| {
                let u = g.upsample2x(leaf);
                let p = g.pixel_shuffle(u, 2);
                let r = g.reflect_pad(p, 1, 2, 1, 2);
                let c = g.crop(r, 1, 1, 16, 16);
                let t = g.tanh(c);
                g.sum_all(t)
            },
            1e-5,
        );
    }

    #[test]
    fn warp_integer_shift_oracle() {
        // a flow of (+1, 0) samples one pixel to the right
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let f = Array3::from_shape_fn((1, 2, 3), |(_, y, x)| (y * 3 + x) as f64);
        let fv = g.constant3(f);
        let mut flow = Array3::zeros((2, 2, 3));
        flow.index_axis_mut(Axis(0), 0).fill(1.0);
        let flv = g.constant3(flow);
        let out = g.warp(fv, flv);
        let v = g.value3(out);
        // last column clamps to the border
        let expected = [[1.0, 2.0, 2.0], [4.0, 5.0, 5.0]];
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(v[[0, y, x]], expected[y][x]);
            }
        }
    }

    #[test]
    fn warp_feature_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand3(&mut rng, 2, 5, 5);
        let flow = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-0.8..0.8));
        gradcheck(
            x,
            move |g, leaf| {
                let fl = g.constant3(flow.clone());
                let w = g.warp(leaf, fl);
                let t = g.tanh(w);
                g.sum_all(t)
            },
            1e-5,
        );
    }

    #[test]
    fn warp_flow_gradcheck() {
        // differentiate through the flow argument; keep samples interior so
        // the clamped-border subgradient does not fight finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feat = rand3(&mut rng, 2, 6, 6);
        let flow = Array3::from_shape_fn((2, 6, 6), |(_, y, x)| {
            let base = rng.random_range(-0.4..0.4);
            // steer samples away from borders
            let cy = (2.5 - y as f64) * 0.2;
            let cx = (2.5 - x as f64) * 0.2;
            base + if y % 2 == 0 { cy } else { cx }
        });
        let feat2 = feat.clone();
        gradcheck(
            flow,
            move |g, leaf| {
                let f = g.constant3(feat2.clone());
                let w = g.warp(f, leaf);
                let t = g.sigmoid(w);
                g.sum_all(t)
            },
            1e-4,
        );
        let _ = feat;
    }

    #[test]
    fn charbonnier_value_and_gradcheck() {
        // value oracle: single element, d = 3, eps = 1e-3
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant3(Array3::from_elem((1, 1, 1), 3.0));
        let b = g.constant3(Array3::from_elem((1, 1, 1), 0.0));
        let l = g.charbonnier(a, b, 1e-3);
        let expected = (9.0f64 + 1e-6).sqrt();
        assert!((g.scalar(l) - expected).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand3(&mut rng, 2, 4, 4);
        let target = rand3(&mut rng, 2, 4, 4);
        gradcheck(
            x,
            move |g, leaf| {
                let t = g.constant3(target.clone());
                g.charbonnier(leaf, t, 1e-3)
            },
            1e-5,
        );
    }

    #[test]
    fn shared_param_grads_accumulate() {
        // using the same parameter twice doubles its gradient
        let mut store = ParamStore::<f64>::new();
        let w = Array4::from_elem((1, 1, 1, 1), 2.0);
        let b = Array1::zeros(1);
        let wid = store.register("w", w.into_dyn(), ParamGroup::Main);
        let bid = store.register("b", b.into_dyn(), ParamGroup::Main);
        let mut g = Graph::new(&store);
        let x = g.constant3(Array3::from_elem((1, 1, 1), 1.0));
        let wv = g.param(wid);
        let bv = g.param(bid);
        let y1 = g.conv2d(x, wv, bv, 1, 0);
        let wv2 = g.param(wid);
        let y2 = g.conv2d(y1, wv2, bv, 1, 0);
        let loss = g.sum_all(y2);
        assert_eq!(g.param_node_count(wid), 1);
        let grads = g.backward(loss);
        // loss = w^2 * x, d/dw = 2w = 4
        let dw = grads.wrt_param(wid).unwrap();
        assert!((dw.as_slice().unwrap()[0] - 4.0).abs() < 1e-12);
    }
}
