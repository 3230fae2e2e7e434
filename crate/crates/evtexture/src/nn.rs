//! Parameter storage and the small layer vocabulary the network is built
//! from: convolutions, residual blocks and convolutional GRU cells.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Scalar, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Optimizer grouping: the flow estimator follows its own schedule.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    Main,
    Flow,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub group: ParamGroup,
}

/// Named, grouped parameter tensors. Hierarchical names double as
/// checkpoint keys.
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<S>, group: ParamGroup) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), value, group });
        let id = self.entries.len() - 1;
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Registers parameters with fresh seeded initialization.
pub struct Builder<'s, S: Scalar> {
    pub store: &'s mut ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<'s, S: Scalar> Builder<'s, S> {
    pub fn new(store: &'s mut ParamStore<S>, seed: u64) -> Self {
        Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<S> {
        let limit = (2.0 / fan_in as f64).sqrt();
        let mut out = ArrayD::zeros(IxDyn(shape));
        for v in out.iter_mut() {
            *v = S::from_f64(self.rng.random_range(-limit..limit));
        }
        out
    }
}

/// 2D convolution layer; `zero_init` heads start as the exact zero map.
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        group: ParamGroup,
        zero_init: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = if zero_init {
            ArrayD::zeros(IxDyn(&[cout, cin, k, k]))
        } else {
            b.kaiming(&[cout, cin, k, k], fan_in)
        };
        let bias = ArrayD::zeros(IxDyn(&[cout]));
        Conv2d {
            w: b.store.register(&format!("{name}.weight"), w, group),
            b: b.store.register(&format!("{name}.bias"), bias, group),
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// conv - lrelu - conv with identity skip.
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new<S: Scalar>(b: &mut Builder<S>, name: &str, ch: usize, group: ParamGroup) -> Self {
        ResBlock {
            c1: Conv2d::new(b, &format!("{name}.conv1"), ch, ch, 3, 1, group, false),
            c2: Conv2d::new(b, &format!("{name}.conv2"), ch, ch, 3, 1, group, false),
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let y = self.c1.apply(g, x);
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = self.c2.apply(g, y);
        g.add(x, y)
    }
}

pub fn res_stack<S: Scalar>(
    b: &mut Builder<S>,
    name: &str,
    ch: usize,
    n: usize,
    group: ParamGroup,
) -> Vec<ResBlock> {
    (0..n).map(|i| ResBlock::new(b, &format!("{name}.block{i}"), ch, group)).collect()
}

pub fn apply_stack<S: Scalar>(blocks: &[ResBlock], g: &mut Graph<S>, mut x: Var) -> Var {
    for blk in blocks {
        x = blk.apply(g, x);
    }
    x
}

/// Convolutional GRU cell over `(C,H,W)` maps.
///
/// z = sigma(conv([h, x])), r = sigma(conv([h, x])),
/// cand = tanh(conv([r*h, x])), h' = (1-z)*h + z*cand.
pub struct ConvGru {
    wz: Conv2d,
    wr: Conv2d,
    wh: Conv2d,
}

/// Gate values from one step, exposed for range checks in tests.
pub struct GruTrace {
    pub z: Var,
    pub r: Var,
}

impl ConvGru {
    pub fn new<S: Scalar>(
        b: &mut Builder<S>,
        name: &str,
        hidden: usize,
        input: usize,
        group: ParamGroup,
    ) -> Self {
        let cin = hidden + input;
        ConvGru {
            wz: Conv2d::new(b, &format!("{name}.wz"), cin, hidden, 3, 1, group, false),
            wr: Conv2d::new(b, &format!("{name}.wr"), cin, hidden, 3, 1, group, false),
            wh: Conv2d::new(b, &format!("{name}.wh"), cin, hidden, 3, 1, group, false),
        }
    }

    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, h: Var, x: Var) -> (Var, GruTrace) {
        let hx = g.concat(&[h, x]);
        let z = self.wz.apply(g, hx);
        let z = g.sigmoid(z);
        let r = self.wr.apply(g, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let rhx = g.concat(&[rh, x]);
        let cand = self.wh.apply(g, rhx);
        let cand = g.tanh(cand);
        let one_minus_z = g.affine(z, -1.0, 1.0);
        let keep = g.mul(one_minus_z, h);
        let take = g.mul(z, cand);
        (g.add(keep, take), GruTrace { z, r })
    }
}
