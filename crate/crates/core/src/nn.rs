//! Parameter storage and the differentiable layers built on [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, ConvPadding, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm; the forward pass is pure.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, 2/fan_in), for weights feeding a relu.
    HeNormal,
    /// U(±sqrt(6/(fan_in+fan_out))).
    GlorotUniform,
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
        match self {
            Init::HeNormal => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
            }
            Init::GlorotUniform => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
            }
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// False for state such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{}: expected shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// A forward pass in progress: the graph, the parameters bound into it and
/// the batch statistics collected along the way.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub mode: Mode,
    vars: Vec<Option<Var>>,
    bn_updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    /// Bind every trainable parameter into `graph`; with `track_params`
    /// they are gradient-tracked leaves, otherwise constants.
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode, track_params: bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        for e in store.entries() {
            vars.push(if e.trainable {
                Some(graph.leaf(e.value.clone(), track_params)?)
            } else {
                None
            });
        }
        Ok(Self {
            graph,
            store,
            mode,
            vars,
            bn_updates: Vec::new(),
        })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("trainable parameter bound")
    }

    /// Use `var` wherever the layers read parameter `id`, so a caller can
    /// differentiate with respect to a value it supplies.
    pub fn rebind(&mut self, id: ParamId, var: Var) -> Result<()> {
        let want = self.store.get(id).shape();
        if self.graph.shape(var) != want {
            return Err(Error::dim(format!(
                "rebind {}: expected {want:?}, got {:?}",
                self.store.entries()[id.0].name,
                self.graph.shape(var)
            )));
        }
        self.vars[id.0] = Some(var);
        Ok(())
    }

    /// `(param, var)` for every trainable parameter, in store order.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: ConvPadding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel_size: usize,
        cin: usize,
        cout: usize,
        padding: ConvPadding,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [kernel_size, kernel_size, cin, cout];
        let fan_in = kernel_size * kernel_size * cin;
        let fan_out = kernel_size * kernel_size * cout;
        let kernel = store.add(
            format!("{name}.kernel"),
            init.tensor(&shape, fan_in, fan_out, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true);
        Self {
            kernel,
            bias,
            stride: 1,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.var(self.kernel), ctx.var(self.bias));
        ctx.graph.conv2d(x, k, Some(b), self.stride, self.padding)
    }
}

/// Fully connected layer `x·W + b` on `n×in` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.tensor(&[input, output], input, output, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([output]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        dense(ctx.graph, x, ctx.var(self.weight), ctx.var(self.bias))
    }
}

/// `x·W + b` for `x: n×in` (or a bare `in` vector), `W: in×out`, `b: out`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) || g.shape(b) != [ws[1]] {
        return Err(Error::dim(format!(
            "dense: x {xs:?}, W {ws:?}, b {:?}",
            g.shape(b)
        )));
    }
    let (x2, vector) = match xs.len() {
        1 => (g.reshape(x, &[1, xs[0]])?, true),
        2 => (x, false),
        _ => return Err(Error::dim(format!("dense expects rank 1 or 2 input, got {xs:?}"))),
    };
    let y = g.matmul(x2, w)?;
    let y = g.add(y, b)?;
    if vector {
        g.reshape(y, &[ws[1]])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], 1.0), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batchnorm(x, gamma, beta, None, BN_EPS)?;
                let stats = stats.expect("train mode yields stats");
                ctx.bn_updates.push((self.running_mean, self.running_var, stats));
                Ok(y)
            }
            Mode::Infer => {
                let mean = ctx.store.get(self.running_mean).data();
                let var = ctx.store.get(self.running_var).data();
                Ok(ctx.graph.batchnorm(x, gamma, beta, Some((mean, var)), BN_EPS)?.0)
            }
        }
    }
}

/// Fold one batch's statistics into running mean/variance
/// (`running ← momentum·running + (1−momentum)·batch`, unbiased batch variance).
pub fn apply_bn_update(store: &mut ParamStore, mean_id: ParamId, var_id: ParamId, stats: &BatchStats) {
    let correction = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for (r, b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
    for (r, b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b * correction;
    }
}
