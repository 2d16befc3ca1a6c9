//! Position attention (a non-local block) and channel attention, plus the
//! fusion that feeds the classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, Dense, Init, ParamStore};
use crate::tensor::{ConvPadding, Var};

/// Default squeeze ratio of the channel gate.
pub const DEFAULT_REDUCTION: usize = 4;

/// Pairwise position mixing over a feature map `F: n×h×w×c`.
///
/// With `P = h·w` positions:
/// - `K = reshape(conv_k(F))`, `P×c`
/// - `Q, V = maxpool₂(reshape(conv_q|v(F)))`, `⌊P/2⌋×c`, pooling adjacent
///   position pairs
/// - `R = row_softmax(K·Qᵀ)`, `P×⌊P/2⌋`
/// - output `= BN(conv_a(reshape(R·V)))`, same shape as `F`.
#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub conv_k: Conv2d,
    pub conv_q: Conv2d,
    pub conv_v: Conv2d,
    pub conv_a: Conv2d,
    pub bn: BatchNorm,
}

/// Intermediate nodes of one position-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct PositionTrace {
    /// `n×P×c`
    pub keys: Var,
    /// `n×⌊P/2⌋×c`
    pub queries: Var,
    /// `n×⌊P/2⌋×c`
    pub values: Var,
    /// `n×P×⌊P/2⌋`, rows sum to one.
    pub relations: Var,
    /// `n×P×c`
    pub attention: Var,
    /// `n×h×w×c`
    pub output: Var,
}

impl PositionAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut conv = |suffix: &str| {
            Conv2d::new(
                store,
                &format!("{name}.{suffix}"),
                1,
                channels,
                channels,
                ConvPadding::Valid,
                Init::GlorotUniform,
                rng,
            )
        };
        let conv_k = conv("conv_k");
        let conv_q = conv("conv_q");
        let conv_v = conv("conv_v");
        let conv_a = conv("conv_a");
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels);
        Self {
            conv_k,
            conv_q,
            conv_v,
            conv_a,
            bn,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, f: Var) -> Result<PositionTrace> {
        let shape = ctx.graph.shape(f).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("position attention expects n×h×w×c, got {shape:?}")));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let positions = h * w;
        if positions < 2 {
            return Err(Error::dim(format!(
                "position attention needs at least 2 positions, got {h}x{w}"
            )));
        }

        let k = self.conv_k.forward(ctx, f)?;
        let keys = ctx.graph.reshape(k, &[n, positions, c])?;
        let queries = self.pooled(ctx, &self.conv_q, f, n, positions, c)?;
        let values = self.pooled(ctx, &self.conv_v, f, n, positions, c)?;

        let scores = ctx.graph.matmul_t(keys, queries, false, true)?;
        let relations = ctx.graph.softmax(scores)?;
        let attention = ctx.graph.matmul(relations, values)?;

        let map = ctx.graph.reshape(attention, &[n, h, w, c])?;
        let a = self.conv_a.forward(ctx, map)?;
        let output = self.bn.forward(ctx, a)?;
        Ok(PositionTrace {
            keys,
            queries,
            values,
            relations,
            attention,
            output,
        })
    }

    /// 1×1 conv, flatten positions, then max over consecutive position pairs.
    /// An odd trailing position is dropped.
    fn pooled(&self, ctx: &mut Ctx, conv: &Conv2d, f: Var, n: usize, positions: usize, c: usize) -> Result<Var> {
        let y = conv.forward(ctx, f)?;
        let column = ctx.graph.reshape(y, &[n, positions, 1, c])?;
        let pooled = ctx.graph.maxpool2d(column, (2, 1), (2, 1))?;
        ctx.graph.reshape(pooled, &[n, positions / 2, c])
    }
}

/// Channel gate: `CF[…, k] = σ(fc2(relu(fc1(gap(F)))))_k · F[…, k]`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Dense,
    pub fc2: Dense,
    pub reduction: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelTrace {
    /// `n×c`, strictly inside (0, 1).
    pub gate: Var,
    pub output: Var,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("channel gate reduction ratio must be >= 1".into()));
        }
        let hidden = channels.div_ceil(reduction);
        let fc1 = Dense::new(store, &format!("{name}.fc1"), channels, hidden, Init::GlorotUniform, rng);
        let fc2 = Dense::new(store, &format!("{name}.fc2"), hidden, channels, Init::GlorotUniform, rng);
        Ok(Self { fc1, fc2, reduction })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: Var) -> Result<ChannelTrace> {
        let shape = ctx.graph.shape(f).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("channel attention expects n×h×w×c, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[3]);
        let squeezed = ctx.graph.gap(f)?;
        let hidden = self.fc1.forward(ctx, squeezed)?;
        let hidden = ctx.graph.relu(hidden)?;
        let logits = self.fc2.forward(ctx, hidden)?;
        let gate = ctx.graph.sigmoid(logits)?;
        let gate4 = ctx.graph.reshape(gate, &[n, 1, 1, c])?;
        let output = ctx.graph.mul(f, gate4)?;
        Ok(ChannelTrace { gate, output })
    }
}

/// Head input built from one or more equally-shaped feature maps.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// Channel-wise concatenation, `n×h×w×(m·c)`.
    pub map: Var,
    /// `n×(m·c)`
    pub pooled: Var,
    /// `n×(h·w·m·c)`
    pub flat: Var,
    /// `[pooled, flat]`, `n×(m·c·(1 + h·w))`.
    pub vector: Var,
}

pub fn fuse(ctx: &mut Ctx, maps: &[Var]) -> Result<Fused> {
    let first = *maps.first().ok_or_else(|| Error::dim("fuse needs at least one map"))?;
    let shape = ctx.graph.shape(first).to_vec();
    for &m in maps {
        if ctx.graph.shape(m) != shape.as_slice() {
            return Err(Error::dim(format!(
                "fuse: map shapes differ: {shape:?} vs {:?}",
                ctx.graph.shape(m)
            )));
        }
    }
    if shape.len() != 4 {
        return Err(Error::dim(format!("fuse expects n×h×w×c maps, got {shape:?}")));
    }
    let map = if maps.len() == 1 {
        first
    } else {
        ctx.graph.concat(maps, 3)?
    };
    let n = shape[0];
    let per_image: usize = ctx.graph.shape(map)[1..].iter().product();
    let pooled = ctx.graph.gap(map)?;
    let flat = ctx.graph.reshape(map, &[n, per_image])?;
    let vector = ctx.graph.concat(&[pooled, flat], 1)?;
    Ok(Fused {
        map,
        pooled,
        flat,
        vector,
    })
}
