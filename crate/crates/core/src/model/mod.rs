//! The attention CNN: a VGG-style backbone, optional position and channel
//! attention over its last feature map, and a three-layer dense head.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{fuse, ChannelAttention, ChannelTrace, Fused, PositionAttention, PositionTrace, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{apply_bn_update, BatchNorm, Conv2d, Ctx, Dense, Init, Mode, ParamId, ParamStore};
use crate::tensor::{BatchStats, ConvPadding, Graph, Tensor, Var};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Number of input channels (RGB).
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 3×3 conv + batch norm + relu blocks in this stage.
    pub convs: usize,
    pub width: usize,
    /// Whether a 2×2/2 max pool closes the stage.
    pub pool: bool,
}

impl StageSpec {
    pub fn new(convs: usize, width: usize, pool: bool) -> Self {
        Self { convs, width, pool }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub use_position_attention: bool,
    pub use_channel_attention: bool,
    /// Widths of the three dense layers; the last equals `classes`.
    pub head: Vec<usize>,
    /// Batch norm between each hidden dense layer and its relu.
    #[serde(default = "default_true")]
    pub head_batchnorm: bool,
    pub classes: usize,
    /// Squeeze ratio of the channel gate.
    pub reduction: usize,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Full-size variant: VGG-16 conv stages on 224×224 inputs.
    pub fn hienet_full() -> Self {
        Self {
            input_size: 224,
            stages: vec![
                StageSpec::new(2, 64, true),
                StageSpec::new(2, 128, true),
                StageSpec::new(3, 256, true),
                StageSpec::new(3, 512, true),
                StageSpec::new(3, 512, true),
            ],
            use_position_attention: true,
            use_channel_attention: true,
            head: vec![4096, 1024, 4],
            head_batchnorm: true,
            classes: 4,
            reduction: DEFAULT_REDUCTION,
            seed: 42,
        }
    }

    /// Desk-scale variant: 64×64 inputs, stages of width 16/32/64, the last
    /// one unpooled so attention sees a 16×16 grid.
    pub fn hienet_mini() -> Self {
        Self {
            input_size: 64,
            stages: vec![
                StageSpec::new(1, 16, true),
                StageSpec::new(1, 32, true),
                StageSpec::new(1, 64, false),
            ],
            use_position_attention: true,
            use_channel_attention: true,
            head: vec![256, 64, 4],
            head_batchnorm: true,
            classes: 4,
            reduction: DEFAULT_REDUCTION,
            seed: 42,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "hienet-full" => Ok(Self::hienet_full()),
            "hienet-mini" => Ok(Self::hienet_mini()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected hienet-full or hienet-mini)"
            ))),
        }
    }

    /// Same architecture with both attention blocks removed.
    pub fn without_attention(mut self) -> Self {
        self.use_position_attention = false;
        self.use_channel_attention = false;
        self
    }

    /// Side and channel count of the backbone's output map.
    pub fn feature_shape(&self) -> (usize, usize) {
        let mut side = self.input_size;
        for s in &self.stages {
            if s.pool {
                side /= 2;
            }
        }
        (side, self.stages.last().map_or(0, |s| s.width))
    }

    /// Number of maps concatenated before the head.
    pub fn fused_maps(&self) -> usize {
        1 + usize::from(self.use_position_attention) + usize::from(self.use_channel_attention)
    }

    pub fn head_input_len(&self) -> usize {
        let (side, c) = self.feature_shape();
        self.fused_maps() * c * (1 + side * side)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("class count must be >= 2, got {}", self.classes));
        }
        if self.stages.is_empty() {
            return fail("at least one backbone stage is required".into());
        }
        if self.stages.iter().any(|s| s.convs == 0 || s.width == 0) {
            return fail("every stage needs >= 1 conv and width >= 1".into());
        }
        if self.head.len() != 3 || self.head.contains(&0) {
            return fail(format!("head must have exactly three nonzero widths, got {:?}", self.head));
        }
        if self.head[2] != self.classes {
            return fail(format!(
                "last head width {} must equal class count {}",
                self.head[2], self.classes
            ));
        }
        if self.reduction == 0 {
            return fail("channel gate reduction ratio must be >= 1".into());
        }
        let mut side = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.pool {
                if side < 2 {
                    return fail(format!("input {} too small to pool at stage {i}", self.input_size));
                }
                side /= 2;
            }
        }
        if side == 0 {
            return fail(format!("input size {} too small", self.input_size));
        }
        if self.use_position_attention && side * side < 2 {
            return fail(format!(
                "position attention needs >= 2 feature positions; input {} leaves {side}x{side}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

/// Nodes produced by one forward pass, kept for saliency methods.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub input: Var,
    /// Backbone output `F`.
    pub features: Var,
    pub position: Option<PositionTrace>,
    pub channel: Option<ChannelTrace>,
    pub fused: Fused,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stages: Vec<(Vec<ConvBlock>, bool)>,
    position: Option<PositionAttention>,
    channel: Option<ChannelAttention>,
    head: [Dense; 3],
    head_bn: Option<[BatchNorm; 2]>,
}

impl Model {
    /// Deterministic construction from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut cin = INPUT_CHANNELS;
        for (si, spec) in config.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.convs);
            for ci in 0..spec.convs {
                let name = format!("backbone.{si}.{ci}");
                let conv = Conv2d::new(
                    &mut store,
                    &format!("{name}.conv"),
                    3,
                    cin,
                    spec.width,
                    ConvPadding::Same,
                    Init::HeNormal,
                    &mut rng,
                );
                let bn = BatchNorm::new(&mut store, &format!("{name}.bn"), spec.width);
                blocks.push(ConvBlock { conv, bn });
                cin = spec.width;
            }
            stages.push((blocks, spec.pool));
        }
        let position = config
            .use_position_attention
            .then(|| PositionAttention::new(&mut store, "position", cin, &mut rng));
        let channel = if config.use_channel_attention {
            Some(ChannelAttention::new(&mut store, "channel", cin, config.reduction, &mut rng)?)
        } else {
            None
        };
        let widths = &config.head;
        let fc1 = Dense::new(&mut store, "head.fc1", config.head_input_len(), widths[0], Init::HeNormal, &mut rng);
        let fc2 = Dense::new(&mut store, "head.fc2", widths[0], widths[1], Init::HeNormal, &mut rng);
        let fc3 = Dense::new(&mut store, "head.fc3", widths[1], widths[2], Init::GlorotUniform, &mut rng);
        let head_bn = config.head_batchnorm.then(|| {
            [
                BatchNorm::new(&mut store, "head.bn1", widths[0]),
                BatchNorm::new(&mut store, "head.bn2", widths[1]),
            ]
        });
        Ok(Self {
            config: config.clone(),
            store,
            stages,
            position,
            channel,
            head: [fc1, fc2, fc3],
            head_bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Weight and bias of the final (logit) layer.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.head[2].weight, self.head[2].bias)
    }

    /// Copy with every stored value rounded to binary32 precision.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        for e in m.store.entries_mut() {
            e.value = e.value.map(|v| v as f32 as f64);
        }
        m
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != INPUT_CHANNELS {
            return Err(Error::dim(format!(
                "model expects n×{s}×{s}×{INPUT_CHANNELS} input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Backbone feature map `F` for input `x: n×s×s×3`.
    pub fn backbone(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (blocks, pool) in &self.stages {
            for b in blocks {
                h = b.conv.forward(ctx, h)?;
                h = b.bn.forward(ctx, h)?;
                h = ctx.graph.relu(h)?;
            }
            if *pool {
                h = ctx.graph.maxpool2d(h, (2, 2), (2, 2))?;
            }
        }
        Ok(h)
    }

    /// Dense head: two hidden layers (dense, optional batch norm, relu),
    /// then raw class logits.
    pub fn head_logits(&self, ctx: &mut Ctx, vector: Var) -> Result<Var> {
        let mut h = vector;
        for i in 0..2 {
            h = self.head[i].forward(ctx, h)?;
            if let Some(bn) = &self.head_bn {
                h = bn[i].forward(ctx, h)?;
            }
            h = ctx.graph.relu(h)?;
        }
        self.head[2].forward(ctx, h)
    }

    pub fn forward_ctx(&self, ctx: &mut Ctx, x: Var) -> Result<ForwardPass> {
        self.check_input(ctx.graph.shape(x))?;
        let features = self.backbone(ctx, x)?;
        let position = self.position.as_ref().map(|p| p.forward(ctx, features)).transpose()?;
        let channel = self.channel.as_ref().map(|c| c.forward(ctx, features)).transpose()?;
        let mut maps = vec![features];
        maps.extend(position.map(|p| p.output));
        maps.extend(channel.map(|c| c.output));
        let fused = fuse(ctx, &maps)?;
        let logits = self.head_logits(ctx, fused.vector)?;
        let probs = ctx.graph.softmax(logits)?;
        Ok(ForwardPass {
            input: x,
            features,
            position,
            channel,
            fused,
            logits,
            probs,
        })
    }

    /// Inference-mode class probabilities, `n×k`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Infer, false)?;
        let x = ctx.graph.constant(batch.clone())?;
        let pass = self.forward_ctx(&mut ctx, x)?;
        Ok(g.value(pass.probs).clone())
    }

    pub fn apply_bn_updates(&mut self, updates: &[(ParamId, ParamId, BatchStats)]) {
        for (mean, var, stats) in updates {
            apply_bn_update(&mut self.store, *mean, *var, stats);
        }
    }
}
