//! Input preparation, Adam, the plateau learning-rate rule and the
//! minibatch training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Raster};
use crate::error::{Error, Result};
use crate::model::{Model, INPUT_CHANNELS};
use crate::nn::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Standard deviation floor used by [`preprocess`].
pub const STD_FLOOR: f64 = 1e-6;

/// Bilinear resize to `size`×`size` (pixel centres at half-integer
/// coordinates, edges clamped), then a per-channel z-score of the image.
///
/// The output is `size×size×3`. Each channel ends up with mean 0 and
/// population standard deviation 1, or all zeros if the channel is constant.
pub fn preprocess(image: &Raster, size: usize) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(Error::Input(format!("zero-area image ({w}x{h})")));
    }
    if size == 0 {
        return Err(Error::Input("target size must be positive".into()));
    }
    let px = image.data();
    let axis = |dst: usize, src_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / size as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; size * size * INPUT_CHANNELS];
    for y in 0..size {
        let (y0, y1, ty) = axis(y, h);
        for x in 0..size {
            let (x0, x1, tx) = axis(x, w);
            for c in 0..INPUT_CHANNELS {
                let at = |xx: usize, yy: usize| px[(yy * w + xx) * 3 + c] as f64;
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                out[(y * size + x) * INPUT_CHANNELS + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    let n = (size * size) as f64;
    for c in 0..INPUT_CHANNELS {
        let mean = out.iter().skip(c).step_by(INPUT_CHANNELS).sum::<f64>() / n;
        let var = out
            .iter()
            .skip(c)
            .step_by(INPUT_CHANNELS)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt().max(STD_FLOOR);
        for v in out.iter_mut().skip(c).step_by(INPUT_CHANNELS) {
            *v = (*v - mean) / sd;
        }
    }
    Tensor::new([size, size, INPUT_CHANNELS], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    /// Two independent fair coins.
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            horizontal: rng.random_bool(0.5),
            vertical: rng.random_bool(0.5),
        }
    }

    pub fn apply(self, image: &Raster) -> Raster {
        let mut out = image.clone();
        if self.horizontal {
            out = out.flip_horizontal();
        }
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// Random horizontal and vertical flips, each with probability 1/2.
pub fn augment(image: &Raster, rng: &mut impl Rng) -> Raster {
    Flips::draw(rng).apply(image)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        let i = id.index();
        Some((self.m.get(i)?.as_deref()?, self.v.get(i)?.as_deref()?))
    }

    /// One bias-corrected Adam update. Every gradient is checked before any
    /// parameter changes, so a non-finite gradient leaves params and state
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &[f64])], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let shape = store.get(*id).shape();
            if g.len() != store.get(*id).numel() {
                return Err(Error::dim(format!(
                    "gradient of {} has {} values, parameter shape is {shape:?}",
                    store.entries()[id.index()].name,
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at {} of {}",
                    g[bad],
                    bad,
                    store.entries()[id.index()].name
                )));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let theta = store.get_mut(*id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halve-on-plateau bookkeeping over training accuracy.
///
/// An epoch improves only if its accuracy is strictly above the best so far.
/// After `patience` consecutive epochs without improvement the rate is
/// multiplied by `factor` and the count starts over.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    wait: usize,
}

impl ReduceOnPlateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::NEG_INFINITY,
            wait: 0,
        }
    }

    /// Record one epoch; returns whether the rate should be reduced now.
    pub fn observe(&mut self, accuracy: f64) -> bool {
        if accuracy > self.best {
            self.best = accuracy;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return true;
        }
        false
    }
}

/// Learning rate for the epoch after `history` (train accuracy per completed
/// epoch), given the rate that was in effect for its last epoch.
pub fn lr_schedule(history: &[f64], current_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut rule = ReduceOnPlateau::new(patience, factor);
    let mut reduce = false;
    for &acc in history {
        reduce = rule.observe(acc);
    }
    if reduce {
        current_lr * factor
    } else {
        current_lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random flips on every training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            lr_factor: 0.5,
            patience: 3,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            seed: 42,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let checks = [
            (self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive"),
            (self.lr_factor > 0.0 && self.lr_factor <= 1.0, "decay factor must be in (0, 1]"),
            (self.patience >= 1, "patience must be >= 1"),
            ((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2), "betas must be in [0, 1)"),
            (eps > 0.0, "adam eps must be positive"),
            (self.batch_size >= 1, "batch size must be >= 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate in effect during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.train_acc));
        }
        s
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.train_acc).collect()
    }
}

/// Seeded stream for one epoch.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Preprocessed `n×s×s×3` batch of images.
pub fn batch_tensor(images: &[&Raster], size: usize) -> Result<Tensor> {
    let items = images
        .iter()
        .map(|r| preprocess(r, size))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One optimization step on a batch; returns (mean loss, correct count).
fn train_step(model: &mut Model, adam: &mut Adam, x: Tensor, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let (loss, correct, grads, updates) = {
        let mut ctx = Ctx::new(&mut g, model.store(), Mode::Train, true)?;
        let xv = ctx.graph.constant(x)?;
        let pass = model.forward_ctx(&mut ctx, xv)?;
        let loss = ctx.graph.cross_entropy(pass.probs, labels)?;
        let bound = ctx.bound();
        let updates = ctx.take_bn_updates();
        let k = model.config().classes;
        let correct = ctx
            .graph
            .value(pass.probs)
            .data()
            .chunks(k)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        (loss, correct, bound, updates)
    };
    g.backward(loss)?;
    let loss_value = g.value(loss).item()?;
    // Parameters the loss does not reach get a zero gradient.
    let zeros: Vec<Vec<f64>> = grads
        .iter()
        .filter(|(_, v)| g.grad(*v).is_none())
        .map(|(id, _)| vec![0.0; model.store().get(*id).numel()])
        .collect();
    let mut zero_iter = zeros.iter();
    let pairs: Vec<(ParamId, &[f64])> = grads
        .iter()
        .map(|(id, v)| match g.grad(*v) {
            Some(gr) => (*id, gr),
            None => (*id, zero_iter.next().expect("one zero buffer per missing grad").as_slice()),
        })
        .collect();
    adam.step(model.store_mut(), &pairs, lr)?;
    model.apply_bn_updates(&updates);
    Ok((loss_value, correct))
}

/// Train `model` in place. `on_epoch` sees each record as it completes.
pub fn train_with(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let k = model.config().classes;
    if let Some(im) = dataset.images.iter().find(|im| im.label >= k) {
        return Err(Error::Input(format!("{} has label {} but the model has {k} classes", im.id, im.label)));
    }
    let size = model.config().input_size;
    let mut adam = Adam::new(config.adam);
    let mut plateau = ReduceOnPlateau::new(config.patience, config.lr_factor);
    let mut lr = config.lr;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<Raster> = chunk
                .iter()
                .map(|&i| {
                    let px = &dataset.images[i].pixels;
                    if config.augment {
                        augment(px, &mut rng)
                    } else {
                        px.clone()
                    }
                })
                .collect();
            let refs: Vec<&Raster> = images.iter().collect();
            let x = batch_tensor(&refs, size)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.images[i].label).collect();
            let (loss, ok) = train_step(model, &mut adam, x, &labels, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
        }
        let n = dataset.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if plateau.observe(record.train_acc) {
            lr *= config.lr_factor;
        }
    }
    Ok(history)
}

pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, dataset, config, |_| {})
}

/// Inference-mode class probabilities for every image, in dataset order.
pub fn predict_dataset(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let size = model.config().input_size;
    let k = model.config().classes;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(batch_size.max(1)) {
        let refs: Vec<&Raster> = chunk.iter().map(|im| &im.pixels).collect();
        let probs = model.predict(&batch_tensor(&refs, size)?)?;
        out.extend(probs.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}
