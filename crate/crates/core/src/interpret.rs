//! Class activation maps and guided backpropagation.
//!
//! The head sees both the pooled and the flattened fused map, so the plain
//! CAM recipe (GAP followed by one linear layer) does not apply as is. The
//! channel weights here are the gradient of the class logit with respect to
//! the pooled vector, evaluated at the given input. For a pure GAP head this
//! is exactly the classic CAM weighting.

use std::fmt;
use std::path::Path;

use crate::data::{encode_gray_png, encode_raster, Raster, RasterFormat};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::tensor::{BackwardOptions, BackwardReport, Graph, Tensor, Var};
use crate::training::preprocess;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cam,
    Gb,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cam => "cam",
            Self::Gb => "gb",
        })
    }
}

/// A `width×height` map in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub source: Source,
    pub class: usize,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// `(x, y)` of the largest value; the first one in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// `<stem>.<cam|gb>.<class>.png`
    pub fn file_name(&self, stem: &str) -> String {
        format!("{stem}.{}.{}.png", self.source, self.class)
    }
}

/// Min-max scale to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if values.is_empty() || range <= 0.0 || !range.is_finite() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src_len - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = axis(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn check_class(model: &Model, class: usize) -> Result<()> {
    if class >= model.config().classes {
        return Err(Error::contract(format!(
            "class {class} out of range for a {}-class model",
            model.config().classes
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// `Σ_j x_j·[j = class]` as a scalar node.
fn select(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    let k = g.shape(logits)[1];
    let onehot = g.constant(Tensor::from_fn([1, k], |j| if j == class { 1.0 } else { 0.0 }))?;
    let picked = g.mul(logits, onehot)?;
    g.sum(picked)
}

/// Channel weights `u` and the fused map `M` (`h×w×C`) for one preprocessed
/// input `1×s×s×3`.
pub fn cam_weights(model: &Model, input: &Tensor, class: usize) -> Result<(Vec<f64>, Tensor)> {
    check_class(model, class)?;
    model.check_input(input.shape())?;
    if input.shape()[0] != 1 {
        return Err(Error::dim("cam takes a single image"));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, model.store(), Mode::Infer, false)?;
    let x = ctx.graph.constant(input.clone())?;
    let pass = model.forward_ctx(&mut ctx, x)?;
    let map = ctx.graph.value(pass.fused.map).clone();
    let pooled = ctx.graph.value(pass.fused.pooled).clone();
    let flat = ctx.graph.value(pass.fused.flat).clone();
    check_finite(&map, "fused feature map")?;

    // Second pass through the head only, with the pooled vector as the leaf.
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, model.store(), Mode::Infer, false)?;
    let pooled = ctx.graph.leaf(pooled, true)?;
    let flat = ctx.graph.constant(flat)?;
    let vector = ctx.graph.concat(&[pooled, flat], 1)?;
    let logits = model.head_logits(&mut ctx, vector)?;
    let score = select(ctx.graph, logits, class)?;
    g.backward(score)?;
    let u = g.grad(pooled).map(<[f64]>::to_vec).unwrap_or_default();
    let s = map.shape().to_vec();
    Ok((u, map.reshape([s[1], s[2], s[3]])?))
}

/// CAM from a preprocessed input, resized to `out_w×out_h`.
pub fn cam_tensor(model: &Model, input: &Tensor, class: usize, out_w: usize, out_h: usize) -> Result<Heatmap> {
    let (u, map) = cam_weights(model, input, class)?;
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let raw: Vec<f64> = map
        .data()
        .chunks(c)
        .map(|px| px.iter().zip(&u).map(|(m, u)| m * u).sum::<f64>().max(0.0))
        .collect();
    let mut data = resize_bilinear(&raw, w, h, out_w, out_h);
    normalize(&mut data);
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        data,
        source: Source::Cam,
        class,
    })
}

/// CAM at the image's own resolution.
pub fn cam(model: &Model, image: &Raster, class: usize) -> Result<Heatmap> {
    let input = preprocess(image, model.config().input_size)?;
    let input = input.reshape([1, input.shape()[0], input.shape()[1], input.shape()[2]])?;
    cam_tensor(model, &input, class, image.width(), image.height())
}

/// Gradient of the class logit with respect to a preprocessed input, with
/// or without the guided relu rule.
pub fn input_gradient(model: &Model, input: &Tensor, class: usize, guided: bool) -> Result<(Tensor, BackwardReport)> {
    check_class(model, class)?;
    model.check_input(input.shape())?;
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, model.store(), Mode::Infer, false)?;
    let x = ctx.graph.leaf(input.clone(), true)?;
    let pass = model.forward_ctx(&mut ctx, x)?;
    let score = select(ctx.graph, pass.logits, class)?;
    let report = g.backward_with(
        score,
        BackwardOptions {
            guided_relu: guided,
            record_guided: guided,
            retain_grads: false,
        },
    )?;
    let grad = g.grad_tensor(x).unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
    check_finite(&grad, "input gradient")?;
    Ok((grad, report))
}

/// Per-pixel maximum absolute value over the last axis of `h×w×c`,
/// min-max normalized.
pub fn collapse_channels(grad: &[f64], channels: usize) -> Vec<f64> {
    let mut map: Vec<f64> = grad
        .chunks(channels)
        .map(|px| px.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    normalize(&mut map);
    map
}

pub fn guided_backprop_tensor(model: &Model, input: &Tensor, class: usize, out_w: usize, out_h: usize) -> Result<Heatmap> {
    let (grad, _) = input_gradient(model, input, class, true)?;
    let s = grad.shape().to_vec();
    let map = collapse_channels(grad.data(), s[3]);
    let mut data = resize_bilinear(&map, s[2], s[1], out_w, out_h);
    normalize(&mut data);
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        data,
        source: Source::Gb,
        class,
    })
}

pub fn guided_backprop(model: &Model, image: &Raster, class: usize) -> Result<Heatmap> {
    let input = preprocess(image, model.config().input_size)?;
    let input = input.reshape([1, input.shape()[0], input.shape()[1], input.shape()[2]])?;
    guided_backprop_tensor(model, &input, class, image.width(), image.height())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Gray,
    Overlay,
}

/// Piecewise-linear blue → cyan → green → yellow → red ramp over `[0, 1]`.
pub fn ramp(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Rendered heatmap: either one gray byte per pixel or an RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub enum Rendered {
    Gray { width: usize, height: usize, data: Vec<u8> },
    Rgb(Raster),
}

impl Rendered {
    pub fn png(&self) -> Result<Vec<u8>> {
        match self {
            Self::Gray { width, height, data } => encode_gray_png(*width, *height, data),
            Self::Rgb(r) => encode_raster(r, RasterFormat::Png),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.png()?).map_err(|e| Error::io(path, e))
    }
}

/// Gray maps 0..1 to 0..255. Overlay mixes the base image and the ramp
/// colour half and half.
pub fn render(heatmap: &Heatmap, base: &Raster, mode: RenderMode) -> Result<Rendered> {
    if heatmap.width != base.width() || heatmap.height != base.height() {
        return Err(Error::dim(format!(
            "heatmap {}x{} does not match image {}x{}",
            heatmap.width,
            heatmap.height,
            base.width(),
            base.height()
        )));
    }
    if heatmap.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("heatmap values must lie in [0, 1]"));
    }
    Ok(match mode {
        RenderMode::Gray => Rendered::Gray {
            width: heatmap.width,
            height: heatmap.height,
            data: heatmap.data.iter().map(|v| (v * 255.0).round() as u8).collect(),
        },
        RenderMode::Overlay => {
            let mut out = base.clone();
            for y in 0..base.height() {
                for x in 0..base.width() {
                    let b = base.pixel(x, y);
                    let r = ramp(heatmap.at(x, y));
                    let mix = |i: usize| ((b[i] as f64 + r[i] as f64) / 2.0).round() as u8;
                    out.set_pixel(x, y, [mix(0), mix(1), mix(2)]);
                }
            }
            Rendered::Rgb(out)
        }
    })
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn normalize_spans_the_unit_interval(mut v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let distinct = v.iter().any(|&x| x != v[0]);
            normalize(&mut v);
            prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
            if distinct {
                prop_assert_eq!(v.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
                prop_assert_eq!(v.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            } else {
                prop_assert!(v.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn bilinear_resize_stays_within_source_range(
            (w, h, src) in (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(-10.0f64..10.0, w * h))
            }),
            out_w in 1usize..20,
            out_h in 1usize..20,
        ) {
            let out = resize_bilinear(&src, w, h, out_w, out_h);
            prop_assert_eq!(out.len(), out_w * out_h);
            let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
        }

        #[test]
        fn same_size_resize_is_identity((w, h, src) in (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), proptest::collection::vec(-10.0f64..10.0, w * h))
        })) {
            prop_assert_eq!(resize_bilinear(&src, w, h, w, h), src);
        }
    }
}
