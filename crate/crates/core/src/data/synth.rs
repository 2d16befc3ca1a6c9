//! Procedural four-class motif images with ground-truth masks.
//!
//! Every image is pink noise with speckle, one class motif drawn in dark ink,
//! and short ink strands scattered away from the motif. The strands top the
//! total ink up to a per-image random budget so that pixel statistics say
//! little about the class; only the motif's shape does.
//!
//! - class 0: two or three sparse thin rings
//! - class 1: one thick-walled double ring
//! - class 2: a crowded cluster of small rings
//! - class 3: pairs of ellipses touching back to back

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{encode_raster, Dataset, LabeledImage, Mask, Provenance, Raster, RasterFormat, CLASS_NAMES};
use crate::error::{Error, Result};

pub const SYNTH_SIZE: usize = 64;

/// Mask margin around each filled motif shape, in pixels at 64×64.
const MASK_DILATION: f64 = 3.0;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ring { cx: f64, cy: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Segment { x0: f64, y0: f64, x1: f64, y1: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    shape: Shape,
    width: f64,
    opacity: f64,
}

impl Shape {
    /// Unsigned distance from `(x, y)` to the outline, and whether the point
    /// lies inside the closed shape.
    fn distance(&self, x: f64, y: f64) -> (f64, bool) {
        match *self {
            Shape::Ring { cx, cy, r } => {
                let d = (x - cx).hypot(y - cy);
                ((d - r).abs(), d <= r)
            }
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                if rho < 1e-9 {
                    return (a.min(b), true);
                }
                // first-order distance to the level set rho = 1
                let grad = ((u / (a * a)).powi(2) + (v / (b * b)).powi(2)).sqrt() / rho;
                ((rho - 1.0).abs() / grad, rho <= 1.0)
            }
            Shape::Segment { x0, y0, x1, y1 } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = (((x - x0) * vx + (y - y0) * vy) / len2).clamp(0.0, 1.0);
                ((x - x0 - t * vx).hypot(y - y0 - t * vy), false)
            }
        }
    }

    /// Anti-aliased ink coverage of a pixel centre.
    fn coverage(&self, x: f64, y: f64, width: f64) -> f64 {
        let (d, _) = self.distance(x, y);
        (width / 2.0 + 0.5 - d).clamp(0.0, 1.0)
    }

    /// Whether the pixel is within `margin` of the filled shape.
    fn near(&self, x: f64, y: f64, width: f64, margin: f64) -> bool {
        let (d, inside) = self.distance(x, y);
        inside || d <= width / 2.0 + margin
    }
}

struct Canvas {
    size: usize,
    /// Scale of the 64-pixel design grid.
    k: f64,
    ink: Vec<f64>,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            k: size as f64 / 64.0,
            ink: vec![0.0; size * size],
            mask: vec![false; size * size],
        }
    }

    fn draw(&mut self, s: &Stroke, motif: bool) {
        let n = self.size;
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * n + x;
                let c = s.shape.coverage(px, py, s.width) * s.opacity;
                if c > self.ink[i] {
                    self.ink[i] = c;
                }
                if motif && s.shape.near(px, py, s.width, MASK_DILATION * self.k) {
                    self.mask[i] = true;
                }
            }
        }
    }

    fn ink_total(&self) -> f64 {
        self.ink.iter().sum()
    }

    fn masked(&self, x: f64, y: f64) -> bool {
        let n = self.size as isize;
        let (xi, yi) = (x.floor() as isize, y.floor() as isize);
        xi < 0 || yi < 0 || xi >= n || yi >= n || self.mask[(yi * n + xi) as usize]
    }
}

fn centre(rng: &mut ChaCha8Rng, size: f64, radius: f64) -> (f64, f64) {
    let lo = radius + 2.0;
    let hi = (size - radius - 2.0).max(lo + 1e-6);
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

fn opacity(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.8..1.0)
}

fn motif(label: usize, rng: &mut ChaCha8Rng, size: f64, k: f64) -> Vec<Stroke> {
    let mut out = Vec::new();
    match label {
        0 => {
            let count = rng.random_range(2..=3);
            let mut placed: Vec<(f64, f64, f64)> = Vec::new();
            for _ in 0..200 {
                if placed.len() == count {
                    break;
                }
                let r = rng.random_range(6.0..8.0) * k;
                let (cx, cy) = centre(rng, size, r);
                if placed.iter().all(|&(x, y, q)| (x - cx).hypot(y - cy) > r + q + 6.0 * k) {
                    placed.push((cx, cy, r));
                }
            }
            for (cx, cy, r) in placed {
                out.push(Stroke {
                    shape: Shape::Ring { cx, cy, r },
                    width: 1.6 * k,
                    opacity: opacity(rng),
                });
            }
        }
        1 => {
            let r = rng.random_range(9.0..12.0) * k;
            let (cx, cy) = centre(rng, size, r + 1.5 * k);
            out.push(Stroke {
                shape: Shape::Ring { cx, cy, r },
                width: 3.0 * k,
                opacity: opacity(rng),
            });
            out.push(Stroke {
                shape: Shape::Ring { cx, cy, r: r - 5.5 * k },
                width: 2.0 * k,
                opacity: opacity(rng),
            });
        }
        2 => {
            let spread = 10.0 * k;
            let (gx, gy) = centre(rng, size, spread + 4.0 * k);
            let want = rng.random_range(8..=11);
            let mut placed: Vec<(f64, f64, f64)> = Vec::new();
            for _ in 0..400 {
                if placed.len() == want {
                    break;
                }
                let r = rng.random_range(2.5..3.5) * k;
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = spread * rng.random::<f64>().sqrt();
                let (cx, cy) = (gx + dist * ang.cos(), gy + dist * ang.sin());
                if placed.iter().all(|&(x, y, q)| (x - cx).hypot(y - cy) > r + q + 0.8 * k) {
                    placed.push((cx, cy, r));
                }
            }
            for (cx, cy, r) in placed {
                out.push(Stroke {
                    shape: Shape::Ring { cx, cy, r },
                    width: 1.3 * k,
                    opacity: opacity(rng),
                });
            }
        }
        _ => {
            let pairs = 2;
            let mut placed: Vec<(f64, f64, f64)> = Vec::new();
            for _ in 0..200 {
                if placed.len() == pairs {
                    break;
                }
                let a = rng.random_range(6.0..8.0) * k;
                let b = rng.random_range(3.5..4.5) * k;
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let reach = a.max(2.0 * b) + 1.0 * k;
                let (cx, cy) = centre(rng, size, reach);
                if placed.iter().all(|&(x, y, q)| (x - cx).hypot(y - cy) > reach + q + 3.0 * k) {
                    placed.push((cx, cy, reach));
                    // Two ellipses sharing a long side: offset along the minor axis.
                    let (s, c) = theta.sin_cos();
                    let (nx, ny) = (-s * b, c * b);
                    for sign in [-1.0, 1.0] {
                        out.push(Stroke {
                            shape: Shape::Ellipse {
                                cx: cx + sign * nx,
                                cy: cy + sign * ny,
                                a,
                                b,
                                theta,
                            },
                            width: 1.6 * k,
                            opacity: opacity(rng),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Bilinear sample of a `g×g` lattice spanning the image.
fn lattice(grid: &[f64], g: usize, u: f64, v: f64) -> f64 {
    let (fx, fy) = (u * (g - 1) as f64, v * (g - 1) as f64);
    let (x0, y0) = ((fx as usize).min(g - 2), (fy as usize).min(g - 2));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let at = |x: usize, y: usize| grid[y * g + x];
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
    let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Roughly 1/f noise: value-noise octaves with amplitude proportional to
/// wavelength, scaled to unit standard deviation.
fn pink_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0; size * size];
    for octave in 1..=5 {
        let g = (1 << octave) + 1;
        let grid: Vec<f64> = (0..g * g).map(|_| normal.sample(rng)).collect();
        let amp = 1.0 / (1 << octave) as f64;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                out[y * size + x] += amp * lattice(&grid, g, u, v);
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
    out.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

fn render(label: usize, size: usize, rng: &mut ChaCha8Rng) -> (Raster, Mask) {
    let mut canvas = Canvas::new(size);
    let k = canvas.k;
    for s in motif(label, rng, size as f64, k) {
        canvas.draw(&s, true);
    }

    let budget = canvas.ink_total() + rng.random_range(200.0..500.0) * k * k;
    for _ in 0..400 {
        if canvas.ink_total() >= budget {
            break;
        }
        let len = rng.random_range(5.0..9.0) * k;
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let (x0, y0) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let (x1, y1) = (x0 + len * ang.cos(), y0 + len * ang.sin());
        let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        if canvas.masked(x0, y0) || canvas.masked(x1, y1) || canvas.masked(mx, my) {
            continue;
        }
        let s = Stroke {
            shape: Shape::Segment { x0, y0, x1, y1 },
            width: 1.6 * k,
            opacity: opacity(rng),
        };
        canvas.draw(&s, false);
    }

    let noise = pink_noise(size, rng);
    let speckle = Normal::new(0.0, 6.0).expect("speckle sd");
    let jitter = |rng: &mut ChaCha8Rng, c: f64, d: f64| c + rng.random_range(-d..d);
    let paper = [jitter(rng, 232.0, 10.0), jitter(rng, 176.0, 10.0), jitter(rng, 200.0, 10.0)];
    let ink = [jitter(rng, 105.0, 15.0), jitter(rng, 45.0, 15.0), jitter(rng, 135.0, 15.0)];
    let texture = rng.random_range(8.0..16.0);
    let contrast = rng.random_range(0.8..1.2);
    let brightness = rng.random_range(-20.0..20.0);

    let mut data = Vec::with_capacity(size * size * 3);
    for (&a, &n) in canvas.ink.iter().zip(&noise) {
        for ch in 0..3 {
            let bg = paper[ch] + texture * n + speckle.sample(rng);
            let v = bg * (1.0 - a) + ink[ch] * a;
            let v = 128.0 + (v - 128.0) * contrast + brightness;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let raster = Raster {
        width: size,
        height: size,
        data,
    };
    let mask = Mask {
        width: size,
        height: size,
        data: canvas.mask,
    };
    (raster, mask)
}

/// `n_per_class` images of each class at `size`×`size`, a pure function of
/// the arguments. Ids are `<class>/<index>`, and images are ordered by id.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Input("synthetic dataset needs at least one image per class".into()));
    }
    if size < 32 {
        return Err(Error::Input(format!("synthetic images need size >= 32, got {size}")));
    }
    let mut images = Vec::with_capacity(4 * n_per_class);
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((label as u64) << 40) | i as u64);
            let (pixels, mask) = render(label, size, &mut rng);
            images.push(LabeledImage {
                id: format!("{name}/{i:05}"),
                label,
                pixels,
                mask: Some(mask),
            });
        }
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        images,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        provenance: Provenance::Synthetic { seed },
    })
}

/// Write `<root>/<id>.png` and, for images with masks, `<root>/masks/<id>.png`.
pub fn export_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for name in CLASS_NAMES {
        for dir in [root.join(name), root.join("masks").join(name)] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    for im in &dataset.images {
        let path = root.join(format!("{}.png", im.id));
        fs::write(&path, encode_raster(&im.pixels, RasterFormat::Png)?).map_err(|e| Error::io(&path, e))?;
        if let Some(mask) = &im.mask {
            let path = root.join("masks").join(format!("{}.png", im.id));
            fs::write(&path, encode_raster(&mask.to_raster(), RasterFormat::Png)?)
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
