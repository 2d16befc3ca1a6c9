//! Properties of the synthetic motif dataset that the model tests rely on.

use attenlab::data::{synth_generate, Dataset};

const FEATURES: usize = 7;

/// Per-channel mean and variance of the raw pixels, z-scored later, plus a
/// bias term.
fn pixel_stats(d: &Dataset) -> Vec<[f64; FEATURES]> {
    d.images
        .iter()
        .map(|im| {
            let px = im.pixels.data();
            let n = (px.len() / 3) as f64;
            let mut f = [0.0; FEATURES];
            for c in 0..3 {
                let mean = px.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / n;
                let var = px.iter().skip(c).step_by(3).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                f[c] = mean;
                f[3 + c] = var;
            }
            f[6] = 1.0;
            f
        })
        .collect()
}

fn standardize(train: &mut [[f64; FEATURES]], test: &mut [[f64; FEATURES]]) {
    for j in 0..FEATURES - 1 {
        let n = train.len() as f64;
        let mean = train.iter().map(|f| f[j]).sum::<f64>() / n;
        let sd = (train.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for f in train.iter_mut().chain(test.iter_mut()) {
            f[j] = (f[j] - mean) / sd;
        }
    }
}

fn logits(w: &[[f64; FEATURES]; 4], x: &[f64; FEATURES]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (o, row) in out.iter_mut().zip(w) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

fn argmax(v: &[f64; 4]) -> usize {
    (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

/// Softmax regression on pixel statistics, full-batch gradient descent.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (mut xtr, mut xte) = (pixel_stats(train), pixel_stats(test));
    standardize(&mut xtr, &mut xte);
    let ytr = train.labels();
    let mut w = [[0.0; FEATURES]; 4];
    for _ in 0..2000 {
        let mut grad = [[0.0; FEATURES]; 4];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let l = logits(&w, x);
            let m = l.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..4 {
                let d = e[k] / s - f64::from(u8::from(k == y));
                for j in 0..FEATURES {
                    grad[k][j] += d * x[j] / xtr.len() as f64;
                }
            }
        }
        for k in 0..4 {
            for j in 0..FEATURES {
                w[k][j] -= 0.5 * grad[k][j];
            }
        }
    }
    let hits = xte
        .iter()
        .zip(test.labels())
        .filter(|(x, y)| argmax(&logits(&w, x)) == *y)
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn pixel_statistics_do_not_reveal_the_class() {
    let train = synth_generate(200, 64, 1001).unwrap();
    let test = synth_generate(50, 64, 2002).unwrap();
    let acc = linear_probe_accuracy(&train, &test);
    assert!(acc < 0.6, "linear probe reached {acc}");
}

#[test]
fn masks_stay_near_dark_ink() {
    // Every image has dark ink inside its mask, and every mask pixel lies in
    // the bounding box of the dark pixels under it, grown by the dilation.
    let ds = synth_generate(8, 64, 11).unwrap();
    for im in &ds.images {
        let m = im.mask.as_ref().unwrap();
        let (w, h) = (im.pixels.width(), im.pixels.height());
        assert_eq!((m.width, m.height), (w, h));
        let luma = |x: usize, y: usize| {
            let p = im.pixels.pixel(x, y);
            (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
        };
        let mut all: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| luma(x, y)).collect();
        all.sort_by(f64::total_cmp);
        let dark = (all[0] + all[all.len() / 2]) / 2.0;
        let inked: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y) && luma(x, y) < dark)
            .collect();
        assert!(!inked.is_empty(), "{}: no ink under the mask", im.id);
        let (x0, x1) = (inked.iter().map(|p| p.0).min().unwrap(), inked.iter().map(|p| p.0).max().unwrap());
        let (y0, y1) = (inked.iter().map(|p| p.1).min().unwrap(), inked.iter().map(|p| p.1).max().unwrap());
        let grow = 5;
        for y in 0..h {
            for x in 0..w {
                if m.get(x, y) {
                    assert!(
                        x + grow >= x0 && x <= x1 + grow && y + grow >= y0 && y <= y1 + grow,
                        "{}: mask pixel ({x},{y}) outside the motif box",
                        im.id
                    );
                }
            }
        }
    }
}

#[test]
fn classes_are_balanced_and_ordered() {
    let ds = synth_generate(5, 64, 3).unwrap();
    assert_eq!(ds.class_counts(), vec![5; 4]);
    let ids: Vec<&str> = ds.images.iter().map(|i| i.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    assert_eq!(ids, sorted);
}
