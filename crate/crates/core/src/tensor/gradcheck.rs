//! Central-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms: the error is
/// `|g_ad − g_fd| / SCALE_FLOOR`, so a 1e-4 bound means 1e-8 absolute.
/// Without it, coordinates whose true gradient is exactly zero (a bias
/// feeding batch norm, a shift a softmax cancels) report finite-difference
/// roundoff as a huge relative error.
pub const SCALE_FLOOR: f64 = 1e-4;

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs
        .iter()
        .map(|x| g.constant(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {v}")));
    }
    Ok(v)
}

fn check<F>(f: F, xs: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = xs
        .iter()
        .map(|x| g.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let y = g.value(out).item()?;
    if !y.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {y}")));
    }
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        let ad = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; xs[i].numel()]);
        for &j in idxs {
            let orig = xs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let denom = ad[j].abs().max(fd.abs()).max(SCALE_FLOOR);
            worst = worst.max((ad[j] - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Max relative error between autodiff and central-difference gradients of a
/// scalar function of several tensors, over every element of every input.
///
/// Relative error is `|g_ad − g_fd| / max(|g_ad|, |g_fd|, SCALE_FLOOR)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = xs.iter().map(|x| (0..x.numel()).collect()).collect();
    check(f, xs, eps, &coords)
}

pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}

/// As [`grad_check_many`] but only over up to `per_input` randomly chosen
/// coordinates of each input, for inputs too large to sweep exhaustively.
pub fn grad_check_sampled<F>(f: F, xs: &[Tensor], eps: f64, per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = xs
        .iter()
        .map(|x| {
            let n = x.numel();
            if n <= per_input {
                (0..n).collect()
            } else {
                let mut v = index::sample(&mut rng, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check(f, xs, eps, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn([3, 4], |i| (i as f64 * 0.37).sin());
        let err = grad_check(|g, v| g.sum(v), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::full([2], 1e200);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn identically_zero_gradient_is_not_an_error() {
        // softmax rows sum to one whatever the logits, so the true gradient
        // is zero and the finite difference is pure roundoff
        let x = Tensor::from_fn([3, 5], |i| (i as f64 * 1.3).cos() * 4.0);
        let err = grad_check(
            |g, v| {
                let p = g.softmax(v)?;
                g.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn a_real_mismatch_is_reported() {
        // relu's kink at zero: the one-sided autodiff slope disagrees with
        // the central difference
        let x = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.relu(v)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err >= 0.49, "{err}");
    }
}
