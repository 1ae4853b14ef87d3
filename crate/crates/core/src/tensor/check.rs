//! Finite-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences of `eval` around `theta` at the given flat coordinates.
pub fn central_difference<F>(eval: F, theta: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value while perturbing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VjpReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `build` records the function on a fresh graph, given `theta` registered as
/// a trainable leaf, and returns the scalar output node.
pub fn vjp_check<F>(build: F, theta: &Tensor, h: f64) -> Result<VjpReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.param(t.clone());
        let out = build(&mut g, p)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::dim("vjp_check", v.shape(), &[1]));
        }
        Ok(v.data()[0])
    };
    let base = eval(theta)?;
    if !base.is_finite() {
        return Err(Error::Evaluation("function is not finite at theta".into()));
    }
    let mut g = Graph::new();
    let p = g.param(theta.clone());
    let out = build(&mut g, p)?;
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(p, theta);
    let coords: Vec<usize> = (0..theta.len()).collect();
    let numeric = central_difference(eval, theta, h, &coords)?;
    let mut report = VjpReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        coords_checked: coords.len(),
    };
    for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

/// Reduces a tensor node to a scalar via a fixed random projection, so
/// non-scalar ops can be checked with [`vjp_check`].
pub fn project_to_scalar(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let n = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::matrix(n, 1, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let flat = g.reshape(v, &[1, n])?;
    let wv = g.constant(w);
    g.matmul(flat, wv)
}

pub(crate) fn random_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}
