//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (tensor index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Which coordinates of each tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// Every coordinate of small tensors; a seeded sample of `per_tensor` otherwise.
    Sampled { per_tensor: usize },
}

/// Relative error used throughout: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `f`'s analytic gradient against central differences.
///
/// `f` returns the loss and its gradient with respect to every tensor in
/// `params`.
pub fn grad_check<F, R>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    coverage: Coverage,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
    R: Rng + ?Sized,
{
    let (_, analytic) = f(params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for ti in 0..params.len() {
        let n = params[ti].len();
        let coords: Vec<usize> = match coverage {
            Coverage::Sampled { per_tensor } if n > per_tensor => sample(rng, n, per_tensor).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let (fp, _) = f(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let (fm, _) = f(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let e = rel_err(analytic[ti].data()[j], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ti, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = 0.5 * |x|^2 + sum(x), grad = x + 1
        let f = |p: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
            let mut g = Graph::new();
            let x = g.param(&p[0]);
            let sq = g.mul(x, x)?;
            let h = g.scale(sq, 0.5)?;
            let a = g.sum(h)?;
            let b = g.sum(x)?;
            let l = g.add(a, b)?;
            let grads = g.backward(l)?;
            Ok((g.value(l).item(), vec![grads.get(x).unwrap().clone()]))
        };
        let p = vec![Tensor::from_f64([2, 3], &[0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = grad_check(f, &p, 1e-5, Coverage::All, &mut rng).unwrap();
        assert_eq!(r.coords_checked, 6);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let f = |p: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
            let v = p[0].data()[0];
            Ok((v * v, vec![Tensor::scalar(3.0 * v)]))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = grad_check(f, &[Tensor::scalar(1.0)], 1e-5, Coverage::All, &mut rng).unwrap();
        assert!(r.max_rel_err > 0.3);
    }
}
