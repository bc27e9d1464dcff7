//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to audit.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst norm-wise relative error over all checked inputs.
    pub max_rel_error: f64,
    /// Per-input `(relative error, checked coordinates)`.
    pub per_input: Vec<(f64, usize)>,
    /// Coordinates left out because a kink (ReLU, |·|) lies within `h` of
    /// them, so no finite difference there estimates a derivative.
    pub kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Gradient norms below this are treated as zero. Central differences carry
/// roughly `ε·|f|/h` of rounding noise, so a parameter whose true gradient is
/// identically zero (a bias feeding straight into batch norm) would otherwise
/// score a relative error of 1.
pub const ZERO_FLOOR: f64 = 1e-6;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, ZERO_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(ZERO_FLOOR)
}

/// Compares tape gradients of `build` against central differences with step
/// `h`. `build` receives one leaf per entry of `inputs`, in order, and must
/// return a scalar. `coords` optionally limits each input to a subset of
/// flat indices (all coordinates when `None`).
///
/// Each coordinate is differenced at `h` and `h/2`. On a smooth stretch the
/// two agree to `O(h²)`; when they disagree a kink sits inside the stencil
/// and the coordinate is counted in [`GradCheck::kinks`] instead.
pub fn check<F>(inputs: &[Tensor], h: f64, coords: Option<&[Vec<usize>]>, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut kinks = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..input.numel()).collect();
                &all
            }
        };
        let zeros = vec![0.0; input.numel()];
        let analytic_full = grads.get(vars[i]).unwrap_or(&zeros);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in idx {
            let x0 = input.data()[j];
            let mut central = |step: f64| -> Result<f64> {
                work[i].data_mut()[j] = x0 + step;
                let fp = eval(&work)?;
                work[i].data_mut()[j] = x0 - step;
                let fm = eval(&work)?;
                work[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * step))
            };
            let (d1, d2) = (central(h)?, central(h / 2.0)?);
            if (d1 - d2).abs() > 1e-5 * d1.abs().max(d2.abs()) + 1e-9 {
                kinks += 1;
                continue;
            }
            numeric.push(d1);
            analytic.push(analytic_full[j]);
        }
        per_input.push((relative_error(&analytic, &numeric), numeric.len()));
    }
    let max_rel_error = per_input.iter().map(|p| p.0).fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_input,
        kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_identical_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[0.0], &[3e-10]) < 1e-3);
    }

    #[test]
    fn sum_of_squares_checks_out() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check(&[x], 1e-5, None, |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn coordinates_straddling_a_kink_are_set_aside() {
        let x = Tensor::new(vec![2], vec![3e-6, 0.7]).unwrap();
        let r = check(&[x], 1e-5, None, |g, v| {
            let a = g.relu(v[0]);
            Ok(g.sum(a))
        })
        .unwrap();
        assert_eq!(r.kinks, 1);
        assert_eq!(r.per_input[0].1, 1);
        assert!(r.passes(1e-8));
    }
}
