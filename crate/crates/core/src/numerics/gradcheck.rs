//! Central finite-difference checks of analytic gradients.

use ndarray::Array2;

use super::Rng;
use crate::error::Result;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Floor relative to the loss value. Central differences of a loss `L`
/// carry round-off near `f64::EPSILON * |L| / eps`, about `2e-11 * |L|` at
/// `eps = 1e-5`; gradients much smaller than that cannot be resolved.
pub const LOSS_REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Draws rejected because the stencil crossed a kink.
    pub coords_skipped: usize,
}

/// Redraws allowed per requested coordinate before giving up on a tensor.
const MAX_DRAWS_PER_COORD: usize = 20;

/// Compares `grad` (analytic) with central differences of `loss` at up to
/// `per_tensor` randomly chosen coordinates of every tensor in `params`.
///
/// `loss` returns the value and a kink pattern (see `Graph::kink_pattern`).
/// A coordinate whose `+eps` or `-eps` evaluation lands on a different
/// smooth piece than the base point is redrawn, since the difference
/// quotient there does not estimate the derivative. The relative-error
/// floor is the larger of [`REL_FLOOR`] and [`LOSS_REL_FLOOR`] times the
/// loss at `params`.
pub fn check_coords<L>(
    params: &[Array2<f64>],
    grad: &[Array2<f64>],
    eps: f64,
    per_tensor: usize,
    rng: &mut Rng,
    mut loss: L,
) -> Result<CheckOutcome>
where
    L: FnMut(&[Array2<f64>]) -> Result<(f64, u64)>,
{
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let (base, pattern) = loss(&work)?;
    let floor = REL_FLOOR.max(LOSS_REL_FLOOR * base.abs());
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for t in 0..params.len() {
        let n = params[t].len();
        let picks = per_tensor.min(n);
        let mut done = 0;
        for _ in 0..picks * MAX_DRAWS_PER_COORD {
            if done == picks {
                break;
            }
            let flat = rng.below(n);
            let (r, c) = (flat / params[t].ncols(), flat % params[t].ncols());
            let orig = work[t][[r, c]];
            work[t][[r, c]] = orig + eps;
            let (up, pu) = loss(&work)?;
            work[t][[r, c]] = orig - eps;
            let (down, pd) = loss(&work)?;
            work[t][[r, c]] = orig;
            if pu != pattern || pd != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error_floor(grad[t][[r, c]], numeric, floor));
            done += 1;
        }
        checked += done;
    }
    Ok(CheckOutcome { max_rel_error: worst, coords_checked: checked, coords_skipped: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Graph, Mlp, MlpSpec};

    #[test]
    fn mlp_gradients_pass() {
        let mut rng = Rng::new(3);
        let spec = MlpSpec::new(vec![4, 6, 3], Activation::Tanh, Activation::Sigmoid).unwrap();
        let mlp = Mlp::<f64>::new(spec, &mut rng);
        let x = rng.normal_matrix::<f64>(5, 4, 1.0);

        let eval = |params: &[Array2<f64>], want: bool| -> Result<(f64, Vec<Array2<f64>>)> {
            let mut m = mlp.clone();
            for (dst, src) in m.params_mut().into_iter().zip(params) {
                dst.assign(src);
            }
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let xi = g.constant(x.clone());
            let y = m.apply(&mut g, &b, xi)?;
            let sq = g.square(y);
            let loss = g.mean(sq);
            let value = g.scalar(loss);
            let mut grads = Vec::new();
            if want {
                let mut gr = g.backward(loss)?;
                grads = b.vars().into_iter().map(|v| gr.take(v).unwrap()).collect();
            }
            Ok((value, grads))
        };
        let params: Vec<Array2<f64>> = mlp.params().into_iter().cloned().collect();
        let (_, grad) = eval(&params, true).unwrap();
        let out = check_coords(&params, &grad, 1e-5, 8, &mut rng, |p| Ok((eval(p, false)?.0, 0))).unwrap();
        assert!(out.max_rel_error < 1e-6, "{out:?}");
        assert_eq!(out.coords_checked, 8 + 6 + 8 + 3);
    }

    #[test]
    fn stencils_across_a_kink_are_redrawn() {
        let eval = |p: &[Array2<f64>]| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let v = g.constant(p[0].clone());
            let y = g.leaky_relu(v, 0.2);
            let l = g.sum(y);
            Ok((g.scalar(l), g.kink_pattern()))
        };
        let one = Array2::from_elem((1, 1), 1.0);
        let near = [Array2::from_elem((1, 1), 3e-6)];
        let out = check_coords(&near, std::slice::from_ref(&one), 1e-5, 1, &mut Rng::new(1), eval).unwrap();
        assert_eq!((out.coords_checked, out.coords_skipped), (0, MAX_DRAWS_PER_COORD));
        let far = [Array2::from_elem((1, 1), 0.5)];
        let out = check_coords(&far, &[one], 1e-5, 1, &mut Rng::new(1), eval).unwrap();
        assert_eq!((out.coords_checked, out.coords_skipped), (1, 0));
        assert!(out.max_rel_error < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
    }
}
