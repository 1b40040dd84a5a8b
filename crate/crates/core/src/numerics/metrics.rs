//! Image and embedding similarity metrics.
//!
//! SSIM uses a 7x7 uniform window over valid positions only (no padding)
//! with C1 = 0.01^2 and C2 = 0.03^2 for a [0, 1] dynamic range; the
//! per-image score is the mean of the per-window scores.

use ndarray::ArrayView2;

use super::Real;
use crate::error::{contract_err, dim_err, Result};

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR reported when the MSE falls below `1e-10`.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

type SsimGrads<T> = Option<(Vec<T>, Vec<T>)>;

/// SSIM of two flattened `h x w` images, optionally with its gradient
/// with respect to each image.
pub fn ssim_with_grad<T: Real>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    want_grad: bool,
) -> Result<(T, SsimGrads<T>)> {
    if x.len() != h * w || y.len() != h * w {
        return dim_err(format!("ssim inputs must hold {h}x{w} pixels"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return contract_err(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let two = T::of(2.0);
    let area = T::of((SSIM_WINDOW * SSIM_WINDOW) as f64);
    let rows = h - SSIM_WINDOW + 1;
    let cols = w - SSIM_WINDOW + 1;
    let count = T::of((rows * cols) as f64);

    let mut total = T::zero();
    let mut grads = want_grad.then(|| (vec![T::zero(); h * w], vec![T::zero(); h * w]));

    for r0 in 0..rows {
        for c0 in 0..cols {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (a, b) = (x[r * w + c], y[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / area;
            let my = sy / area;
            let vx = sxx / area - mx * mx;
            let vy = syy / area - my * my;
            let cxy = sxy / area - mx * my;

            let a1 = two * mx * my + c1;
            let a2 = two * cxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = vx + vy + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            if let Some((gx, gy)) = grads.as_mut() {
                let bb = b1 * b2;
                // Partials with respect to the window statistics
                // (mean, mean of squares, mean of cross product).
                let d_cxy = two * a1 / bb;
                let d_var = -s / b2;
                let g_mx = two * my * a2 / bb - two * mx * s / b1 - my * d_cxy - two * mx * d_var;
                let g_my = two * mx * a2 / bb - two * my * s / b1 - mx * d_cxy - two * my * d_var;
                let scale = T::one() / (area * count);
                for r in r0..r0 + SSIM_WINDOW {
                    for c in c0..c0 + SSIM_WINDOW {
                        let p = r * w + c;
                        let (a, b) = (x[p], y[p]);
                        gx[p] += (g_mx + two * a * d_var + b * d_cxy) * scale;
                        gy[p] += (g_my + two * b * d_var + a * d_cxy) * scale;
                    }
                }
            }
        }
    }
    Ok((total / count, grads))
}

/// SSIM between two `H x W` images with values in [0, 1].
pub fn ssim<T: Real>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<f64> {
    if x.dim() != y.dim() {
        return dim_err(format!("ssim shapes {:?} vs {:?}", x.dim(), y.dim()));
    }
    let (h, w) = x.dim();
    let xs: Vec<T> = x.iter().copied().collect();
    let ys: Vec<T> = y.iter().copied().collect();
    Ok(ssim_with_grad(&xs, &ys, h, w, false)?.0.as_f64())
}

/// Cosine similarity. Zero-norm inputs are rejected.
pub fn cosine<T: Real>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return dim_err(format!("cosine lengths {} vs {}", u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nu: f64 = u.iter().map(|a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return contract_err("cosine of a zero-norm vector");
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn mse<T: Real>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<f64> {
    if x.dim() != y.dim() {
        return dim_err(format!("mse shapes {:?} vs {:?}", x.dim(), y.dim()));
    }
    let n = x.len() as f64;
    Ok(x.iter()
        .zip(y.iter())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / mse)` for a unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use ndarray::Array2;

    fn random_image(seed: u64, lo: f64, hi: f64) -> Array2<f64> {
        Rng::new(seed).uniform_matrix(32, 32, lo, hi)
    }

    #[test]
    fn ssim_self_is_one() {
        let x = random_image(1, 0.0, 1.0);
        assert!((ssim(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_exactly_symmetric() {
        let x = random_image(2, 0.0, 1.0);
        let y = random_image(3, 0.0, 1.0);
        assert_eq!(ssim(x.view(), y.view()).unwrap(), ssim(y.view(), x.view()).unwrap());
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let x = random_image(4, 0.25, 0.75);
        let inv = x.mapv(|v| 1.0 - v);
        assert!(ssim(x.view(), inv.view()).unwrap() < 0.2);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let x = Array2::<f64>::zeros((6, 6));
        assert!(matches!(ssim(x.view(), x.view()), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (h, w) = (9, 8);
        let mut rng = Rng::new(11);
        let x: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let (_, g) = ssim_with_grad(&x, &y, h, w, true).unwrap();
        let (gx, gy) = g.unwrap();
        let eps = 1e-6;
        for p in [0, 5, 17, 40, 71] {
            let mut xp = x.clone();
            xp[p] += eps;
            let mut xm = x.clone();
            xm[p] -= eps;
            let fd = (ssim_with_grad(&xp, &y, h, w, false).unwrap().0
                - ssim_with_grad(&xm, &y, h, w, false).unwrap().0)
                / (2.0 * eps);
            assert!((fd - gx[p]).abs() < 1e-7, "x[{p}]: {fd} vs {}", gx[p]);
            let mut yp = y.clone();
            yp[p] += eps;
            let mut ym = y.clone();
            ym[p] -= eps;
            let fd = (ssim_with_grad(&x, &yp, h, w, false).unwrap().0
                - ssim_with_grad(&x, &ym, h, w, false).unwrap().0)
                / (2.0 * eps);
            assert!((fd - gy[p]).abs() < 1e-7, "y[{p}]: {fd} vs {}", gy[p]);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mse_psnr_cases() {
        let x = random_image(5, 0.0, 0.85);
        assert_eq!(mse(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(psnr(x.view(), x.view()).unwrap(), PSNR_CAP_DB);
        let y = x.mapv(|v| v + 0.1);
        assert!((mse(x.view(), y.view()).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(x.view(), y.view()).unwrap() - 20.0).abs() < 1e-9);
        let z = random_image(6, 0.0, 1.0);
        assert_eq!(mse(x.view(), z.view()).unwrap(), mse(z.view(), x.view()).unwrap());
    }
}
