//! Gaussian-windowed SSIM and its gradient.
//!
//! Local statistics come from a separable, normalized Gaussian window
//! (σ = 1.5) evaluated at every position where the window fits inside the
//! image ("valid" positions). The index is the mean over those positions and
//! the three channels.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::image::{Image, Scalar, CHANNELS};

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_window<T: Scalar>(size: usize) -> Vec<T> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::from(v / sum).unwrap()).collect()
}

fn filter_valid<T: Scalar>(x: ArrayView2<T>, g: &[T]) -> Array2<T> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<T>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut s = T::zero();
            for (j, &gj) in g.iter().enumerate() {
                s = s + gj * x[[y, ox + j]];
            }
            rows[[y, ox]] = s;
        }
    }
    let mut out = Array2::<T>::zeros((oh, ow));
    for oy in 0..oh {
        for (i, &gi) in g.iter().enumerate() {
            let src = rows.row(oy + i);
            let mut dst = out.row_mut(oy);
            dst.zip_mut_with(&src, |d, &s| *d = *d + gi * s);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a `(h-k+1, w-k+1)` map back to `(h, w)`.
fn filter_valid_adjoint<T: Scalar>(y: &Array2<T>, g: &[T], h: usize, w: usize) -> Array2<T> {
    let (oh, ow) = y.dim();
    let mut rows = Array2::<T>::zeros((h, ow));
    for oy in 0..oh {
        for (i, &gi) in g.iter().enumerate() {
            let src = y.row(oy);
            let mut dst = rows.row_mut(oy + i);
            dst.zip_mut_with(&src, |d, &s| *d = *d + gi * s);
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for r in 0..h {
        for ox in 0..ow {
            let v = rows[[r, ox]];
            for (j, &gj) in g.iter().enumerate() {
                out[[r, ox + j]] = out[[r, ox + j]] + gj * v;
            }
        }
    }
    out
}

fn check<T: Scalar>(pred: &Image<T>, gt: &Image<T>, window: usize) -> Result<()> {
    pred.same_size(gt)?;
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::config(format!(
            "ssim window must be odd, got {window}"
        )));
    }
    let (h, w) = pred.size();
    if h < window || w < window {
        return Err(Error::dim(format!(
            "image {h}x{w} is smaller than the {window}x{window} ssim window"
        )));
    }
    Ok(())
}

/// Mean structural similarity in `[-1, 1]`.
pub fn ssim<T: Scalar>(pred: &Image<T>, gt: &Image<T>, window: usize) -> Result<T> {
    Ok(compute(pred, gt, window, false)?.0)
}

/// `1 - ssim`
pub fn ssim_loss<T: Scalar>(pred: &Image<T>, gt: &Image<T>, window: usize) -> Result<T> {
    Ok(T::one() - ssim(pred, gt, window)?)
}

/// SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad<T: Scalar>(
    pred: &Image<T>,
    gt: &Image<T>,
    window: usize,
) -> Result<(T, Array3<T>)> {
    let (v, g) = compute(pred, gt, window, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn compute<T: Scalar>(
    pred: &Image<T>,
    gt: &Image<T>,
    window: usize,
    want_grad: bool,
) -> Result<(T, Option<Array3<T>>)> {
    check(pred, gt, window)?;
    let g = gaussian_window::<T>(window);
    let (h, w) = pred.size();
    let (oh, ow) = (h + 1 - window, w + 1 - window);
    let n = T::from(CHANNELS * oh * ow).unwrap();
    let c1 = T::from(SSIM_C1).unwrap();
    let c2 = T::from(SSIM_C2).unwrap();
    let two = T::one() + T::one();

    let mut total = T::zero();
    let mut grad = want_grad.then(|| Array3::<T>::zeros((CHANNELS, h, w)));
    for c in 0..CHANNELS {
        let x = pred.channel(c);
        let y = gt.channel(c);
        let mu_x = filter_valid(x, &g);
        let mu_y = filter_valid(y, &g);
        let e_xx = filter_valid((&x * &x).view(), &g);
        let e_yy = filter_valid((&y * &y).view(), &g);
        let e_xy = filter_valid((&x * &y).view(), &g);

        let mut d_mu = Array2::<T>::zeros((oh, ow));
        let mut d_xx = Array2::<T>::zeros((oh, ow));
        let mut d_xy = Array2::<T>::zeros((oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
                let mxy = mx * my;
                let var_x = e_xx[[i, j]] - mx * mx;
                let var_y = e_yy[[i, j]] - my * my;
                let cov = e_xy[[i, j]] - mxy;
                let a1 = mxy + mxy + c1;
                let a2 = cov + cov + c2;
                let b1 = mx * mx + my * my + c1;
                let b2 = var_x + var_y + c2;
                let s = (a1 * a2) / (b1 * b2);
                total = total + s;
                if want_grad {
                    let den = b1 * b2;
                    d_mu[[i, j]] = (two * my * (a2 - a1) / den
                        - two * mx * s * (T::one() / b1 - T::one() / b2))
                        / n;
                    d_xx[[i, j]] = -s / b2 / n;
                    d_xy[[i, j]] = two * a1 / den / n;
                }
            }
        }
        if let Some(grad) = grad.as_mut() {
            let g_mu = filter_valid_adjoint(&d_mu, &g, h, w);
            let g_xx = filter_valid_adjoint(&d_xx, &g, h, w);
            let g_xy = filter_valid_adjoint(&d_xy, &g, h, w);
            let mut dst = grad.index_axis_mut(ndarray::Axis(0), c);
            ndarray::Zip::from(&mut dst)
                .and(&x)
                .and(&y)
                .and(&g_mu)
                .and(&g_xx)
                .and(&g_xy)
                .for_each(|d, &xv, &yv, &a, &b, &cc| *d = a + two * xv * b + yv * cc);
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window::<f64>(11);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Image::<f32>::from_fn(20, 17, |_, _, _| rng.random());
        assert_eq!(ssim(&x, &x, 11).unwrap(), 1.0);
        assert_eq!(ssim_loss(&x, &x, 11).unwrap(), 0.0);
    }

    #[test]
    fn too_small_is_an_error() {
        let x = Image::<f64>::constant(10, 30, 0.5);
        assert!(matches!(ssim(&x, &x, 11), Err(Error::Dimension(_))));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = gaussian_window::<f64>(5);
        let x = Array2::from_shape_fn((9, 8), |_| rng.random::<f64>());
        let r = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        let lhs = (&filter_valid(x.view(), &g) * &r).sum();
        let rhs = (&x * &filter_valid_adjoint(&r, &g, 9, 8)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
