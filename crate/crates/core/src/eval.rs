//! Image-quality metrics and the closed-form Gaussian posterior oracle.

use crate::error::{check_len, invalid, Result};
use crate::linalg::{sub, Matrix};
use crate::operators::{materialize, ImageShape, LinearOperator};
use crate::scalar::Scalar;

pub fn mse<T: Scalar>(x: &[T], reference: &[T]) -> Result<T> {
    check_len("metric input", reference.len(), x.len())?;
    if x.is_empty() {
        return Err(invalid("metric input is empty"));
    }
    let total: T = x.iter().zip(reference).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
    Ok(total / T::of_usize(x.len()))
}

/// `10 log₁₀(peak² / MSE)` in dB. Identical images give `+∞`.
pub fn psnr<T: Scalar>(x: &[T], reference: &[T], peak: T) -> Result<T> {
    if !(peak > T::zero()) {
        return Err(invalid("PSNR peak must be positive"));
    }
    let e = mse(x, reference)?;
    if e == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::of(10.0) * (peak * peak / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig<T> {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: T,
    pub k1: T,
    pub k2: T,
    pub peak: T,
    /// Wrap windows around the image border instead of keeping only
    /// positions where the window fits.
    pub circular: bool,
}

impl<T: Scalar> SsimConfig<T> {
    /// 11×11 Gaussian window, σ = 1.5, k₁ = 0.01, k₂ = 0.03.
    pub fn standard(peak: T) -> Self {
        Self {
            window: 11,
            sigma: T::of(1.5),
            k1: T::of(0.01),
            k2: T::of(0.03),
            peak,
            circular: false,
        }
    }
}

/// Mean structural similarity over all window positions and channels.
pub fn ssim<T: Scalar>(x: &[T], reference: &[T], shape: ImageShape, cfg: &SsimConfig<T>) -> Result<T> {
    check_len("ssim input", shape.len(), x.len())?;
    check_len("ssim reference", shape.len(), reference.len())?;
    if cfg.window.is_multiple_of(2) {
        return Err(invalid("SSIM window must be odd"));
    }
    if !cfg.circular && (shape.height < cfg.window || shape.width < cfg.window) {
        return Err(invalid(format!(
            "image {shape} smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let kernel = crate::operators::gaussian_kernel(cfg.window, cfg.sigma)?;
    let c1 = (cfg.k1 * cfg.peak) * (cfg.k1 * cfg.peak);
    let c2 = (cfg.k2 * cfg.peak) * (cfg.k2 * cfg.peak);
    let w = cfg.window;
    let (h, wd) = (shape.height, shape.width);
    let (ys, xs) = if cfg.circular {
        (h, wd)
    } else {
        (h - w + 1, wd - w + 1)
    };
    let two = T::of(2.0);
    let mut total = T::zero();
    let mut count = 0usize;
    for c in 0..shape.channels {
        let at = |img: &[T], y: usize, xx: usize| img[shape.index(c, y % h, xx % wd)];
        for oy in 0..ys {
            for ox in 0..xs {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) =
                    (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
                for i in 0..w {
                    for j in 0..w {
                        let k = kernel[(i, j)];
                        let a = at(x, oy + i, ox + j);
                        let b = at(reference, oy + i, ox + j);
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let num = (two * mx * my + c1) * (two * cov + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / T::of_usize(count))
}

/// Exact posterior mean for a Gaussian prior `N(μ₀, Σ₀)` and `y = A x + σ_y n`:
/// `μ₀ + Σ₀Aᵀ(AΣ₀Aᵀ + σ_y² I)⁻¹(y − Aμ₀)`, via a dense Cholesky solve.
pub fn gaussian_posterior_oracle<T: Scalar, A: LinearOperator<T> + ?Sized>(
    prior_mean: &[T],
    prior_cov: &Matrix<T>,
    op: &A,
    y: &[T],
    sigma_y: T,
) -> Result<Vec<T>> {
    let n = op.in_shape().len();
    check_len("prior mean", n, prior_mean.len())?;
    check_len("prior covariance", n, prior_cov.rows())?;
    check_len("prior covariance", n, prior_cov.cols())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    if !(sigma_y >= T::zero()) {
        return Err(invalid("sigma_y must be nonnegative"));
    }
    let a = materialize(op);
    let cov_at = prior_cov.matmul(&a.transpose())?;
    let mut s = a.matmul(&cov_at)?;
    for i in 0..s.rows() {
        s[(i, i)] += sigma_y * sigma_y;
    }
    let resid = sub(y, &op.apply(prior_mean));
    let w = s.solve_spd(&resid)?;
    let mut out = cov_at.matvec(&w);
    for (o, m) in out.iter_mut().zip(prior_mean) {
        *o += *m;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// dB; `+∞` for a perfect reconstruction.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub nfe: usize,
    /// Seconds.
    pub wall_time: f64,
}

impl MetricReport {
    pub fn compute<T: Scalar>(
        x: &[T],
        reference: &[T],
        shape: ImageShape,
        peak: T,
        nfe: usize,
        wall_time: f64,
    ) -> Result<Self> {
        let mut cfg = SsimConfig::standard(peak);
        if shape.height < cfg.window || shape.width < cfg.window {
            cfg.circular = true;
        }
        Ok(Self {
            psnr: psnr(x, reference, peak)?.to_f64_lossy(),
            ssim: ssim(x, reference, shape, &cfg)?.to_f64_lossy(),
            mse: mse(x, reference)?.to_f64_lossy(),
            nfe,
            wall_time,
        })
    }
}
