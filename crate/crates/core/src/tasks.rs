//! Desk-scale restoration tasks: operator specs, synthetic image priors
//! and hyperparameter presets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::fidelity::FidelityConfig;
use crate::latent::{make_pca_codec, LinearCodec};
use crate::linalg::Matrix;
use crate::operators::{
    gaussian_kernel, make_centered_inpainting, make_downsample, make_named_blur, motion_kernel,
    Identity, ImageShape, LinearOperator,
};
use crate::purify::PurifyBackend;
use crate::rng::{seeded, Rng};
use crate::scalar::Scalar;
use crate::schedule::PurificationSchedule;
use crate::score::{Covariance, GaussianMixture};
use crate::solver::{LatentApproach, SolverConfig};

/// A forward operator by name and parameters, e.g. `sr:4` or `motion:9:7:45`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OperatorSpec {
    Identity,
    /// Centered square box of the given side.
    Inpaint { box_size: usize },
    SuperResolution { factor: usize },
    GaussianBlur { size: usize, sigma: f64 },
    /// Angle in degrees.
    MotionBlur { size: usize, length: f64, angle: f64 },
}

impl OperatorSpec {
    pub const DESK_INPAINT: Self = Self::Inpaint { box_size: 12 };
    pub const DESK_SR: Self = Self::SuperResolution { factor: 4 };
    pub const DESK_GAUSSIAN: Self = Self::GaussianBlur { size: 9, sigma: 1.5 };
    pub const DESK_MOTION: Self = Self::MotionBlur {
        size: 9,
        length: 7.0,
        angle: 45.0,
    };

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Inpaint { .. } => "inpaint",
            Self::SuperResolution { .. } => "sr",
            Self::GaussianBlur { .. } => "gaussian",
            Self::MotionBlur { .. } => "motion",
        }
    }

    pub fn build<T: Scalar>(&self, shape: ImageShape) -> Result<Box<dyn LinearOperator<T>>> {
        Ok(match *self {
            Self::Identity => Box::new(Identity::new(shape)),
            Self::Inpaint { box_size } => Box::new(make_centered_inpainting(shape, box_size, box_size)?),
            Self::SuperResolution { factor } => Box::new(make_downsample(shape, factor)?),
            Self::GaussianBlur { size, sigma } => Box::new(make_named_blur(
                shape,
                gaussian_kernel(size, T::of(sigma))?,
                "gaussian",
            )?),
            Self::MotionBlur { size, length, angle } => Box::new(make_named_blur(
                shape,
                motion_kernel(size, T::of(length), T::of(angle.to_radians()))?,
                "motion",
            )?),
        })
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Inpaint { box_size } => write!(f, "inpaint:{box_size}"),
            Self::SuperResolution { factor } => write!(f, "sr:{factor}"),
            Self::GaussianBlur { size, sigma } => write!(f, "gaussian:{size}:{sigma}"),
            Self::MotionBlur { size, length, angle } => write!(f, "motion:{size}:{length}:{angle}"),
        }
    }
}

impl FromStr for OperatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| invalid(format!("operator `{s}`: bad number `{a}`"))),
            }
        };
        let int = |i: usize, default: usize| -> Result<usize> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a
                    .parse::<usize>()
                    .map_err(|_| invalid(format!("operator `{s}`: bad integer `{a}`"))),
            }
        };
        let max_args = match kind {
            "identity" => 0,
            "inpaint" | "sr" => 1,
            "gaussian" => 2,
            "motion" => 3,
            _ => return Err(invalid(format!("unknown operator `{kind}`"))),
        };
        if args.len() > max_args {
            return Err(invalid(format!("operator `{s}` takes at most {max_args} parameters")));
        }
        Ok(match kind {
            "identity" => Self::Identity,
            "inpaint" => Self::Inpaint { box_size: int(0, 12)? },
            "sr" => Self::SuperResolution { factor: int(0, 4)? },
            "gaussian" => Self::GaussianBlur {
                size: int(0, 9)?,
                sigma: num(1, 1.5)?,
            },
            _ => Self::MotionBlur {
                size: int(0, 9)?,
                length: num(1, 7.0)?,
                angle: num(2, 45.0)?,
            },
        })
    }
}

/// Parses `HxW` or `HxWxC`.
pub fn parse_shape(s: &str) -> Result<ImageShape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("bad image shape `{s}`")))?;
    match dims[..] {
        [h, w] => ImageShape::new(h, w, 1),
        [h, w, c] => ImageShape::new(h, w, c),
        _ => Err(invalid(format!("bad image shape `{s}`, expected HxW or HxWxC"))),
    }
}

/// Orthonormal 2-D DCT-II basis; column `u·W + v` holds frequency `(u, v)`.
pub fn dct_basis<T: Scalar>(height: usize, width: usize) -> Matrix<T> {
    let axis = |len: usize| -> Vec<Vec<f64>> {
        (0..len)
            .map(|u| {
                let c = if u == 0 { (1.0 / len as f64).sqrt() } else { (2.0 / len as f64).sqrt() };
                (0..len)
                    .map(|p| c * (PI * (2 * p + 1) as f64 * u as f64 / (2 * len) as f64).cos())
                    .collect()
            })
            .collect()
    };
    let (cy, cx) = (axis(height), axis(width));
    let n = height * width;
    Matrix::from_fn(n, n, |pix, freq| {
        let (y, x) = (pix / width, pix % width);
        let (u, v) = (freq / width, freq % width);
        T::of(cy[u][y] * cx[v][x])
    })
}

/// `λ(u, v) ∝ (1 + (u² + v²)/ρ²)^(−p)` in [`dct_basis`] order, scaled so
/// the mean eigenvalue (the average pixel variance) is `rms²`.
pub fn power_law_spectrum<T: Scalar>(
    height: usize,
    width: usize,
    rms: f64,
    correlation: f64,
    exponent: f64,
) -> Result<Vec<T>> {
    if !(rms > 0.0 && correlation > 0.0 && exponent >= 0.0) {
        return Err(invalid("spectrum needs rms > 0, correlation > 0, exponent >= 0"));
    }
    let raw: Vec<f64> = (0..height * width)
        .map(|f| {
            let (u, v) = ((f / width) as f64, (f % width) as f64);
            (1.0 + (u * u + v * v) / (correlation * correlation)).powf(-exponent)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|l| T::of(l * rms * rms / mean)).collect())
}

/// Piecewise-constant image in `[-1, 1]`: a flat background plus a few
/// rectangles and ellipses.
pub fn template_image<T: Scalar>(height: usize, width: usize, rng: &mut Rng) -> Vec<T> {
    let mut img = vec![rng.random_range(-0.6..0.6); height * width];
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let value: f64 = rng.random_range(-1.0..1.0);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.15..0.4) * height as f64;
        let rx = rng.random_range(0.15..0.4) * width as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    img[y * width + x] = value;
                }
            }
        }
    }
    img.into_iter().map(T::of).collect()
}

/// Synthetic grayscale image prior: an equal-weight mixture of template
/// images, each with a shared stationary residual covariance diagonal in
/// the DCT basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePriorSpec {
    pub height: usize,
    pub width: usize,
    pub components: usize,
    /// Root-mean-square pixel deviation of the residual around a template.
    pub residual_std: f64,
    /// Frequency scale ρ of the residual spectrum.
    pub correlation: f64,
    /// Spectral decay exponent p.
    pub exponent: f64,
    pub seed: u64,
}

impl Default for ImagePriorSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            components: 8,
            residual_std: 0.1,
            correlation: 2.0,
            exponent: 1.5,
            seed: 0,
        }
    }
}

impl ImagePriorSpec {
    pub fn shape(&self) -> Result<ImageShape> {
        ImageShape::new(self.height, self.width, 1)
    }

    fn residual<T: Scalar>(&self) -> Result<Covariance<T>> {
        self.shape()?;
        let basis = Arc::new(dct_basis::<T>(self.height, self.width));
        let eig = power_law_spectrum(self.height, self.width, self.residual_std, self.correlation, self.exponent)?;
        Ok(Covariance::Spectral {
            basis,
            eigenvalues: eig,
        })
    }

    /// Template mixture.
    pub fn mixture<T: Scalar>(&self) -> Result<GaussianMixture<T>> {
        if self.components == 0 {
            return Err(invalid("image prior needs at least one component"));
        }
        let cov = self.residual::<T>()?;
        let mut rng = seeded(self.seed);
        let means: Vec<Vec<T>> = (0..self.components)
            .map(|_| template_image(self.height, self.width, &mut rng))
            .collect();
        let w = T::one() / T::of_usize(self.components);
        GaussianMixture::new(vec![w; self.components], means, vec![cov; self.components])
    }

    /// Zero-mean Gaussian with the residual covariance alone.
    pub fn gaussian<T: Scalar>(&self) -> Result<GaussianMixture<T>> {
        GaussianMixture::gaussian(vec![T::zero(); self.height * self.width], self.residual()?)
    }
}

/// Image of a mixture under the encoder: `z = E x` is again a mixture with
/// means `E μ_i` and covariances `E Σ_i Eᵀ`. Components sharing a
/// covariance basis share the projected one.
pub fn project_prior<T: Scalar>(prior: &GaussianMixture<T>, codec: &LinearCodec<T>) -> Result<GaussianMixture<T>> {
    crate::error::check_len("codec pixel dimension", prior.dim(), codec.pixel_dim())?;
    let e = codec.encoder();
    let (r, n) = (e.rows(), e.cols());
    let mut cache: Vec<(*const Matrix<T>, Vec<T>, Covariance<T>)> = Vec::new();
    let mut covs = Vec::with_capacity(prior.n_components());
    for cov in prior.covariances() {
        if let Covariance::Spectral { basis, eigenvalues } = cov {
            let key = Arc::as_ptr(basis);
            if let Some((_, _, c)) = cache.iter().find(|(k, l, _)| *k == key && l == eigenvalues) {
                covs.push(c.clone());
                continue;
            }
            let eu = e.matmul(basis)?;
            let dense = Matrix::from_fn(r, r, |i, j| {
                (0..n).fold(T::zero(), |acc, k| acc + eu[(i, k)] * eigenvalues[k] * eu[(j, k)])
            });
            let c = Covariance::full(&symmetrize(dense))?;
            cache.push((key, eigenvalues.clone(), c.clone()));
            covs.push(c);
        } else {
            let dense = cov.to_dense(n);
            let ect = dense.matmul(&e.transpose())?;
            covs.push(Covariance::full(&symmetrize(e.matmul(&ect)?))?);
        }
    }
    let means = prior.means().iter().map(|m| codec.encode(m)).collect();
    GaussianMixture::new(prior.weights().to_vec(), means, covs)
}

fn symmetrize<T: Scalar>(m: Matrix<T>) -> Matrix<T> {
    let half = T::of(0.5);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| half * (m[(i, j)] + m[(j, i)]))
}

/// PCA codec of rank `r` fitted to `samples` draws from `prior`.
pub fn fit_codec<T: Scalar>(prior: &GaussianMixture<T>, samples: usize, r: usize, seed: u64) -> Result<LinearCodec<T>> {
    let mut rng = seeded(seed);
    let data: Vec<Vec<T>> = (0..samples).map(|_| prior.sample(&mut rng)).collect();
    make_pca_codec(&data, r)
}

/// Hyperparameters of one pixel-space task, as published for 256×256
/// images and as rescaled for the desk-scale toys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    /// Published learning rate α.
    pub published_learning_rate: f64,
    pub iterations: usize,
    pub t_start: usize,
    pub t_end: usize,
    /// Learning rate used at desk scale.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Total gradient budget `K·τ`.
    pub total_steps: usize,
    pub ddim_steps: usize,
}

impl Preset {
    pub fn tau(&self) -> usize {
        self.total_steps / self.iterations
    }

    pub fn fidelity<T: Scalar>(&self) -> Result<FidelityConfig<T>> {
        FidelityConfig::new(self.tau(), T::of(self.learning_rate), T::of(self.momentum))
    }

    pub fn schedule(&self) -> Result<PurificationSchedule> {
        PurificationSchedule::linear(self.iterations, self.t_start, self.t_end)
    }

    pub fn solver<T: Scalar>(&self, backend: PurifyBackend, seed: u64) -> Result<SolverConfig<T>> {
        Ok(SolverConfig {
            iterations: self.iterations,
            fidelity: self.fidelity()?,
            backend,
            schedule: self.schedule()?,
            seed,
            latent_approach: LatentApproach::None,
        })
    }
}

pub const PRESET_SR: Preset = Preset {
    name: "sr",
    published_learning_rate: 1e3,
    iterations: 10,
    t_start: 400,
    t_end: 0,
    learning_rate: 8.0,
    momentum: 0.9,
    total_steps: 1000,
    ddim_steps: 20,
};

pub const PRESET_GAUSSIAN: Preset = Preset {
    name: "gaussian",
    published_learning_rate: 1e5,
    iterations: 10,
    t_start: 400,
    t_end: 0,
    learning_rate: 0.5,
    momentum: 0.9,
    total_steps: 1000,
    ddim_steps: 20,
};

pub const PRESET_MOTION: Preset = Preset {
    name: "motion",
    published_learning_rate: 1e5,
    iterations: 20,
    t_start: 400,
    t_end: 0,
    learning_rate: 0.5,
    momentum: 0.9,
    total_steps: 1000,
    ddim_steps: 20,
};

pub const PRESET_INPAINT: Preset = Preset {
    name: "inpaint",
    published_learning_rate: 1e3,
    iterations: 20,
    t_start: 700,
    t_end: 0,
    learning_rate: 0.5,
    momentum: 0.9,
    total_steps: 1000,
    ddim_steps: 20,
};

pub const PRESET_DENOISE: Preset = Preset {
    name: "identity",
    published_learning_rate: f64::NAN,
    iterations: 10,
    t_start: 400,
    t_end: 0,
    learning_rate: 0.5,
    momentum: 0.0,
    total_steps: 1000,
    ddim_steps: 20,
};

/// Super-resolution under measurement noise: the schedule stops at
/// `T_K = 100` instead of 0 so the last purification removes noise.
pub const PRESET_SR_NOISY: Preset = Preset {
    name: "sr-noisy",
    t_end: 100,
    ..PRESET_SR
};

/// DPS likelihood step size η at desk scale.
pub const DPS_ETA: f64 = 1.0;

/// Schedule ablation: near-clean measurements, and the two constant
/// schedules compared against linear decay from `T₀ = 400`.
pub const ABLATION_SIGMA: f64 = 0.01;
pub const ABLATION_T_LARGE: usize = 400;
pub const ABLATION_T_SMALL: usize = 40;

pub fn preset_for(spec: &OperatorSpec) -> Preset {
    match spec {
        OperatorSpec::Identity => PRESET_DENOISE,
        OperatorSpec::Inpaint { .. } => PRESET_INPAINT,
        OperatorSpec::SuperResolution { .. } => PRESET_SR,
        OperatorSpec::GaussianBlur { .. } => PRESET_GAUSSIAN,
        OperatorSpec::MotionBlur { .. } => PRESET_MOTION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::adjoint_residual;
    use crate::rng::standard_normal;

    #[test]
    fn operator_specs_round_trip() {
        for s in ["identity", "inpaint:12", "sr:4", "gaussian:9:1.5", "motion:9:7:45"] {
            let spec: OperatorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("sr".parse::<OperatorSpec>().unwrap(), OperatorSpec::DESK_SR);
        assert_eq!("motion".parse::<OperatorSpec>().unwrap(), OperatorSpec::DESK_MOTION);
        for bad in ["blur", "sr:x", "sr:4:2", "gaussian:9:a"] {
            assert!(bad.parse::<OperatorSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn desk_operators_build_and_are_adjoint() {
        let shape = ImageShape::gray(32, 32);
        let mut rng = seeded(5);
        for spec in [
            OperatorSpec::Identity,
            OperatorSpec::DESK_INPAINT,
            OperatorSpec::DESK_SR,
            OperatorSpec::DESK_GAUSSIAN,
            OperatorSpec::DESK_MOTION,
        ] {
            let op = spec.build::<f64>(shape).unwrap();
            let x: Vec<f64> = standard_normal(&mut rng, shape.len());
            let y: Vec<f64> = standard_normal(&mut rng, op.out_shape().len());
            assert!(adjoint_residual(op.as_ref(), &x, &y) < 1e-12, "{spec}");
        }
        assert!(OperatorSpec::SuperResolution { factor: 5 }.build::<f64>(shape).is_err());
    }

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("32x16").unwrap(), ImageShape::gray(32, 16));
        assert_eq!(parse_shape("8x8x3").unwrap(), ImageShape::new(8, 8, 3).unwrap());
        assert!(parse_shape("8").is_err());
        assert!(parse_shape("0x8").is_err());
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let b = dct_basis::<f64>(6, 4);
        let g = b.transpose().matmul(&b).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(24)) < 1e-12);
        // Column 0 is the flat image.
        assert!(b.column(0).iter().all(|v| (v - 1.0 / 24f64.sqrt()).abs() < 1e-14));
    }

    #[test]
    fn spectrum_sets_pixel_variance() {
        let eig = power_law_spectrum::<f64>(8, 8, 0.2, 2.0, 1.5).unwrap();
        let mean = eig.iter().sum::<f64>() / 64.0;
        assert!((mean - 0.04).abs() < 1e-15);
        assert!(eig.windows(2).take(7).all(|w| w[0] > w[1]));
    }

    #[test]
    fn templates_stay_in_range() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let img: Vec<f64> = template_image(16, 16, &mut rng);
            assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn prior_is_deterministic() {
        let spec = ImagePriorSpec {
            height: 8,
            width: 8,
            components: 3,
            ..Default::default()
        };
        let a: GaussianMixture<f64> = spec.mixture().unwrap();
        let b: GaussianMixture<f64> = spec.mixture().unwrap();
        assert_eq!(a.means(), b.means());
        assert_eq!(a.n_components(), 3);
        assert_eq!(spec.gaussian::<f64>().unwrap().n_components(), 1);
    }

    #[test]
    fn presets_match_published_tables() {
        assert_eq!((PRESET_SR.iterations, PRESET_SR.t_start, PRESET_SR.published_learning_rate), (10, 400, 1e3));
        assert_eq!((PRESET_GAUSSIAN.iterations, PRESET_GAUSSIAN.published_learning_rate), (10, 1e5));
        assert_eq!((PRESET_MOTION.iterations, PRESET_MOTION.published_learning_rate), (20, 1e5));
        assert_eq!((PRESET_INPAINT.iterations, PRESET_INPAINT.t_start), (20, 700));
        for p in [PRESET_SR, PRESET_GAUSSIAN, PRESET_MOTION, PRESET_INPAINT] {
            assert_eq!(p.tau() * p.iterations, 1000);
            let cfg = p.solver::<f64>(PurifyBackend::Ddim { n_steps: p.ddim_steps }, 1).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.schedule.times()[0], p.t_start);
            assert_eq!(*cfg.schedule.times().last().unwrap(), 0);
        }
    }

    #[test]
    fn projected_prior_matches_dense_projection() {
        let spec = ImagePriorSpec {
            height: 4,
            width: 4,
            components: 3,
            ..Default::default()
        };
        let prior: GaussianMixture<f64> = spec.mixture().unwrap();
        let codec = fit_codec(&prior, 40, 5, 2).unwrap();
        let latent = project_prior(&prior, &codec).unwrap();
        assert_eq!(latent.dim(), 5);
        let e = codec.encoder();
        for (i, cov) in prior.covariances().iter().enumerate() {
            let want = e.matmul(&cov.to_dense(16).matmul(&e.transpose()).unwrap()).unwrap();
            assert!(latent.covariances()[i].to_dense(5).max_abs_diff(&want) < 1e-12);
            assert_eq!(latent.means()[i], codec.encode(&prior.means()[i]));
        }
    }
}
