//! Data-consistency sub-step: a fixed number of momentum gradient-descent
//! steps on `½‖A(x) − y‖²`, warm-started from the previous prior sample.

use crate::error::{check_len, invalid, Error, Result};
use crate::latent::LinearCodec;
use crate::linalg::{norm_sq, sub};
use crate::operators::LinearOperator;
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityConfig<T> {
    /// Gradient steps per outer iteration.
    pub tau: usize,
    pub learning_rate: T,
    /// Heavy-ball coefficient in `[0, 1)`.
    pub momentum: T,
    /// Stop early once the loss drops to this level (off when `None`).
    pub loss_floor: Option<T>,
}

impl<T: Scalar> FidelityConfig<T> {
    pub fn new(tau: usize, learning_rate: T, momentum: T) -> Result<Self> {
        let cfg = Self {
            tau,
            learning_rate,
            momentum,
            loss_floor: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_loss_floor(mut self, floor: T) -> Self {
        self.loss_floor = Some(floor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityOutput<T> {
    pub x: Vec<T>,
    /// `losses[j]` is the loss after `j` steps; `losses[0]` is the initial loss.
    pub losses: Vec<T>,
}

impl<T: Scalar> FidelityOutput<T> {
    pub fn final_loss(&self) -> T {
        *self.losses.last().expect("trace holds the initial loss")
    }
}

/// `½‖A x − y‖²`
pub fn fidelity_loss<T: Scalar, A: LinearOperator<T> + ?Sized>(op: &A, x: &[T], y: &[T]) -> Result<T> {
    check_len("fidelity input", op.in_shape().len(), x.len())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    Ok(norm_sq(&sub(&op.apply(x), y)) / T::of(2.0))
}

/// `Aᵀ (A x − y)`
pub fn fidelity_gradient<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    x: &[T],
    y: &[T],
) -> Result<Vec<T>> {
    check_len("fidelity input", op.in_shape().len(), x.len())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    Ok(op.adjoint(&sub(&op.apply(x), y)))
}

/// Heavy-ball descent: `u ← m u − lr ∇`, `x ← x + u`, with `u₀ = 0`.
fn momentum_descent<T: Scalar>(
    init: &[T],
    velocity: &mut [T],
    cfg: &FidelityConfig<T>,
    stage: &'static str,
    loss_and_grad: impl Fn(&[T]) -> (T, Vec<T>),
) -> Result<FidelityOutput<T>> {
    cfg.validate()?;
    let mut x = init.to_vec();
    let mut losses = Vec::with_capacity(cfg.tau + 1);
    for step in 0..cfg.tau {
        let (loss, grad) = loss_and_grad(&x);
        if !loss.is_finite() || !all_finite(&grad) {
            return Err(Error::NonFinite { stage, step });
        }
        losses.push(loss);
        if cfg.loss_floor.is_some_and(|f| loss <= f) {
            return Ok(FidelityOutput { x, losses });
        }
        for ((u, xi), g) in velocity.iter_mut().zip(x.iter_mut()).zip(&grad) {
            *u = cfg.momentum * *u - cfg.learning_rate * *g;
            *xi += *u;
        }
    }
    let (loss, _) = loss_and_grad(&x);
    if !loss.is_finite() || !all_finite(&x) {
        return Err(Error::NonFinite {
            stage,
            step: cfg.tau,
        });
    }
    losses.push(loss);
    Ok(FidelityOutput { x, losses })
}

/// Runs exactly `cfg.tau` momentum steps on `½‖A x − y‖²` from `v_init`
/// (fewer only if the optional loss floor is reached).
pub fn data_fidelity<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    y: &[T],
    v_init: &[T],
    cfg: &FidelityConfig<T>,
) -> Result<FidelityOutput<T>> {
    check_len("fidelity input", op.in_shape().len(), v_init.len())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    let mut velocity = vec![T::zero(); v_init.len()];
    data_fidelity_resume(op, y, v_init, &mut velocity, cfg)
}

/// [`data_fidelity`] continuing from a given heavy-ball velocity, which is
/// updated in place. Consecutive calls equal one longer run.
pub fn data_fidelity_resume<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    y: &[T],
    v_init: &[T],
    velocity: &mut [T],
    cfg: &FidelityConfig<T>,
) -> Result<FidelityOutput<T>> {
    check_len("fidelity input", op.in_shape().len(), v_init.len())?;
    check_len("fidelity velocity", v_init.len(), velocity.len())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    momentum_descent(v_init, velocity, cfg, "data fidelity", |x| {
        let r = sub(&op.apply(x), y);
        (norm_sq(&r) / T::of(2.0), op.adjoint(&r))
    })
}

/// Momentum descent over the latent code on `½‖A D z − y‖²`; the gradient
/// is `Dᵀ Aᵀ (A D z − y)`.
pub fn data_fidelity_latent<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    y: &[T],
    vhat_init: &[T],
    codec: &LinearCodec<T>,
    cfg: &FidelityConfig<T>,
) -> Result<FidelityOutput<T>> {
    check_len("latent input", codec.latent_dim(), vhat_init.len())?;
    check_len("codec output", op.in_shape().len(), codec.pixel_dim())?;
    check_len("measurement", op.out_shape().len(), y.len())?;
    let mut velocity = vec![T::zero(); vhat_init.len()];
    momentum_descent(vhat_init, &mut velocity, cfg, "latent data fidelity", |z| {
        let r = sub(&op.apply(&codec.decode(z)), y);
        (
            norm_sq(&r) / T::of(2.0),
            codec.decode_adjoint(&op.adjoint(&r)),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::make_pca_codec;
    use crate::linalg::dot;
    use crate::operators::{make_downsample, ImageShape, Identity};
    use crate::rng::{seeded, standard_normal};

    fn cfg(tau: usize, lr: f64, m: f64) -> FidelityConfig<f64> {
        FidelityConfig::new(tau, lr, m).unwrap()
    }

    #[test]
    fn loss_examples() {
        let op = Identity::new(ImageShape::gray(1, 3));
        assert_eq!(fidelity_loss(&op, &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(fidelity_loss(&op, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(fidelity_loss(&op, &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let op = make_downsample(ImageShape::gray(4, 4), 2).unwrap();
        let mut rng = seeded(8);
        let x: Vec<f64> = standard_normal(&mut rng, 16);
        let y: Vec<f64> = standard_normal(&mut rng, 4);
        let g = fidelity_gradient(&op, &x, &y).unwrap();
        let fd: Vec<f64> = (0..16)
            .map(|i| {
                let h = 1e-6;
                let mut p = x.clone();
                p[i] += h;
                let mut m = x.clone();
                m[i] -= h;
                (fidelity_loss(&op, &p, &y).unwrap() - fidelity_loss(&op, &m, &y).unwrap()) / (2.0 * h)
            })
            .collect();
        let err = sub(&fd, &g).iter().map(|v| v * v).sum::<f64>().sqrt() / dot(&g, &g).sqrt();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn converges_on_identity() {
        let op = Identity::new(ImageShape::gray(4, 4));
        let y: Vec<f64> = standard_normal(&mut seeded(1), 16);
        let out = data_fidelity(&op, &y, &[0.0; 16], &cfg(300, 0.1, 0.9)).unwrap();
        assert_eq!(out.losses.len(), 301);
        assert!(out.final_loss() < 1e-8 * out.losses[0]);
    }

    #[test]
    fn zero_steps_is_identity() {
        let op = Identity::new(ImageShape::gray(2, 2));
        let v = vec![0.1, 0.2, 0.3, 0.4];
        let out = data_fidelity(&op, &[0.0; 4], &v, &cfg(0, 0.1, 0.9)).unwrap();
        assert_eq!(out.x, v);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let op = Identity::new(ImageShape::gray(2, 2));
        let err = data_fidelity(&op, &[1.0; 4], &[0.0; 4], &cfg(5000, 50.0, 0.9)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { stage: "data fidelity", .. }));
    }

    #[test]
    fn loss_floor_stops_early() {
        let op = Identity::new(ImageShape::gray(2, 2));
        let c = cfg(500, 0.1, 0.9).with_loss_floor(1e-3);
        let out = data_fidelity(&op, &[1.0; 4], &[0.0; 4], &c).unwrap();
        assert!(out.losses.len() < 501);
        assert!(out.final_loss() <= 1e-3);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(FidelityConfig::new(10, 0.0, 0.9).is_err());
        assert!(FidelityConfig::new(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn latent_fixed_point_and_gradient() {
        let mut rng = seeded(3);
        let data: Vec<Vec<f64>> = (0..6).map(|_| standard_normal(&mut rng, 9)).collect();
        let codec = make_pca_codec(&data, 3).unwrap();
        let op = Identity::new(ImageShape::gray(3, 3));
        let z_star = vec![0.5, -1.0, 2.0];
        let y = codec.decode(&z_star);
        let out = data_fidelity_latent(&op, &y, &z_star, &codec, &cfg(20, 0.1, 0.9)).unwrap();
        assert!(out.losses.iter().all(|l| *l < 1e-28));
        assert!(sub(&out.x, &z_star).iter().all(|v| v.abs() < 1e-14));
        let id = data_fidelity_latent(&op, &y, &[0.0; 3], &codec, &cfg(0, 0.1, 0.9)).unwrap();
        assert_eq!(id.x, vec![0.0; 3]);

        // Gradient through the decoder chain versus finite differences.
        let down = make_downsample(ImageShape::gray(3, 3), 3).unwrap();
        let yd = vec![0.7];
        let z: Vec<f64> = standard_normal(&mut rng, 3);
        let loss = |z: &[f64]| fidelity_loss(&down, &codec.decode(z), &yd).unwrap();
        let g = codec.decode_adjoint(&fidelity_gradient(&down, &codec.decode(&z), &yd).unwrap());
        for i in 0..3 {
            let h = 1e-6;
            let mut p = z.clone();
            p[i] += h;
            let mut m = z.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn deterministic() {
        let op = make_downsample(ImageShape::gray(8, 8), 4).unwrap();
        let y: Vec<f64> = standard_normal(&mut seeded(2), 4);
        let a = data_fidelity(&op, &y, &vec![0.1; 64], &cfg(50, 1.0, 0.9)).unwrap();
        let b = data_fidelity(&op, &y, &vec![0.1; 64], &cfg(50, 1.0, 0.9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resumed_runs_chain_into_one() {
        let op = make_downsample(ImageShape::gray(8, 8), 2).unwrap();
        let y: Vec<f64> = standard_normal(&mut seeded(3), 16);
        let x0: Vec<f64> = standard_normal(&mut seeded(4), 64);
        let long = data_fidelity(&op, &y, &x0, &cfg(40, 2.0, 0.8)).unwrap();
        let mut u = vec![0.0; 64];
        let half = data_fidelity_resume(&op, &y, &x0, &mut u, &cfg(20, 2.0, 0.8)).unwrap();
        let rest = data_fidelity_resume(&op, &y, &half.x, &mut u, &cfg(20, 2.0, 0.8)).unwrap();
        assert_eq!(rest.x, long.x);
    }
}
