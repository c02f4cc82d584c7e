//! Outer loops: DCDP in pixel space, DCDP in a latent space, a
//! fidelity-only baseline, and diffusion posterior sampling (DPS).

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{check_len, invalid, Error, Result};
use crate::eval::{mse, psnr};
use crate::fidelity::{data_fidelity, data_fidelity_latent, data_fidelity_resume, FidelityConfig};
use crate::latent::{re_encode, LinearCodec};
use crate::linalg::{axpy, max_abs, sub};
use crate::operators::{LinearOperator, Measurement};
use crate::purify::{dpur, PurifyBackend};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::scalar::{all_finite, Scalar};
use crate::schedule::{NoiseSchedule, PurificationSchedule};
use crate::score::{CountingScore, ScoreModel};

/// DPS aborts once `‖x‖∞` exceeds this.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LatentApproach {
    /// Pixel-space prior; [`dcdp_solve`].
    #[default]
    None,
    /// Approach I: gradient descent on the latent code through the decoder.
    LatentDC,
    /// Approach II: gradient descent in pixel space, then encode.
    PixelDC,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    /// Outer iterations `K`.
    pub iterations: usize,
    pub fidelity: FidelityConfig<T>,
    pub backend: PurifyBackend,
    pub schedule: PurificationSchedule,
    pub seed: u64,
    pub latent_approach: LatentApproach,
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("need at least one outer iteration"));
        }
        if self.schedule.len() != self.iterations {
            return Err(invalid(format!(
                "purification schedule has {} entries for K = {}",
                self.schedule.len(),
                self.iterations
            )));
        }
        self.fidelity.validate()?;
        self.backend.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpsConfig<T> {
    /// Reverse steps; must equal the noise schedule length.
    pub n_steps: usize,
    /// Likelihood step size η.
    pub eta: T,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NfeCount {
    pub score: usize,
    pub jacobian: usize,
}

/// State after one outer iteration (one reverse step for DPS).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<T> {
    /// 1-based.
    pub iteration: usize,
    /// Purification time `T_k`; the diffusion step for DPS.
    pub t: usize,
    /// Output of the data-consistency step (the `x̂₀` estimate for DPS).
    pub x: Vec<T>,
    /// Output of purification (the new iterate for DPS).
    pub v: Vec<T>,
    /// Loss trace of the data-consistency step, starting with the initial loss.
    pub fidelity_losses: Vec<T>,
    /// `MSE(v, reference)` when a reference was supplied.
    pub mse: Option<T>,
    /// Score evaluations consumed up to and including this iteration.
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult<T> {
    pub reconstruction: Vec<T>,
    pub trace: Vec<IterationRecord<T>>,
    pub nfe: NfeCount,
    /// Seconds.
    pub wall_time: f64,
}

impl<T: Scalar> SolveResult<T> {
    /// `iter,T_k,fidelity_loss_final,mse_vs_truth,psnr,nfe_cumulative`, one
    /// row per record. Missing values are left empty.
    pub fn trace_csv(&self, peak: T) -> String {
        let mut out = String::from("iter,T_k,fidelity_loss_final,mse_vs_truth,psnr,nfe_cumulative\n");
        for r in &self.trace {
            let loss = r
                .fidelity_losses
                .last()
                .map(|l| fmt6(l.to_f64_lossy()))
                .unwrap_or_default();
            let (m, p) = match r.mse {
                Some(m) => {
                    let p = if m == T::zero() {
                        f64::INFINITY
                    } else {
                        (T::of(10.0) * (peak * peak / m).log10()).to_f64_lossy()
                    };
                    (fmt6(m.to_f64_lossy()), fmt6(p))
                }
                None => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{},{},{loss},{m},{p},{}", r.iteration, r.t, r.nfe);
        }
        out
    }
}

/// Six significant digits, as used in every CSV this crate writes.
pub fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Score evaluations consumed by a solve.
pub fn nfe_counter<T>(result: &SolveResult<T>) -> usize {
    result.nfe.score
}

fn at_iteration(iteration: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Iteration {
        iteration,
        source: Box::new(e),
    }
}

fn reference_mse<T: Scalar>(v: &[T], reference: Option<&[T]>) -> Result<Option<T>> {
    reference.map(|r| mse(v, r)).transpose()
}

fn check_problem<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    y: &Measurement<T>,
    reference: Option<&[T]>,
) -> Result<()> {
    check_len("measurement", op.out_shape().len(), y.y.len())?;
    if let Some(r) = reference {
        check_len("reference", op.in_shape().len(), r.len())?;
    }
    Ok(())
}

/// Pixel-space DCDP: from `v₀ = 0`, alternate `x_k = DataFidelity(v_{k−1})`
/// and `v_k = DPUR(x_k, T_k)` for `k = 1..K`; returns `v_K`.
pub fn dcdp_solve<T: Scalar, A, S>(
    op: &A,
    y: &Measurement<T>,
    score: &S,
    schedule: &NoiseSchedule<T>,
    cfg: &SolverConfig<T>,
    reference: Option<&[T]>,
) -> Result<SolveResult<T>>
where
    A: LinearOperator<T> + ?Sized,
    S: ScoreModel<T> + ?Sized,
{
    cfg.validate()?;
    if cfg.latent_approach != LatentApproach::None {
        return Err(invalid("latent approaches run through dcdp_solve_latent"));
    }
    check_problem(op, y, reference)?;
    check_len("score dimension", op.in_shape().len(), score.dim())?;
    if cfg.schedule.max_time() > schedule.n_steps() {
        return Err(invalid("purification time exceeds the noise schedule"));
    }
    let counting = CountingScore::new(score);
    let start = Instant::now();
    let mut v = vec![T::zero(); op.in_shape().len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    for (k, &t_k) in cfg.schedule.times().iter().enumerate() {
        let it = k + 1;
        let fid = data_fidelity(op, &y.y, &v, &cfg.fidelity).map_err(at_iteration(it))?;
        v = dpur(&fid.x, t_k, cfg.backend, &counting, schedule, derive_seed(cfg.seed, it as u64))
            .map_err(at_iteration(it))?;
        trace.push(IterationRecord {
            iteration: it,
            t: t_k,
            mse: reference_mse(&v, reference)?,
            x: fid.x,
            v: v.clone(),
            fidelity_losses: fid.losses,
            nfe: counting.score_evals(),
        });
    }
    Ok(SolveResult {
        reconstruction: v,
        trace,
        nfe: NfeCount {
            score: counting.score_evals(),
            jacobian: counting.jacobian_evals(),
        },
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Data consistency alone: one uninterrupted momentum run of
/// `iterations · fidelity.tau` steps from zero, recorded every `tau` steps.
pub fn fidelity_only_solve<T: Scalar, A: LinearOperator<T> + ?Sized>(
    op: &A,
    y: &Measurement<T>,
    iterations: usize,
    fidelity: &FidelityConfig<T>,
    reference: Option<&[T]>,
) -> Result<SolveResult<T>> {
    if iterations == 0 {
        return Err(invalid("need at least one outer iteration"));
    }
    check_problem(op, y, reference)?;
    let chunk = FidelityConfig {
        loss_floor: None,
        ..*fidelity
    };
    let start = Instant::now();
    let n = op.in_shape().len();
    let mut x = vec![T::zero(); n];
    let mut velocity = vec![T::zero(); n];
    let mut trace = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let fid = data_fidelity_resume(op, &y.y, &x, &mut velocity, &chunk).map_err(at_iteration(it))?;
        x = fid.x;
        trace.push(IterationRecord {
            iteration: it,
            t: 0,
            mse: reference_mse(&x, reference)?,
            x: x.clone(),
            v: x.clone(),
            fidelity_losses: fid.losses,
            nfe: 0,
        });
    }
    Ok(SolveResult {
        reconstruction: x,
        trace,
        nfe: NfeCount::default(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Latent DCDP with a prior over codes `z`. Approach I starts from
/// `v̂₀ ~ N(0, I)` and descends on the code, re-encoding afterwards;
/// Approach II starts from `v̂₀ = 0`, descends on `D(v̂)` in pixel space and
/// encodes. Both purify in latent space and return `D(v̂_K)`.
pub fn dcdp_solve_latent<T: Scalar, A, S>(
    op: &A,
    y: &Measurement<T>,
    score_latent: &S,
    schedule: &NoiseSchedule<T>,
    codec: &LinearCodec<T>,
    cfg: &SolverConfig<T>,
    reference: Option<&[T]>,
) -> Result<SolveResult<T>>
where
    A: LinearOperator<T> + ?Sized,
    S: ScoreModel<T> + ?Sized,
{
    cfg.validate()?;
    check_problem(op, y, reference)?;
    check_len("codec pixel dimension", op.in_shape().len(), codec.pixel_dim())?;
    check_len("latent score dimension", codec.latent_dim(), score_latent.dim())?;
    if cfg.schedule.max_time() > schedule.n_steps() {
        return Err(invalid("purification time exceeds the noise schedule"));
    }
    let r = codec.latent_dim();
    let counting = CountingScore::new(score_latent);
    let start = Instant::now();
    let mut zhat: Vec<T> = match cfg.latent_approach {
        LatentApproach::LatentDC => standard_normal(&mut seeded(derive_seed(cfg.seed, 0)), r),
        LatentApproach::PixelDC => vec![T::zero(); r],
        LatentApproach::None => return Err(invalid("pixel-space runs go through dcdp_solve")),
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    for (k, &t_k) in cfg.schedule.times().iter().enumerate() {
        let it = k + 1;
        let (z, x, losses) = match cfg.latent_approach {
            LatentApproach::LatentDC => {
                let fid = data_fidelity_latent(op, &y.y, &zhat, codec, &cfg.fidelity)
                    .map_err(at_iteration(it))?;
                let z = re_encode(&fid.x, codec);
                let x = codec.decode(&z);
                (z, x, fid.losses)
            }
            _ => {
                let fid = data_fidelity(op, &y.y, &codec.decode(&zhat), &cfg.fidelity)
                    .map_err(at_iteration(it))?;
                (codec.encode(&fid.x), fid.x, fid.losses)
            }
        };
        zhat = dpur(&z, t_k, cfg.backend, &counting, schedule, derive_seed(cfg.seed, it as u64))
            .map_err(at_iteration(it))?;
        let v = codec.decode(&zhat);
        trace.push(IterationRecord {
            iteration: it,
            t: t_k,
            mse: reference_mse(&v, reference)?,
            x,
            v,
            fidelity_losses: losses,
            nfe: counting.score_evals(),
        });
    }
    Ok(SolveResult {
        reconstruction: codec.decode(&zhat),
        trace,
        nfe: NfeCount {
            score: counting.score_evals(),
            jacobian: counting.jacobian_evals(),
        },
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Tweedie estimate `x̂₀` at `(x, t)` and the gradient of
/// `‖A x̂₀(x) − y‖²` with respect to `x`, which is
/// `(I + (1 − ᾱ_t) H)ᵀ 2Aᵀ(A x̂₀ − y) / √ᾱ_t`. Also returns the score at `x`.
pub fn dps_likelihood_gradient<T: Scalar, A, S>(
    op: &A,
    y: &[T],
    score: &S,
    schedule: &NoiseSchedule<T>,
    x: &[T],
    t: usize,
) -> Result<DpsGradient<T>>
where
    A: LinearOperator<T> + ?Sized,
    S: ScoreModel<T> + ?Sized,
{
    if t == 0 {
        return Err(invalid("DPS gradient needs t >= 1"));
    }
    schedule.check_time(t)?;
    let s = score.score(x, t)?;
    let a = schedule.alpha_bar(t);
    let inv_sqrt = T::one() / a.sqrt();
    let x0: Vec<T> = x
        .iter()
        .zip(&s)
        .map(|(xi, si)| (*xi + (T::one() - a) * *si) * inv_sqrt)
        .collect();
    let resid = sub(&op.apply(&x0), y);
    let loss: T = resid.iter().map(|r| *r * *r).sum();
    let outer: Vec<T> = op.adjoint(&resid).into_iter().map(|g| g * T::of(2.0)).collect();
    let hv = score.score_jacobian_vp(x, t, &outer)?;
    let gradient = outer
        .iter()
        .zip(&hv)
        .map(|(g, h)| (*g + (T::one() - a) * *h) * inv_sqrt)
        .collect();
    Ok(DpsGradient {
        score: s,
        x0,
        loss,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpsGradient<T> {
    pub score: Vec<T>,
    pub x0: Vec<T>,
    /// `‖A x̂₀ − y‖²`.
    pub loss: T,
    pub gradient: Vec<T>,
}

/// DPS: from `x_N ~ N(0, I)`, take the ancestral reverse step used by
/// purification and subtract `η ∇ₓ‖A x̂₀(x_t) − y‖²`, for `t = N..1`.
/// The final step adds no noise. With `η = 0` this is unconditional
/// ancestral sampling with the same seeds.
pub fn dps_solve<T: Scalar, A, S>(
    op: &A,
    y: &Measurement<T>,
    score: &S,
    schedule: &NoiseSchedule<T>,
    cfg: &DpsConfig<T>,
    reference: Option<&[T]>,
) -> Result<SolveResult<T>>
where
    A: LinearOperator<T> + ?Sized,
    S: ScoreModel<T> + ?Sized,
{
    check_problem(op, y, reference)?;
    check_len("score dimension", op.in_shape().len(), score.dim())?;
    if cfg.n_steps == 0 || cfg.n_steps != schedule.n_steps() {
        return Err(invalid(format!(
            "DPS runs all {} steps of the noise schedule, got n_steps = {}",
            schedule.n_steps(),
            cfg.n_steps
        )));
    }
    if !(cfg.eta >= T::zero()) {
        return Err(invalid("DPS step size must be nonnegative"));
    }
    let counting = CountingScore::new(score);
    let start = Instant::now();
    let n = op.in_shape().len();
    let mut x: Vec<T> = standard_normal(&mut seeded(derive_seed(cfg.seed, 0)), n);
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let guard = T::of(DIVERGENCE_GUARD);
    let mut trace = Vec::with_capacity(cfg.n_steps);
    for t in (1..=cfg.n_steps).rev() {
        let g = dps_likelihood_gradient(op, &y.y, &counting, schedule, &x, t)?;
        let beta = schedule.beta(t);
        let inv = T::one() / (T::one() - beta).sqrt();
        for (xi, si) in x.iter_mut().zip(&g.score) {
            *xi = (*xi + beta * *si) * inv;
        }
        if t > 1 {
            let eps: Vec<T> = standard_normal(&mut rng, n);
            axpy(beta.sqrt(), &eps, &mut x);
        }
        axpy(-cfg.eta, &g.gradient, &mut x);
        let step = cfg.n_steps - t + 1;
        if !all_finite(&x) {
            return Err(Error::NonFinite { stage: "dps", step });
        }
        let peak = max_abs(&x);
        if peak > guard {
            return Err(Error::Diverged {
                stage: "dps",
                step,
                max_abs: peak.to_f64_lossy(),
            });
        }
        trace.push(IterationRecord {
            iteration: step,
            t,
            mse: reference_mse(&x, reference)?,
            x: g.x0,
            v: x.clone(),
            fidelity_losses: vec![g.loss],
            nfe: counting.score_evals(),
        });
    }
    Ok(SolveResult {
        reconstruction: x,
        trace,
        nfe: NfeCount {
            score: counting.score_evals(),
            jacobian: counting.jacobian_evals(),
        },
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// PSNR of every trace record against the reference, for convergence plots.
pub fn trace_psnr<T: Scalar>(result: &SolveResult<T>, reference: &[T], peak: T) -> Result<Vec<T>> {
    result.trace.iter().map(|r| psnr(&r.v, reference, peak)).collect()
}
