//! Diffusion purification: diffuse an estimate forward to step `T`, then
//! map it back to `t = 0` with one of several reverse samplers.

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, norm};
use crate::rng::{derive_seed, seeded, standard_normal};
use crate::scalar::{all_finite, Scalar};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PurifyBackend {
    /// Discretized reverse SDE, one score evaluation per step.
    AncestralSde,
    /// Deterministic DDIM (η = 0) on a uniform sub-grid.
    Ddim { n_steps: usize },
    /// One-step posterior mean.
    Tweedie,
    /// Probability-flow ODE integrated with Heun's method; stands in for a
    /// one-step consistency model.
    FlowOde { n_steps: usize },
}

impl PurifyBackend {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Ddim { n_steps: 0 } | Self::FlowOde { n_steps: 0 } => {
                Err(invalid("purification backend needs n_steps >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Score evaluations one purification to step `t` costs.
    pub fn nfe(&self, t: usize) -> usize {
        if t == 0 {
            return 0;
        }
        match *self {
            Self::AncestralSde => t,
            Self::Ddim { n_steps } => n_steps.min(t),
            Self::Tweedie => 1,
            Self::FlowOde { n_steps } => 2 * n_steps.min(t),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::AncestralSde => "sde".into(),
            Self::Ddim { n_steps } => format!("ddim{n_steps}"),
            Self::Tweedie => "tweedie".into(),
            Self::FlowOde { n_steps } => format!("ode{n_steps}"),
        }
    }
}

/// One row of a purification trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurifyStep<T> {
    pub t: usize,
    pub norm: T,
    /// Score evaluations consumed so far within this purification.
    pub nfe: usize,
}

type Trace<'a, T> = Option<&'a mut Vec<PurifyStep<T>>>;

fn record<T: Scalar>(trace: &mut Trace<'_, T>, t: usize, x: &[T], nfe: usize) {
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(PurifyStep { t, norm: norm(x), nfe });
    }
}

fn ensure_finite<T: Scalar>(x: &[T], stage: &'static str, step: usize) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, step })
    }
}

/// `√ᾱ_T x + √(1 − ᾱ_T) ε`.
pub fn forward_diffuse<T: Scalar>(
    x: &[T],
    t: usize,
    schedule: &NoiseSchedule<T>,
    seed: u64,
) -> Result<Vec<T>> {
    schedule.check_time(t)?;
    if t == 0 {
        return Ok(x.to_vec());
    }
    let a = schedule.alpha_bar(t);
    let mut out: Vec<T> = standard_normal(&mut seeded(seed), x.len());
    out.iter_mut().for_each(|e| *e *= (T::one() - a).sqrt());
    axpy(a.sqrt(), x, &mut out);
    Ok(out)
}

/// `x_{t−1} = (x_t + β_t s(x_t, t)) / √(1 − β_t) + √β_t ε` for t = T..1. The
/// final step is noise-free.
pub fn reverse_sde<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    seed: u64,
) -> Result<Vec<T>> {
    reverse_sde_traced(x_t, t, score, schedule, seed, None)
}

fn reverse_sde_traced<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t_max: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    seed: u64,
    mut trace: Trace<'_, T>,
) -> Result<Vec<T>> {
    schedule.check_time(t_max)?;
    let mut rng = seeded(seed);
    let mut x = x_t.to_vec();
    record(&mut trace, t_max, &x, 0);
    for t in (1..=t_max).rev() {
        let beta = schedule.beta(t);
        let s = score.score(&x, t)?;
        let inv = T::one() / (T::one() - beta).sqrt();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi = (*xi + beta * *si) * inv;
        }
        if t > 1 {
            let eps: Vec<T> = standard_normal(&mut rng, x.len());
            axpy(beta.sqrt(), &eps, &mut x);
        }
        ensure_finite(&x, "reverse sde", t)?;
        record(&mut trace, t - 1, &x, t_max - t + 1);
    }
    Ok(x)
}

/// `(x + (1 − ᾱ_t) s(x, t)) / √ᾱ_t`, the posterior mean `E[x₀ | x_t]`.
pub fn tweedie_denoise<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
) -> Result<Vec<T>> {
    schedule.check_time(t)?;
    if t == 0 {
        return Ok(x_t.to_vec());
    }
    let s = score.score(x_t, t)?;
    Ok(tweedie_from_score(x_t, &s, schedule.alpha_bar(t)))
}

pub(crate) fn tweedie_from_score<T: Scalar>(x: &[T], s: &[T], alpha_bar: T) -> Vec<T> {
    let inv = T::one() / alpha_bar.sqrt();
    let w = T::one() - alpha_bar;
    x.iter().zip(s).map(|(xi, si)| (*xi + w * *si) * inv).collect()
}

/// `n_steps + 1` integer times from `t_max` down to 0, uniformly spaced and
/// rounded half-up.
pub fn sub_grid(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(invalid(format!(
            "sub-grid needs 1 <= n_steps <= T, got n_steps = {n_steps}, T = {t_max}"
        )));
    }
    Ok((0..=n_steps)
        .rev()
        .map(|i| (2 * t_max * i + n_steps) / (2 * n_steps))
        .collect())
}

/// Deterministic DDIM: at each sub-grid node predict `x̂₀` by Tweedie and the
/// implied noise `ε̂`, then jump to the next node.
pub fn ddim_reverse<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    n_steps: usize,
) -> Result<Vec<T>> {
    ddim_traced(x_t, t, score, schedule, n_steps, None)
}

fn ddim_traced<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t_max: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    n_steps: usize,
    mut trace: Trace<'_, T>,
) -> Result<Vec<T>> {
    schedule.check_time(t_max)?;
    let grid = sub_grid(t_max, n_steps)?;
    let mut x = x_t.to_vec();
    record(&mut trace, t_max, &x, 0);
    for (k, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let a = schedule.alpha_bar(t);
        let s = score.score(&x, t)?;
        let x0 = tweedie_from_score(&x, &s, a);
        let a_next = schedule.alpha_bar(t_next);
        if t_next == 0 {
            x = x0;
        } else {
            let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
            let (na, nb) = (a_next.sqrt(), (T::one() - a_next).sqrt());
            for (xi, x0i) in x.iter_mut().zip(&x0) {
                let eps = (*xi - sa * *x0i) / sb;
                *xi = na * *x0i + nb * eps;
            }
        }
        ensure_finite(&x, "ddim", t)?;
        record(&mut trace, t_next, &x, k + 1);
    }
    Ok(x)
}

/// Probability-flow ODE `dx = −½β(t)[x + ∇log p_t(x)] dt` integrated from
/// `t` to 0 with Heun's method on a uniform integer sub-grid. Written in
/// `λ = ln ᾱ`, the ODE reads `dx/dλ = ½ (x + s(x))`, which keeps the
/// discrete schedule's marginals exact at every grid node.
pub fn flow_ode_map<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    n_steps: usize,
) -> Result<Vec<T>> {
    flow_ode_traced(x_t, t, score, schedule, n_steps, None)
}

fn flow_ode_traced<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x_t: &[T],
    t_max: usize,
    score: &S,
    schedule: &NoiseSchedule<T>,
    n_steps: usize,
    mut trace: Trace<'_, T>,
) -> Result<Vec<T>> {
    schedule.check_time(t_max)?;
    let grid = sub_grid(t_max, n_steps)?;
    let half = T::of(0.5);
    let drift = |x: &[T], t: usize| -> Result<Vec<T>> {
        let s = score.score(x, t)?;
        Ok(x.iter().zip(&s).map(|(xi, si)| half * (*xi + *si)).collect())
    };
    let mut x = x_t.to_vec();
    record(&mut trace, t_max, &x, 0);
    for (k, w) in grid.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let h = schedule.alpha_bar(t_next).ln() - schedule.alpha_bar(t).ln();
        let k1 = drift(&x, t)?;
        let mut x_pred = x.clone();
        axpy(h, &k1, &mut x_pred);
        let k2 = drift(&x_pred, t_next)?;
        for ((xi, a), b) in x.iter_mut().zip(&k1).zip(&k2) {
            *xi += half * h * (*a + *b);
        }
        ensure_finite(&x, "flow ode", t)?;
        record(&mut trace, t_next, &x, 2 * (k + 1));
    }
    Ok(x)
}

/// `DPUR(x, T)`: forward diffusion to `T` then the selected reverse map.
/// `T = 0` is the identity for every backend. Multi-step backends use
/// `min(n_steps, T)` steps.
pub fn dpur<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x: &[T],
    t: usize,
    backend: PurifyBackend,
    score: &S,
    schedule: &NoiseSchedule<T>,
    seed: u64,
) -> Result<Vec<T>> {
    dpur_with_trace(x, t, backend, score, schedule, seed, None)
}

/// [`dpur`] that also appends one [`PurifyStep`] per reverse step.
pub fn dpur_with_trace<T: Scalar, S: ScoreModel<T> + ?Sized>(
    x: &[T],
    t: usize,
    backend: PurifyBackend,
    score: &S,
    schedule: &NoiseSchedule<T>,
    seed: u64,
    trace: Option<&mut Vec<PurifyStep<T>>>,
) -> Result<Vec<T>> {
    backend.validate()?;
    schedule.check_time(t)?;
    if t == 0 {
        return Ok(x.to_vec());
    }
    let x_t = forward_diffuse(x, t, schedule, seed)?;
    match backend {
        PurifyBackend::AncestralSde => {
            reverse_sde_traced(&x_t, t, score, schedule, derive_seed(seed, 1), trace)
        }
        PurifyBackend::Ddim { n_steps } => {
            ddim_traced(&x_t, t, score, schedule, n_steps.min(t), trace)
        }
        PurifyBackend::Tweedie => {
            let mut trace = trace;
            record(&mut trace, t, &x_t, 0);
            let out = tweedie_denoise(&x_t, t, score, schedule)?;
            ensure_finite(&out, "tweedie", t)?;
            record(&mut trace, 0, &out, 1);
            Ok(out)
        }
        PurifyBackend::FlowOde { n_steps } => {
            flow_ode_traced(&x_t, t, score, schedule, n_steps.min(t), trace)
        }
    }
}
