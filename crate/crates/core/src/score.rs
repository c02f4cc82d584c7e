//! Analytic score models.
//!
//! Every model exports the true score `∇ log p_t(x)` of the time-`t` VP
//! marginal. Mixtures are evaluated in log space with the max-shift trick so
//! that the log-density stays finite far from every component.

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::rng::{standard_normal, Rng};
use crate::scalar::{all_finite, Scalar};
use crate::schedule::NoiseSchedule;

/// Evaluatable prior at any diffusion step. A learned network would plug in
/// here; this crate ships analytic mixtures only.
pub trait ScoreModel<T: Scalar> {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[T], t: usize) -> Result<T>;

    /// `∇ₓ log p_t(x)`.
    fn score(&self, x: &[T], t: usize) -> Result<Vec<T>>;

    /// Hessian of `log p_t` at `x` (symmetric).
    fn score_jacobian(&self, x: &[T], t: usize) -> Result<Matrix<T>>;

    /// `(∂ score / ∂x) v`. The Jacobian is symmetric, so this is also the
    /// vector-Jacobian product used when back-propagating through the score.
    fn score_jacobian_vp(&self, x: &[T], t: usize, v: &[T]) -> Result<Vec<T>> {
        Ok(self.score_jacobian(x, t)?.matvec(v))
    }
}

impl<T: Scalar, S: ScoreModel<T> + ?Sized> ScoreModel<T> for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &[T], t: usize) -> Result<T> {
        (**self).log_density(x, t)
    }
    fn score(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        (**self).score(x, t)
    }
    fn score_jacobian(&self, x: &[T], t: usize) -> Result<Matrix<T>> {
        (**self).score_jacobian(x, t)
    }
    fn score_jacobian_vp(&self, x: &[T], t: usize, v: &[T]) -> Result<Vec<T>> {
        (**self).score_jacobian_vp(x, t, v)
    }
}

/// Wraps a model and counts function evaluations. Owned by a single solve.
pub struct CountingScore<'a, S: ?Sized> {
    inner: &'a S,
    score_evals: Cell<usize>,
    jacobian_evals: Cell<usize>,
}

impl<'a, S: ?Sized> CountingScore<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            score_evals: Cell::new(0),
            jacobian_evals: Cell::new(0),
        }
    }

    pub fn score_evals(&self) -> usize {
        self.score_evals.get()
    }

    pub fn jacobian_evals(&self) -> usize {
        self.jacobian_evals.get()
    }
}

impl<T: Scalar, S: ScoreModel<T> + ?Sized> ScoreModel<T> for CountingScore<'_, S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, x: &[T], t: usize) -> Result<T> {
        self.inner.log_density(x, t)
    }
    fn score(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        self.score_evals.set(self.score_evals.get() + 1);
        self.inner.score(x, t)
    }
    fn score_jacobian(&self, x: &[T], t: usize) -> Result<Matrix<T>> {
        self.jacobian_evals.set(self.jacobian_evals.get() + 1);
        self.inner.score_jacobian(x, t)
    }
    fn score_jacobian_vp(&self, x: &[T], t: usize, v: &[T]) -> Result<Vec<T>> {
        self.jacobian_evals.set(self.jacobian_evals.get() + 1);
        self.inner.score_jacobian_vp(x, t, v)
    }
}

/// Covariance of one mixture component.
#[derive(Debug, Clone)]
pub enum Covariance<T> {
    Isotropic(T),
    Diagonal(Vec<T>),
    /// `Σ = U diag(λ) Uᵀ` with `U` square orthonormal. Components that share
    /// the same `Arc` basis are evaluated with a single projection of `x`.
    Spectral {
        basis: Arc<Matrix<T>>,
        eigenvalues: Vec<T>,
    },
}

impl<T: Scalar> Covariance<T> {
    /// Dense SPD matrix, factorized once into its eigenbasis.
    pub fn full(cov: &Matrix<T>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::Matrix("square"));
        }
        let scale = cov
            .as_slice()
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
            .max(T::min_positive_value());
        if cov.max_asymmetry() > T::of(1e-10) * scale {
            return Err(Error::Matrix("symmetric"));
        }
        let eig = crate::linalg::symmetric_eigen(cov)?;
        if eig.values.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Matrix("positive definite"));
        }
        Ok(Self::Spectral {
            basis: Arc::new(eig.vectors),
            eigenvalues: eig.values,
        })
    }

    pub fn spectral(basis: Arc<Matrix<T>>, eigenvalues: Vec<T>) -> Result<Self> {
        if !basis.is_square() {
            return Err(Error::Matrix("square"));
        }
        check_len("spectral eigenvalues", basis.rows(), eigenvalues.len())?;
        if eigenvalues.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Matrix("positive definite"));
        }
        // Probe UᵀU = I on two fixed vectors instead of forming UᵀU.
        let n = basis.rows();
        for probe in 0..2 {
            let v: Vec<T> = (0..n)
                .map(|i| T::of((((i * (7 + probe)) % 13) as f64) - 6.0))
                .collect();
            let back = basis.matvec(&basis.matvec_t(&v));
            let err = back
                .iter()
                .zip(&v)
                .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
            if err > T::of(1e-6) * T::of_usize(n) {
                return Err(Error::Matrix("orthonormal"));
            }
        }
        Ok(Self::Spectral { basis, eigenvalues })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Self::Isotropic(v) if !(*v > T::zero()) => Err(Error::Matrix("positive definite")),
            Self::Isotropic(_) => Ok(()),
            Self::Diagonal(d) => {
                check_len("diagonal covariance", dim, d.len())?;
                if d.iter().any(|v| !(*v > T::zero())) {
                    return Err(Error::Matrix("positive definite"));
                }
                Ok(())
            }
            Self::Spectral { basis, .. } => check_len("spectral basis", dim, basis.rows()),
        }
    }

    /// `a Σ + (1 - a) I`.
    pub fn diffused(&self, a: T) -> Self {
        let f = |v: T| a * v + (T::one() - a);
        match self {
            Self::Isotropic(v) => Self::Isotropic(f(*v)),
            Self::Diagonal(d) => Self::Diagonal(d.iter().map(|v| f(*v)).collect()),
            Self::Spectral { basis, eigenvalues } => Self::Spectral {
                basis: Arc::clone(basis),
                eigenvalues: eigenvalues.iter().map(|v| f(*v)).collect(),
            },
        }
    }

    /// Variance of coordinate `i` in the component's own frame.
    #[inline]
    fn variance(&self, i: usize) -> T {
        match self {
            Self::Isotropic(v) => *v,
            Self::Diagonal(d) => d[i],
            Self::Spectral { eigenvalues, .. } => eigenvalues[i],
        }
    }

    fn basis(&self) -> Option<&Arc<Matrix<T>>> {
        match self {
            Self::Spectral { basis, .. } => Some(basis),
            _ => None,
        }
    }

    /// Dense matrix form, for tests and oracles.
    pub fn to_dense(&self, dim: usize) -> Matrix<T> {
        match self {
            Self::Spectral { basis, eigenvalues } => Matrix::from_fn(dim, dim, |i, j| {
                (0..dim).fold(T::zero(), |s, k| s + basis[(i, k)] * eigenvalues[k] * basis[(j, k)])
            }),
            _ => Matrix::from_fn(dim, dim, |i, j| if i == j { self.variance(i) } else { T::zero() }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture<T> {
    dim: usize,
    weights: Vec<T>,
    means: Vec<Vec<T>>,
    covariances: Vec<Covariance<T>>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, covariances: Vec<Covariance<T>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("mixture needs at least one component"));
        }
        check_len("mixture means", weights.len(), means.len())?;
        check_len("mixture covariances", weights.len(), covariances.len())?;
        if weights.iter().any(|w| !(*w > T::zero())) {
            return Err(invalid("mixture weights must be positive"));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-8) {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture dimension must be positive"));
        }
        for (m, c) in means.iter().zip(&covariances) {
            check_len("mixture mean", dim, m.len())?;
            c.validate(dim)?;
        }
        let weights = weights.iter().map(|w| *w / total).collect();
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
        })
    }

    pub fn gaussian(mean: Vec<T>, covariance: Covariance<T>) -> Result<Self> {
        Self::new(vec![T::one()], vec![mean], vec![covariance])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![T::zero(); dim], Covariance::Isotropic(T::one()))
            .expect("standard normal is valid")
    }

    /// Equal-weight mixture with one isotropic kernel of variance `var` per mean.
    pub fn isotropic_kernels(means: Vec<Vec<T>>, var: T) -> Result<Self> {
        if means.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let w = T::one() / T::of_usize(means.len());
        let k = means.len();
        Self::new(vec![w; k], means, vec![Covariance::Isotropic(var); k])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance<T>] {
        &self.covariances
    }

    /// Draws `x ~ p` from the mixture.
    pub fn sample(&self, rng: &mut Rng) -> Vec<T> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w.to_f64_lossy();
            if u < acc {
                pick = i;
                break;
            }
        }
        let z: Vec<T> = standard_normal(rng, self.dim);
        let cov = &self.covariances[pick];
        let scaled: Vec<T> = z
            .iter()
            .enumerate()
            .map(|(i, zi)| *zi * cov.variance(i).sqrt())
            .collect();
        let noise = match cov.basis() {
            Some(b) => b.matvec(&scaled),
            None => scaled,
        };
        self.means[pick]
            .iter()
            .zip(&noise)
            .map(|(m, e)| *m + *e)
            .collect()
    }

    /// Parses the plain-text mixture format:
    ///
    /// ```text
    /// # comment
    /// dim 3
    /// component 0.25
    /// mean 0.0 1.0 -1.0
    /// var 0.5 0.5 0.5      # one value means isotropic
    /// ```
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let mut pending: Option<(usize, T, Option<Vec<T>>)> = None;
        let floats = |line: usize, parts: &[&str]| -> Result<Vec<T>> {
            parts
                .iter()
                .map(|p| {
                    p.parse::<f64>().map(T::of).map_err(|e| Error::Parse {
                        line,
                        msg: format!("bad number {p:?}: {e}"),
                    })
                })
                .collect()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            match parts[0] {
                "dim" => {
                    let d = parts
                        .get(1)
                        .and_then(|p| p.parse::<usize>().ok())
                        .filter(|d| *d > 0)
                        .ok_or_else(|| perr("expected `dim <positive integer>`".into()))?;
                    dim = Some(d);
                }
                "component" => {
                    if pending.is_some() {
                        return Err(perr("previous component is missing `var`".into()));
                    }
                    let w = floats(line_no, &parts[1..])?;
                    if w.len() != 1 {
                        return Err(perr("expected `component <weight>`".into()));
                    }
                    pending = Some((line_no, w[0], None));
                }
                "mean" => {
                    let d = dim.ok_or_else(|| perr("`dim` must come first".into()))?;
                    let p = pending
                        .as_mut()
                        .ok_or_else(|| perr("`mean` outside a component".into()))?;
                    let m = floats(line_no, &parts[1..])?;
                    if m.len() != d {
                        return Err(perr(format!("mean has {} values, dim is {d}", m.len())));
                    }
                    p.2 = Some(m);
                }
                "var" => {
                    let d = dim.ok_or_else(|| perr("`dim` must come first".into()))?;
                    let (_, w, m) = pending
                        .take()
                        .ok_or_else(|| perr("`var` outside a component".into()))?;
                    let m = m.ok_or_else(|| perr("`var` before `mean`".into()))?;
                    let v = floats(line_no, &parts[1..])?;
                    let cov = match v.len() {
                        1 => Covariance::Isotropic(v[0]),
                        n if n == d => Covariance::Diagonal(v),
                        n => return Err(perr(format!("var has {n} values, dim is {d}"))),
                    };
                    weights.push(w);
                    means.push(m);
                    covs.push(cov);
                }
                other => return Err(perr(format!("unknown keyword {other:?}"))),
            }
        }
        if let Some((line, ..)) = pending {
            return Err(Error::Parse {
                line,
                msg: "component is missing `var`".into(),
            });
        }
        Self::new(weights, means, covs)
    }

    /// Writes the plain-text format. Spectral covariances cannot be
    /// represented and are rejected.
    pub fn to_text(&self) -> Result<String> {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "dim {}", self.dim);
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let _ = writeln!(out, "component {w:e}");
            let _ = writeln!(out, "mean {}", join(m));
            match c {
                Covariance::Isotropic(v) => {
                    let _ = writeln!(out, "var {v:e}");
                }
                Covariance::Diagonal(d) => {
                    let _ = writeln!(out, "var {}", join(d));
                }
                Covariance::Spectral { .. } => {
                    return Err(invalid("spectral covariances have no text form"))
                }
            }
        }
        Ok(out)
    }
}

fn join<T: Scalar>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Exact time-`t` marginal of a mixture prior under
/// `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε`.
pub fn gmm_marginal<T: Scalar>(
    prior: &GaussianMixture<T>,
    schedule: &NoiseSchedule<T>,
    t: usize,
) -> Result<GaussianMixture<T>> {
    schedule.check_time(t)?;
    let a = schedule.alpha_bar(t);
    let sa = a.sqrt();
    Ok(GaussianMixture {
        dim: prior.dim,
        weights: prior.weights.clone(),
        means: prior
            .means
            .iter()
            .map(|m| m.iter().map(|v| sa * *v).collect())
            .collect(),
        covariances: prior.covariances.iter().map(|c| c.diffused(a)).collect(),
    })
}

/// Score model of a Gaussian-mixture prior pushed through the VP forward process.
#[derive(Debug, Clone)]
pub struct GmmScore<T> {
    prior: GaussianMixture<T>,
    schedule: NoiseSchedule<T>,
    /// Distinct spectral bases, and for each component the index of its
    /// basis (if any) plus its mean expressed in that basis.
    bases: Vec<Arc<Matrix<T>>>,
    frames: Vec<Option<usize>>,
    projected_means: Vec<Vec<T>>,
}

/// Per-component quantities at one `(x, ᾱ)`.
struct MixtureEval<T> {
    log_density: T,
    responsibilities: Vec<T>,
    /// `-Σ_i⁻¹ (x - √ᾱ μ_i)` in component `i`'s own frame.
    frame_grads: Vec<Vec<T>>,
    /// Diffused per-coordinate variances in component `i`'s frame.
    variances: Vec<Vec<T>>,
}

impl<T: Scalar> GmmScore<T> {
    pub fn new(prior: GaussianMixture<T>, schedule: NoiseSchedule<T>) -> Self {
        let mut bases: Vec<Arc<Matrix<T>>> = Vec::new();
        let mut frames = Vec::with_capacity(prior.n_components());
        let mut projected_means = Vec::with_capacity(prior.n_components());
        for (mean, cov) in prior.means.iter().zip(&prior.covariances) {
            match cov.basis() {
                Some(b) => {
                    let idx = match bases.iter().position(|x| Arc::ptr_eq(x, b)) {
                        Some(i) => i,
                        None => {
                            bases.push(Arc::clone(b));
                            bases.len() - 1
                        }
                    };
                    frames.push(Some(idx));
                    projected_means.push(b.matvec_t(mean));
                }
                None => {
                    frames.push(None);
                    projected_means.push(mean.clone());
                }
            }
        }
        Self {
            prior,
            schedule,
            bases,
            frames,
            projected_means,
        }
    }

    pub fn prior(&self) -> &GaussianMixture<T> {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn alpha_bar_at(&self, x: &[T], t: usize) -> Result<T> {
        check_len("score input", self.prior.dim, x.len())?;
        self.schedule.check_time(t)?;
        if !all_finite(x) {
            return Err(Error::NonFinite {
                stage: "score input",
                step: t,
            });
        }
        Ok(self.schedule.alpha_bar(t))
    }

    fn evaluate(&self, x: &[T], a: T) -> MixtureEval<T> {
        let n = self.prior.dim;
        let sa = a.sqrt();
        let projected_x: Vec<Vec<T>> = self.bases.iter().map(|b| b.matvec_t(x)).collect();
        let log_2pi = T::of((2.0 * std::f64::consts::PI).ln());
        let k = self.prior.n_components();
        let mut logits = Vec::with_capacity(k);
        let mut frame_grads = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for i in 0..k {
            let xf: &[T] = match self.frames[i] {
                Some(b) => &projected_x[b],
                None => x,
            };
            let cov = &self.prior.covariances[i];
            let mu = &self.projected_means[i];
            let mut quad = T::zero();
            let mut log_det = T::zero();
            let mut g = Vec::with_capacity(n);
            let mut var = Vec::with_capacity(n);
            for j in 0..n {
                let v = a * cov.variance(j) + (T::one() - a);
                let d = xf[j] - sa * mu[j];
                quad += d * d / v;
                log_det += v.ln();
                g.push(-d / v);
                var.push(v);
            }
            let ll = -(T::of_usize(n) * log_2pi + log_det + quad) / T::of(2.0);
            logits.push(self.prior.weights[i].ln() + ll);
            frame_grads.push(g);
            variances.push(var);
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = logits.iter().map(|l| (*l - max).exp()).sum();
        let log_density = max + sum.ln();
        let responsibilities = logits.iter().map(|l| (*l - log_density).exp()).collect();
        MixtureEval {
            log_density,
            responsibilities,
            frame_grads,
            variances,
        }
    }

    /// Maps per-frame accumulators back to pixel coordinates and sums them.
    fn combine(&self, pixel: Vec<T>, per_basis: Vec<Vec<T>>) -> Vec<T> {
        let mut out = pixel;
        for (b, acc) in self.bases.iter().zip(per_basis) {
            let v = b.matvec(&acc);
            axpy(T::one(), &v, &mut out);
        }
        out
    }

    fn score_from(&self, e: &MixtureEval<T>) -> Vec<T> {
        let n = self.prior.dim;
        let mut pixel = vec![T::zero(); n];
        let mut per_basis = vec![vec![T::zero(); n]; self.bases.len()];
        for (i, (r, g)) in e.responsibilities.iter().zip(&e.frame_grads).enumerate() {
            let target = match self.frames[i] {
                Some(b) => &mut per_basis[b],
                None => &mut pixel,
            };
            axpy(*r, g, target);
        }
        self.combine(pixel, per_basis)
    }

    /// Score evaluated at a continuous noise level ᾱ ∈ (0, 1].
    pub fn score_at_alpha_bar(&self, x: &[T], alpha_bar: T) -> Vec<T> {
        let e = self.evaluate(x, alpha_bar);
        self.score_from(&e)
    }

    pub fn log_density_at_alpha_bar(&self, x: &[T], alpha_bar: T) -> T {
        self.evaluate(x, alpha_bar).log_density
    }
}

impl<T: Scalar> ScoreModel<T> for GmmScore<T> {
    fn dim(&self) -> usize {
        self.prior.dim
    }

    fn log_density(&self, x: &[T], t: usize) -> Result<T> {
        let a = self.alpha_bar_at(x, t)?;
        Ok(self.evaluate(x, a).log_density)
    }

    fn score(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        let a = self.alpha_bar_at(x, t)?;
        Ok(self.score_at_alpha_bar(x, a))
    }

    fn score_jacobian(&self, x: &[T], t: usize) -> Result<Matrix<T>> {
        let a = self.alpha_bar_at(x, t)?;
        let n = self.prior.dim;
        let e = self.evaluate(x, a);
        let s = self.score_from(&e);
        let mut h = Matrix::zeros(n, n);
        for (i, r) in e.responsibilities.iter().enumerate() {
            if *r == T::zero() {
                continue;
            }
            let (g, precision) = match self.frames[i] {
                Some(b) => {
                    let basis = &self.bases[b];
                    let g = basis.matvec(&e.frame_grads[i]);
                    let p = Matrix::from_fn(n, n, |p, q| {
                        (0..n).fold(T::zero(), |acc, k| {
                            acc + basis[(p, k)] * basis[(q, k)] / e.variances[i][k]
                        })
                    });
                    (g, p)
                }
                None => {
                    let g = e.frame_grads[i].clone();
                    let p = Matrix::from_fn(n, n, |p, q| {
                        if p == q {
                            T::one() / e.variances[i][p]
                        } else {
                            T::zero()
                        }
                    });
                    (g, p)
                }
            };
            for p in 0..n {
                for q in 0..n {
                    h[(p, q)] += *r * (g[p] * g[q] - precision[(p, q)]);
                }
            }
        }
        for p in 0..n {
            for q in 0..n {
                h[(p, q)] -= s[p] * s[q];
            }
        }
        // Exact symmetry regardless of summation order.
        for p in 0..n {
            for q in (p + 1)..n {
                let m = (h[(p, q)] + h[(q, p)]) / T::of(2.0);
                h[(p, q)] = m;
                h[(q, p)] = m;
            }
        }
        Ok(h)
    }

    fn score_jacobian_vp(&self, x: &[T], t: usize, v: &[T]) -> Result<Vec<T>> {
        let a = self.alpha_bar_at(x, t)?;
        check_len("jacobian-vector product direction", self.prior.dim, v.len())?;
        let n = self.prior.dim;
        let e = self.evaluate(x, a);
        let s = self.score_from(&e);
        let projected_v: Vec<Vec<T>> = self.bases.iter().map(|b| b.matvec_t(v)).collect();
        let mut pixel = vec![T::zero(); n];
        let mut per_basis = vec![vec![T::zero(); n]; self.bases.len()];
        for (i, r) in e.responsibilities.iter().enumerate() {
            let (vf, target): (&[T], &mut Vec<T>) = match self.frames[i] {
                Some(b) => (&projected_v[b], &mut per_basis[b]),
                None => (v, &mut pixel),
            };
            let g = &e.frame_grads[i];
            let gv = dot(g, vf);
            for j in 0..n {
                target[j] += *r * (g[j] * gv - vf[j] / e.variances[i][j]);
            }
        }
        let mut out = self.combine(pixel, per_basis);
        axpy(-dot(&s, v), &s, &mut out);
        Ok(out)
    }
}

/// Kernel-density prior: one isotropic Gaussian of standard deviation
/// `bandwidth` on every data point, equally weighted.
pub fn empirical_score<T: Scalar>(
    dataset: &[Vec<T>],
    bandwidth: T,
    schedule: NoiseSchedule<T>,
) -> Result<GmmScore<T>> {
    if dataset.is_empty() {
        return Err(invalid("empirical score needs a nonempty dataset"));
    }
    if !(bandwidth > T::zero()) {
        return Err(invalid("bandwidth must be positive"));
    }
    let prior = GaussianMixture::isotropic_kernels(dataset.to_vec(), bandwidth * bandwidth)?;
    Ok(GmmScore::new(prior, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Rng};
    use proptest::prelude::*;

    fn schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::ddpm()
    }

    fn random_spd(rng: &mut Rng, n: usize) -> Matrix<f64> {
        let b = Matrix::from_row_major(n, n, standard_normal(rng, n * n)).unwrap();
        let mut a = b.matmul(&b.transpose()).unwrap();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] /= n as f64;
            }
            a[(i, i)] += 0.3;
        }
        a
    }

    /// A mixture exercising every covariance representation, including two
    /// components sharing one spectral basis.
    fn random_mixture(seed: u64, n: usize) -> GaussianMixture<f64> {
        let mut rng = seeded(seed);
        let full = Covariance::full(&random_spd(&mut rng, n)).unwrap();
        let shared = match &full {
            Covariance::Spectral { basis, eigenvalues } => Covariance::Spectral {
                basis: Arc::clone(basis),
                eigenvalues: eigenvalues.iter().map(|v| v * 0.5 + 0.1).collect(),
            },
            _ => unreachable!(),
        };
        let diag = Covariance::Diagonal((0..n).map(|i| 0.2 + 0.1 * i as f64).collect());
        let covs = vec![full, shared, diag, Covariance::Isotropic(0.4)];
        let means = (0..4)
            .map(|_| standard_normal::<f64>(&mut rng, n).iter().map(|v| 1.5 * v).collect())
            .collect();
        GaussianMixture::new(vec![0.1, 0.2, 0.3, 0.4], means, covs).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn standard_normal_is_a_fixed_point() {
        let prior = GaussianMixture::<f64>::standard_normal(3);
        let s = schedule();
        for t in [0, 1, 250, 1000] {
            let m = gmm_marginal(&prior, &s, t).unwrap();
            assert_eq!(m.means()[0], vec![0.0; 3]);
            match &m.covariances()[0] {
                Covariance::Isotropic(v) => assert!((v - 1.0).abs() < 1e-15),
                _ => panic!("representation changed"),
            }
        }
        let model = GmmScore::new(prior, s.clone());
        let x = [0.3, -1.2, 2.0];
        let sc = model.score(&x, 400).unwrap();
        assert!(rel_err(&sc, &[-0.3, 1.2, -2.0]) < 1e-14);
        let h = model.score_jacobian(&x, 17).unwrap();
        assert!(h.max_abs_diff(&Matrix::identity(3).clone_scaled(-1.0)) < 1e-14);
    }

    trait ScaledClone {
        fn clone_scaled(&self, a: f64) -> Self;
    }
    impl ScaledClone for Matrix<f64> {
        fn clone_scaled(&self, a: f64) -> Self {
            Matrix::from_fn(self.rows(), self.cols(), |i, j| a * self[(i, j)])
        }
    }

    #[test]
    fn marginal_of_unit_covariance_shifted_mean() {
        // 0.5 = sqrt(alpha_bar) for alpha_bar = 0.25.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let prior = GaussianMixture::gaussian(vec![2.0, -4.0], Covariance::Isotropic(1.0)).unwrap();
        let m = gmm_marginal(&prior, &s, 1).unwrap();
        assert_eq!(m.means()[0], vec![1.0, -2.0]);
        match &m.covariances()[0] {
            Covariance::Isotropic(v) => assert!((*v - 1.0f64).abs() < 1e-15),
            _ => panic!(),
        }
    }

    #[test]
    fn marginal_at_zero_is_prior() {
        let prior = random_mixture(3, 3);
        let m = gmm_marginal(&prior, &schedule(), 0).unwrap();
        assert_eq!(m.means(), prior.means());
        assert_eq!(m.weights(), prior.weights());
        for (a, b) in m.covariances().iter().zip(prior.covariances()) {
            assert!(a.to_dense(3).max_abs_diff(&b.to_dense(3)) < 1e-15);
        }
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let prior = GaussianMixture::isotropic_kernels(vec![vec![1.0, -2.0], vec![-1.0, 2.0]], 0.3).unwrap();
        let model = GmmScore::new(prior, schedule());
        for t in [0, 10, 999] {
            let sc = model.score(&[0.0, 0.0], t).unwrap();
            assert!(sc.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn single_kernel_empirical_score() {
        let v = vec![0.5, -0.25, 1.0];
        let model = empirical_score(std::slice::from_ref(&v), 0.2, schedule()).unwrap();
        let x = [0.1, 0.2, 0.3];
        let sc = model.score(&x, 0).unwrap();
        let want: Vec<f64> = x.iter().zip(&v).map(|(a, b)| -(a - b) / 0.04).collect();
        assert!(rel_err(&sc, &want) < 1e-13);
    }

    #[test]
    fn empirical_log_density_matches_direct_sum() {
        let mut rng = seeded(11);
        let n = 6;
        let data: Vec<Vec<f64>> = (0..50).map(|_| standard_normal(&mut rng, n)).collect();
        let bw = 0.7;
        let s = schedule();
        let model = empirical_score(&data, bw, s.clone()).unwrap();
        for t in [0, 50, 600] {
            let a = s.alpha_bar(t);
            let var = a * bw * bw + 1.0 - a;
            let x: Vec<f64> = standard_normal(&mut rng, n);
            let direct: f64 = data
                .iter()
                .map(|d| {
                    let q: f64 = x.iter().zip(d).map(|(xi, di)| (xi - a.sqrt() * di).powi(2)).sum();
                    (-(q / var) / 2.0).exp() / (2.0 * std::f64::consts::PI * var).powf(n as f64 / 2.0)
                })
                .sum::<f64>()
                / 50.0;
            let got = model.log_density(&x, t).unwrap();
            assert!((got - direct.ln()).abs() <= 1e-10 * direct.ln().abs());
        }
        assert!(empirical_score::<f64>(&[], 1.0, s.clone()).is_err());
        assert!(empirical_score(&data, 0.0, s).is_err());
    }

    #[test]
    fn log_density_stays_finite_far_away() {
        let model = GmmScore::new(random_mixture(5, 3), schedule());
        let x = [1e6, -1e6, 3e5];
        assert!(model.log_density(&x, 0).unwrap().is_finite());
        assert!(model.score(&x, 0).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_non_finite_input() {
        let model = GmmScore::new(GaussianMixture::standard_normal(2), schedule());
        assert!(matches!(model.score(&[f64::NAN, 0.0], 3), Err(Error::NonFinite { .. })));
        assert!(matches!(model.score_jacobian(&[0.0, f64::INFINITY], 3), Err(Error::NonFinite { .. })));
        assert!(model.score(&[0.0, 0.0], 1001).is_err());
    }

    #[test]
    fn constructor_validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![Covariance::Isotropic(1.0); 2]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![Covariance::Isotropic(-1.0)]).is_err());
        let asym = Matrix::from_row_major(2, 2, vec![1.0, 0.5, 0.2, 1.0]).unwrap();
        assert_eq!(Covariance::full(&asym).unwrap_err(), Error::Matrix("symmetric"));
        let indef = Matrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(Covariance::full(&indef).unwrap_err(), Error::Matrix("positive definite"));
    }

    #[test]
    fn text_format_round_trip() {
        let text = "# two blobs\ndim 2\ncomponent 0.25\nmean 0 1\nvar 0.5\ncomponent 0.75\nmean -1 2\nvar 0.1 0.2\n";
        let g = GaussianMixture::<f64>::parse_text(text).unwrap();
        assert_eq!(g.n_components(), 2);
        let again = GaussianMixture::<f64>::parse_text(&g.to_text().unwrap()).unwrap();
        assert_eq!(again.weights(), g.weights());
        assert_eq!(again.means(), g.means());
        let err = GaussianMixture::<f64>::parse_text("dim 2\ncomponent 1\nmean 0 1 2\nvar 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn counting_wrapper_counts() {
        let model = GmmScore::new(GaussianMixture::standard_normal(2), schedule());
        let c = CountingScore::new(&model);
        c.score(&[0.0, 1.0], 1).unwrap();
        c.score(&[0.0, 1.0], 2).unwrap();
        c.score_jacobian_vp(&[0.0, 1.0], 2, &[1.0, 0.0]).unwrap();
        c.log_density(&[0.0, 1.0], 2).unwrap();
        assert_eq!(c.score_evals(), 2);
        assert_eq!(c.jacobian_evals(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn score_is_gradient_of_log_density(seed in 0u64..1000, t in 0usize..=1000) {
            let n = 4;
            let model = GmmScore::new(random_mixture(seed, n), schedule());
            let mut rng = seeded(seed ^ 0xabc);
            let x: Vec<f64> = standard_normal(&mut rng, n);
            let sc = model.score(&x, t).unwrap();
            let fd: Vec<f64> = (0..n).map(|i| {
                let h = 1e-5 * (1.0 + x[i].abs());
                let mut p = x.clone(); p[i] += h;
                let mut m = x.clone(); m[i] -= h;
                (model.log_density(&p, t).unwrap() - model.log_density(&m, t).unwrap()) / (2.0 * h)
            }).collect();
            prop_assert!(rel_err(&fd, &sc) < 1e-5, "rel err {}", rel_err(&fd, &sc));
        }

        #[test]
        fn jacobian_is_derivative_of_score(seed in 0u64..1000, t in 0usize..=1000) {
            let n = 4;
            let model = GmmScore::new(random_mixture(seed, n), schedule());
            let mut rng = seeded(seed ^ 0xdef);
            let x: Vec<f64> = standard_normal(&mut rng, n);
            let h = model.score_jacobian(&x, t).unwrap();
            prop_assert!(h.max_asymmetry() < 1e-12);
            for j in 0..n {
                let step = 1e-5 * (1.0 + x[j].abs());
                let mut p = x.clone(); p[j] += step;
                let mut m = x.clone(); m[j] -= step;
                let sp = model.score(&p, t).unwrap();
                let sm = model.score(&m, t).unwrap();
                let fd: Vec<f64> = sp.iter().zip(&sm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
                let col = h.column(j);
                prop_assert!(rel_err(&fd, &col) < 1e-4, "rel err {}", rel_err(&fd, &col));
            }
            let v: Vec<f64> = standard_normal(&mut rng, n);
            let hv = model.score_jacobian_vp(&x, t, &v).unwrap();
            prop_assert!(rel_err(&hv, &h.matvec(&v)) < 1e-10);
        }
    }
}
