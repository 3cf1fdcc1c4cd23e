//! Changepoint duration priors and Dirichlet utilities.
//!
//! Each changepoint `τ_i` is drawn from a discrete law on the finite support
//! `{τ_{i-1}, ..., T}`. Equality with `τ_{i-1}` is allowed and yields a
//! zero-length segment. Every pmf here is normalized exactly over that
//! support in log space.

use libm::lgamma;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::ChangepointVector;

/// Distance kept from the boundary of `(0, 1)` for proposed parameters.
pub const PARAM_EPS: f64 = 1e-9;

pub(crate) fn clamp_open_unit(x: f64) -> f64 {
    x.clamp(PARAM_EPS, 1.0 - PARAM_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationFamily {
    /// Negative binomial in position, parameterized by relative mean `r` and shape `b`.
    TruncNegBin,
    /// Constant per-position hazard `p`.
    TruncGeometric,
    /// Uniform over the remaining positions.
    UniformPos,
}

impl DurationFamily {
    /// Parameter names in the order they appear in [`DurationPrior::values`].
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::TruncNegBin => &["r", "b"],
            Self::TruncGeometric => &["p"],
            Self::UniformPos => &[],
        }
    }
}

/// Prior for a single changepoint given its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DurationPrior {
    NegBin { r: f64, b: f64 },
    Geometric { p: f64 },
    Uniform,
}

impl DurationPrior {
    pub fn family(&self) -> DurationFamily {
        match self {
            Self::NegBin { .. } => DurationFamily::TruncNegBin,
            Self::Geometric { .. } => DurationFamily::TruncGeometric,
            Self::Uniform => DurationFamily::UniformPos,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match *self {
            Self::NegBin { r, b } => vec![r, b],
            Self::Geometric { p } => vec![p],
            Self::Uniform => vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |x: f64| x > 0.0 && x < 1.0;
        let ok = match *self {
            Self::NegBin { r, b } => inside(r) && inside(b),
            Self::Geometric { p } => inside(p),
            Self::Uniform => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?} outside the open unit interval")))
        }
    }
}

/// Duration priors for all `K` changepoints, sharing one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointPriorParams {
    family: DurationFamily,
    priors: Vec<DurationPrior>,
}

impl ChangepointPriorParams {
    pub fn new(family: DurationFamily, priors: Vec<DurationPrior>) -> Result<Self> {
        for p in &priors {
            if p.family() != family {
                return Err(Error::InvalidParameter(format!("{p:?} is not of family {family:?}")));
            }
            p.validate()?;
        }
        Ok(Self { family, priors })
    }

    pub fn family(&self) -> DurationFamily {
        self.family
    }

    pub fn k(&self) -> usize {
        self.priors.len()
    }

    pub fn priors(&self) -> &[DurationPrior] {
        &self.priors
    }

    pub fn get(&self, i: usize) -> &DurationPrior {
        &self.priors[i]
    }

    pub(crate) fn set(&mut self, i: usize, prior: DurationPrior) {
        debug_assert_eq!(prior.family(), self.family);
        self.priors[i] = prior;
    }
}

/// Shape `γ` solving `r·T = γ(1−b)/b`, so that the untruncated negative
/// binomial has mean `r·T`.
pub fn gamma_of(r: f64, b: f64, t: usize) -> f64 {
    r * t as f64 * b / (1.0 - b)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Unnormalized log weights over positions `0..=T` with suffix log-sums, so
/// that any truncation `{τ_prev..T}` is normalized in O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct DurationTable {
    log_weight: Vec<f64>,
    log_tail: Vec<f64>,
}

impl DurationTable {
    pub fn new(prior: &DurationPrior, t: usize) -> Self {
        let log_weight: Vec<f64> = match *prior {
            DurationPrior::NegBin { r, b } => {
                let b = clamp_open_unit(b);
                let gamma = gamma_of(clamp_open_unit(r), b, t);
                let (lg_gamma, log_q) = (lgamma(gamma), (1.0 - b).ln());
                // Γ(τ+γ)/(τ!Γ(γ)) (1−b)^τ; the b^γ factor is constant in τ
                (0..=t)
                    .map(|tau| {
                        let tau = tau as f64;
                        lgamma(tau + gamma) - lg_gamma - lgamma(tau + 1.0) + tau * log_q
                    })
                    .collect()
            }
            DurationPrior::Geometric { p } => {
                let log_q = (1.0 - clamp_open_unit(p)).ln();
                (0..=t).map(|tau| tau as f64 * log_q).collect()
            }
            DurationPrior::Uniform => vec![0.0; t + 1],
        };
        let mut log_tail = vec![f64::NEG_INFINITY; t + 2];
        for tau in (0..=t).rev() {
            log_tail[tau] = log_add_exp(log_weight[tau], log_tail[tau + 1]);
        }
        Self { log_weight, log_tail }
    }

    /// Sequence length `T` the table was built for.
    pub fn horizon(&self) -> usize {
        self.log_weight.len() - 1
    }

    /// Log normalizer of the support `{tau_prev..T}`.
    pub fn log_normalizer(&self, tau_prev: usize) -> f64 {
        self.log_tail[tau_prev]
    }

    /// Log pmf without support checks; callers guarantee `tau_prev ≤ tau ≤ T`.
    pub fn log_pmf(&self, tau: usize, tau_prev: usize) -> f64 {
        self.log_weight[tau] - self.log_tail[tau_prev]
    }

    /// Inverse-CDF draw from `{tau_prev..T}`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, tau_prev: usize) -> usize {
        let t = self.horizon();
        assert!(tau_prev <= t, "tau_prev {tau_prev} beyond horizon {t}");
        let u: f64 = rng.random();
        let norm = self.log_tail[tau_prev];
        let mut acc = 0.0;
        for tau in tau_prev..t {
            acc += (self.log_weight[tau] - norm).exp();
            if u < acc {
                return tau;
            }
        }
        t
    }
}

/// Log probability of `tau` under `prior` truncated to `{tau_prev..T}`.
pub fn duration_log_pmf(tau: usize, tau_prev: usize, t: usize, prior: &DurationPrior) -> Result<f64> {
    if tau_prev > t || tau < tau_prev || tau > t {
        return Err(Error::OutsideSupport { tau, lo: tau_prev, hi: t });
    }
    Ok(match prior {
        DurationPrior::Uniform => -((t - tau_prev + 1) as f64).ln(),
        _ => DurationTable::new(prior, t).log_pmf(tau, tau_prev),
    })
}

/// Draws a changepoint from `prior` truncated to `{tau_prev..T}`.
///
/// # Panics
///
/// If `tau_prev > t`.
pub fn sample_duration<R: Rng + ?Sized>(rng: &mut R, tau_prev: usize, t: usize, prior: &DurationPrior) -> usize {
    DurationTable::new(prior, t).sample(rng, tau_prev)
}

/// `Σ_i log p(τ_i | τ_{i−1}, T, θ_i)` with `τ_0 = 0`.
pub fn changepoint_prior_log(tau: &ChangepointVector, t: usize, params: &ChangepointPriorParams) -> Result<f64> {
    if tau.k() != params.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} changepoints but {} prior parameter sets",
            tau.k(),
            params.k()
        )));
    }
    tau.check_horizon(t)?;
    let mut prev = 0;
    let mut total = 0.0;
    for (&cur, prior) in tau.positions().iter().zip(params.priors()) {
        total += duration_log_pmf(cur, prev, t, prior)?;
        prev = cur;
    }
    Ok(total)
}

fn check_dirichlet_args(x: &[f64], alpha: &[f64]) -> Result<()> {
    if x.len() != alpha.len() || x.is_empty() {
        return Err(Error::DimensionMismatch(format!("x has {} entries, alpha {}", x.len(), alpha.len())));
    }
    if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter("Dirichlet concentrations must be positive".into()));
    }
    if x.iter().any(|&v| !(v > 0.0)) || (x.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("point is not on the open simplex".into()));
    }
    Ok(())
}

/// Log density of `Dir(alpha)` at `x`, with respect to Lebesgue measure on
/// the first `len − 1` coordinates.
pub fn dirichlet_log_density(x: &[f64], alpha: &[f64]) -> Result<f64> {
    check_dirichlet_args(x, alpha)?;
    Ok(dirichlet_log_density_unchecked(x, alpha))
}

pub(crate) fn dirichlet_log_density_unchecked(x: &[f64], alpha: &[f64]) -> f64 {
    let alpha_sum: f64 = alpha.iter().sum();
    let mut lp = lgamma(alpha_sum);
    for (&xi, &ai) in x.iter().zip(alpha) {
        lp += (ai - 1.0) * xi.ln() - lgamma(ai);
    }
    lp
}

/// Draws from `Dir(alpha)` by normalizing independent gamma variates.
///
/// # Panics
///
/// If any concentration is not strictly positive and finite.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> =
        alpha.iter().map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // every variate underflowed: fall back to the component with the largest concentration
        let best = alpha.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = if i == best { 1.0 } else { 0.0 });
    }
    draws
}
