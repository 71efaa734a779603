//! Block-specific shape invariant model.
//!
//! A curve in block `(k, l)` is `a1 + exp(a2) * m(t - a3; beta) + noise`,
//! where the random effects `(a1, a2, a3)` are Gaussian with a diagonal
//! covariance and any subset of them may be switched off (held at zero).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::splines::{eval_shape, shifted_basis, ShapeFn, SplineSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which of the amplitude, scale and phase random effects are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomEffectConfig {
    pub amplitude: bool,
    pub scale: bool,
    pub phase: bool,
}

impl RandomEffectConfig {
    pub const fn new(amplitude: bool, scale: bool, phase: bool) -> Self {
        RandomEffectConfig {
            amplitude,
            scale,
            phase,
        }
    }

    /// All eight configurations, FFF first.
    pub fn all() -> Vec<Self> {
        (0..8)
            .map(|b| Self::new(b & 4 != 0, b & 2 != 0, b & 1 != 0))
            .collect()
    }

    pub fn flags(&self) -> [bool; 3] {
        [self.amplitude, self.scale, self.phase]
    }

    /// Indices (0 = amplitude, 1 = scale, 2 = phase) of the active effects.
    pub fn active(&self) -> Vec<usize> {
        (0..3).filter(|&a| self.flags()[a]).collect()
    }

    pub fn n_active(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }

    pub fn code(&self) -> String {
        self.flags()
            .iter()
            .map(|&f| if f { 'T' } else { 'F' })
            .collect()
    }
}

impl fmt::Display for RandomEffectConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for RandomEffectConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let flags: Vec<bool> = s
            .trim()
            .chars()
            .map(|c| match c {
                'T' | 't' => Ok(true),
                'F' | 'f' => Ok(false),
                other => Err(Error::Config(format!(
                    "random effect code must use T/F, found '{other}' in '{s}'"
                ))),
            })
            .collect::<Result<_>>()?;
        if flags.len() != 3 {
            return Err(Error::Config(format!(
                "random effect code must have 3 characters, got '{s}'"
            )));
        }
        Ok(Self::new(flags[0], flags[1], flags[2]))
    }
}

/// Parameters of one block. `sigma_alpha` holds the diagonal of the random
/// effect covariance (variances, not standard deviations).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub mu_alpha: [f64; 3],
    pub sigma_alpha: [f64; 3],
    pub sigma_eps: f64,
    pub beta: Vec<f64>,
}

impl BlockParams {
    pub fn validate(&self, config: RandomEffectConfig, spec: &SplineSpec) -> Result<()> {
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::Numeric(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        for (a, &on) in config.flags().iter().enumerate() {
            if self.sigma_alpha[a] < 0.0 || !self.sigma_alpha[a].is_finite() {
                return Err(Error::Numeric(format!(
                    "random effect variance {a} is {}",
                    self.sigma_alpha[a]
                )));
            }
            if !on && (self.sigma_alpha[a] != 0.0 || self.mu_alpha[a] != 0.0) {
                return Err(Error::Numeric(format!(
                    "switched-off random effect {a} must have zero mean and variance"
                )));
            }
        }
        if self.beta.len() != spec.dim() {
            return Err(Error::Shape(format!(
                "beta has length {}, basis dimension is {}",
                self.beta.len(),
                spec.dim()
            )));
        }
        Ok(())
    }

    /// Zeroes the mean and variance entries of switched-off effects.
    pub fn restrict(&mut self, config: RandomEffectConfig) {
        for (a, &on) in config.flags().iter().enumerate() {
            if !on {
                self.mu_alpha[a] = 0.0;
                self.sigma_alpha[a] = 0.0;
            }
        }
    }
}

/// One observed cell: a time grid and values, `None` marking missing entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCurve {
    pub times: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

impl CellCurve {
    pub fn full(times: Vec<f64>, values: Vec<f64>) -> Self {
        CellCurve {
            times,
            values: values.into_iter().map(Some).collect(),
        }
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn observed(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times
            .iter()
            .zip(&self.values)
            .filter_map(|(&t, v)| v.map(|x| (t, x)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Shape("times and values differ in length".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("times must be strictly increasing".into()));
        }
        if self.n_observed() == 0 {
            return Err(Error::Shape("curve has no observed values".into()));
        }
        Ok(())
    }
}

/// `alpha1 + exp(alpha2) * m(t - alpha3; beta)` at each time.
pub fn conditional_mean(
    times: &[f64],
    alpha: [f64; 3],
    params: &BlockParams,
    spec: &SplineSpec,
) -> Result<Vec<f64>> {
    let basis = shifted_basis(spec, times, alpha[2])?;
    let shape = eval_shape(&basis, &params.beta)?;
    let scale = alpha[1].exp();
    Ok(shape.into_iter().map(|m| alpha[0] + scale * m).collect())
}

/// Gaussian log-likelihood of the observed entries given the random effects.
pub fn conditional_loglik(
    curve: &CellCurve,
    alpha: [f64; 3],
    params: &BlockParams,
    spec: &SplineSpec,
) -> Result<f64> {
    let mean = conditional_mean(&curve.times, alpha, params, spec)?;
    let var = params.sigma_eps * params.sigma_eps;
    Ok(curve
        .values
        .iter()
        .zip(mean)
        .filter_map(|(v, mu)| v.map(|x| -0.5 * (LN_2PI + var.ln()) - (x - mu).powi(2) / (2.0 * var)))
        .sum())
}

/// Monte Carlo estimate of a log marginal density with its standard error
/// (delta method, computed from antithetic pair means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub log_mean: f64,
    pub std_error: f64,
}

/// `log(mean(exp(values)))`, stabilized by the maximum.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Marginal log-density of a curve, integrating the random effects by Monte
/// Carlo with `m` antithetic draws.
pub fn marginal_loglik_mc<R: Rng + ?Sized>(
    curve: &CellCurve,
    params: &BlockParams,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    marginal_loglik_mc_estimate(curve, params, config, spec, m, rng).map(|e| e.log_mean)
}

pub fn marginal_loglik_mc_estimate<R: Rng + ?Sized>(
    curve: &CellCurve,
    params: &BlockParams,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    m: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if m == 0 {
        return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
    }
    let kernel = BlockKernel::new(params, config, spec)?;
    let obs = ObservedCurve::from_curve(curve);
    kernel.marginal(&obs, m, rng)
}

/// Like [`marginal_loglik_mc_estimate`], with the amplitude effect integrated
/// exactly; only scale and phase are sampled.
pub fn marginal_loglik_rb_estimate<R: Rng + ?Sized>(
    curve: &CellCurve,
    params: &BlockParams,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    m: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if m == 0 {
        return Err(Error::Config("Monte Carlo sample count must be >= 1".into()));
    }
    let kernel = BlockKernel::new(params, config, spec)?;
    let obs = ObservedCurve::from_curve(curve);
    kernel.marginal_rb(&obs, m, rng)
}

/// Draws one curve from the block model at the given times.
pub fn sample_cell<R: Rng + ?Sized>(
    params: &BlockParams,
    config: RandomEffectConfig,
    spec: &SplineSpec,
    times: &[f64],
    rng: &mut R,
) -> Result<CellCurve> {
    params.validate(config, spec)?;
    let shape = ShapeFn::new(spec, &params.beta)?;
    Ok(sample_with_shape(
        |t| shape.value(t),
        params,
        config,
        times,
        rng,
    ))
}

/// Generative draw for an arbitrary mean shape. The shape is responsible for
/// its own out-of-domain policy.
pub(crate) fn sample_with_shape<R: Rng + ?Sized>(
    shape: impl Fn(f64) -> f64,
    params: &BlockParams,
    config: RandomEffectConfig,
    times: &[f64],
    rng: &mut R,
) -> CellCurve {
    let alpha = draw_alpha(params, config, rng);
    let scale = alpha[1].exp();
    let values = times
        .iter()
        .map(|&t| {
            let eps: f64 = rng.sample(StandardNormal);
            alpha[0] + scale * shape(t - alpha[2]) + params.sigma_eps * eps
        })
        .collect();
    CellCurve::full(times.to_vec(), values)
}

pub(crate) fn draw_alpha<R: Rng + ?Sized>(
    params: &BlockParams,
    config: RandomEffectConfig,
    rng: &mut R,
) -> [f64; 3] {
    let mut alpha = [0.0; 3];
    for (a, &on) in config.flags().iter().enumerate() {
        if on {
            let e: f64 = rng.sample(StandardNormal);
            alpha[a] = params.mu_alpha[a] + params.sigma_alpha[a].sqrt() * e;
        }
    }
    alpha
}

/// Observed points of a cell, with the sums needed by the phase-free path.
#[derive(Debug, Clone, Default)]
pub(crate) struct ObservedCurve {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    sum_x: f64,
    sum_xx: f64,
}

impl ObservedCurve {
    pub fn from_curve(curve: &CellCurve) -> Self {
        let (t, x): (Vec<f64>, Vec<f64>) = curve.observed().unzip();
        let sum_x = x.iter().sum();
        let sum_xx = x.iter().map(|v| v * v).sum();
        ObservedCurve { t, x, sum_x, sum_xx }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }
}

/// Precomputed per-block quantities for repeated marginal evaluations.
#[derive(Debug, Clone)]
pub(crate) struct BlockKernel {
    shape: ShapeFn,
    config: RandomEffectConfig,
    mu: [f64; 3],
    sd: [f64; 3],
    var_eps: f64,
    log_var_eps: f64,
}

impl BlockKernel {
    pub fn new(params: &BlockParams, config: RandomEffectConfig, spec: &SplineSpec) -> Result<Self> {
        params.validate(config, spec)?;
        let var_eps = params.sigma_eps * params.sigma_eps;
        Ok(BlockKernel {
            shape: ShapeFn::new(spec, &params.beta)?,
            config,
            mu: params.mu_alpha,
            sd: params.sigma_alpha.map(f64::sqrt),
            var_eps,
            log_var_eps: var_eps.ln(),
        })
    }

    #[inline]
    fn loglik_from_rss(&self, n: usize, rss: f64) -> f64 {
        -0.5 * n as f64 * (LN_2PI + self.log_var_eps) - rss / (2.0 * self.var_eps)
    }

    pub fn marginal<R: Rng + ?Sized>(
        &self,
        obs: &ObservedCurve,
        m: usize,
        rng: &mut R,
    ) -> Result<McEstimate> {
        let n = obs.len();
        let flags = self.config.flags();
        if !flags.iter().any(|&f| f) {
            let rss = self.rss_shifted(obs, 0.0, 1.0, 0.0);
            return Ok(McEstimate {
                log_mean: self.loglik_from_rss(n, rss),
                std_error: 0.0,
            });
        }

        // phase-free path: RSS is a quadratic form in (a1, exp(a2))
        let moments = (!self.config.phase).then(|| {
            let mut sm = 0.0;
            let mut smm = 0.0;
            let mut sxm = 0.0;
            for (&t, &x) in obs.t.iter().zip(&obs.x) {
                let v = self.shape.value(t);
                sm += v;
                smm += v * v;
                sxm += x * v;
            }
            (sm, smm, sxm)
        });

        let mut lls = Vec::with_capacity(m);
        let mut eps = [0.0f64; 3];
        while lls.len() < m {
            for (a, e) in eps.iter_mut().enumerate() {
                *e = if flags[a] { rng.sample(StandardNormal) } else { 0.0 };
            }
            for sign in [1.0, -1.0] {
                if lls.len() == m {
                    break;
                }
                let a1 = self.mu[0] + sign * self.sd[0] * eps[0];
                let s = (self.mu[1] + sign * self.sd[1] * eps[1]).exp();
                let a3 = self.mu[2] + sign * self.sd[2] * eps[2];
                let rss = match moments {
                    Some((sm, smm, sxm)) => {
                        let nf = n as f64;
                        (obs.sum_xx + nf * a1 * a1 + s * s * smm - 2.0 * a1 * obs.sum_x
                            - 2.0 * s * sxm
                            + 2.0 * a1 * s * sm)
                            .max(0.0)
                    }
                    None => self.rss_shifted(obs, a1, s, a3),
                };
                lls.push(self.loglik_from_rss(n, rss));
            }
        }

        let log_mean = log_mean_exp(&lls);
        if !log_mean.is_finite() {
            return Err(Error::Numeric(
                "Monte Carlo marginal density is not finite".into(),
            ));
        }
        Ok(McEstimate {
            log_mean,
            std_error: pair_std_error(&lls, log_mean),
        })
    }

    /// Marginal with the amplitude effect integrated in closed form; only
    /// scale and phase are sampled. Falls back to `marginal` when the
    /// amplitude effect is off.
    pub fn marginal_rb<R: Rng + ?Sized>(
        &self,
        obs: &ObservedCurve,
        m: usize,
        rng: &mut R,
    ) -> Result<McEstimate> {
        let flags = self.config.flags();
        if !flags[0] {
            return self.marginal(obs, m, rng);
        }
        let n = obs.len();
        let nf = n as f64;
        let v1 = self.sd[0] * self.sd[0];
        let denom = self.var_eps + nf * v1;
        let constant = -0.5 * nf * LN_2PI
            - 0.5 * (nf - 1.0) * self.log_var_eps
            - 0.5 * denom.ln();
        let ll = |s: f64, a3: f64| {
            let (sr, srr) = self.residual_sums(obs, self.mu[0], s, a3);
            constant - (srr - v1 * sr * sr / denom).max(0.0) / (2.0 * self.var_eps)
        };
        if !flags[1] && !flags[2] {
            return Ok(McEstimate {
                log_mean: ll(self.mu[1].exp(), self.mu[2]),
                std_error: 0.0,
            });
        }

        let mut lls = Vec::with_capacity(m);
        while lls.len() < m {
            let e2: f64 = if flags[1] { rng.sample(StandardNormal) } else { 0.0 };
            let e3: f64 = if flags[2] { rng.sample(StandardNormal) } else { 0.0 };
            for sign in [1.0, -1.0] {
                if lls.len() == m {
                    break;
                }
                let s = (self.mu[1] + sign * self.sd[1] * e2).exp();
                let a3 = self.mu[2] + sign * self.sd[2] * e3;
                lls.push(ll(s, a3));
            }
        }
        let log_mean = log_mean_exp(&lls);
        if !log_mean.is_finite() {
            return Err(Error::Numeric(
                "Monte Carlo marginal density is not finite".into(),
            ));
        }
        Ok(McEstimate {
            log_mean,
            std_error: pair_std_error(&lls, log_mean),
        })
    }

    /// Sum and sum of squares of `x - a1 - s * m(t - a3)`.
    #[inline]
    fn residual_sums(&self, obs: &ObservedCurve, a1: f64, s: f64, a3: f64) -> (f64, f64) {
        obs.t.iter().zip(&obs.x).fold((0.0, 0.0), |(sr, srr), (&t, &x)| {
            let r = x - a1 - s * self.shape.value(t - a3);
            (sr + r, srr + r * r)
        })
    }

    #[inline]
    fn rss_shifted(&self, obs: &ObservedCurve, a1: f64, s: f64, a3: f64) -> f64 {
        obs.t
            .iter()
            .zip(&obs.x)
            .map(|(&t, &x)| {
                let r = x - a1 - s * self.shape.value(t - a3);
                r * r
            })
            .sum()
    }
}

/// Standard error of `log(mean(w))` treating antithetic pairs as the
/// independent units.
fn pair_std_error(lls: &[f64], log_mean: f64) -> f64 {
    let pairs: Vec<f64> = lls
        .chunks_exact(2)
        .map(|p| 0.5 * ((p[0] - log_mean).exp() + (p[1] - log_mean).exp()))
        .collect();
    if pairs.len() < 2 {
        return f64::INFINITY;
    }
    let k = pairs.len() as f64;
    let mean = pairs.iter().sum::<f64>() / k;
    let var = pairs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var / k).sqrt() / mean
}
