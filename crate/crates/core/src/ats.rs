//! Adaptive temperature for the masked softmax loss.
//!
//! If valid-token logits are modeled as `N(mu, sigma2)` and there are `m` of
//! them, `E[sum exp(f / tau)] = m * exp(mu / tau + sigma2 / (2 tau^2))`.
//! Asking the positive token's masked probability to equal `eta` then gives
//!
//! ```text
//! log(m eta) tau^2 - (f_pos - mu) tau + sigma2 / 2 = 0
//! ```
//!
//! whose two roots are
//! `((f_pos - mu) -/+ sqrt((f_pos - mu)^2 - 2 sigma2 log(m eta))) / (2 log(m eta))`.
//! The minus root is the default.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TokenId;
use crate::losses::log_sum_exp;

#[derive(Debug, Error, PartialEq)]
pub enum AtsError {
    #[error("eta must lie in (0, 1), got {0}")]
    Eta(f64),
    #[error("invalid temperature bounds [{0}, {1}]")]
    Bounds(f64, f64),
    #[error("average valid count must be >= 1, got {0}")]
    ValidCount(f64),
    #[error("smoothing factor must lie in (0, 1], got {0}")]
    Smoothing(f64),
    #[error("batch contains no valid-token logits")]
    EmptyBatch,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Moments of valid-token logits over a batch of token instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtsStats {
    pub mu: f64,
    /// Population variance.
    pub sigma2: f64,
    /// Mean valid-token count per token instance.
    pub m: f64,
    /// Mean positive-token logit.
    pub f_pos: f64,
    /// Token instances seen.
    pub sample_count: usize,
}

/// One token instance: its logits row, valid set and target token.
#[derive(Debug, Clone, Copy)]
pub struct StatsSample<'a> {
    pub logits: &'a [f64],
    pub valid: &'a [TokenId],
    pub target: TokenId,
}

/// Streaming (Welford) moments over every valid-token logit in the batch.
pub fn estimate_stats<'a, I>(batch: I) -> Result<AtsStats, AtsError>
where
    I: IntoIterator<Item = StatsSample<'a>>,
{
    let mut n = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut instances = 0usize;
    let mut valid_total = 0usize;
    let mut pos_sum = 0.0;
    for s in batch {
        instances += 1;
        valid_total += s.valid.len();
        pos_sum += s.logits[s.target as usize];
        for &z in s.valid {
            let x = s.logits[z as usize];
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
    }
    if n == 0 {
        return Err(AtsError::EmptyBatch);
    }
    Ok(AtsStats {
        mu: mean,
        sigma2: (m2 / n as f64).max(0.0),
        m: valid_total as f64 / instances as f64,
        f_pos: pos_sum / instances as f64,
        sample_count: instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootBranch {
    #[default]
    Minus,
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for TauBounds {
    fn default() -> Self {
        Self { min: 0.05, max: 20.0 }
    }
}

impl TauBounds {
    pub fn new(min: f64, max: f64) -> Result<Self, AtsError> {
        if min > 0.0 && min < max && max.is_finite() {
            Ok(Self { min, max })
        } else {
            Err(AtsError::Bounds(min, max))
        }
    }

    pub fn clamp(&self, tau: f64) -> f64 {
        tau.clamp(self.min, self.max)
    }
}

/// Inputs of the temperature equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauQuery {
    pub f_pos: f64,
    pub mu: f64,
    pub sigma2: f64,
    /// Valid-token count, per instance or corpus average.
    pub m: f64,
}

impl From<&AtsStats> for TauQuery {
    fn from(s: &AtsStats) -> Self {
        Self { f_pos: s.f_pos, mu: s.mu, sigma2: s.sigma2, m: s.m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    pub tau: f64,
    pub branch: RootBranch,
    /// No usable root: negative discriminant, degenerate leading
    /// coefficient, or a non-positive / non-finite root.
    pub fallback_applied: bool,
    /// A usable root existed but lay outside the bounds.
    pub clamped: bool,
    /// `log(m eta) tau^2 - (f_pos - mu) tau + sigma2 / 2` at the returned tau.
    pub quadratic_residual: f64,
    pub discriminant: f64,
    pub minus_root: Option<f64>,
    pub plus_root: Option<f64>,
}

const DEGENERATE_LEADING: f64 = 1e-12;

/// Closed-form temperature solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSolver {
    pub eta: f64,
    pub branch: RootBranch,
    pub bounds: TauBounds,
}

impl TauSolver {
    pub fn new(eta: f64, branch: RootBranch, bounds: TauBounds) -> Result<Self, AtsError> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(AtsError::Eta(eta));
        }
        TauBounds::new(bounds.min, bounds.max)?;
        Ok(Self { eta, branch, bounds })
    }

    /// Both roots of the temperature quadratic, `(minus, plus)`, or `None`
    /// when the discriminant is negative or the equation degenerates.
    pub fn roots(&self, q: &TauQuery) -> Result<(f64, Option<(f64, f64)>), AtsError> {
        if !(q.m >= 1.0) {
            return Err(AtsError::ValidCount(q.m));
        }
        let a = (q.m * self.eta).ln();
        let gap = q.f_pos - q.mu;
        let c = q.sigma2 / 2.0;
        let disc = gap * gap - 4.0 * a * c;
        if a.abs() < DEGENERATE_LEADING || !(disc >= 0.0) {
            return Ok((disc, None));
        }
        // Cancellation-free pair: q/a and c/q with q = (gap + sign(gap) sqrt(D)) / 2.
        let sqrt_d = disc.sqrt();
        let (minus, plus) = if gap > 0.0 {
            let qq = 0.5 * (gap + sqrt_d);
            (c / qq, qq / a)
        } else if gap < 0.0 {
            let qq = 0.5 * (gap - sqrt_d);
            (qq / a, c / qq)
        } else {
            (-sqrt_d / (2.0 * a), sqrt_d / (2.0 * a))
        };
        Ok((disc, Some((minus, plus))))
    }

    pub fn residual(&self, q: &TauQuery, tau: f64) -> f64 {
        let a = (q.m * self.eta).ln();
        a * tau * tau - (q.f_pos - q.mu) * tau + q.sigma2 / 2.0
    }

    /// Solves for tau on the configured branch. When no usable root exists,
    /// `fallback` (clamped to the bounds) is returned with `fallback_applied`.
    pub fn solve(&self, q: &TauQuery, fallback: f64) -> Result<TemperatureEstimate, AtsError> {
        let (disc, roots) = self.roots(q)?;
        let (minus_root, plus_root) = match roots {
            Some((m, p)) => (Some(m), Some(p)),
            None => (None, None),
        };
        let chosen = match self.branch {
            RootBranch::Minus => minus_root,
            RootBranch::Plus => plus_root,
        };
        let (tau, fallback_applied, clamped) = match chosen {
            Some(r) if r.is_finite() && r > 0.0 => {
                let t = self.bounds.clamp(r);
                (t, false, t != r)
            }
            _ => (self.bounds.clamp(fallback), true, false),
        };
        Ok(TemperatureEstimate {
            tau,
            branch: self.branch,
            fallback_applied,
            clamped,
            quadratic_residual: self.residual(q, tau),
            discriminant: disc,
            minus_root,
            plus_root,
        })
    }
}

/// Positive-token masked probability predicted by the lognormal expectation:
/// `exp((f_pos - mu) / tau - sigma2 / (2 tau^2)) / m`.
pub fn validate_tau_lognormal(tau: f64, q: &TauQuery) -> f64 {
    ((q.f_pos - q.mu) / tau - q.sigma2 / (2.0 * tau * tau) - q.m.ln()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

/// Average masked probability of a token with logit `f_pos` against
/// `m_int - 1` negatives drawn from `N(mu, sigma2)`, over `trials` draws.
pub fn validate_tau_montecarlo(tau: f64, q: &TauQuery, m_int: usize, trials: usize, seed: u64) -> MonteCarloEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = q.sigma2.max(0.0).sqrt();
    let normal = Normal::new(q.mu, sd).expect("finite non-negative sd");
    let mut shifted = Vec::with_capacity(m_int);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        shifted.clear();
        shifted.push(0.0);
        for _ in 1..m_int {
            let neg: f64 = if sd == 0.0 { q.mu } else { normal.sample(&mut rng) };
            shifted.push((neg - q.f_pos) / tau);
        }
        let p = (-log_sum_exp(shifted.iter().copied())).exp();
        sum += p;
        sum_sq += p * p;
    }
    let n = trials.max(1) as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let std_err = if trials > 1 { (var * n / (n - 1.0)).sqrt() / n.sqrt() } else { 0.0 };
    MonteCarloEstimate { mean, std_err, trials }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Empirical density `count / (n * width)`.
    pub density: f64,
    /// Fitted Gaussian density at the bin center.
    pub gaussian_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianFit {
    pub n: usize,
    pub mu: f64,
    pub sigma2: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub histogram: Vec<HistogramBin>,
}

pub const MIN_FIT_SAMPLES: usize = 100;

/// Moments, skewness, kurtosis and a fixed-bin histogram with the fitted
/// Gaussian density for overlay.
pub fn gaussian_fit_report(sample: &[f64], bins: usize) -> Result<GaussianFit, AtsError> {
    if sample.len() < MIN_FIT_SAMPLES {
        return Err(AtsError::TooFewSamples { need: MIN_FIT_SAMPLES, got: sample.len() });
    }
    let n = sample.len() as f64;
    let mu = sample.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mu;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let (skewness, excess_kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };

    let lo = sample.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let histogram = if hi <= lo {
        vec![HistogramBin { lo, hi, count: sample.len(), density: f64::INFINITY, gaussian_density: f64::INFINITY }]
    } else {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in sample {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        let sd = m2.sqrt();
        counts
            .into_iter()
            .enumerate()
            .map(|(k, count)| {
                let b_lo = lo + k as f64 * width;
                let center = b_lo + 0.5 * width;
                let z = (center - mu) / sd;
                HistogramBin {
                    lo: b_lo,
                    hi: b_lo + width,
                    count,
                    density: count as f64 / (n * width),
                    gaussian_density: (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()),
                }
            })
            .collect()
    };
    Ok(GaussianFit { n: sample.len(), mu, sigma2: m2, skewness, excess_kurtosis, histogram })
}

/// Per-step global temperature: EMA-smoothed batch moments, corpus-level
/// valid count, closed-form solve, clamp. A failed solve keeps the previous
/// temperature.
#[derive(Debug, Clone)]
pub struct AtsSchedule {
    solver: TauSolver,
    smoothing: f64,
    corpus_avt: f64,
    ema: Option<(f64, f64, f64)>,
    prev_tau: f64,
    step: u64,
}

impl AtsSchedule {
    pub const INITIAL_TAU: f64 = 1.0;

    pub fn new(solver: TauSolver, smoothing: f64, corpus_avt: f64) -> Result<Self, AtsError> {
        if !(smoothing > 0.0 && smoothing <= 1.0) {
            return Err(AtsError::Smoothing(smoothing));
        }
        if !(corpus_avt >= 1.0) {
            return Err(AtsError::ValidCount(corpus_avt));
        }
        Ok(Self { solver, smoothing, corpus_avt, ema: None, prev_tau: Self::INITIAL_TAU, step: 0 })
    }

    pub fn current_tau(&self) -> f64 {
        self.prev_tau
    }

    pub fn step(&mut self, batch: &AtsStats) -> TemperatureEstimate {
        let s = self.smoothing;
        let (mu, sigma2, f_pos) = match self.ema {
            None => (batch.mu, batch.sigma2, batch.f_pos),
            Some((mu, sigma2, f_pos)) => (
                (1.0 - s) * mu + s * batch.mu,
                (1.0 - s) * sigma2 + s * batch.sigma2,
                (1.0 - s) * f_pos + s * batch.f_pos,
            ),
        };
        self.ema = Some((mu, sigma2, f_pos));
        let q = TauQuery { f_pos, mu, sigma2, m: self.corpus_avt };
        let est = self.solver.solve(&q, self.prev_tau).expect("corpus AVT validated at construction");
        debug!(
            "ats step {}: gap {:.4} sigma2 {:.4} m {:.2} tau {:.4}",
            self.step,
            f_pos - mu,
            sigma2,
            self.corpus_avt,
            est.tau
        );
        if est.fallback_applied {
            warn!(
                "ats step {}: no usable root (discriminant {:.4e}), keeping tau = {:.4}",
                self.step, est.discriminant, est.tau
            );
        }
        self.prev_tau = est.tau;
        self.step += 1;
        est
    }
}
