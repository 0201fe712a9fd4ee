//! Token-level softmax losses and their logit gradients.
//!
//! Every kernel works on a single logits row. Masked kernels touch only the
//! valid-index list, never the full row. Log-sum-exp is always computed with a
//! max shift.

use serde::Serialize;
use thiserror::Error;

use crate::catalog::TokenId;
use crate::trie::ValidMask;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty valid-token set")]
    EmptyMask,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("negative-token coefficient must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("target token {0} is not in the valid set")]
    TargetNotValid(TokenId),
    #[error("token {token} out of range for {len} logits")]
    OutOfRange { token: TokenId, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadTemperature(tau))
    }
}

fn check_token(logits: &[f64], token: TokenId) -> Result<(), LossError> {
    if (token as usize) < logits.len() {
        Ok(())
    } else {
        Err(LossError::OutOfRange { token, len: logits.len() })
    }
}

fn check_valid(logits: &[f64], valid: &[TokenId]) -> Result<(), LossError> {
    if valid.is_empty() {
        return Err(LossError::EmptyMask);
    }
    valid.iter().try_for_each(|&z| check_token(logits, z))
}

/// `log(sum(exp(x)))` with a max shift. Returns `-inf` for an empty input.
pub fn log_sum_exp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn lse_full(logits: &[f64], tau: f64) -> f64 {
    log_sum_exp(logits.iter().map(|&f| f / tau))
}

fn lse_valid(logits: &[f64], valid: &[TokenId], tau: f64) -> f64 {
    log_sum_exp(valid.iter().map(|&z| logits[z as usize] / tau))
}

/// Softmax of `logits / tau` restricted to `valid`; zero elsewhere.
pub fn masked_softmax(logits: &[f64], valid: &[TokenId], tau: f64) -> Result<Vec<f64>, LossError> {
    check_tau(tau)?;
    check_valid(logits, valid)?;
    let max = valid.iter().map(|&z| logits[z as usize] / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &z in valid {
        let e = (logits[z as usize] / tau - max).exp();
        p[z as usize] = e;
        total += e;
    }
    for &z in valid {
        p[z as usize] /= total;
    }
    Ok(p)
}

/// `-log softmax(f)[target]` over the whole vocabulary.
pub fn lml_token(logits: &[f64], target: TokenId) -> Result<f64, LossError> {
    check_token(logits, target)?;
    Ok(lse_full(logits, 1.0) - logits[target as usize])
}

/// `-tau * log softmax(f / tau)[target]`; equals [`lml_token`] at `tau = 1`.
pub fn lml_token_at(logits: &[f64], target: TokenId, tau: f64) -> Result<f64, LossError> {
    check_tau(tau)?;
    check_token(logits, target)?;
    Ok(tau * lse_full(logits, tau) - logits[target as usize])
}

/// Per-token language-modeling loss for a response.
pub fn lml_loss(rows: &[Vec<f64>], target: &[TokenId]) -> Result<Vec<f64>, LossError> {
    check_rows(rows, target.len())?;
    rows.iter().zip(target).map(|(f, &y)| lml_token(f, y)).collect()
}

/// Splits the LML term into the valid-vs-invalid part and the
/// positive-vs-negative part; the two sum to the LML term.
pub fn decompose_token(logits: &[f64], valid: &[TokenId], target: TokenId) -> Result<(f64, f64), LossError> {
    check_valid(logits, valid)?;
    check_token(logits, target)?;
    target_slot(valid, target)?;
    let all = lse_full(logits, 1.0);
    let val = lse_valid(logits, valid, 1.0);
    // Subset log-sum-exp can exceed the full one by a rounding ulp.
    let l1 = (all - val).max(0.0);
    Ok((l1, val - logits[target as usize]))
}

pub fn decompose_lml(
    rows: &[Vec<f64>],
    target: &[TokenId],
    mask: &ValidMask,
) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    check_rows(rows, target.len())?;
    check_mask(mask, target.len())?;
    let mut l1 = Vec::with_capacity(rows.len());
    let mut l2 = Vec::with_capacity(rows.len());
    for (t, (f, &y)) in rows.iter().zip(target).enumerate() {
        let (a, b) = decompose_token(f, mask.valid(t), y)?;
        l1.push(a);
        l2.push(b);
    }
    Ok((l1, l2))
}

/// Coefficient applied to the negative valid tokens in the MSL denominator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NegativeScale {
    /// Plain masked softmax.
    #[default]
    One,
    Fixed(f64),
    /// `|Z| / |Z_valid|` at each position.
    VocabRatio,
}

impl NegativeScale {
    pub fn alpha(self, vocab_size: usize, valid_count: usize) -> f64 {
        match self {
            NegativeScale::One => 1.0,
            NegativeScale::Fixed(a) => a,
            NegativeScale::VocabRatio => vocab_size as f64 / valid_count as f64,
        }
    }
}

/// Position of the target in the valid list.
fn target_slot(valid: &[TokenId], target: TokenId) -> Result<usize, LossError> {
    valid.iter().position(|&z| z == target).ok_or(LossError::TargetNotValid(target))
}

/// Log of `exp(s_y) + alpha * sum_{neg} exp(s_z)` with `s = f / tau`.
fn masked_log_denominator(logits: &[f64], valid: &[TokenId], target: TokenId, tau: f64, alpha: f64) -> f64 {
    let shift = valid.iter().map(|&z| logits[z as usize] / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut pos = 0.0;
    let mut neg = 0.0;
    for &z in valid {
        let e = (logits[z as usize] / tau - shift).exp();
        if z == target {
            pos += e;
        } else {
            neg += e;
        }
    }
    shift + (pos + alpha * neg).ln()
}

fn check_alpha(alpha: f64) -> Result<(), LossError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(LossError::BadAlpha(alpha))
    }
}

/// `-tau * log( e^{f_y/tau} / (e^{f_y/tau} + alpha * sum_{z in valid, z != y} e^{f_z/tau}) )`.
pub fn msl_token(logits: &[f64], valid: &[TokenId], target: TokenId, tau: f64, alpha: f64) -> Result<f64, LossError> {
    check_tau(tau)?;
    check_alpha(alpha)?;
    check_valid(logits, valid)?;
    target_slot(valid, target)?;
    if valid.len() == 1 {
        return Ok(0.0);
    }
    let log_den = masked_log_denominator(logits, valid, target, tau, alpha);
    Ok((tau * (log_den - logits[target as usize] / tau)).max(0.0))
}

pub fn msl_loss(
    rows: &[Vec<f64>],
    target: &[TokenId],
    mask: &ValidMask,
    tau: f64,
    scale: NegativeScale,
) -> Result<Vec<f64>, LossError> {
    check_rows(rows, target.len())?;
    check_mask(mask, target.len())?;
    rows.iter()
        .zip(target)
        .enumerate()
        .map(|(t, (f, &y))| {
            let alpha = scale.alpha(f.len(), mask.valid_count(t));
            msl_token(f, mask.valid(t), y, tau, alpha)
        })
        .collect()
}

/// Which tokens a softmax normalizes over.
#[derive(Debug, Clone, Copy)]
pub enum Support<'a> {
    Full,
    Valid(&'a [TokenId]),
}

/// Probability of `target` under the softmax of `logits / tau` over `support`.
pub fn target_probability(logits: &[f64], target: TokenId, support: Support<'_>, tau: f64) -> Result<f64, LossError> {
    check_tau(tau)?;
    check_token(logits, target)?;
    let lse = match support {
        Support::Full => lse_full(logits, tau),
        Support::Valid(valid) => {
            check_valid(logits, valid)?;
            target_slot(valid, target)?;
            lse_valid(logits, valid, tau)
        }
    };
    Ok((logits[target as usize] / tau - lse).exp().min(1.0))
}

/// Gradient weight `1 - p(target)`.
pub fn token_weight(logits: &[f64], target: TokenId, support: Support<'_>, tau: f64) -> Result<f64, LossError> {
    Ok(1.0 - target_probability(logits, target, support, tau)?)
}

/// `dL/df` of [`msl_token`]: `p~(z) - [z == target]` on the valid set, where
/// `p~` is the alpha-weighted masked softmax at `tau`; zero off the mask.
pub fn msl_grad(
    logits: &[f64],
    valid: &[TokenId],
    target: TokenId,
    tau: f64,
    alpha: f64,
) -> Result<Vec<f64>, LossError> {
    let mut g = vec![0.0; logits.len()];
    msl_grad_into(logits, valid, target, tau, alpha, &mut g)?;
    Ok(g)
}

/// Writes the MSL logit-gradient into `out`, which must be zero off `valid`.
pub fn msl_grad_into(
    logits: &[f64],
    valid: &[TokenId],
    target: TokenId,
    tau: f64,
    alpha: f64,
    out: &mut [f64],
) -> Result<(), LossError> {
    check_tau(tau)?;
    check_alpha(alpha)?;
    check_valid(logits, valid)?;
    target_slot(valid, target)?;
    if out.len() != logits.len() {
        return Err(LossError::Shape(format!("gradient buffer {} vs logits {}", out.len(), logits.len())));
    }
    let log_den = masked_log_denominator(logits, valid, target, tau, alpha);
    for &z in valid {
        let s = logits[z as usize] / tau;
        let p = if z == target { (s - log_den).exp() } else { alpha * (s - log_den).exp() };
        out[z as usize] = if z == target { p - 1.0 } else { p };
    }
    Ok(())
}

/// `dL/df` of the full-vocabulary loss `-tau * log softmax(f / tau)[target]`.
pub fn lml_grad(logits: &[f64], target: TokenId, tau: f64) -> Result<Vec<f64>, LossError> {
    check_tau(tau)?;
    check_token(logits, target)?;
    let lse = lse_full(logits, tau);
    let mut g: Vec<f64> = logits.iter().map(|&f| (f / tau - lse).exp()).collect();
    g[target as usize] -= 1.0;
    Ok(g)
}

/// `dL1/df = p(z) - [z in valid] p_valid(z)` at unit temperature.
pub fn l1_grad(logits: &[f64], valid: &[TokenId]) -> Result<Vec<f64>, LossError> {
    check_valid(logits, valid)?;
    let all = lse_full(logits, 1.0);
    let val = lse_valid(logits, valid, 1.0);
    let mut g: Vec<f64> = logits.iter().map(|&f| (f - all).exp()).collect();
    for &z in valid {
        g[z as usize] -= (logits[z as usize] - val).exp();
    }
    Ok(g)
}

/// `dL2/df`, which is the unit-temperature MSL gradient.
pub fn l2_grad(logits: &[f64], valid: &[TokenId], target: TokenId) -> Result<Vec<f64>, LossError> {
    msl_grad(logits, valid, target, 1.0, 1.0)
}

/// Everything known about one response token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenLoss {
    pub lml: f64,
    pub l1: f64,
    pub l2: f64,
    /// MSL at the breakdown's temperature and negative scale.
    pub msl: f64,
    /// `1 - p(target)` over the full vocabulary at the breakdown's temperature.
    pub weight_lml: f64,
    /// `1 - p(target)` over the valid set at the same temperature, unscaled.
    pub weight_msl: f64,
    pub valid_count: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub tokens: Vec<TokenLoss>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTotals {
    pub lml: f64,
    pub l1: f64,
    pub l2: f64,
    pub msl: f64,
    pub weight_lml: f64,
    pub weight_msl: f64,
    pub valid_count: f64,
}

impl LossBreakdown {
    pub fn extend(&mut self, other: LossBreakdown) {
        self.tokens.extend(other.tokens);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sums over tokens, in order.
    pub fn sums(&self) -> LossTotals {
        let mut s = LossTotals::default();
        for t in &self.tokens {
            s.lml += t.lml;
            s.l1 += t.l1;
            s.l2 += t.l2;
            s.msl += t.msl;
            s.weight_lml += t.weight_lml;
            s.weight_msl += t.weight_msl;
            s.valid_count += t.valid_count as f64;
        }
        s
    }

    /// Means over token instances; all zero when empty.
    pub fn means(&self) -> LossTotals {
        let n = self.tokens.len();
        if n == 0 {
            return LossTotals::default();
        }
        let s = self.sums();
        let k = 1.0 / n as f64;
        LossTotals {
            lml: s.lml * k,
            l1: s.l1 * k,
            l2: s.l2 * k,
            msl: s.msl * k,
            weight_lml: s.weight_lml * k,
            weight_msl: s.weight_msl * k,
            valid_count: s.valid_count * k,
        }
    }
}

/// Full per-token breakdown of one response.
pub fn breakdown(
    rows: &[Vec<f64>],
    target: &[TokenId],
    mask: &ValidMask,
    tau: f64,
    scale: NegativeScale,
) -> Result<LossBreakdown, LossError> {
    check_rows(rows, target.len())?;
    check_mask(mask, target.len())?;
    let mut tokens = Vec::with_capacity(rows.len());
    for (t, (f, &y)) in rows.iter().zip(target).enumerate() {
        tokens.push(token_breakdown(f, mask.valid(t), y, tau, scale)?);
    }
    Ok(LossBreakdown { tokens })
}

pub fn token_breakdown(
    f: &[f64],
    valid: &[TokenId],
    y: TokenId,
    tau: f64,
    scale: NegativeScale,
) -> Result<TokenLoss, LossError> {
    let (l1, l2) = decompose_token(f, valid, y)?;
    let alpha = scale.alpha(f.len(), valid.len());
    Ok(TokenLoss {
        lml: lml_token(f, y)?,
        l1,
        l2,
        msl: msl_token(f, valid, y, tau, alpha)?,
        weight_lml: token_weight(f, y, Support::Full, tau)?,
        weight_msl: token_weight(f, y, Support::Valid(valid), tau)?,
        valid_count: valid.len(),
        tau,
    })
}

fn check_rows(rows: &[Vec<f64>], n: usize) -> Result<(), LossError> {
    if rows.len() != n {
        return Err(LossError::Shape(format!("{} logits rows for {n} target tokens", rows.len())));
    }
    Ok(())
}

fn check_mask(mask: &ValidMask, n: usize) -> Result<(), LossError> {
    if mask.len() != n {
        return Err(LossError::Shape(format!("mask has {} positions for {n} target tokens", mask.len())));
    }
    Ok(())
}
