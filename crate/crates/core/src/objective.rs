//! Composite training objective.
//!
//! Four batch-level losses (squared error, correlation, pairwise ranking,
//! dispersion matching) are each divided by an exponential moving average of
//! their own magnitude before weighting. The averages are treated as
//! constants when differentiating, so the gradient of the total is
//! `Σ λ_k / (μ_k + ε) · ∇L_k`.

use std::ops::{Index, IndexMut};

use crate::error::{IqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Mse,
    Corr,
    Rank,
    Var,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Mse, LossTerm::Corr, LossTerm::Rank, LossTerm::Var];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Mse => "mse",
            LossTerm::Corr => "corr",
            LossTerm::Rank => "rank",
            LossTerm::Var => "var",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerTerm<T>(pub [T; 4]);

impl<T> Index<LossTerm> for PerTerm<T> {
    type Output = T;
    fn index(&self, t: LossTerm) -> &T {
        &self.0[t.index()]
    }
}

impl<T> IndexMut<LossTerm> for PerTerm<T> {
    fn index_mut(&mut self, t: LossTerm) -> &mut T {
        &mut self.0[t.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    /// Coefficients in `[mse, corr, rank, var]` order.
    pub lambda: PerTerm<f64>,
    pub beta: f64,
    pub epsilon: f64,
    pub bias_correction: bool,
    pub rank_margin: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: PerTerm([0.0, 0.8, 0.2, 0.0]),
            beta: 0.99,
            epsilon: 1e-8,
            bias_correction: false,
            rank_margin: 0.05,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.0.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(IqaError::InvalidConfig("loss coefficients must be finite and >= 0".into()));
        }
        if !self.lambda.0.iter().any(|&l| l > 0.0) {
            return Err(IqaError::InvalidConfig("at least one loss coefficient must be > 0".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(IqaError::InvalidConfig(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(IqaError::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.rank_margin >= 0.0) {
            return Err(IqaError::InvalidConfig("rank_margin must be >= 0".into()));
        }
        Ok(())
    }

    pub fn is_active(&self, term: LossTerm) -> bool {
        self.lambda[term] > 0.0
    }
}

/// A loss value together with its gradient with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_batch(pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(IqaError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(IqaError::EmptyBatch);
    }
    if pred.len() < min {
        return Err(IqaError::CorrelationNeedsTwo);
    }
    Ok(())
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| v - m).collect(), m)
}

/// Mean squared error.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check_batch(pred, target, 1)?;
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok(LossValue { value, grad })
}

/// `1 - PLCC(pred, target)`. A constant prediction scores 1 with zero
/// gradient.
pub fn loss_corr(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check_batch(pred, target, 2)?;
    let (pc, _) = centered(pred);
    let (tc, _) = centered(target);
    let sp: f64 = pc.iter().map(|v| v * v).sum();
    let st: f64 = tc.iter().map(|v| v * v).sum();
    if st == 0.0 {
        return Err(IqaError::ZeroVariance);
    }
    if sp == 0.0 {
        return Ok(LossValue {
            value: 1.0,
            grad: vec![0.0; pred.len()],
        });
    }
    let num: f64 = pc.iter().zip(&tc).map(|(p, t)| p * t).sum();
    let denom = sp.sqrt() * st.sqrt();
    let r = num / denom;
    let grad = pc
        .iter()
        .zip(&tc)
        .map(|(p, t)| -(t / denom - r * p / sp))
        .collect();
    Ok(LossValue { value: 1.0 - r, grad })
}

/// Mean pairwise hinge `max(0, margin - (p_i - p_j))` over pairs with
/// `y_i > y_j`. Zero when no pair has distinct targets.
pub fn loss_rank(pred: &[f64], target: &[f64], margin: f64) -> Result<LossValue> {
    check_batch(pred, target, 2)?;
    let n = pred.len();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if target[i] > target[j] {
                pairs += 1;
                let slack = margin - (pred[i] - pred[j]);
                if slack > 0.0 {
                    total += slack;
                    grad[i] -= 1.0;
                    grad[j] += 1.0;
                }
            }
        }
    }
    if pairs == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let p = pairs as f64;
    grad.iter_mut().for_each(|g| *g /= p);
    Ok(LossValue { value: total / p, grad })
}

/// `(std(pred) - std(target))^2` with population standard deviations.
pub fn loss_var(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check_batch(pred, target, 2)?;
    let n = pred.len() as f64;
    let (pc, _) = centered(pred);
    let (tc, _) = centered(target);
    let sd_p = (pc.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let sd_t = (tc.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let diff = sd_p - sd_t;
    let grad = if sd_p > 0.0 {
        pc.iter().map(|p| 2.0 * diff * p / (n * sd_p)).collect()
    } else {
        vec![0.0; pred.len()]
    };
    Ok(LossValue {
        value: diff * diff,
        grad,
    })
}

/// All four terms evaluated on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEvaluation {
    pub raw: PerTerm<f64>,
    pub grads: PerTerm<Vec<f64>>,
}

pub fn evaluate_terms(pred: &[f64], target: &[f64], config: &ObjectiveConfig) -> Result<TermEvaluation> {
    let mse = loss_mse(pred, target)?;
    let corr = loss_corr(pred, target)?;
    let rank = loss_rank(pred, target, config.rank_margin)?;
    let var = loss_var(pred, target)?;
    Ok(TermEvaluation {
        raw: PerTerm([mse.value, corr.value, rank.value, var.value]),
        grads: PerTerm([mse.grad, corr.grad, rank.grad, var.grad]),
    })
}

/// Running magnitude estimate for each loss term.
///
/// Without bias correction the first observation of a term seeds its
/// average directly. With bias correction the average starts at zero and is
/// read back as `μ / (1 - β^t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EmaState {
    pub mu: PerTerm<f64>,
    pub initialized: PerTerm<bool>,
    pub step: u64,
}

impl EmaState {
    pub fn is_initialized(&self) -> bool {
        self.initialized.0.iter().all(|&b| b)
    }

    /// Folds one step's raw loss values into the averages.
    pub fn update(&mut self, raw: &PerTerm<f64>, config: &ObjectiveConfig) {
        let beta = config.beta;
        for term in LossTerm::ALL {
            let value = raw[term];
            if !self.initialized[term] && !config.bias_correction {
                self.mu[term] = value;
            } else {
                self.mu[term] = beta * self.mu[term] + (1.0 - beta) * value;
            }
            self.initialized[term] = true;
        }
        self.step += 1;
    }

    /// Scale estimate used for normalization, if the term has been observed.
    pub fn scale(&self, term: LossTerm, config: &ObjectiveConfig) -> Option<f64> {
        if !self.initialized[term] {
            return None;
        }
        let mu = self.mu[term];
        if config.bias_correction {
            Some(mu / (1.0 - config.beta.powi(self.step.min(i32::MAX as u64) as i32)))
        } else {
            Some(mu)
        }
    }
}

/// One step's objective: raw terms, their scales, normalized contributions,
/// the total, and `∂total/∂pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub raw: PerTerm<f64>,
    pub scale: PerTerm<f64>,
    pub contribution: PerTerm<f64>,
    pub total: f64,
    pub d_pred: Vec<f64>,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,raw_mse,raw_corr,raw_rank,raw_var,mu_mse,mu_corr,mu_rank,mu_var,total";

    pub fn to_csv_line(&self, step: u64) -> String {
        let mut fields = vec![step.to_string()];
        fields.extend(self.raw.0.iter().map(|v| format!("{v:.12e}")));
        fields.extend(self.scale.0.iter().map(|v| format!("{v:.12e}")));
        fields.push(format!("{:.12e}", self.total));
        fields.join(",")
    }
}

/// EMA-normalized total `Σ λ_k L_k / (μ_k + ε)` with the scales held fixed.
pub fn normalized_total(
    terms: &TermEvaluation,
    state: &EmaState,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let n = terms.grads[LossTerm::Mse].len();
    let mut scale = PerTerm([0.0; 4]);
    let mut contribution = PerTerm([0.0; 4]);
    let mut d_pred = vec![0.0; n];
    let mut total = 0.0;
    for term in LossTerm::ALL {
        let s = state.scale(term, config);
        if let Some(s) = s {
            scale[term] = s;
        }
        if !config.is_active(term) {
            continue;
        }
        let s = s.ok_or(IqaError::UninitializedTerm(term.name()))?;
        let weight = config.lambda[term] / (s + config.epsilon);
        contribution[term] = weight * terms.raw[term];
        total += contribution[term];
        for (d, g) in d_pred.iter_mut().zip(&terms.grads[term]) {
            *d += weight * g;
        }
    }
    if !total.is_finite() {
        return Err(IqaError::NumericalBlowUp {
            location: "objective total".into(),
        });
    }
    Ok(LossBreakdown {
        raw: terms.raw,
        scale,
        contribution,
        total,
        d_pred,
    })
}
