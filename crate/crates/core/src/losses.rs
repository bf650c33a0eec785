//! Loss families and their analytic score gradients.
//!
//! The Talos per-example loss compares the positive score against the user's
//! learned Top-K threshold through the activation
//! `sigma_tau(x) = sigmoid(x)^(1/tau)` (temperature outside the sigmoid) and
//! normalizes by the same activation over the sampled negatives:
//!
//! ```text
//! L = -log( sigma_tau(s_pos - beta) / sum_j sigma_tau(s_j - beta) )
//! ```
//!
//! The threshold is a constant here; it receives no gradient. All arithmetic
//! runs in log space: `sigma_tau` terms become `log_sigmoid(x)/tau` and the
//! denominator is a log-sum-exp, which keeps small temperatures finite.
//!
//! Also provided: sampled softmax (SL), BPR, and the three Talos ablations
//! (zero threshold, temperature inside the sigmoid, constant-K denominator).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error("bpr takes exactly one negative per positive, got {0}")]
    BprNegativeCount(usize),
    #[error("non-finite {what} in {family} loss")]
    NonFinite { family: LossFamily, what: &'static str },
    #[error("unknown loss family '{0}'")]
    UnknownFamily(String),
}

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Talos,
    Softmax,
    Bpr,
    TalosWoQuantile,
    TalosWoOutside,
    TalosWoDenominator,
}

impl LossFamily {
    /// Whether training must maintain the threshold table for this family.
    pub fn uses_threshold(self) -> bool {
        matches!(
            self,
            LossFamily::Talos | LossFamily::TalosWoOutside | LossFamily::TalosWoDenominator
        )
    }

    pub const ALL: [LossFamily; 6] = [
        LossFamily::Talos,
        LossFamily::Softmax,
        LossFamily::Bpr,
        LossFamily::TalosWoQuantile,
        LossFamily::TalosWoOutside,
        LossFamily::TalosWoDenominator,
    ];
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossFamily::Talos => "talos",
            LossFamily::Softmax => "softmax",
            LossFamily::Bpr => "bpr",
            LossFamily::TalosWoQuantile => "talos_wo_quantile",
            LossFamily::TalosWoOutside => "talos_wo_outside",
            LossFamily::TalosWoDenominator => "talos_wo_denominator",
        };
        f.write_str(s)
    }
}

impl FromStr for LossFamily {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "talos" => Ok(LossFamily::Talos),
            "softmax" => Ok(LossFamily::Softmax),
            "bpr" => Ok(LossFamily::Bpr),
            "talos_wo_quantile" => Ok(LossFamily::TalosWoQuantile),
            "talos_wo_outside" => Ok(LossFamily::TalosWoOutside),
            "talos_wo_denominator" => Ok(LossFamily::TalosWoDenominator),
            other => Err(LossError::UnknownFamily(other.to_string())),
        }
    }
}

/// Loss configuration shared by training and verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    pub tau: f64,
    pub k: u32,
    pub num_negatives: usize,
    /// The `log(0) := log(epsilon)` convention. Only the bound verification
    /// ever evaluates a log of zero; training never does.
    pub epsilon_log: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            family: LossFamily::Talos,
            tau: 0.1,
            k: 20,
            num_negatives: 1024,
            epsilon_log: 1e-6,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidSpec(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(LossError::InvalidSpec("k must be >= 1".into()));
        }
        if self.num_negatives == 0 {
            return Err(LossError::InvalidSpec("num_negatives must be >= 1".into()));
        }
        if !(self.epsilon_log > 0.0 && self.epsilon_log < 1.0) {
            return Err(LossError::InvalidSpec(format!(
                "epsilon_log must lie in (0, 1), got {}",
                self.epsilon_log
            )));
        }
        Ok(())
    }
}

/// One training example as the loss functions see it. The threshold is a
/// constant input; gradients flow only to scores.
#[derive(Debug, Clone)]
pub struct LossExample<'a> {
    pub user: u32,
    pub positive_item: u32,
    pub positive_score: f64,
    pub negative_scores: &'a [f64],
    pub beta: f64,
    pub positive_count: usize,
}

/// Per-example loss value with gradients for every score in the example.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_positive: f64,
    pub d_negatives: Vec<f64>,
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(x)^(1/tau)` evaluated as `exp(log_sigmoid(x)/tau)`.
pub fn sigma_tau(x: f64, tau: f64) -> f64 {
    (log_sigmoid(x) / tau).exp()
}

/// `log(sum(exp(x)))` over a nonempty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Evaluate the configured loss on one example.
pub fn evaluate(spec: &LossSpec, ex: &LossExample) -> Result<LossGrad, LossError> {
    let out = match spec.family {
        LossFamily::Talos => talos_loss_grad(ex.positive_score, ex.negative_scores, ex.beta, spec.tau),
        LossFamily::TalosWoQuantile => {
            talos_loss_grad(ex.positive_score, ex.negative_scores, 0.0, spec.tau)
        }
        LossFamily::TalosWoOutside => {
            inner_temperature_loss_grad(ex.positive_score, ex.negative_scores, ex.beta, spec.tau)
        }
        LossFamily::TalosWoDenominator => {
            constant_denominator_loss_grad(ex.positive_score, ex.negative_scores.len(), ex.beta, spec.tau, spec.k)
        }
        LossFamily::Softmax => softmax_loss_grad(ex.positive_score, ex.negative_scores, spec.tau),
        LossFamily::Bpr => {
            if ex.negative_scores.len() != 1 {
                return Err(LossError::BprNegativeCount(ex.negative_scores.len()));
            }
            let (loss, d_pos, d_neg) = bpr_loss(ex.positive_score, ex.negative_scores[0]);
            LossGrad {
                loss,
                d_positive: d_pos,
                d_negatives: vec![d_neg],
            }
        }
    };
    if !out.loss.is_finite() {
        return Err(LossError::NonFinite { family: spec.family, what: "loss" });
    }
    if !out.d_positive.is_finite() || out.d_negatives.iter().any(|g| !g.is_finite()) {
        return Err(LossError::NonFinite { family: spec.family, what: "gradient" });
    }
    Ok(out)
}

/// Softmax weights of the Talos denominator:
/// `w_j = sigma_tau(s_j - beta) / sum_v sigma_tau(s_v - beta)`.
pub fn talos_softmax_weights(negative_scores: &[f64], beta: f64, tau: f64) -> Vec<f64> {
    let log_terms: Vec<f64> = negative_scores
        .iter()
        .map(|&s| log_sigmoid(s - beta) / tau)
        .collect();
    let lse = log_sum_exp(&log_terms);
    log_terms.into_iter().map(|t| (t - lse).exp()).collect()
}

fn talos_loss_grad(pos: f64, negs: &[f64], beta: f64, tau: f64) -> LossGrad {
    let log_pos = log_sigmoid(pos - beta) / tau;
    let log_terms: Vec<f64> = negs.iter().map(|&s| log_sigmoid(s - beta) / tau).collect();
    let lse = log_sum_exp(&log_terms);
    let loss = lse - log_pos;
    let d_positive = -sigmoid(beta - pos) / tau;
    let d_negatives = negs
        .iter()
        .zip(&log_terms)
        .map(|(&s, &t)| (t - lse).exp() * sigmoid(beta - s) / tau)
        .collect();
    LossGrad {
        loss,
        d_positive,
        d_negatives,
    }
}

/// Ablation with the temperature inside the sigmoid: `sigmoid(x/tau)`.
fn inner_temperature_loss_grad(pos: f64, negs: &[f64], beta: f64, tau: f64) -> LossGrad {
    let log_pos = log_sigmoid((pos - beta) / tau);
    let log_terms: Vec<f64> = negs.iter().map(|&s| log_sigmoid((s - beta) / tau)).collect();
    let lse = log_sum_exp(&log_terms);
    let loss = lse - log_pos;
    let d_positive = -sigmoid((beta - pos) / tau) / tau;
    let d_negatives = negs
        .iter()
        .zip(&log_terms)
        .map(|(&s, &t)| (t - lse).exp() * sigmoid((beta - s) / tau) / tau)
        .collect();
    LossGrad {
        loss,
        d_positive,
        d_negatives,
    }
}

/// Ablation replacing the sampled denominator with the constant K.
fn constant_denominator_loss_grad(pos: f64, num_negs: usize, beta: f64, tau: f64, k: u32) -> LossGrad {
    let loss = (k as f64).ln() - log_sigmoid(pos - beta) / tau;
    LossGrad {
        loss,
        d_positive: -sigmoid(beta - pos) / tau,
        d_negatives: vec![0.0; num_negs],
    }
}

/// Sampled softmax cross-entropy with the positive included in the
/// denominator.
fn softmax_loss_grad(pos: f64, negs: &[f64], tau: f64) -> LossGrad {
    let mut logits = Vec::with_capacity(negs.len() + 1);
    logits.push(pos / tau);
    logits.extend(negs.iter().map(|&s| s / tau));
    let lse = log_sum_exp(&logits);
    let loss = lse - pos / tau;
    let p_pos = (pos / tau - lse).exp();
    let d_positive = (p_pos - 1.0) / tau;
    let d_negatives = negs.iter().map(|&s| (s / tau - lse).exp() / tau).collect();
    LossGrad {
        loss,
        d_positive,
        d_negatives,
    }
}

/// BPR: `-log sigmoid(s_pos - s_neg)` with its two gradients.
pub fn bpr_loss(positive_score: f64, negative_score: f64) -> (f64, f64, f64) {
    let diff = positive_score - negative_score;
    let loss = -log_sigmoid(diff);
    let d = -sigmoid(-diff);
    (loss, d, -d)
}

/// Sum-inside-log form of the Talos loss over a full candidate set:
/// `-log( sum_{i in P} sigma_tau(s_i - beta) / sum_{j in C} sigma_tau(s_j - beta) )`.
///
/// This is the form the surrogate bound is stated for; the per-example form
/// upper-bounds it by Jensen's inequality.
pub fn talos_full_form(positive_scores: &[f64], candidate_scores: &[f64], beta: f64, tau: f64) -> f64 {
    debug_assert!(!positive_scores.is_empty());
    let log_pos: Vec<f64> = positive_scores
        .iter()
        .map(|&s| log_sigmoid(s - beta) / tau)
        .collect();
    let log_cand: Vec<f64> = candidate_scores
        .iter()
        .map(|&s| log_sigmoid(s - beta) / tau)
        .collect();
    log_sum_exp(&log_cand) - log_sum_exp(&log_pos)
}
