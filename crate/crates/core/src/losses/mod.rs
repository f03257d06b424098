//! Training objectives: CTC and attention log-likelihoods, the multi-task
//! mixture, the bias-attention loss, and the combined objective.

pub mod ctc;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, Matrix};

/// Optimization settings and loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the CTC term in the multi-task log-likelihood.
    pub lambda_ctc: f64,
    /// Weight of the bias-attention loss.
    pub beta_bias: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Linear learning-rate ramp length in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Update only the bias encoder and bias attention in the bias stage.
    pub bias_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ctc: 0.3,
            beta_bias: 0.5,
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 20,
            seed: 1,
            warmup_steps: 100,
            grad_clip: 5.0,
            bias_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0,1]", self.lambda_ctc)));
        }
        if !(0.0..=1.0).contains(&self.beta_bias) {
            return Err(Error::Config(format!("beta_bias {} outside [0,1]", self.beta_bias)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss components for one utterance or a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub log_p_ctc: f64,
    pub log_p_attn: f64,
    pub l_mtl: f64,
    pub l_bias: f64,
    pub l_all: f64,
}

/// `L_mtl = λ log p_ctc + (1-λ) log p_attn` and `L_all = -L_mtl + β L_bias`.
pub fn total_loss(log_p_ctc: f64, log_p_attn: f64, l_bias: f64, cfg: &TrainConfig) -> LossBreakdown {
    let l_mtl = cfg.lambda_ctc * log_p_ctc + (1.0 - cfg.lambda_ctc) * log_p_attn;
    LossBreakdown {
        log_p_ctc,
        log_p_attn,
        l_mtl,
        l_bias,
        l_all: -l_mtl + cfg.beta_bias * l_bias,
    }
}

impl LossBreakdown {
    /// Mean over utterances.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.log_p_ctc += b.log_p_ctc / n;
            m.log_p_attn += b.log_p_attn / n;
            m.l_mtl += b.l_mtl / n;
            m.l_bias += b.l_bias / n;
            m.l_all += b.l_all / n;
        }
        m
    }
}

/// CTC log-likelihood of `targets` given normalized frame log-probabilities.
pub fn ctc_log_likelihood(frame_log_probs: &Matrix, targets: &[usize]) -> Result<f64> {
    ctc::log_likelihood(frame_log_probs, targets)
}

/// Teacher-forced attention log-likelihood: `Σ_t log softmax(logits_t)[gold_t]`.
///
/// `logits` holds one pre-softmax row per decoding step; `targets` ends with eos.
pub fn attention_log_likelihood(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} decoder steps for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut row = vec![0.0; logits.cols()];
    for (t, &y) in targets.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::InvalidArgument(format!("target id {y} out of range")));
        }
        row.copy_from_slice(logits.row(t));
        log_softmax_in_place(&mut row);
        total += row[y];
    }
    Ok(total)
}

/// `L_bias = -Σ_t log α_t[z_t]` over bias-attention distributions (one row per step).
pub fn bias_loss(bias_attention: &Matrix, labels: &[usize]) -> Result<f64> {
    if bias_attention.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bias distributions for {} labels",
            bias_attention.rows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (t, &z) in labels.iter().enumerate() {
        if z >= bias_attention.cols() {
            return Err(Error::InvalidArgument(format!(
                "bias label {z} out of range for {} slots",
                bias_attention.cols()
            )));
        }
        total -= bias_attention[(t, z)].ln();
    }
    Ok(total)
}
