//! CTC forward-backward in log space. Label 0 is the blank.

use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, Matrix};

pub const BLANK: usize = 0;

/// Result of a forward-backward pass.
#[derive(Clone, Debug)]
pub struct ForwardBackward {
    /// `log p(targets | frames)`; `-inf` when no alignment fits.
    pub log_likelihood: f64,
    /// `d log p / d log y[t][k]`: the posterior probability that frame `t`
    /// emits label `k`. All zero when the likelihood is `-inf`.
    pub occupancy: Matrix,
}

fn validate(frame_log_probs: &Matrix, targets: &[usize]) -> Result<()> {
    let v = frame_log_probs.cols();
    for &t in targets {
        if t == BLANK || t >= v {
            return Err(Error::InvalidArgument(format!(
                "ctc target id {t} invalid for vocabulary of {v} (blank={BLANK})"
            )));
        }
    }
    Ok(())
}

fn extended(targets: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(BLANK);
    for &t in targets {
        ext.push(t);
        ext.push(BLANK);
    }
    ext
}

fn forward(lp: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, s_len) = (lp.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    if frames == 0 {
        return alpha;
    }
    alpha[0][0] = lp[(0, ext[0])];
    if s_len > 1 {
        alpha[0][1] = lp[(0, ext[1])];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add_exp(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[(t, ext[s])]
            };
        }
    }
    alpha
}

/// `log p(targets | frames)` by the forward recursion alone.
pub fn log_likelihood(frame_log_probs: &Matrix, targets: &[usize]) -> Result<f64> {
    validate(frame_log_probs, targets)?;
    if frame_log_probs.rows() == 0 {
        return Ok(if targets.is_empty() { 0.0 } else { f64::NEG_INFINITY });
    }
    let ext = extended(targets);
    let alpha = forward(frame_log_probs, &ext);
    let last = &alpha[alpha.len() - 1];
    let s = ext.len();
    Ok(if s > 1 {
        log_add_exp(last[s - 1], last[s - 2])
    } else {
        last[0]
    })
}

pub fn forward_backward(frame_log_probs: &Matrix, targets: &[usize]) -> Result<ForwardBackward> {
    validate(frame_log_probs, targets)?;
    let lp = frame_log_probs;
    let (frames, vocab) = lp.shape();
    let mut occupancy = Matrix::zeros(frames, vocab);
    if frames == 0 {
        return Ok(ForwardBackward {
            log_likelihood: if targets.is_empty() { 0.0 } else { f64::NEG_INFINITY },
            occupancy,
        });
    }
    let ext = extended(targets);
    let s_len = ext.len();
    let alpha = forward(lp, &ext);
    let last = &alpha[frames - 1];
    let ll = if s_len > 1 {
        log_add_exp(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if ll == f64::NEG_INFINITY {
        return Ok(ForwardBackward {
            log_likelihood: ll,
            occupancy,
        });
    }

    // beta[t][s]: log-probability of emitting the rest after frame t, given state s at t.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + lp[(t + 1, ext[s])];
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[t + 1][s + 1] + lp[(t + 1, ext[s + 1])]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add_exp(acc, beta[t + 1][s + 2] + lp[(t + 1, ext[s + 2])]);
            }
            beta[t][s] = acc;
        }
    }

    let mut acc_row = vec![f64::NEG_INFINITY; vocab];
    for t in 0..frames {
        acc_row.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = ext[s];
            acc_row[k] = log_add_exp(acc_row[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..vocab {
            if acc_row[k] != f64::NEG_INFINITY {
                occupancy[(t, k)] = (acc_row[k] - ll).exp();
            }
        }
    }
    Ok(ForwardBackward {
        log_likelihood: ll,
        occupancy,
    })
}

/// Collapses a frame labeling: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}
