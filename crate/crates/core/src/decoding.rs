//! Joint CTC/attention beam search with contextual biasing.
//!
//! Each live hypothesis keeps the CTC prefix forward variables computed on
//! unboosted frame posteriors. When bias attention picks a phrase at a step,
//! the attention logits and the attention-weighted CTC logits of that
//! phrase's pieces are raised before candidates are scored and pruned; the
//! boosted CTC rows only feed the current expansion.

use std::cmp::Ordering;

use crate::bias_corpus::BiasList;
use crate::error::{Error, Result};
use crate::model::{phrase_pieces, BiasEmbeddings, CbaModel, EncoderOutput};
use crate::parallel::{map_ordered, Execution};
use crate::synth_data::FeatureSequence;
use crate::tensor::{log_add_exp, log_softmax_in_place, log_softmax_rows, Matrix};
use crate::tokenizer::{BpeModel, BLANK_ID, EOS_ID, SOS_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub lambda_ctc: f64,
    pub bias_score: f64,
    /// Output length cap as a multiple of the encoder length.
    pub max_len_ratio: f64,
    /// Candidates per hypothesis, as a multiple of the beam size.
    pub pre_beam_ratio: f64,
    /// When false the bias branch is never evaluated.
    pub biasing: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            lambda_ctc: 0.3,
            bias_score: 5.0,
            max_len_ratio: 1.0,
            pre_beam_ratio: 1.5,
            biasing: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(self.bias_score >= 0.0) || !self.bias_score.is_finite() {
            return Err(Error::Config(format!("bias_score {} must be finite and >= 0", self.bias_score)));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!("lambda_ctc {} outside [0,1]", self.lambda_ctc)));
        }
        if !(self.max_len_ratio > 0.0) || !(self.pre_beam_ratio >= 1.0) {
            return Err(Error::Config("max_len_ratio must be > 0 and pre_beam_ratio >= 1".into()));
        }
        Ok(())
    }
}

/// CTC forward variables of a prefix: log-probability of having emitted the
/// prefix by frame `t`, ending in a label (`nonblank`) or in blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    nonblank: Vec<f64>,
    blank: Vec<f64>,
    last: Option<usize>,
}

impl CtcPrefixState {
    /// State of the empty prefix.
    pub fn initial(log_probs: &Matrix) -> Self {
        let mut blank = Vec::with_capacity(log_probs.rows());
        let mut acc = 0.0;
        for t in 0..log_probs.rows() {
            acc += log_probs[(t, BLANK_ID)];
            blank.push(acc);
        }
        Self {
            nonblank: vec![f64::NEG_INFINITY; log_probs.rows()],
            blank,
            last: None,
        }
    }

    /// Log-probability that the whole utterance collapses to exactly this prefix.
    pub fn final_score(&self) -> f64 {
        match (self.nonblank.last(), self.blank.last()) {
            (Some(&n), Some(&b)) => log_add_exp(n, b),
            _ => f64::NEG_INFINITY,
        }
    }

    fn check(&self, token: usize, log_probs: &Matrix) -> Result<()> {
        if token == BLANK_ID {
            return Err(Error::InvalidArgument("blank cannot extend a prefix".into()));
        }
        if token >= log_probs.cols() {
            return Err(Error::InvalidArgument(format!("token {token} outside {} classes", log_probs.cols())));
        }
        if log_probs.rows() != self.blank.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix state covers {} frames, posteriors have {}",
                self.blank.len(),
                log_probs.rows()
            )));
        }
        Ok(())
    }

    fn phi(&self, t: usize, token: usize) -> f64 {
        if self.last == Some(token) {
            self.blank[t]
        } else {
            log_add_exp(self.blank[t], self.nonblank[t])
        }
    }

    /// Prefix log-probability of `self · token` without building its state.
    pub fn extension_score(&self, token: usize, log_probs: &Matrix) -> Result<f64> {
        self.check(token, log_probs)?;
        let mut psi = if self.last.is_none() {
            log_probs[(0, token)]
        } else {
            f64::NEG_INFINITY
        };
        for t in 1..log_probs.rows() {
            psi = log_add_exp(psi, self.phi(t - 1, token) + log_probs[(t, token)]);
        }
        Ok(psi)
    }

    /// Prefix log-probability and forward variables of `self · token`.
    pub fn extend(&self, token: usize, log_probs: &Matrix) -> Result<(f64, CtcPrefixState)> {
        self.check(token, log_probs)?;
        let frames = log_probs.rows();
        let mut nonblank = vec![f64::NEG_INFINITY; frames];
        let mut blank = vec![f64::NEG_INFINITY; frames];
        if self.last.is_none() {
            nonblank[0] = log_probs[(0, token)];
        }
        let mut psi = nonblank[0];
        for t in 1..frames {
            let phi = self.phi(t - 1, token);
            nonblank[t] = log_add_exp(nonblank[t - 1], phi) + log_probs[(t, token)];
            blank[t] = log_add_exp(blank[t - 1], nonblank[t - 1]) + log_probs[(t, BLANK_ID)];
            psi = log_add_exp(psi, phi + log_probs[(t, token)]);
        }
        Ok((
            psi,
            CtcPrefixState {
                nonblank,
                blank,
                last: Some(token),
            },
        ))
    }
}

/// Convenience form of [`CtcPrefixState::extend`].
pub fn ctc_prefix_score(state: &CtcPrefixState, token: usize, log_probs: &Matrix) -> Result<(f64, CtcPrefixState)> {
    state.extend(token, log_probs)
}

/// Index of the most probable phrase, or `None` when the no-bias slot wins.
/// Ties go to the lowest index.
pub fn select_bias_phrase(probs: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    (best != 0).then_some(best)
}

/// Adds `bias_score` to the logit of every distinct piece in `pieces`.
pub fn boost_attention_logits(logits: &mut [f64], pieces: &[usize], bias_score: f64) {
    if bias_score == 0.0 {
        return;
    }
    for &u in &distinct(pieces) {
        logits[u] += bias_score;
    }
}

/// Adds `bias_score * source_attention[t]` to the phrase-piece logits of frame `t`.
pub fn boost_ctc_logits(logits: &mut Matrix, pieces: &[usize], source_attention: &[f64], bias_score: f64) -> Result<()> {
    if source_attention.len() != logits.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} attention weights for {} frames",
            source_attention.len(),
            logits.rows()
        )));
    }
    if bias_score == 0.0 {
        return Ok(());
    }
    let pieces = distinct(pieces);
    for (t, &a) in source_attention.iter().enumerate() {
        let row = logits.row_mut(t);
        for &u in &pieces {
            row[u] += bias_score * a;
        }
    }
    Ok(())
}

fn distinct(pieces: &[usize]) -> Vec<usize> {
    let mut p = pieces.to_vec();
    p.sort_unstable();
    p.dedup();
    p
}

/// A bias list ready for search: phrase embeddings plus each phrase's pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBias {
    pub embeddings: BiasEmbeddings,
    pub pieces: Vec<Vec<usize>>,
}

impl PreparedBias {
    pub fn new(model: &CbaModel, list: &BiasList, bpe: &BpeModel) -> Result<Self> {
        let pieces = phrase_pieces(list, bpe)?;
        let embeddings = model.bias_encode_pieces(&pieces)?;
        Ok(Self { embeddings, pieces })
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    attn_log_score: f64,
    ctc_score: f64,
    ctc_state: CtcPrefixState,
    joint_score: f64,
}

/// One entry of an n-best list; `tokens` exclude sos and eos.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub tokens: Vec<usize>,
    /// Joint score divided by the output length (eos included).
    pub score: f64,
    pub joint_score: f64,
    pub ctc_score: f64,
    pub attn_score: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    attn: f64,
    ctc: f64,
    joint: f64,
}

fn cmp_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    b.joint
        .total_cmp(&a.joint)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Joint beam search over one utterance's features.
pub fn joint_beam_search(
    model: &CbaModel,
    features: &FeatureSequence,
    bias: Option<&PreparedBias>,
    cfg: &DecodeConfig,
) -> Result<Vec<NBestEntry>> {
    cfg.validate()?;
    let encoded = model.encode(features)?;
    search_encoded(model, &encoded, bias, cfg)
}

pub fn search_encoded(
    model: &CbaModel,
    encoded: &EncoderOutput,
    bias: Option<&PreparedBias>,
    cfg: &DecodeConfig,
) -> Result<Vec<NBestEntry>> {
    let ctc_logits = model.ctc_logits(encoded)?;
    let ctc_lp = log_softmax_rows(&ctc_logits);
    let frames = encoded.len();
    let vocab = model.config.vocab_size;
    let max_len = ((cfg.max_len_ratio * frames as f64).ceil() as usize).max(1);
    let pre_beam = ((cfg.pre_beam_ratio * cfg.beam_size as f64).ceil() as usize).min(vocab);
    let lambda = cfg.lambda_ctc;
    let bias = bias.filter(|b| cfg.biasing && cfg.bias_score > 0.0 && !b.is_empty());

    let mut running = vec![Hypothesis {
        tokens: vec![SOS_ID],
        attn_log_score: 0.0,
        ctc_score: 0.0,
        ctc_state: CtcPrefixState::initial(&ctc_lp),
        joint_score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..=max_len {
        let force_end = step == max_len;
        let mut candidates = Vec::new();
        for (pi, hyp) in running.iter().enumerate() {
            let out = model.decoder_step(&hyp.tokens, encoded)?;
            let mut logits = out.logits;
            let mut rows = None;
            if let Some(b) = bias {
                let dist = model.bias_attend(&out.context_vector, &b.embeddings)?;
                if let Some(k) = select_bias_phrase(&dist.probs) {
                    let pieces = &b.pieces[k - 1];
                    boost_attention_logits(&mut logits, pieces, cfg.bias_score);
                    let mut boosted = ctc_logits.clone();
                    boost_ctc_logits(&mut boosted, pieces, &out.source_attention, cfg.bias_score)?;
                    rows = Some(log_softmax_rows(&boosted));
                }
            }
            log_softmax_in_place(&mut logits);

            let tokens: Vec<usize> = if force_end {
                vec![EOS_ID]
            } else {
                let mut ids: Vec<usize> = (0..vocab).filter(|&u| u != BLANK_ID && u != SOS_ID).collect();
                ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                ids.truncate(pre_beam);
                ids
            };
            let lp = rows.as_ref().unwrap_or(&ctc_lp);
            for token in tokens {
                let ctc = if token == EOS_ID {
                    hyp.ctc_state.final_score()
                } else {
                    hyp.ctc_state.extension_score(token, lp)?
                };
                let attn = hyp.attn_log_score + logits[token];
                candidates.push(Candidate {
                    parent: pi,
                    token,
                    attn,
                    ctc,
                    joint: lambda * ctc + (1.0 - lambda) * attn,
                });
            }
        }
        candidates.retain(|c| c.joint.is_finite());
        candidates.sort_by(cmp_candidates);
        candidates.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(candidates.len());
        for c in candidates {
            let parent = &running[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            if c.token == EOS_ID {
                finished.push(Hypothesis {
                    tokens,
                    attn_log_score: c.attn,
                    ctc_score: c.ctc,
                    ctc_state: parent.ctc_state.clone(),
                    joint_score: c.joint,
                });
                continue;
            }
            let (_, state) = parent.ctc_state.extend(c.token, &ctc_lp)?;
            next.push(Hypothesis {
                tokens,
                attn_log_score: c.attn,
                ctc_score: c.ctc,
                ctc_state: state,
                joint_score: c.joint,
            });
        }
        running = next;
        if running.is_empty() {
            break;
        }
    }

    if finished.is_empty() {
        return Err(Error::EmptyOutput(format!(
            "beam collapsed: every hypothesis over {frames} encoder frames scored -inf"
        )));
    }
    let mut entries: Vec<(usize, NBestEntry)> = finished
        .into_iter()
        .enumerate()
        .map(|(age, h)| {
            let len = h.tokens.len() - 1;
            (
                age,
                NBestEntry {
                    tokens: h.tokens[1..len].to_vec(),
                    score: h.joint_score / len as f64,
                    joint_score: h.joint_score,
                    ctc_score: h.ctc_score,
                    attn_score: h.attn_log_score,
                },
            )
        })
        .collect();
    entries.sort_by(|(age_a, a), (age_b, b)| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.tokens.cmp(&b.tokens))
            .then(age_a.cmp(age_b))
    });
    entries.truncate(cfg.beam_size);
    Ok(entries.into_iter().map(|(_, e)| e).collect())
}

/// From-scratch `λ log p_ctc(y) + (1-λ) log p_attn(y·eos)` for a token sequence.
pub fn rescore(model: &CbaModel, features: &FeatureSequence, tokens: &[usize], lambda_ctc: f64) -> Result<f64> {
    let encoded = model.encode(features)?;
    let ctc_lp = log_softmax_rows(&model.ctc_logits(&encoded)?);
    let ctc = crate::losses::ctc_log_likelihood(&ctc_lp, tokens)?;
    let mut prefix = vec![SOS_ID];
    let mut attn = 0.0;
    for &y in tokens.iter().chain(std::iter::once(&EOS_ID)) {
        let mut row = model.decoder_step(&prefix, &encoded)?.logits;
        log_softmax_in_place(&mut row);
        attn += row[y];
        prefix.push(y);
    }
    Ok(lambda_ctc * ctc + (1.0 - lambda_ctc) * attn)
}

/// A decoded utterance with its n-best texts.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedUtterance {
    pub id: String,
    pub nbest: Vec<(String, NBestEntry)>,
}

/// Decodes many utterances independently; output order follows input order.
pub fn decode_utterances(
    model: &CbaModel,
    bpe: &BpeModel,
    items: &[(String, FeatureSequence)],
    bias: Option<&PreparedBias>,
    cfg: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<DecodedUtterance>> {
    cfg.validate()?;
    map_ordered(items, exec, |(id, feats)| {
        let nbest = joint_beam_search(model, feats, bias, cfg)?;
        let nbest = nbest
            .into_iter()
            .map(|e| Ok((bpe.decode(&e.tokens)?, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodedUtterance { id: id.clone(), nbest })
    })
    .into_iter()
    .collect()
}
