//! Mini-batch training with Adam for the baseline and bias-aware stages.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::bias_corpus::{build_batch_bias_list, make_bias_labels, BiasSamplingConfig, FrequencyTable, Gazetteer};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, TrainConfig};
use crate::model::{phrase_pieces, CbaModel};
use crate::parallel::{map_ordered, Execution};
use crate::params::{read_checkpoint, write_checkpoint, Gradients, ParamStore};
use crate::synth_data::FeatureSequence;
use crate::tensor::Matrix;
use crate::tokenizer::{BpeModel, EOS_ID, SOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Multi-task CTC/attention training without the bias branch.
    Baseline,
    /// Adds the bias-attention loss on per-batch bias lists.
    Cba,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "cba" => Ok(Stage::Cba),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}` (baseline|cba)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub id: String,
    pub text: String,
    pub features: FeatureSequence,
    /// Word-piece ids of `text`, without sos/eos.
    pub targets: Vec<usize>,
}

impl TrainingExample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, features: FeatureSequence, bpe: &BpeModel) -> Self {
        let text = text.into();
        let targets = bpe.encode(&text).ids;
        Self {
            id: id.into(),
            text,
            features,
            targets,
        }
    }
}

/// Bias phrases (as piece ids) for one utterance and one label per
/// decoder output step, eos included.
#[derive(Clone, Copy, Debug)]
pub struct UtteranceBias<'a> {
    pub phrases: &'a [Vec<usize>],
    pub labels: &'a [usize],
}

/// Side tables needed to draw per-batch bias lists.
#[derive(Clone, Copy, Debug)]
pub struct BiasSources<'a> {
    pub gazetteer: &'a Gazetteer,
    pub frequency: &'a FrequencyTable,
    pub sampling: &'a BiasSamplingConfig,
    pub bpe: &'a BpeModel,
}

/// Builds `L_all` for one utterance. A CTC term with no feasible alignment
/// is dropped from the objective and reported as zero.
pub fn utterance_loss(
    model: &CbaModel,
    g: &mut Graph<'_>,
    features: &FeatureSequence,
    targets: &[usize],
    bias: Option<UtteranceBias<'_>>,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let enc = model.encode_graph(g, features)?;
    let ctc_logits = model.ctc_logits_graph(g, enc)?;
    let ctc_lp = g.log_softmax_rows(ctc_logits);
    let ctc = g.ctc_log_likelihood(ctc_lp, targets)?;
    let ctc_value = g.value(ctc).item();
    let ctc_ok = ctc_value.is_finite();

    let mut inputs = Vec::with_capacity(targets.len() + 1);
    inputs.push(SOS_ID);
    inputs.extend_from_slice(targets);
    let dec = model.decode_graph(g, enc, &inputs)?;
    let attn_lp = g.log_softmax_rows(dec.logits);
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .copied()
        .chain(std::iter::once(EOS_ID))
        .enumerate()
        .collect();
    let attn = g.pick_sum(attn_lp, &picks)?;
    let attn_value = g.value(attn).item();

    let lambda = cfg.lambda_ctc;
    let mut loss = g.scale(attn, -(1.0 - lambda));
    if ctc_ok && lambda > 0.0 {
        let c = g.scale(ctc, -lambda);
        loss = g.add(loss, c)?;
    }
    let mut bias_value = 0.0;
    if let Some(b) = bias {
        if b.labels.len() != picks.len() {
            return Err(Error::Contract(format!(
                "{} bias labels for {} decoder steps",
                b.labels.len(),
                picks.len()
            )));
        }
        let hz = model.bias_encode_graph(g, b.phrases)?;
        let scores = model.bias_scores_graph(g, dec.context, hz)?;
        let lsm = g.log_softmax_rows(scores);
        let slots = b.phrases.len() + 1;
        if let Some(z) = b.labels.iter().find(|&&z| z >= slots) {
            return Err(Error::Contract(format!("bias label {z} outside {slots} slots")));
        }
        let bias_picks: Vec<(usize, usize)> = b.labels.iter().copied().enumerate().collect();
        let ll = g.pick_sum(lsm, &bias_picks)?;
        bias_value = -g.value(ll).item();
        if cfg.beta_bias > 0.0 {
            let term = g.scale(ll, -cfg.beta_bias);
            loss = g.add(loss, term)?;
        }
    }
    let mut breakdown = crate::losses::total_loss(if ctc_ok { ctc_value } else { 0.0 }, attn_value, bias_value, cfg);
    breakdown.l_all = g.value(loss).item();
    Ok((loss, breakdown))
}

pub fn utterance_gradients(
    model: &CbaModel,
    features: &FeatureSequence,
    targets: &[usize],
    bias: Option<UtteranceBias<'_>>,
    cfg: &TrainConfig,
) -> Result<(Gradients, LossBreakdown)> {
    let mut g = Graph::new(&model.params);
    let (loss, breakdown) = utterance_loss(model, &mut g, features, targets, bias, cfg)?;
    Ok((g.backward(loss)?, breakdown))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient keep their moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = &mut store.get_mut(id).value;
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Optimizer moments plus progress, enough to resume at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            adam: Adam::new(store),
            epochs_done: 0,
        }
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let meta = Matrix::row_vector(&[self.adam.step as f64, self.epochs_done as f64]);
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        let mut records: Vec<(String, &Matrix)> = vec![("meta".into(), &meta)];
        for (i, name) in names.iter().enumerate() {
            records.push((format!("m.{name}"), &self.adam.m[i]));
            records.push((format!("v.{name}"), &self.adam.v[i]));
        }
        let refs: Vec<(&str, &Matrix)> = records.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        write_checkpoint(path, &refs)
    }

    pub fn load(path: &Path, store: &ParamStore) -> Result<Self> {
        let records: std::collections::HashMap<String, Matrix> = read_checkpoint(path)?.into_iter().collect();
        let meta = records
            .get("meta")
            .ok_or_else(|| Error::CheckpointMismatch("optimizer state has no meta record".into()))?;
        let mut state = Self::new(store);
        state.adam.step = meta[(0, 0)] as u64;
        state.epochs_done = meta[(0, 1)] as usize;
        for (id, p) in store.iter() {
            for (prefix, slot) in [("m", &mut state.adam.m), ("v", &mut state.adam.v)] {
                let key = format!("{prefix}.{}", p.name);
                let value = records
                    .get(&key)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("optimizer state lacks `{key}`")))?;
                if value.shape() != p.value.shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "{key}: state {:?} vs model {:?}",
                        value.shape(),
                        p.value.shape()
                    )));
                }
                slot[id.index()] = value.clone();
            }
        }
        Ok(state)
    }
}

/// One logged optimizer step (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Bias inputs for every member of a batch.
struct BatchBiasInputs {
    phrases: Vec<Vec<usize>>,
    labels: Vec<Vec<usize>>,
}

fn batch_bias_inputs(batch: &[&TrainingExample], sources: &BiasSources, rng: &mut ChaCha8Rng) -> Result<BatchBiasInputs> {
    let texts: Vec<&str> = batch.iter().map(|e| e.text.as_str()).collect();
    let bb = build_batch_bias_list(&texts, sources.gazetteer, sources.sampling, sources.frequency, rng)?;
    let phrases = phrase_pieces(&bb.list, sources.bpe)?;
    let mut labels = Vec::with_capacity(batch.len());
    for (ex, assigned) in batch.iter().zip(&bb.assignments) {
        let seq = sources.bpe.encode(&ex.text);
        if seq.ids != ex.targets {
            return Err(Error::Contract(format!("targets of `{}` do not match its text", ex.id)));
        }
        let mut l = make_bias_labels(&seq, assigned, &bb.list)?.0;
        l.push(0);
        labels.push(l);
    }
    Ok(BatchBiasInputs { phrases, labels })
}

/// Runs epochs `state.epochs_done..cfg.epochs`. `on_step` sees each batch's
/// mean losses; `on_epoch` runs after every epoch (for checkpoints).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut CbaModel,
    examples: &[TrainingExample],
    stage: Stage,
    cfg: &TrainConfig,
    bias: Option<BiasSources<'_>>,
    state: &mut TrainState,
    exec: Execution,
    on_step: &mut dyn FnMut(&StepLog),
    on_epoch: &mut dyn FnMut(&CbaModel, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if stage == Stage::Cba && bias.is_none() {
        return Err(Error::InvalidArgument("bias stage needs gazetteer, frequency table and tokenizer".into()));
    }
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, 2 * epoch as u64));
        let mut bias_rng = epoch_rng(cfg.seed, 2 * epoch as u64 + 1);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let bias_inputs = match (stage, &bias) {
                (Stage::Cba, Some(src)) => Some(batch_bias_inputs(&batch, src, &mut bias_rng)?),
                _ => None,
            };
            let jobs: Vec<usize> = (0..batch.len()).collect();
            let shared: &CbaModel = model;
            let results = map_ordered(&jobs, exec, |&k| {
                let b = bias_inputs.as_ref().map(|bi| UtteranceBias {
                    phrases: &bi.phrases,
                    labels: &bi.labels[k],
                });
                utterance_gradients(shared, &batch[k].features, &batch[k].targets, b, cfg)
            });
            let mut total: Option<Gradients> = None;
            let mut losses = Vec::with_capacity(results.len());
            for r in results {
                let (g, l) = r?;
                losses.push(l);
                match &mut total {
                    Some(t) => t.merge(&g),
                    None => total = Some(g),
                }
            }
            let mut grads = total.expect("non-empty batch");
            if stage == Stage::Cba && cfg.bias_only {
                let params = &model.params;
                grads.retain(|id| CbaModel::is_bias_param(&params.get(id).name));
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_gradients(&mut grads, &model.params, cfg.grad_clip);
            let lr = learning_rate(cfg, state.adam.step + 1);
            state.adam.update(&mut model.params, &grads, lr);
            let mean = LossBreakdown::mean(&losses);
            if !mean.l_all.is_finite() {
                return Err(Error::Contract(format!("non-finite loss at step {}", state.adam.step)));
            }
            on_step(&StepLog {
                epoch,
                step: state.adam.step,
                loss: mean,
            });
        }
        state.epochs_done += 1;
        on_epoch(model, state)?;
    }
    Ok(())
}

fn clip_gradients(grads: &mut Gradients, store: &ParamStore, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = store
        .ids()
        .filter_map(|id| grads.get(id))
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

/// Mean per-utterance losses without updating anything.
pub fn evaluate_loss(
    model: &CbaModel,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<LossBreakdown> {
    let results = map_ordered(examples, exec, |ex| {
        let mut g = Graph::new(&model.params);
        utterance_loss(model, &mut g, &ex.features, &ex.targets, None, cfg).map(|(_, l)| l)
    });
    let losses = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny() -> CbaModel {
        CbaModel::new(
            ModelConfig {
                d_model: 8,
                num_encoder_layers: 1,
                num_decoder_layers: 1,
                num_heads: 2,
                d_ff: 8,
                d_feat: 3,
                vocab_size: 7,
                bias_lstm_hidden: 8,
                subsample: 2,
            },
            11,
        )
        .unwrap()
    }

    fn feats(t: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSequence::new(Matrix::from_vec(t, 3, data).unwrap()).unwrap()
    }

    #[test]
    fn loss_components_match_standalone_losses() {
        let m = tiny();
        let f = feats(10, 1);
        let targets = [4, 5, 6];
        let cfg = TrainConfig::default();
        let mut g = Graph::new(&m.params);
        let (_, l) = utterance_loss(&m, &mut g, &f, &targets, None, &cfg).unwrap();

        let enc = m.encode(&f).unwrap();
        let lp = crate::tensor::log_softmax_rows(&m.ctc_logits(&enc).unwrap());
        let ctc = crate::losses::ctc_log_likelihood(&lp, &targets).unwrap();
        assert!((l.log_p_ctc - ctc).abs() < 1e-9);

        let mut rows = Vec::new();
        let mut prefix = vec![SOS_ID];
        for &y in targets.iter().chain([EOS_ID].iter()) {
            rows.push(m.decoder_step(&prefix, &enc).unwrap().logits);
            prefix.push(y);
        }
        let logits = Matrix::from_rows(&rows).unwrap();
        let attn = crate::losses::attention_log_likelihood(&logits, &[4, 5, 6, EOS_ID]).unwrap();
        assert!((l.log_p_attn - attn).abs() < 1e-9);
        assert!((l.l_all - (-(0.3 * ctc + 0.7 * attn))).abs() < 1e-9);
    }

    #[test]
    fn bias_term_matches_bias_attention() {
        let m = tiny();
        let f = feats(10, 2);
        let targets = [4, 5, 6];
        let phrases = vec![vec![4, 5], vec![6]];
        let labels = [1, 1, 2, 0];
        let cfg = TrainConfig::default();
        let mut g = Graph::new(&m.params);
        let b = UtteranceBias {
            phrases: &phrases,
            labels: &labels,
        };
        let (_, l) = utterance_loss(&m, &mut g, &f, &targets, Some(b), &cfg).unwrap();

        let enc = m.encode(&f).unwrap();
        let emb = m.bias_encode_pieces(&phrases).unwrap();
        let mut prefix = vec![SOS_ID];
        let mut rows = Vec::new();
        for &y in targets.iter().chain([EOS_ID].iter()) {
            let ctx = m.decoder_step(&prefix, &enc).unwrap().context_vector;
            rows.push(m.bias_attend(&ctx, &emb).unwrap().probs);
            prefix.push(y);
        }
        let expected = crate::losses::bias_loss(&Matrix::from_rows(&rows).unwrap(), &labels).unwrap();
        assert!((l.l_bias - expected).abs() < 1e-9);
        assert!((l.l_all - (-l.l_mtl + 0.5 * expected)).abs() < 1e-9);

        let bad = UtteranceBias {
            phrases: &phrases,
            labels: &[1, 1, 3, 0],
        };
        let mut g = Graph::new(&m.params);
        assert!(utterance_loss(&m, &mut g, &f, &targets, Some(bad), &cfg).is_err());
    }

    #[test]
    fn bias_loss_reaches_every_bias_parameter() {
        let m = tiny();
        let phrases = vec![vec![4, 5], vec![6]];
        let labels = [1, 1, 2, 0];
        let b = UtteranceBias {
            phrases: &phrases,
            labels: &labels,
        };
        let (grads, l) = utterance_gradients(&m, &feats(10, 4), &[4, 5, 6], Some(b), &TrainConfig::default()).unwrap();
        assert!(l.l_bias > 0.0);
        for name in ["bias.w_query", "bias.w_key", "bias.lstm.wx", "bias.lstm.wh", "bias.lstm.b", "bias.no_bias", "bias.embedding"] {
            let id = m.params.find(name).unwrap();
            assert!(grads.get(id).is_some_and(|g| g.max_abs() > 0.0), "{name}");
        }

        let (grads, _) = utterance_gradients(&m, &feats(10, 4), &[4, 5, 6], None, &TrainConfig::default()).unwrap();
        let id = m.params.find("bias.w_query").unwrap();
        assert!(grads.get(id).map_or(true, |g| g.max_abs() == 0.0));
    }

    #[test]
    fn unalignable_ctc_term_is_dropped() {
        let m = tiny();
        let f = feats(2, 3);
        let targets = [4, 4, 5];
        let mut g = Graph::new(&m.params);
        let (loss, l) = utterance_loss(&m, &mut g, &f, &targets, None, &TrainConfig::default()).unwrap();
        assert_eq!(l.log_p_ctc, 0.0);
        assert!(g.value(loss).item().is_finite());
        let grads = g.backward(loss).unwrap();
        let ctc_w = m.params.find("ctc.out.w").unwrap();
        assert!(grads.get(ctc_w).map_or(true, |g| g.max_abs() == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(&[1.0, -1.0]));
        let mut adam = Adam::new(&store);
        let mut grads = Gradients::new(1);
        grads.add(id, &Matrix::row_vector(&[0.5, -3.0]));
        adam.update(&mut store, &grads, 0.1);
        let w = store.value(id);
        assert!((w[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((w[(0, 1)] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let m = tiny();
        let mut state = TrainState::new(&m.params);
        state.epochs_done = 3;
        state.adam.step = 42;
        state.adam.m[2].fill(0.25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.bin");
        state.save(&p, &m.params).unwrap();
        assert_eq!(TrainState::load(&p, &m.params).unwrap(), state);
    }

    #[test]
    fn training_reduces_loss_and_resume_is_exact() {
        let examples: Vec<TrainingExample> = (0..6)
            .map(|i| TrainingExample {
                id: format!("u{i}"),
                text: String::new(),
                features: feats(8 + i, 100 + i as u64),
                targets: vec![4 + i % 3, 5],
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 6,
            learning_rate: 1e-2,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let run = |epochs_first: usize| {
            let mut m = tiny();
            let mut state = TrainState::new(&m.params);
            let mut first = None;
            let mut last = None;
            let mut log = |s: &StepLog| {
                first.get_or_insert(s.loss.l_all);
                last = Some(s.loss.l_all);
            };
            let part = TrainConfig {
                epochs: epochs_first,
                ..cfg.clone()
            };
            train(&mut m, &examples, Stage::Baseline, &part, None, &mut state, Execution::Auto, &mut log, &mut |_, _| Ok(())).unwrap();
            let saved = (m.params.clone(), state.clone());
            train(&mut m, &examples, Stage::Baseline, &cfg, None, &mut state, Execution::Auto, &mut log, &mut |_, _| Ok(())).unwrap();
            (m, first.unwrap(), last.unwrap(), saved)
        };
        let (a, first, last, _) = run(6);
        assert!(last < first, "loss {first} -> {last}");
        let (b, ..) = run(2);
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn sequential_and_parallel_training_agree() {
        let examples: Vec<TrainingExample> = (0..4)
            .map(|i| TrainingExample {
                id: format!("u{i}"),
                text: String::new(),
                features: feats(9, 200 + i as u64),
                targets: vec![4, 6],
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..TrainConfig::default()
        };
        let go = |exec| {
            let mut m = tiny();
            let mut st = TrainState::new(&m.params);
            train(&mut m, &examples, Stage::Baseline, &cfg, None, &mut st, exec, &mut |_| {}, &mut |_, _| Ok(())).unwrap();
            m
        };
        let (a, b) = (go(Execution::Auto), go(Execution::Sequential));
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
