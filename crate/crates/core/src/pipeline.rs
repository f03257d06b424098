//! File-level steps of an experiment: data generation, tokenizer training,
//! bias-list building, two-stage training, decoding and scoring.
//!
//! A data directory produced by [`datagen`] holds, per split, `<split>.txt`
//! transcripts and `<split>.feats` features, plus the tokenizer, gazetteer,
//! frequency table, and the bias lists used for evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bias_corpus::{BiasList, FrequencyTable, Gazetteer, PhraseOrigin};
use crate::config::RunConfig;
use crate::decoding::{decode_utterances, DecodeConfig, DecodedUtterance, PreparedBias};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, TrainConfig};
use crate::metrics::{evaluate, EvalItem, EvalReport};
use crate::model::CbaModel;
use crate::parallel::Execution;
use crate::synth_data::{
    featurize, gen_corpus, read_features, read_transcripts, write_features, write_transcripts, FeatureSequence,
    PieceTemplates, Utterance,
};
use crate::tokenizer::BpeModel;
use crate::train::{train, BiasSources, Stage, StepLog, TrainState, TrainingExample};

pub const SPLITS: [&str; 4] = ["train", "dev", "general_test", "bias_test"];
pub const TOKENIZER_FILE: &str = "bpe.model";
pub const GAZETTEER_FILE: &str = "gazetteer.tsv";
pub const FREQUENCY_FILE: &str = "frequency.tsv";
pub const BIAS_TEST_LIST: &str = "bias_test.bias";
pub const BIAS_TEST_ASSIGNMENTS: &str = "bias_test.assign";
pub const DISTRACTOR_LIST: &str = "distractors.bias";
const TEMPLATE_STREAM: u64 = 50;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn transcripts_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.txt"))
}

pub fn features_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.feats"))
}

pub fn train_tokenizer(transcripts: &[Utterance], cfg: &RunConfig) -> Result<BpeModel> {
    let texts: Vec<&str> = transcripts.iter().map(|u| u.text.as_str()).collect();
    BpeModel::train(&texts, cfg.synth.bpe_vocab_size, cfg.min_pair_frequency)
}

/// Entities found in `utterances`, in first-occurrence order, and the
/// phrases found in each utterance.
pub fn build_test_bias(utterances: &[Utterance], gazetteer: &Gazetteer) -> (BiasList, Vec<(String, Vec<String>)>) {
    let mut list = BiasList::new();
    let mut assignments = Vec::with_capacity(utterances.len());
    for u in utterances {
        let words = crate::tokenizer::normalize_words(&u.text);
        let mut found = Vec::new();
        for span in gazetteer.annotate(&u.text) {
            let phrase = words[span.words].join(" ");
            list.insert(&phrase, PhraseOrigin::Entity);
            if !found.contains(&phrase) {
                found.push(phrase);
            }
        }
        assignments.push((u.id.clone(), found));
    }
    (list, assignments)
}

/// `utt_id<TAB>phrase|phrase` lines.
pub fn write_assignments(path: &Path, assignments: &[(String, Vec<String>)]) -> Result<()> {
    let text: String = assignments
        .iter()
        .map(|(id, p)| format!("{id}\t{}\n", p.join("|")))
        .collect();
    write(path, &text)
}

pub fn read_assignments(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (id, rest) = l
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `id<TAB>phrases`", n + 1)))?;
            let phrases = rest.split('|').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect();
            Ok((id.to_string(), phrases))
        })
        .collect()
}

/// Writes a complete data directory. An existing non-empty directory is
/// refused unless `force` is set.
pub fn datagen(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    if out.exists() && !force {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty {
            return Err(Error::InvalidArgument(format!(
                "{} already exists; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let corpus = gen_corpus(&cfg.synth, cfg.seed)?;
    let bpe = train_tokenizer(&corpus.train.utterances, cfg)?;
    bpe.save(&out.join(TOKENIZER_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TEMPLATE_STREAM);
    let templates = PieceTemplates::draw(bpe.vocab_size(), cfg.synth.d_feat, &mut rng);
    for (stream, split) in corpus.splits().into_iter().enumerate() {
        write_transcripts(&transcripts_path(out, &split.name), &split.utterances)?;
        let feats = featurize(split, &bpe, &templates, &cfg.synth, cfg.seed, stream as u64)?;
        write_features(&features_path(out, &split.name), &feats)?;
    }
    corpus.gazetteer.save(&out.join(GAZETTEER_FILE))?;
    corpus.frequency.save(&out.join(FREQUENCY_FILE))?;
    let (list, assignments) = build_test_bias(&corpus.bias_test.utterances, &corpus.gazetteer);
    list.save(&out.join(BIAS_TEST_LIST))?;
    write_assignments(&out.join(BIAS_TEST_ASSIGNMENTS), &assignments)?;
    BiasList::from_phrases(&corpus.distractor_phrases).save(&out.join(DISTRACTOR_LIST))?;
    Ok(())
}

/// Transcripts and features of one split, paired by utterance id.
pub fn load_split(data: &Path, split: &str) -> Result<Vec<(Utterance, FeatureSequence)>> {
    let tpath = transcripts_path(data, split);
    let utts = read_transcripts(&tpath)?;
    let feats = read_features(&features_path(data, split))?;
    if utts.len() != feats.len() {
        return Err(Error::format(
            &tpath,
            format!("{} transcripts but {} feature sequences", utts.len(), feats.len()),
        ));
    }
    utts.into_iter()
        .zip(feats)
        .map(|(u, (id, f))| {
            if u.id != id {
                Err(Error::format(&tpath, format!("transcript `{}` paired with features `{id}`", u.id)))
            } else {
                Ok((u, f))
            }
        })
        .collect()
}

/// Fresh model of the configured shape with parameters from `checkpoint`.
/// Bias parameters may be absent (baseline checkpoints).
pub fn load_model(cfg: &RunConfig, bpe: &BpeModel, checkpoint: &Path) -> Result<CbaModel> {
    let mut model = CbaModel::new(cfg.model_config(bpe.vocab_size()), cfg.seed)?;
    model.params.load(checkpoint, CbaModel::is_bias_param)?;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub optimizer_state: PathBuf,
    pub log: PathBuf,
    pub first_loss: Option<LossBreakdown>,
    pub last_loss: Option<LossBreakdown>,
}

pub fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Baseline => "baseline",
        Stage::Cba => "cba",
    }
}

/// `step<TAB>l_all<TAB>l_mtl<TAB>l_bias` with six decimals.
pub fn format_log_line(s: &StepLog) -> String {
    format!("{}\t{:.6}\t{:.6}\t{:.6}\n", s.step, s.loss.l_all, s.loss.l_mtl, s.loss.l_bias)
}

/// Trains one stage from the data directory into `out`.
///
/// Outputs `<stage>.ckpt`, `<stage>.opt` (optimizer state) and `<stage>.log`,
/// all rewritten after every epoch. With `resume`, an existing optimizer
/// state in `out` is picked up and training continues from its epoch.
pub fn train_stage(
    cfg: &RunConfig,
    data: &Path,
    stage: Stage,
    init: Option<&Path>,
    out: &Path,
    resume: bool,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    if stage == Stage::Cba && init.is_none() && !resume {
        return Err(Error::InvalidArgument("stage cba needs --init <baseline checkpoint>".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = stage_name(stage);
    let outputs = TrainOutputs {
        checkpoint: out.join(format!("{name}.ckpt")),
        optimizer_state: out.join(format!("{name}.opt")),
        log: out.join(format!("{name}.log")),
        first_loss: None,
        last_loss: None,
    };
    let bpe = BpeModel::load(&data.join(TOKENIZER_FILE))?;
    let mut model = CbaModel::new(cfg.model_config(bpe.vocab_size()), cfg.seed)?;
    let bias_missing_ok = |n: &str| stage == Stage::Baseline && CbaModel::is_bias_param(n);

    let resuming = resume && outputs.optimizer_state.exists();
    let mut log_text = String::new();
    let mut state = if resuming {
        model.params.load(&outputs.checkpoint, bias_missing_ok)?;
        let state = TrainState::load(&outputs.optimizer_state, &model.params)?;
        let old = std::fs::read_to_string(&outputs.log).map_err(|e| Error::io(&outputs.log, e))?;
        for line in old.lines().take(state.adam.step as usize) {
            log_text.push_str(line);
            log_text.push('\n');
        }
        state
    } else {
        if let Some(init) = init {
            model.params.load(init, CbaModel::is_bias_param)?;
        }
        TrainState::new(&model.params)
    };

    let tcfg = TrainConfig {
        epochs: match stage {
            Stage::Baseline => cfg.baseline_epochs,
            Stage::Cba => cfg.cba_epochs,
        },
        learning_rate: match stage {
            Stage::Baseline => cfg.train.learning_rate,
            Stage::Cba => cfg.cba_learning_rate,
        },
        beta_bias: match stage {
            Stage::Baseline => 0.0,
            Stage::Cba => cfg.train.beta_bias,
        },
        seed: cfg.seed,
        ..cfg.train.clone()
    };

    let examples: Vec<TrainingExample> = load_split(data, "train")?
        .into_iter()
        .map(|(u, f)| TrainingExample::new(u.id, u.text, f, &bpe))
        .collect();
    let gazetteer = Gazetteer::load(&data.join(GAZETTEER_FILE))?;
    let frequency = FrequencyTable::load(&data.join(FREQUENCY_FILE))?;
    let sources = BiasSources {
        gazetteer: &gazetteer,
        frequency: &frequency,
        sampling: &cfg.bias,
        bpe: &bpe,
    };

    let log = std::cell::RefCell::new(log_text);
    let mut first = None;
    let mut last = None;
    let mut on_step = |s: &StepLog| {
        first.get_or_insert(s.loss);
        last = Some(s.loss);
        log.borrow_mut().push_str(&format_log_line(s));
    };
    let mut on_epoch = |m: &CbaModel, st: &TrainState| -> Result<()> {
        save_stage(m, stage, &outputs.checkpoint)?;
        st.save(&outputs.optimizer_state, &m.params)?;
        write(&outputs.log, &log.borrow())
    };
    train(
        &mut model,
        &examples,
        stage,
        &tcfg,
        Some(sources),
        &mut state,
        Execution::from_jobs(cfg.jobs),
        &mut on_step,
        &mut on_epoch,
    )?;
    if !outputs.checkpoint.exists() || !outputs.log.exists() {
        save_stage(&model, stage, &outputs.checkpoint)?;
        state.save(&outputs.optimizer_state, &model.params)?;
        write(&outputs.log, &log.borrow())?;
    }
    Ok(TrainOutputs {
        first_loss: first,
        last_loss: last,
        ..outputs
    })
}

fn save_stage(model: &CbaModel, stage: Stage, path: &Path) -> Result<()> {
    match stage {
        Stage::Baseline => model.params.save_filtered(path, |n| !CbaModel::is_bias_param(n)),
        Stage::Cba => model.params.save(path),
    }
}

/// Decodes `items` and renders `utt_id<TAB>text<TAB>score` lines; with
/// `nbest`, every beam entry is written with its rank appended.
pub fn decode_to_text(
    model: &CbaModel,
    bpe: &BpeModel,
    items: &[(String, FeatureSequence)],
    bias: Option<&BiasList>,
    cfg: &DecodeConfig,
    nbest: bool,
    exec: Execution,
) -> Result<(String, Vec<DecodedUtterance>)> {
    let prepared = bias.map(|l| PreparedBias::new(model, l, bpe)).transpose()?;
    let decoded = decode_utterances(model, bpe, items, prepared.as_ref(), cfg, exec)?;
    let mut out = String::new();
    for d in &decoded {
        for (rank, (text, e)) in d.nbest.iter().enumerate() {
            if nbest {
                let _ = writeln!(out, "{}\t{text}\t{:.6}\t{}", d.id, e.score, rank + 1);
            } else {
                let _ = writeln!(out, "{}\t{text}\t{:.6}", d.id, e.score);
                break;
            }
        }
    }
    Ok((out, decoded))
}

/// First hypothesis per utterance id from a decoding output file.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::format(path, format!("line {}: expected id, text and score", n + 1)));
        }
        if out.last().map(|(id, _)| id.as_str()) != Some(cols[0]) {
            out.push((cols[0].to_string(), cols[1].to_string()));
        }
    }
    Ok(out)
}

fn pair_items<'a>(
    references: &'a [Utterance],
    hypotheses: &'a [(String, String)],
    assignments: Option<&'a [(String, Vec<String>)]>,
) -> Result<Vec<(&'a str, EvalItem<'a>)>> {
    let hyp: std::collections::HashMap<&str, &str> =
        hypotheses.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let assigned: std::collections::HashMap<&str, &Vec<String>> = assignments
        .unwrap_or(&[])
        .iter()
        .map(|(i, p)| (i.as_str(), p))
        .collect();
    references
        .iter()
        .map(|r| {
            let h = hyp
                .get(r.id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("no hypothesis for `{}`", r.id)))?;
            let phrases = assigned
                .get(r.id.as_str())
                .map(|p| p.iter().map(String::as_str).collect())
                .unwrap_or_default();
            Ok((
                r.id.as_str(),
                EvalItem {
                    reference: &r.text,
                    hypothesis: h,
                    phrases,
                },
            ))
        })
        .collect()
}

/// Scores hypotheses against references, matched by utterance id.
pub fn evaluate_texts(
    references: &[Utterance],
    hypotheses: &[(String, String)],
    assignments: Option<&[(String, Vec<String>)]>,
) -> Result<EvalReport> {
    let items: Vec<EvalItem> = pair_items(references, hypotheses, assignments)?
        .into_iter()
        .map(|(_, it)| it)
        .collect();
    evaluate(&items)
}

/// `utt_id S I D ref_words phrase_hits phrase_total`, tab separated, with a header.
pub fn per_utterance_table(
    references: &[Utterance],
    hypotheses: &[(String, String)],
    assignments: Option<&[(String, Vec<String>)]>,
) -> Result<String> {
    let mut out = String::from("utt_id\tsub\tins\tdel\tref_words\tphrase_hits\tphrase_total\n");
    for (id, it) in pair_items(references, hypotheses, assignments)? {
        let c = crate::metrics::wer(it.reference, it.hypothesis)?;
        let (hits, total) = crate::metrics::phrase_hits(it.reference, it.hypothesis, &it.phrases);
        let _ = writeln!(
            out,
            "{id}\t{}\t{}\t{}\t{}\t{hits}\t{total}",
            c.substitutions, c.insertions, c.deletions, c.ref_words
        );
    }
    Ok(out)
}
