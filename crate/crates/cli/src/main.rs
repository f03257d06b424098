use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use cba_core::bias_corpus::{BiasList, Gazetteer};
use cba_core::config::{RunConfig, SEED_ENV};
use cba_core::parallel::{configure_threads, Execution};
use cba_core::pipeline;
use cba_core::synth_data::{read_features, read_transcripts};
use cba_core::tokenizer::BpeModel;
use cba_core::train::Stage;
use cba_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cba", version, about = "Contextual bias attention for hybrid CTC/attention recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, tokenizer, features and evaluation bias lists.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a word-piece tokenizer on a transcript file.
    Tokenizer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a bias list from gazetteer matches in transcripts, or take the
    /// first N phrases of a phrase file.
    BiasBuild {
        #[arg(long, conflicts_with = "phrases")]
        transcripts: Option<PathBuf>,
        #[arg(long, requires = "transcripts")]
        gazetteer: Option<PathBuf>,
        /// Phrase file (one per line) to draw a list from.
        #[arg(long, requires = "count")]
        phrases: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write `utt_id<TAB>phrase|phrase` assignments (transcript mode).
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Train one stage; `cba` needs `--init` with a baseline checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["baseline", "cba"])]
        stage: String,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the optimizer state left in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a feature file.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        bias_list: Option<PathBuf>,
        #[arg(long)]
        bias_score: Option<f64>,
        /// Write every beam entry with its rank.
        #[arg(long)]
        nbest: bool,
        /// Worker threads; 1 forces the sequential path.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references.
    Eval {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        bias_assignments: Option<PathBuf>,
        /// Write per-utterance counts as TSV.
        #[arg(long)]
        per_utterance: Option<PathBuf>,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    configure_threads(cfg.jobs);
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { config, out, force } => {
            let cfg = load_config(&config)?;
            pipeline::datagen(&cfg, &out, force)?;
            info!("wrote corpus to {}", out.display());
        }
        Command::Tokenizer {
            config,
            transcripts,
            out,
        } => {
            let cfg = load_config(&config)?;
            let utts = read_transcripts(&transcripts)?;
            let bpe = pipeline::train_tokenizer(&utts, &cfg)?;
            bpe.save(&out)?;
            info!("tokenizer with {} pieces", bpe.vocab_size());
        }
        Command::BiasBuild {
            transcripts,
            gazetteer,
            phrases,
            count,
            out,
            assignments,
        } => match (transcripts, phrases) {
            (Some(t), None) => {
                let gaz_path = gazetteer.ok_or_else(|| Error::InvalidArgument("--gazetteer is required".into()))?;
                let gaz = Gazetteer::load(&gaz_path)?;
                let (list, assigned) = pipeline::build_test_bias(&read_transcripts(&t)?, &gaz);
                list.save(&out)?;
                if let Some(a) = assignments {
                    pipeline::write_assignments(&a, &assigned)?;
                }
                info!("{} phrases", list.len());
            }
            (None, Some(p)) => {
                let source = BiasList::load(&p)?;
                let n = count.unwrap_or(source.len());
                if n > source.len() {
                    return Err(Error::InvalidArgument(format!(
                        "asked for {n} phrases, {} has {}",
                        p.display(),
                        source.len()
                    )));
                }
                BiasList::from_phrases(&source.phrases()[..n]).save(&out)?;
            }
            _ => return Err(Error::InvalidArgument("give --transcripts or --phrases".into())),
        },
        Command::Train {
            config,
            data,
            stage,
            init,
            out,
            resume,
        } => {
            let cfg = load_config(&config)?;
            let stage: Stage = stage.parse()?;
            let res = pipeline::train_stage(&cfg, &data, stage, init.as_deref(), &out, resume)?;
            if let Some(l) = res.last_loss {
                info!("final batch l_all {:.4}", l.l_all);
            }
            info!("checkpoint {}", res.checkpoint.display());
        }
        Command::Decode {
            config,
            tokenizer,
            checkpoint,
            features,
            bias_list,
            bias_score,
            nbest,
            jobs,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(j) = jobs {
                cfg.jobs = j;
                configure_threads(j);
            }
            if let Some(s) = bias_score {
                cfg.decode.bias_score = s;
            }
            cfg.validate()?;
            let bpe = BpeModel::load(&tokenizer)?;
            let list = bias_list.as_deref().map(BiasList::load).transpose()?;
            let model = pipeline::load_model(&cfg, &bpe, &checkpoint)?;
            let items = read_features(&features)?;
            let (text, _) = pipeline::decode_to_text(
                &model,
                &bpe,
                &items,
                list.as_ref(),
                &cfg.decode,
                nbest,
                Execution::from_jobs(cfg.jobs),
            )?;
            write(&out, &text)?;
            info!("decoded {} utterances", items.len());
        }
        Command::Eval {
            refs,
            hyps,
            bias_assignments,
            per_utterance,
            out,
        } => {
            let references = read_transcripts(&refs)?;
            let hypotheses = pipeline::read_hypotheses(&hyps)?;
            let assigned = bias_assignments.as_deref().map(pipeline::read_assignments).transpose()?;
            let report = pipeline::evaluate_texts(&references, &hypotheses, assigned.as_deref())?;
            if let Some(p) = per_utterance {
                write(&p, &pipeline::per_utterance_table(&references, &hypotheses, assigned.as_deref())?)?;
            }
            match out {
                Some(p) => write(&p, &format!("{report}\n"))?,
                None => println!("{report}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
