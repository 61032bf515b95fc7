use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use kdstm::config::TrainConfig;
use kdstm::corpus::{read_jsonl, write_jsonl, LabeledSeeds};
use kdstm::embedding::train_word_embeddings;
use kdstm::evalbench::{benchmark, evaluate, evaluate_pairs, tau_sweep, tau_sweep_csv, MetricsReport};
use kdstm::fixtures::{newsgroups_like, synthetic_corpus, SyntheticSpec};
use kdstm::model::Alignment;
use kdstm::pipeline::{build_corpus, finetune, pretrain, resolve_seeds, stage_timings, word_embeddings, Checkpoint};
use kdstm::sinkhorn::{sinkhorn_with, CostMatrix, SinkhornConfig};
use kdstm::trainer::{train_stage2, write_telemetry};
use kdstm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "kdstm",
    version,
    about = "Seed-guided topic model with transport alignment and distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train skip-gram word embeddings and write them as text.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Filtering and embedding settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train all three stages (or stage 1 only) and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `corpus_path`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pretrained embeddings from `embed`; trained here otherwise.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        stage1_only: bool,
        #[arg(long, default_value = "kdstm-checkpoint.json")]
        out: PathBuf,
        #[arg(long)]
        telemetry: Option<PathBuf>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run stages 2 and 3 from a stage-1 checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed file (`{group: [doc_id, ...]}`); sampled when absent.
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// The corpus the checkpoint was trained on; `corpus_path` otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after stage 2, for `sweep-tau --checkpoint`.
        #[arg(long)]
        stage2_only: bool,
        #[arg(long, default_value = "kdstm-finetuned.json")]
        out: PathBuf,
        #[arg(long)]
        telemetry: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on labeled documents.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Repeat the full pipeline with fresh seeds and report mean, min, max.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun stage 3 for each temperature from one stage-2 state.
    SweepTau {
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Trains stages 1 and 2 with this config.
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        /// Starts from a stage-2 checkpoint instead.
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the most probable words of every topic.
    Topics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 'n', default_value_t = 10)]
        n: usize,
    },
    /// Solve entropic transport for a whitespace-separated cost matrix.
    OtSolve {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Write a generated corpus as JSONL.
    GenFixture {
        #[arg(long, value_enum)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Synthetic,
    Newsgroups,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes to stdout; a closed pipe is not an error.
fn stdout(text: &str) -> Result<()> {
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.map_err(|e| Error::io("<stdout>", e)),
    }
}

fn emit_metrics(report: &MetricsReport, path: Option<&Path>) -> Result<()> {
    let json = report.to_json();
    if let Some(p) = path {
        write_text(p, &json)?;
    }
    stdout(&(json + "\n"))
}

fn data_path(explicit: Option<PathBuf>, config: &TrainConfig) -> Result<PathBuf> {
    explicit
        .or_else(|| config.corpus_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no corpus: pass --data or set corpus_path".into()))
}

fn parse_matrix(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|x| {
                    x.parse::<f64>().map_err(|e| Error::Parse {
                        context: "cost matrix".into(),
                        message: format!("`{x}`: {e}"),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse {
            context: "cost matrix".into(),
            message: "rows have different lengths".into(),
        });
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Parse {
        context: "cost matrix".into(),
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed {
            corpus,
            dim,
            out,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.embed_dim = dim;
            let corpus = build_corpus(&read_jsonl(&corpus)?, &cfg)?;
            let trained = train_word_embeddings(&corpus, &cfg.sgns())?;
            trained.matrix.save(&corpus.vocabulary, &out)?;
            eprintln!(
                "{} words, {} documents, final loss {:.4}",
                corpus.vocabulary.len(),
                corpus.len(),
                trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            config,
            corpus,
            embeddings,
            stage1_only,
            out,
            telemetry,
            metrics,
        } => {
            let mut cfg = TrainConfig::load(config)?;
            if let Some(p) = corpus {
                cfg.corpus_path = Some(p.to_string_lossy().into_owned());
            }
            let corpus = build_corpus(&read_jsonl(data_path(None, &cfg)?)?, &cfg)?;
            let seeds = resolve_seeds(&corpus, &cfg)?;
            let (matrix, embed_ms) = word_embeddings(&corpus, &cfg, embeddings.as_deref())?;
            let mut state = pretrain(&corpus, matrix, &cfg, seeds.num_groups())?;
            let report = if stage1_only {
                None
            } else {
                let (_, mut report) = finetune(&mut state, &corpus, seeds, &cfg)?;
                report.wall_ms_per_stage = stage_timings(embed_ms, &state);
                Some(report)
            };
            if let Some(p) = telemetry {
                write_telemetry(p, &state.telemetry)?;
            }
            Checkpoint::new(cfg, &corpus, state).save(&out)?;
            match report {
                Some(r) => emit_metrics(&r, metrics.as_deref())?,
                None => eprintln!("stage 1 done, checkpoint at {}", out.display()),
            }
        }
        Command::Finetune {
            checkpoint,
            seeds,
            data,
            stage2_only,
            out,
            telemetry,
            metrics,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let corpus = ck.corpus(&read_jsonl(data_path(data, &ck.config)?)?)?;
            let seeds = match seeds {
                Some(p) => LabeledSeeds::from_json(&read_text(&p)?, &corpus)?,
                None => resolve_seeds(&corpus, &ck.config)?,
            };
            let cfg = ck.config.clone();
            let mut state = ck.state;
            let mut report = if stage2_only {
                train_stage2(&mut state, &corpus, seeds.clone(), &cfg)?;
                let plan = state.plan.as_ref().expect("stage 2 leaves a plan");
                evaluate(&state.model, &Alignment::from_plan(plan)?, &corpus, &seeds)?
            } else {
                finetune(&mut state, &corpus, seeds, &cfg)?.1
            };
            report.wall_ms_per_stage = stage_timings(None, &state);
            if let Some(p) = telemetry {
                write_telemetry(p, &state.telemetry)?;
            }
            Checkpoint::new(cfg, &corpus, state).save(&out)?;
            emit_metrics(&report, metrics.as_deref())?;
        }
        Command::Eval { checkpoint, data } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let alignment = ck
                .state
                .alignment
                .as_ref()
                .ok_or_else(|| Error::Contract("checkpoint has not finished stage 3".into()))?;
            let corpus = ck.corpus(&read_jsonl(&data)?)?;
            let pairs = ck.eval_pairs(&corpus)?;
            let names: Vec<&str> = ck.seed_ids.iter().flat_map(|m| m.keys().map(String::as_str)).collect();
            let report = evaluate_pairs(&ck.state.model, alignment, &corpus, &pairs, &names)?;
            emit_metrics(&report, None)?;
        }
        Command::Bench { config, runs, out } => {
            let cfg = TrainConfig::load(config)?;
            let corpus = build_corpus(&read_jsonl(data_path(None, &cfg)?)?, &cfg)?;
            let report = benchmark(&corpus, &cfg, runs)?;
            let json = report.to_json();
            if let Some(p) = out {
                write_text(&p, &json)?;
            }
            stdout(&(json + "\n"))?;
        }
        Command::SweepTau {
            values,
            config,
            checkpoint,
            data,
            out,
        } => {
            let (state, corpus, cfg) = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let corpus = ck.corpus(&read_jsonl(data_path(data, &ck.config)?)?)?;
                    (ck.state, corpus, ck.config)
                }
                None => {
                    let cfg = TrainConfig::load(config.expect("clap requires --config"))?;
                    let corpus = build_corpus(&read_jsonl(data_path(data, &cfg)?)?, &cfg)?;
                    let seeds = resolve_seeds(&corpus, &cfg)?;
                    let (matrix, _) = word_embeddings(&corpus, &cfg, None)?;
                    let mut state = pretrain(&corpus, matrix, &cfg, seeds.num_groups())?;
                    train_stage2(&mut state, &corpus, seeds, &cfg)?;
                    (state, corpus, cfg)
                }
            };
            let csv = tau_sweep_csv(&tau_sweep(&state, &corpus, &cfg, &values)?);
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => stdout(&csv)?,
            }
        }
        Command::Topics { checkpoint, n } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = &ck.state.model;
            let names: Vec<&String> = ck.seed_ids.iter().flat_map(|m| m.keys()).collect();
            for t in 0..model.num_topics() {
                let group = ck
                    .state
                    .alignment
                    .as_ref()
                    .and_then(|a| a.group_of(t))
                    .and_then(|g| names.get(g))
                    .map(|g| format!(" [{g}]"))
                    .unwrap_or_default();
                let words: Vec<String> = model
                    .top_words(&ck.vocabulary, t, n)?
                    .into_iter()
                    .map(|(w, p)| format!("{w}:{p:.4}"))
                    .collect();
                stdout(&format!("topic {t}{group}: {}\n", words.join(" ")))?;
            }
        }
        Command::OtSolve {
            matrix,
            lambda,
            max_iter,
            tol,
        } => {
            let cost = CostMatrix::new(parse_matrix(&read_text(&matrix)?)?)?;
            let cfg = SinkhornConfig { lambda, max_iter, tol };
            let plan = sinkhorn_with(&cost, &cfg)?;
            for row in plan.p.rows() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
                stdout(&(cells.join(" ") + "\n"))?;
            }
            eprintln!(
                "cost {:.6} entropy {:.6} iterations {} converged {}",
                plan.transport_cost(&cost),
                plan.entropy(),
                plan.iterations_used,
                plan.converged
            );
        }
        Command::GenFixture { kind, seed, out } => {
            let docs = match kind {
                FixtureKind::Synthetic => synthetic_corpus(&SyntheticSpec::default(), seed),
                FixtureKind::Newsgroups => newsgroups_like(seed),
            };
            write_jsonl(&out, &docs)?;
            eprintln!("{} documents written to {}", docs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
