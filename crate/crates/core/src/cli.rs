//! `wlfm` command-line interface.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use crate::checkpoint::ModelState;
use crate::config::TrainConfig;
use crate::corpus::Split;
use crate::eval::{compare_reports, read_seed_metrics, write_csv, write_embeddings, MetricReport};
use crate::loader::{loader_bench, write_bench_csv, BenchConfig, Encoder, WellSource};
use crate::pipeline::{
    self, embeddings, encode_for_eval, io_error, predict_well, stage_rng, write_predictions, Dataset, MetricsSink, Model, PipelineError,
};
use crate::tokenizer::usage_csv;

#[derive(Debug, Parser)]
#[command(name = "wlfm", version, about = "Well-log foundation model pipeline")]
pub struct Cli {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` and `corpus.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Loader worker count (capped by `WLFM_THREADS`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub queue_capacity: Option<usize>,
    #[arg(long, global = true)]
    pub score_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub consumer_latency_ms: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic corpus, manifest and split.
    Generate,
    /// Trains the tokenizer on the training wells.
    TrainTokenizer,
    /// Pretrains the backbone from a tokenizer checkpoint.
    Pretrain,
    /// Fine-tunes task heads from a pretrained checkpoint.
    Finetune,
    /// Evaluates a checkpoint over seeds.
    Eval {
        /// Comma-separated seeds (default: `eval.seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Per-seed metrics CSV to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Run paired t-tests against `--baseline`.
        #[arg(long)]
        ttest: bool,
        /// Evaluate the from-scratch model (no checkpoint needed).
        #[arg(long)]
        scratch: bool,
    },
    /// Compares the synchronous and asynchronous loaders.
    BenchLoader {
        /// Also encode patches with the tokenizer from `--checkpoint`.
        #[arg(long)]
        encode: bool,
    },
    /// Writes patch- and token-level embeddings (and predictions when the
    /// checkpoint has task heads).
    ExportEmbeddings {
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var("WLFM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn apply_overrides(cli: &Cli, mut cfg: TrainConfig) -> Result<TrainConfig, PipelineError> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.loader.workers = w;
    }
    if let Some(cap) = thread_cap() {
        cfg.loader.workers = cfg.loader.workers.min(cap);
    }
    if let Some(q) = cli.queue_capacity {
        cfg.loader.queue_capacity = q;
    }
    if let Some(t) = cli.score_threshold {
        cfg.loader.score_threshold = Some(t);
    }
    if let Some(ms) = cli.consumer_latency_ms {
        cfg.loader.consumer_latency_ms = ms;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn base_config(cli: &Cli, checkpoint: Option<&ModelState>) -> Result<TrainConfig, PipelineError> {
    let cfg = match (&cli.config, checkpoint) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(s)) => s.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    apply_overrides(cli, cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref()
        .ok_or_else(|| PipelineError::Usage(format!("--{flag} is required for this command")))
}

fn load_checkpoint(cli: &Cli, command: &'static str, expected: &'static str) -> Result<ModelState, PipelineError> {
    match &cli.checkpoint {
        Some(p) => Ok(ModelState::load(p)?),
        None => Err(PipelineError::StageOrderViolation {
            command,
            expected,
            found: "no checkpoint".into(),
        }),
    }
}

fn parse_split(s: &str) -> Result<Split, PipelineError> {
    s.parse().map_err(|s| PipelineError::Usage(format!("unknown split `{s}`")))
}

fn echo_config(cfg: &TrainConfig, dir: &Path) -> Result<(), PipelineError> {
    std::fs::write(dir.join("config.resolved.json"), cfg.resolved().to_json() + "\n").map_err(io_error(dir))
}

fn dataset(cli: &Cli, cfg: &TrainConfig) -> Result<Dataset, PipelineError> {
    Dataset::from_manifest(require(&cli.manifest, "manifest")?, cfg)
}

pub fn run(cli: &Cli) -> Result<(), PipelineError> {
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    match &cli.command {
        Command::Generate => {
            let cfg = base_config(cli, None)?;
            echo_config(&cfg, out)?;
            let manifest = pipeline::generate(&cfg, out)?;
            println!("wrote {} wells; manifest {}", cfg.corpus.n_wells, manifest.display());
        }
        Command::TrainTokenizer => {
            let cfg = base_config(cli, None)?;
            echo_config(&cfg, out)?;
            let data = dataset(cli, &cfg)?;
            let mut sink = MetricsSink::create(&out.join("tokenizer_metrics.csv"))?;
            let run = pipeline::train_tokenizer(&cfg, &data.wells_in(Split::Train), cfg.seed, &mut sink)?;
            let usage = usage_csv(&run.state.codebook()?);
            let usage_path = out.join("codebook_usage.csv");
            std::fs::write(&usage_path, usage).map_err(io_error(&usage_path))?;
            run.state.save(&out.join("tokenizer.ckpt"))?;
            if let Some(m) = run.metrics.last() {
                println!("tokenizer: {} steps, recon {:.4}, codes in use {}", m.step + 1, m.recon, m.used_codes);
            }
        }
        Command::Pretrain => {
            let state = load_checkpoint(cli, "pretrain", "tokenizer")?;
            let cfg = base_config(cli, Some(&state))?;
            echo_config(&cfg, out)?;
            let data = dataset(cli, &cfg)?;
            let mut sink = MetricsSink::create(&out.join("pretrain_metrics.csv"))?;
            let run = pipeline::pretrain(&state, &cfg, &data, &mut sink, Some(&out.join("pretrained.ckpt")))?;
            run.state.save(&out.join("pretrained.ckpt"))?;
            println!(
                "pretrain: {} steps, {} positive pairs, score threshold {:.4}",
                run.metrics.len(),
                run.pairs,
                run.score_threshold
            );
        }
        Command::Finetune => {
            let state = load_checkpoint(cli, "finetune", "pretrained")?;
            let cfg = base_config(cli, Some(&state))?;
            echo_config(&cfg, out)?;
            let data = dataset(cli, &cfg)?;
            let mut sink = MetricsSink::create(&out.join("finetune_metrics.csv"))?;
            let run = pipeline::finetune(&state, &cfg, &data, cfg.seed, &mut sink)?;
            run.state.save(&out.join("finetuned.ckpt"))?;
            println!("finetune: {} steps", run.metrics.len());
        }
        Command::Eval {
            seeds,
            split,
            baseline,
            ttest,
            scratch,
        } => {
            let split = parse_split(split)?;
            if *ttest && baseline.is_none() {
                return Err(PipelineError::MissingBaseline);
            }
            let (report, cfg) = if *scratch {
                let cfg = base_config(cli, None)?;
                let data = dataset(cli, &cfg)?;
                let seeds = seeds.clone().unwrap_or_else(|| cfg.eval.seeds.clone());
                (pipeline::scratch_baseline(&cfg, &data, &seeds, split)?, cfg)
            } else {
                let state = load_checkpoint(cli, "eval", "pretrained or finetuned")?;
                let cfg = base_config(cli, Some(&state))?;
                let data = dataset(cli, &cfg)?;
                let seeds = seeds.clone().unwrap_or_else(|| cfg.eval.seeds.clone());
                (pipeline::evaluate(&state, &cfg, &data, &seeds, split)?, cfg)
            };
            echo_config(&cfg, out)?;
            write_report(&report, out)?;
            print!("{}", report.table());
            if let Some(b) = baseline {
                let base = read_seed_metrics(b)?;
                if report.per_seed.len() < 2 {
                    return Err(PipelineError::Usage(
                        "paired t-test needs at least 2 seeds; rerun with more --seeds".into(),
                    ));
                }
                let rows = compare_reports(&report, &base)?;
                write_csv(&rows, &out.join("ttest.csv"))?;
                for r in &rows {
                    println!("t-test {:<16} t = {:>9.4}  p = {:.6}", r.metric, r.t, r.p);
                }
            }
        }
        Command::BenchLoader { encode } => {
            let state = if *encode {
                Some(load_checkpoint(cli, "bench-loader --encode", "tokenizer")?)
            } else {
                None
            };
            let cfg = base_config(cli, state.as_ref())?;
            echo_config(&cfg, out)?;
            let data = match &cli.manifest {
                Some(p) => Dataset::from_manifest(p, &cfg)?,
                None => Dataset::synthetic(&cfg)?,
            };
            let model = match &state {
                Some(s) => Some(Model::from_state(s, &cfg, false, false, &mut stage_rng(cfg.seed, 0))?),
                None => None,
            };
            let encoder = model.as_ref().map(|m| Encoder {
                tokenizer: &m.tokenizer,
                store: &m.store,
            });
            let threshold = cfg.loader.score_threshold.unwrap_or(f64::NEG_INFINITY);
            let mut worker_counts = if cli.workers.is_some() {
                vec![cfg.loader.workers]
            } else {
                vec![1, 2, 4, cfg.loader.workers]
            };
            if let Some(cap) = thread_cap() {
                worker_counts.iter_mut().for_each(|w| *w = (*w).min(cap));
            }
            worker_counts.sort_unstable();
            worker_counts.dedup();
            let configs: Vec<BenchConfig> = worker_counts
                .into_iter()
                .map(|workers| BenchConfig {
                    workers,
                    queue_capacity: cfg.loader.queue_capacity,
                    threshold,
                })
                .collect();
            let source = WellSource::Memory(data.wells.clone());
            let latency = Duration::from_secs_f64(cfg.loader.consumer_latency_ms / 1000.0);
            let rows = loader_bench(&source, &cfg.loader_config(threshold), &configs, latency, encoder)?;
            write_bench_csv(&rows, &out.join("loader_bench.csv"))?;
            for r in &rows {
                println!(
                    "workers {:>2}  sync {:>9.1}/s  async {:>9.1}/s  speedup {:.2}x",
                    r.workers, r.sync_throughput, r.async_throughput, r.speedup
                );
            }
        }
        Command::ExportEmbeddings { split } => {
            let split = parse_split(split)?;
            let state = load_checkpoint(cli, "export-embeddings", "any")?;
            let cfg = base_config(cli, Some(&state))?;
            let data = dataset(cli, &cfg)?;
            let backbone = state.stage >= crate::checkpoint::Stage::Pretrained;
            let heads = state.stage >= crate::checkpoint::Stage::Finetuned;
            let model = Model::from_state(&state, &cfg.resolved(), backbone, heads, &mut stage_rng(cfg.seed, 0))?;
            let (patch_rows, token_rows) = embeddings(&model, &data, split)?;
            write_embedding_file(&patch_rows, &out.join("embeddings_patch.csv"))?;
            if backbone {
                write_embedding_file(&token_rows, &out.join("embeddings_token.csv"))?;
            }
            if heads {
                let mut rows = Vec::new();
                for w in data.wells_in(split) {
                    let enc = encode_for_eval(&model, w)?;
                    rows.extend(predict_well(&model, w, &enc));
                }
                write_predictions(&rows, &out.join("predictions.csv"))?;
            }
            println!("exported {} patch embeddings", patch_rows.len());
        }
    }
    Ok(())
}

fn write_report(report: &MetricReport, dir: &Path) -> Result<(), PipelineError> {
    write_csv(&report.per_seed, &dir.join("metrics_per_seed.csv"))?;
    write_csv(&report.aggregate(), &dir.join("metrics_aggregate.csv"))?;
    Ok(())
}

fn write_embedding_file(rows: &[crate::eval::EmbeddingRow], path: &Path) -> Result<(), PipelineError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_error(path))?);
    write_embeddings(rows, &mut f)?;
    Ok(())
}
