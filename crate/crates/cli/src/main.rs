//! Command-line driver: train the base model, distill labels, train the
//! draft module, generate, benchmark, and run the self-check oracles.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 self-check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ctcdraft::bench::{report_to_csv, run_benchmark};
use ctcdraft::config::AppConfig;
use ctcdraft::decode::{generate, Engine};
use ctcdraft::distill::{make_distilled_dataset, read_dataset, write_dataset};
use ctcdraft::model::checkpoint::{
    file_sha256, load_checkpoint, reference_store, save_checkpoint, validate_shapes,
};
use ctcdraft::selfcheck;
use ctcdraft::train::{train_base, train_draft};

#[derive(Parser)]
#[command(
    name = "ctcdraft",
    about = "Speculative decoding with a CTC-trained draft module",
    version
)]
struct Cli {
    /// Flat key = value config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// RNG seed (training and decoding).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Decoding mode: greedy | sample.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Top-k tokens kept per draft slot.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Candidate paths kept after enumeration.
    #[arg(long, global = true)]
    beam: Option<usize>,

    /// Draft slots per anchor (model structure; training-time).
    #[arg(long, global = true)]
    slots: Option<usize>,

    /// Draft training objective: ctc | ce.
    #[arg(long, global = true)]
    loss: Option<String>,

    /// CTC transform of candidates: on | off.
    #[arg(long, global = true)]
    collapse: Option<String>,

    /// Output path (checkpoint, dataset, text, or report directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on a UTF-8 corpus file.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Produce distilled labels from a frozen base checkpoint.
    Distill {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the draft module on a distilled dataset.
    TrainDraft {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a prompt (speculative when --draft is given).
    Generate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        draft: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        max_new: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Vanilla-vs-speculative benchmark over a prompts file (one per line).
    Bench {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        max_new: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Decode prompts concurrently (timings become non-comparable).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Run the oracle suites (CTC vs brute force, gradient checks,
    /// tree-mask equivalence, greedy losslessness).
    Selfcheck,
}

fn build_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path).with_context(|| format!("reading {path:?}"))?,
        None => AppConfig::default(),
    };
    // Every flag mirrors a config key; flags win.
    if let Some(v) = cli.seed {
        cfg.set("seed", &v.to_string())?;
    }
    if let Some(v) = &cli.mode {
        cfg.set("mode", v)?;
    }
    if let Some(v) = cli.k {
        cfg.set("k", &v.to_string())?;
    }
    if let Some(v) = cli.beam {
        cfg.set("beam", &v.to_string())?;
    }
    if let Some(v) = cli.slots {
        cfg.set("slots", &v.to_string())?;
    }
    if let Some(v) = &cli.loss {
        cfg.set("loss", v)?;
    }
    if let Some(v) = &cli.collapse {
        cfg.set("collapse", v)?;
    }
    Ok(cfg)
}

fn read_corpus_tokens(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read(path).with_context(|| format!("reading corpus {path:?}"))?;
    if text.len() < 2 {
        bail!("corpus {path:?} is too small");
    }
    Ok(text.iter().map(|&b| u32::from(b)).collect())
}

/// Loads base (and optionally draft) checkpoints into one engine, checking
/// configs agree and shapes match what the config implies.
fn load_engine(
    base_path: &Path,
    draft_path: Option<&Path>,
) -> Result<(Engine<f32>, Vec<(String, String)>)> {
    let (mut store, config) = load_checkpoint::<f32>(base_path)?;
    let mut hashes = vec![("base".to_string(), file_sha256(base_path)?)];

    if let Some(dp) = draft_path {
        let (draft_store, draft_config) = load_checkpoint::<f32>(dp)?;
        if draft_config != config {
            bail!(
                "draft checkpoint config {:?} does not match base config {:?}",
                draft_config,
                config
            );
        }
        for (name, tensor) in draft_store.iter() {
            store.insert(name.clone(), tensor.clone());
        }
        hashes.push(("draft".to_string(), file_sha256(dp)?));
    }
    validate_shapes(&store, &reference_store(&config, draft_path.is_some()))?;
    let engine = Engine::new(config, store, draft_path.is_some())?;
    Ok((engine, hashes))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = build_config(&cli)?;

    match cli.command {
        Command::TrainBase { corpus, epochs } => {
            if let Some(e) = epochs {
                cfg.set("epochs", &e.to_string())?;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("base.ckpt"));
            let tokens = read_corpus_tokens(&corpus)?;
            let log_path = out.with_extension("log.jsonl");
            let mut log = fs::File::create(&log_path)?;
            let result = train_base::<f32>(&tokens, &cfg.model, &cfg.train, Some(&mut log))?;
            if let Some(step) = result.aborted_at {
                log::error!("training aborted at step {step}; saving last good checkpoint");
            }
            save_checkpoint(&result.params, &cfg.model, &out, Some("base."))?;
            println!(
                "trained base for {} epochs (final loss {:.4}); checkpoint: {} log: {}",
                result.completed_epochs,
                result.final_loss,
                out.display(),
                log_path.display()
            );
        }
        Command::Distill { base, corpus } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("distilled.bin"));
            let (params, config) = load_checkpoint::<f32>(&base)?;
            let tokens = read_corpus_tokens(&corpus)?;
            let dataset = make_distilled_dataset(&[tokens], &config, &params)?;
            write_dataset(&out, &dataset, &config, &file_sha256(&base)?)?;
            println!("distilled {} examples to {}", dataset.len(), out.display());
        }
        Command::TrainDraft {
            base,
            dataset,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.set("epochs", &e.to_string())?;
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("draft.ckpt"));
            let (params, config) = load_checkpoint::<f32>(&base)?;
            let (examples, ds_config, teacher_hash) = read_dataset(&dataset)?;
            if ds_config != config {
                bail!(
                    "dataset was distilled under a different config; re-run distill \
                     (dataset: {ds_config:?}, checkpoint: {config:?})"
                );
            }
            if teacher_hash != file_sha256(&base)? {
                log::warn!("dataset teacher hash differs from the supplied base checkpoint");
            }
            let log_path = out.with_extension("log.jsonl");
            let mut log = fs::File::create(&log_path)?;
            let result = train_draft(&examples, params, &config, &cfg.train, Some(&mut log))?;
            save_checkpoint(&result.params, &config, &out, Some("draft."))?;
            println!(
                "trained draft for {} epochs (final loss {:.4}); checkpoint: {} log: {}",
                result.completed_epochs,
                result.final_loss,
                out.display(),
                log_path.display()
            );
        }
        Command::Generate {
            base,
            draft,
            prompt,
            max_new,
            temperature,
        } => {
            if let Some(m) = max_new {
                cfg.set("max_new_tokens", &m.to_string())?;
            }
            if let Some(t) = temperature {
                cfg.set("temperature", &t.to_string())?;
            }
            let (engine, _) = load_engine(&base, draft.as_deref())?;
            let tokens = engine.vocab.encode(&prompt);
            let out = generate(&engine, &tokens, cfg.decode.clone())?;
            let text = engine.vocab.decode(&out.tokens);
            match &cli.out {
                Some(path) => fs::write(path, &text)?,
                None => println!("{text}"),
            }
            let beta = if out.steps > 0 {
                out.emitted as f64 / out.steps as f64
            } else {
                0.0
            };
            eprintln!(
                "emitted {} tokens in {} steps (beta {:.2}) in {:.3}s{}",
                out.emitted,
                out.steps,
                beta,
                out.wall_seconds,
                if out.truncated_by_overflow {
                    " [truncated: context overflow]"
                } else {
                    ""
                }
            );
        }
        Command::Bench {
            base,
            draft,
            prompts,
            max_new,
            temperature,
            parallel,
        } => {
            if let Some(m) = max_new {
                cfg.set("max_new_tokens", &m.to_string())?;
            }
            if let Some(t) = temperature {
                cfg.set("temperature", &t.to_string())?;
            }
            if let Some(p) = parallel {
                cfg.set("parallel", &p.to_string())?;
            }
            let out_dir = cli.out.unwrap_or_else(|| PathBuf::from("bench_out"));
            fs::create_dir_all(&out_dir)?;
            let (engine, hashes) = load_engine(&base, Some(&draft))?;
            let prompt_lines: Vec<String> = fs::read_to_string(&prompts)
                .with_context(|| format!("reading prompts {prompts:?}"))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if prompt_lines.is_empty() {
                bail!("prompts file {prompts:?} has no non-empty lines");
            }
            let report = run_benchmark(
                &engine,
                &prompt_lines,
                &cfg.decode,
                cfg.echo(),
                hashes,
                cfg.parallel,
            )?;
            let json_path = out_dir.join("report.json");
            let csv_path = out_dir.join("rows.csv");
            fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            fs::write(&csv_path, report_to_csv(&report))?;
            println!(
                "bench over {} prompts: beta {:.3}, gamma {:.3}x ({} truncated, {} greedy mismatches)",
                prompt_lines.len(),
                report.aggregate_beta,
                report.aggregate_gamma,
                report.truncated_prompts,
                report.greedy_mismatches
            );
            println!("report: {} rows: {}", json_path.display(), csv_path.display());
            if report.greedy_mismatches > 0 {
                bail!("greedy losslessness violated in {} runs", report.greedy_mismatches);
            }
        }
        Command::Selfcheck => {
            let seed = cli.seed.unwrap_or(0);
            let mut failed = false;
            for outcome in selfcheck::run_all(seed) {
                println!("{}", outcome.line());
                failed |= !outcome.passed;
            }
            if failed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/usage; keep exit code 1 for usage errors
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
