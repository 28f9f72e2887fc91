//! morphbench: generate benchmark robots, train morphology-conditioned PPO
//! agents, and evaluate multi-task / zero-shot scores.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use morphbench_core::config::{apply_overrides, load_run_config, AgentKind, RunConfig};
use morphbench_core::error::Error as CoreError;
use morphbench_core::eval::{emit_report, evaluate, EvalResult, ReportMeta};
use morphbench_core::policy::PolicyNet;
use morphbench_core::registry::{
    benchmark_split, split_similarities, write_all_assets, write_split_assets, Manifest, Split,
    SPLIT_NAMES,
};
use morphbench_core::token::{cosine_similarity, morphology_vector};
use morphbench_core::trainer::Trainer;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "morphbench", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print every benchmark task with its morphologies and link statistics.
    List {
        /// Registry generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write morphology description files (and the manifest) for a task.
    Gen {
        /// Task name or "all".
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (defaults to the assets root).
        #[arg(long, env = "MORPHBENCH_ASSETS", default_value = "assets")]
        out: PathBuf,
    },
    /// Train an agent from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of parallel environments.
        #[arg(long)]
        envs: Option<usize>,
        /// Allow reusing an existing run directory.
        #[arg(long)]
        force: bool,
        /// Dotted-path config overrides, e.g. `--train.clip 0.1` or
        /// `train.clip=0.1`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a benchmark split and emit report files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Benchmark task (defaults to the one stored in the checkpoint).
        #[arg(long)]
        task: Option<String>,
        /// Restrict to one split (train | test); default evaluates both.
        #[arg(long)]
        split: Option<String>,
        /// Fine-tune on each evaluated morphology for this many env steps
        /// before scoring it.
        #[arg(long, default_value_t = 0)]
        finetune_steps: u64,
        /// Evaluation step budget per morphology.
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        /// Output directory (defaults to `<run dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation seed (defaults to the run seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Sample stochastically instead of the deterministic action mode.
        #[arg(long)]
        stochastic: bool,
    },
    /// Cosine similarity of the test robot against each train robot.
    Similarity {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the plot-data file.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_))
        | Some(CoreError::Parse { .. })
        | Some(CoreError::UnknownTask(_)) => true,
        _ => false,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if is_usage_error(&err) { 2 } else { 1 };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::List { seed } => cmd_list(seed),
        Cmd::Gen { task, seed, out } => cmd_gen(&task, seed, &out),
        Cmd::Train {
            config,
            envs,
            force,
            overrides,
        } => cmd_train(&config, envs, force, overrides),
        Cmd::Eval {
            checkpoint,
            task,
            split,
            finetune_steps,
            steps,
            out,
            seed,
            stochastic,
        } => cmd_eval(
            &checkpoint,
            task.as_deref(),
            split.as_deref(),
            finetune_steps,
            steps,
            out,
            seed,
            stochastic,
        ),
        Cmd::Similarity { task, seed, out } => cmd_similarity(&task, seed, &out),
    }
}

fn cmd_list(seed: u64) -> anyhow::Result<()> {
    println!(
        "{:<8} {:<6} {:>6} {:>10} {:>12} {:>16} {:>14}",
        "task", "split", "robots", "avg_links", "avg_movable", "movable_till_ee", "max_cosine"
    );
    for name in SPLIT_NAMES {
        let task = benchmark_split(name, seed)?;
        let test_vec = morphology_vector(&task.test[0].morph)?;
        let mut max_cos = f64::NEG_INFINITY;
        for e in &task.train {
            let v = morphology_vector(&e.morph)?;
            max_cos = max_cos.max(cosine_similarity(&test_vec, &v)?);
        }
        for split in [Split::Train, Split::Test] {
            let entries = task.entries(split);
            let n = entries.len() as f64;
            let avg_links = entries.iter().map(|e| e.morph.n_links() as f64).sum::<f64>() / n;
            let avg_movable = entries.iter().map(|e| e.morph.n_movable() as f64).sum::<f64>() / n;
            let avg_till_ee = entries
                .iter()
                .map(|e| e.morph.n_movable_till_ee() as f64)
                .sum::<f64>()
                / n;
            println!(
                "{:<8} {:<6} {:>6} {:>10.2} {:>12.2} {:>16.2} {:>14.3}",
                name,
                split.as_str(),
                entries.len(),
                avg_links,
                avg_movable,
                avg_till_ee,
                max_cos
            );
            for e in entries {
                println!(
                    "    {:<24} {} links, {} movable, task {}",
                    e.morph.name,
                    e.morph.n_links(),
                    e.morph.n_movable(),
                    e.task.as_str()
                );
            }
        }
    }
    Ok(())
}

fn cmd_gen(task: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    if task == "all" {
        let manifest = write_all_assets(out, seed)?;
        println!(
            "wrote {} tasks to {}",
            manifest.tasks.len(),
            out.display()
        );
        return Ok(());
    }
    let bench = benchmark_split(task, seed)?;
    let entry = write_split_assets(&bench, out)?;
    // Refresh the manifest, keeping other tasks when present.
    let manifest_path = out.join("manifest.json");
    let mut manifest: Manifest = if manifest_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?
    } else {
        Manifest {
            version: 1,
            seed,
            tasks: Default::default(),
        }
    };
    manifest.tasks.insert(task.to_string(), entry);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&manifest_path, text)?;
    println!(
        "wrote {} morphologies to {}",
        bench.train.len() + bench.test.len(),
        out.join(task).display()
    );
    Ok(())
}

/// Normalize `--a.b v`, `--a.b=v`, and `a.b=v` argument styles.
fn normalize_overrides(raw: &[String]) -> anyhow::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let item = raw[i].trim_start_matches("--");
        if let Some((_, _)) = item.split_once('=') {
            out.push(item.to_string());
            i += 1;
        } else {
            let value = raw
                .get(i + 1)
                .ok_or_else(|| anyhow!("override `{}` is missing a value", raw[i]))?;
            out.push(format!("{item}={value}"));
            i += 2;
        }
    }
    Ok(out)
}

fn cmd_train(
    config: &Path,
    envs: Option<usize>,
    force: bool,
    overrides: Vec<String>,
) -> anyhow::Result<()> {
    let mut run = load_run_config(config)?;
    let normalized = normalize_overrides(&overrides)?;
    apply_overrides(&mut run, &normalized)?;
    if let Some(n) = envs {
        run.train.n_envs = n;
        run.validate()?;
    }

    let dir = run.run_dir();
    if dir.exists() {
        if !force {
            return Err(CoreError::Config(format!(
                "run directory {} exists; pass --force to replace it",
                dir.display()
            ))
            .into());
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), toml::to_string_pretty(&run)?)?;

    let mut trainer = Trainer::new(run).context("building trainer")?;
    trainer.run_to_completion(&dir).context("training run")?;
    println!("run complete: {}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    task: Option<&str>,
    split: Option<&str>,
    finetune_steps: u64,
    steps: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
    stochastic: bool,
) -> anyhow::Result<()> {
    let (net, meta) = PolicyNet::load_checkpoint(checkpoint)?;
    let run: RunConfig = match meta {
        Some(value) => serde_json::from_value(value)
            .map_err(|e| CoreError::Checkpoint(format!("bad run config echo: {e}")))?,
        None => return Err(CoreError::Checkpoint("checkpoint carries no run config".into()).into()),
    };
    let benchmark = task.unwrap_or(&run.benchmark).to_string();
    let mut lookup = run.clone();
    lookup.benchmark = benchmark.clone();
    let bench = lookup.split()?;
    let eval_seed = seed.unwrap_or(run.seed);

    let wanted = match split {
        Some(s) => vec![Split::from_str(s)?],
        None => vec![Split::Train, Split::Test],
    };

    let mut train_results: Vec<EvalResult> = Vec::new();
    let mut test_results: Vec<EvalResult> = Vec::new();
    for sp in wanted {
        let entries: Vec<_> = match (sp, run.agent) {
            (Split::Train, AgentKind::Se) => {
                // SE agents evaluate only their own training morphology.
                lookup.resolve_entries()?
            }
            _ => bench.entries(sp).to_vec(),
        };
        for entry in entries {
            let cfg = lookup.env_config_for(entry.task);
            let net_for_eval;
            let net_ref = if finetune_steps > 0 {
                net_for_eval = Trainer::finetune(
                    checkpoint,
                    &entry.morph,
                    entry.task,
                    finetune_steps,
                    &lookup,
                )?;
                &net_for_eval
            } else {
                &net
            };
            let result = evaluate(net_ref, &entry.morph, &cfg, steps, eval_seed, stochastic)?;
            println!(
                "{:<6} {:<24} task {:<5} score {:+.4} (raw {:+.4}, baseline {:+.4}, {} episodes)",
                sp.as_str(),
                result.morphology,
                result.task.as_str(),
                result.score,
                result.raw_mean,
                result.baseline_mean,
                result.episodes
            );
            match sp {
                Split::Train => train_results.push(result),
                Split::Test => test_results.push(result),
            }
        }
    }

    let run_dir = checkpoint
        .parent()
        .and_then(|p| p.parent())
        .map(|p| p.to_path_buf());
    let out_dir = out.unwrap_or_else(|| {
        run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
            .join("eval")
    });
    let metrics = run_dir.map(|d| d.join("metrics.csv"));
    let meta = ReportMeta {
        run: run.run_name.clone(),
        agent: run.agent.as_str().to_string(),
        task: benchmark,
    };
    emit_report(
        &meta,
        &train_results,
        &test_results,
        metrics.as_deref(),
        &out_dir,
    )?;
    println!("report written to {}", out_dir.display());
    Ok(())
}

fn cmd_similarity(task: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let bench = benchmark_split(task, seed)?;
    let rows = split_similarities(&bench)?;
    println!("test robot: {}", bench.test[0].morph.name);
    println!("{:<26} {:>10}", "train robot", "cosine");
    let mut data = String::new();
    for (rank, (name, cos)) in rows.iter().enumerate() {
        println!("{:<26} {:>10.4}", name, cos);
        data.push_str(&format!("{} {}\n", rank, cos));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("similarity_{task}.dat"));
    std::fs::write(&path, data)?;
    println!("plot data: {}", path.display());
    Ok(())
}
