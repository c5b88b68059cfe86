//! Command-line surface.
//!
//! Subcommands: `gen-data` (write a corpus), `schedule` (print the
//! temperature table), `train` (run a full training job into a run
//! directory), `eval` (per-task perplexity and accuracy of a checkpoint),
//! `report` (compare run directories), and `route-demo` (balanced vs
//! greedy routing on a random affinity matrix).
//!
//! Every command is deterministic given its arguments and input files.
//! Exit code 0 means the requested artifact was fully written; on failure
//! partially written outputs are removed and the exit code is 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::routing::{self, AffinityMatrix};
use crate::schedule::{self, HeatingConfig};
use crate::trainer::{self, RunConfig, RunOptions};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Deterministic desk-scale lab for sparse mixture-of-experts training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-task corpus described by a config file
    GenData {
        /// Run config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output corpus path (JSONL)
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the temperature heating table as CSV (epoch,temperature)
    Schedule {
        /// Starting temperature t_s
        #[arg(long)]
        ts: f64,
        /// Conduction coefficient k
        #[arg(long)]
        k: f64,
        /// Maximum number of epochs C
        #[arg(long)]
        epochs: u32,
    },
    /// Train a model and write a run directory
    Train {
        /// Run config (JSON); not allowed together with --resume
        #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
        config: Option<PathBuf>,
        /// Corpus file produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output run directory
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint (config is taken from the checkpoint)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after completing this epoch (for checkpoint/resume tests)
        #[arg(long)]
        stop_after_epoch: Option<u32>,
    },
    /// Print per-task perplexity and accuracy of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare run directories: steps to target, final perplexities,
    /// expert-usage entropy and drift
    Report {
        /// Run directory (repeatable)
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Target validation perplexity for steps-to-target
        #[arg(long)]
        target_ppl: f64,
    },
    /// Route a random affinity matrix and print balanced vs greedy
    /// assignments
    RouteDemo {
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        #[arg(long, default_value_t = 4)]
        experts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print a JSON dump
        #[arg(long)]
        json: bool,
    },
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Schedule { ts, k, epochs } => cmd_schedule(ts, k, epochs),
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after_epoch,
        } => cmd_train(config.as_deref(), &data, &out, resume.as_deref(), stop_after_epoch),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Report { runs, target_ppl } => cmd_report(&runs, target_ppl),
        Command::RouteDemo {
            tokens,
            experts,
            seed,
            json,
        } => cmd_route_demo(tokens, experts, seed, json),
    }
}

/// Removes partially written outputs unless disarmed.
struct OutputGuard {
    files: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        OutputGuard {
            files: Vec::new(),
            created_dir: None,
            armed: true,
        }
    }

    fn track(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if let Some(dir) = &self.created_dir {
            let _ = std::fs::remove_dir(dir);
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn format_weights(w: &[f64]) -> String {
    let cells: Vec<String> = w.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", cells.join(", "))
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus_cfg = cfg.corpus_config();
    let corpus = data::generate_corpus(&corpus_cfg)?;

    let mut guard = OutputGuard::new();
    guard.track(out);
    data::write_corpus(&corpus, out)?;

    let sizes = data::zipf_sizes(corpus_cfg.num_tasks, corpus_cfg.zipf_s, corpus_cfg.base_size);
    let size_cells: Vec<String> = sizes.iter().map(usize::to_string).collect();
    println!("sizes: [{}]", size_cells.join(", "));
    let p = data::empirical_task_distribution(&corpus)?;
    println!("p: {}", format_weights(p.as_slice()));
    println!("wrote {}", out.display());
    guard.disarm();
    Ok(())
}

fn cmd_schedule(ts: f64, k: f64, epochs: u32) -> Result<()> {
    let cfg = HeatingConfig::new(ts, k, epochs)?;
    print!("{}", schedule_csv(&cfg));
    Ok(())
}

pub fn schedule_csv(cfg: &HeatingConfig) -> String {
    let mut out = String::from("epoch,temperature\n");
    for (e, t) in schedule::schedule_table(cfg) {
        out.push_str(&format!("{e},{t:.6}\n"));
    }
    out
}

fn write_text(guard: &mut OutputGuard, path: &Path, text: &str) -> Result<()> {
    guard.track(path);
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after_epoch: Option<u32>,
) -> Result<()> {
    let resume_ckpt = resume.map(trainer::load_checkpoint).transpose()?;
    let cfg = match (&resume_ckpt, config) {
        (Some(ckpt), None) => ckpt.config.clone(),
        (None, Some(path)) => load_config(path)?,
        _ => unreachable!("clap enforces exactly one of --config/--resume"),
    };
    let corpus = data::read_corpus(data_path)?;
    cfg.check_corpus(&corpus)?;

    let mut guard = OutputGuard::new();
    if !out.exists() {
        std::fs::create_dir_all(out)?;
        guard.created_dir = Some(out.to_path_buf());
    }

    let opts = RunOptions {
        stop_after_epoch,
        quiet: false,
    };
    let artifacts = trainer::run(&cfg, &corpus, resume_ckpt, &opts)?;

    let mut config_json = serde_json::to_string_pretty(&cfg)?;
    config_json.push('\n');
    write_text(&mut guard, &out.join("config.json"), &config_json)?;
    write_text(
        &mut guard,
        &out.join("metrics.csv"),
        &trainer::metrics_to_csv(&artifacts.metrics),
    )?;
    let mut usage_json = serde_json::to_string_pretty(&artifacts.usage.to_records())?;
    usage_json.push('\n');
    write_text(&mut guard, &out.join("usage.json"), &usage_json)?;
    let mut eval_json = serde_json::to_string_pretty(&artifacts.final_validation)?;
    eval_json.push('\n');
    write_text(&mut guard, &out.join("eval.json"), &eval_json)?;
    guard.track(&out.join("checkpoint.json"));
    trainer::save_checkpoint(&artifacts.checkpoint, &out.join("checkpoint.json"))?;

    println!(
        "run complete: {} epochs, {} steps, final valid_ppl {:.6}{}",
        artifacts.checkpoint.epochs_done,
        artifacts.checkpoint.global_step,
        artifacts.final_validation.valid_ppl,
        if artifacts.stopped_early {
            " (stopped at target)"
        } else {
            ""
        }
    );
    println!("wrote {}", out.display());
    guard.disarm();
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_path: &Path) -> Result<()> {
    let ckpt = trainer::load_checkpoint(checkpoint)?;
    let corpus = data::read_corpus(data_path)?;
    ckpt.config.check_corpus(&corpus)?;
    let report = trainer::validate(&ckpt.model, &corpus)?;
    println!("task,ppl,accuracy");
    for t in &report.per_task {
        println!("{},{:.6},{:.6}", t.task, t.valid_ppl, t.accuracy);
    }
    println!("overall,{:.6},{:.6}", report.valid_ppl, report.accuracy);
    Ok(())
}

struct RunSummary {
    dir: PathBuf,
    steps_to_target: Option<u64>,
    final_overall_ppl: f64,
    low_resource_ppl: Option<f64>,
    usage: trainer::ExpertUsage,
    num_tasks: usize,
}

fn load_run(dir: &Path, target_ppl: f64) -> Result<RunSummary> {
    let cfg = load_config(&dir.join("config.json"))?;
    let metrics_text = std::fs::read_to_string(dir.join("metrics.csv"))
        .map_err(|e| Error::Data(format!("missing metrics in {}: {e}", dir.display())))?;
    let metrics = trainer::metrics_from_csv(&metrics_text)?;
    if metrics.is_empty() {
        return Err(Error::Data(format!("empty metrics in {}", dir.display())));
    }
    let usage_text = std::fs::read_to_string(dir.join("usage.json"))
        .map_err(|e| Error::Data(format!("missing usage in {}: {e}", dir.display())))?;
    let usage_records: Vec<trainer::UsageRecord> = serde_json::from_str(&usage_text)?;
    let eval_text = std::fs::read_to_string(dir.join("eval.json"))
        .map_err(|e| Error::Data(format!("missing eval in {}: {e}", dir.display())))?;
    let eval: trainer::ValidationReport = serde_json::from_str(&eval_text)?;

    let low = data::low_resource_tasks(cfg.data.num_tasks);
    let low_ppls: Vec<f64> = eval
        .per_task
        .iter()
        .filter(|t| low.contains(&t.task))
        .map(|t| t.valid_ppl)
        .collect();
    let low_resource_ppl = if low_ppls.is_empty() {
        None
    } else {
        Some(low_ppls.iter().sum::<f64>() / low_ppls.len() as f64)
    };

    Ok(RunSummary {
        dir: dir.to_path_buf(),
        steps_to_target: trainer::steps_to_target(&metrics, target_ppl),
        final_overall_ppl: metrics.last().expect("nonempty").valid_ppl,
        low_resource_ppl,
        usage: trainer::ExpertUsage::from_records(usage_records),
        num_tasks: cfg.data.num_tasks,
    })
}

fn cmd_report(runs: &[PathBuf], target_ppl: f64) -> Result<()> {
    let summaries: Vec<RunSummary> = runs
        .iter()
        .map(|dir| load_run(dir, target_ppl))
        .collect::<Result<_>>()?;

    for s in &summaries {
        println!("run: {}", s.dir.display());
        match s.steps_to_target {
            Some(steps) => println!("  steps_to_target(ppl<={target_ppl}): {steps}"),
            None => println!("  steps_to_target(ppl<={target_ppl}): n/a"),
        }
        println!("  final_overall_ppl: {:.6}", s.final_overall_ppl);
        match s.low_resource_ppl {
            Some(p) => println!("  final_low_resource_ppl: {p:.6}"),
            None => println!("  final_low_resource_ppl: n/a"),
        }
        if s.usage.is_empty() {
            println!("  usage: none recorded (dense run)");
        } else {
            println!("  usage (summed over expert banks):");
            println!("  task,entropy_first,entropy_last,drift");
            for task in 0..s.num_tasks {
                let epochs = s.usage.task_epochs(task);
                let (Some(&first), Some(&last)) = (epochs.first(), epochs.last()) else {
                    println!("  {task},n/a,n/a,n/a");
                    continue;
                };
                let counts_first = s.usage.task_counts(first, task).expect("epoch listed");
                let counts_last = s.usage.task_counts(last, task).expect("epoch listed");
                let e_first = trainer::usage_entropy(&counts_first)?;
                let e_last = trainer::usage_entropy(&counts_last)?;
                let drift = trainer::tv_distance(&counts_first, &counts_last)?;
                println!("  {task},{e_first:.6},{e_last:.6},{drift:.6}");
            }
        }
    }

    if summaries.len() >= 2 {
        println!("step-count ratios:");
        for a in &summaries {
            for b in &summaries {
                if std::ptr::eq(a, b) {
                    continue;
                }
                let label = format!("{} / {}", a.dir.display(), b.dir.display());
                match (a.steps_to_target, b.steps_to_target) {
                    (Some(sa), Some(sb)) if sb > 0 => {
                        println!("  {label} = {:.2}", sa as f64 / sb as f64)
                    }
                    _ => println!("  {label} = n/a"),
                }
            }
        }
    }
    Ok(())
}

fn cmd_route_demo(tokens: usize, experts: usize, seed: u64, json: bool) -> Result<()> {
    if tokens == 0 || tokens > 64 {
        return Err(Error::Config("tokens must be in 1..=64".into()));
    }
    if experts == 0 || experts > 16 {
        return Err(Error::Config("experts must be in 1..=16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores: Vec<f64> = (0..tokens * experts)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let a = AffinityMatrix::new(tokens, experts, scores)?;
    let balanced = routing::balanced_assign(&a);
    let greedy = routing::greedy_assign(&a);

    println!("affinity matrix ({tokens} tokens x {experts} experts):");
    print!("      ");
    for j in 0..experts {
        print!(" {:>7}", format!("e{j}"));
    }
    println!();
    for t in 0..tokens {
        print!("t{t:<4} ");
        for j in 0..experts {
            print!(" {:>+7.3}", a.score(t, j));
        }
        println!();
    }
    println!("balanced: expert_of={:?} loads={:?}", balanced.expert_of, balanced.loads);
    println!("greedy:   expert_of={:?} loads={:?}", greedy.expert_of, greedy.loads);

    if json {
        let dump = serde_json::json!({
            "tokens": tokens,
            "experts": experts,
            "seed": seed,
            "scores": (0..tokens)
                .map(|t| (0..experts).map(|j| a.score(t, j)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "balanced": {"expert_of": balanced.expert_of, "loads": balanced.loads},
            "greedy": {"expert_of": greedy.expert_of, "loads": greedy.loads},
        });
        println!("{}", serde_json::to_string_pretty(&dump)?);
    }
    Ok(())
}

/// Evaluates a model file against a corpus; shared by the Python bindings.
pub fn eval_report(checkpoint: &Path, data_path: &Path) -> Result<trainer::ValidationReport> {
    let ckpt = trainer::load_checkpoint(checkpoint)?;
    let corpus = data::read_corpus(data_path)?;
    ckpt.config.check_corpus(&corpus)?;
    trainer::validate(&ckpt.model, &corpus)
}

/// Runs `gen-data` programmatically (bindings entry point).
pub fn gen_data_to_file(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = data::generate_corpus(&cfg.corpus_config())?;
    data::write_corpus(&corpus, out)
}

/// Runs `train` programmatically into a run directory (bindings entry
/// point). Returns the final overall validation perplexity.
pub fn train_to_dir(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<f64> {
    let corpus = data::read_corpus(data_path)?;
    cfg.check_corpus(&corpus)?;
    let mut guard = OutputGuard::new();
    if !out.exists() {
        std::fs::create_dir_all(out)?;
        guard.created_dir = Some(out.to_path_buf());
    }
    let artifacts = trainer::run(&cfg, &corpus, None, &RunOptions { stop_after_epoch: None, quiet: true })?;
    let mut config_json = serde_json::to_string_pretty(cfg)?;
    config_json.push('\n');
    write_text(&mut guard, &out.join("config.json"), &config_json)?;
    write_text(
        &mut guard,
        &out.join("metrics.csv"),
        &trainer::metrics_to_csv(&artifacts.metrics),
    )?;
    let mut usage_json = serde_json::to_string_pretty(&artifacts.usage.to_records())?;
    usage_json.push('\n');
    write_text(&mut guard, &out.join("usage.json"), &usage_json)?;
    let mut eval_json = serde_json::to_string_pretty(&artifacts.final_validation)?;
    eval_json.push('\n');
    write_text(&mut guard, &out.join("eval.json"), &eval_json)?;
    guard.track(&out.join("checkpoint.json"));
    trainer::save_checkpoint(&artifacts.checkpoint, &out.join("checkpoint.json"))?;
    guard.disarm();
    Ok(artifacts.final_validation.valid_ppl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_csv_matches_examples() {
        let cfg = HeatingConfig::new(1.5, 2.0, 1).unwrap();
        assert_eq!(schedule_csv(&cfg), "epoch,temperature\n0,1.500000\n");
        let cfg = HeatingConfig::new(1.0, 0.0, 3).unwrap();
        assert_eq!(
            schedule_csv(&cfg),
            "epoch,temperature\n0,1.000000\n1,1.000000\n2,1.000000\n"
        );
        let cfg = HeatingConfig::new(1.0, 1.0, 4).unwrap();
        let text = schedule_csv(&cfg);
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows, vec!["0,1.000000", "1,1.224745", "2,1.414214", "3,1.581139"]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let json = r#"{
            "model": {"vocab": 16, "dim": 4, "hidden": 8, "blocks": 2, "moe_every": 2, "experts": 2},
            "data": {"num_tasks": 2, "zipf_s": 1.0, "base_size": 20, "seq_len": 4, "share_fraction": 0.5, "seed": 1},
            "train": {"lr": 0.1, "batch_sequences": 2, "epochs": 2, "dense_steps": 0, "seed": 1},
            "schedule": {"t_s": 1.0, "k": 0.0},
            "bogus": 1
        }"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let nested_bogus = json.replace(", \"bogus\": 1", "").replace(
            "\"k\": 0.0",
            "\"k\": 0.0, \"mystery\": 2",
        );
        assert!(serde_json::from_str::<RunConfig>(&nested_bogus).is_err());
    }

    #[test]
    fn config_parses_and_validates() {
        let json = r#"{
            "model": {"vocab": 16, "dim": 4, "hidden": 8, "blocks": 2, "moe_every": 2, "experts": 2},
            "data": {"num_tasks": 2, "zipf_s": 1.0, "base_size": 20, "seq_len": 4, "share_fraction": 0.5, "seed": 1},
            "train": {"lr": 0.1, "batch_sequences": 2, "epochs": 2, "dense_steps": 0, "seed": 1},
            "schedule": {"t_s": 1.0, "k": 0.0}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.gate_scale, 0.1); // default
        assert!(!cfg.train.reset_heating_at_sparsify); // default
        assert_eq!(cfg.corpus_config().vocab, 16);
    }
}
