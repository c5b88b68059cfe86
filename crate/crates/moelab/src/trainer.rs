//! Two-phase training loop with heating, validation, and usage tracking.
//!
//! A run trains a dense model for a configured number of updates, converts
//! it into a sparse model (experts cloned from the dense blocks, gates
//! randomly initialized), and continues sparse training for the remaining
//! epochs. At every epoch boundary the task sampling weights are
//! recomputed by rescaling the empirical data distribution with the
//! heating schedule's current temperature. Validation (greedy routing)
//! runs once per epoch; optional early stopping triggers on the overall
//! validation perplexity.
//!
//! Expert usage is recorded per (epoch, expert-bank position, task) as the
//! histogram of each token's preferred expert, i.e. the argmax of the
//! train-time affinity scores. The balanced assignment actually used for
//! computation fills every expert to capacity by construction, so its
//! per-batch histogram is a constant of the batch shape and carries no
//! information about specialization; the argmax preference over the same
//! scores is the view in which per-task expert affinities and their drift
//! are visible.
//!
//! Run artifacts are deterministic functions of (config, corpus):
//! `elapsed_ms` is written as 0 in metrics so files are byte-stable, and
//! measured wall time goes to the progress log instead.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Corpus};
use crate::nn::{self, Model, ModelConfig, MoeRouting, RoutingMode};
use crate::schedule::{self, HeatingConfig};
use crate::{Error, Result};

const SAMPLER_SEED_SALT: u64 = 0x53414d50; // sampler stream
const GATE_SEED_SALT: u64 = 0x47415445; // gate init at sparsification

/// Training section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_sequences: usize,
    /// Total epoch budget; also the heating schedule's maximum epoch count.
    pub epochs: u32,
    /// Length of the dense pre-training phase in optimizer steps. Exactly
    /// one of `dense_steps` / `dense_epochs` must be set; 0 disables the
    /// dense phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ppl: Option<f64>,
    pub seed: u64,
    /// Restart the heating clock at the first epoch boundary at or after
    /// the sparsification step.
    #[serde(default)]
    pub reset_heating_at_sparsify: bool,
}

/// Heating parameters; the epoch count comes from the train section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_s: f64,
    pub k: f64,
}

/// Data section of the run config; the vocabulary size comes from the
/// model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub num_tasks: usize,
    pub zipf_s: f64,
    pub base_size: usize,
    pub seq_len: usize,
    pub share_fraction: f64,
    pub seed: u64,
}

/// Full run configuration, the schema of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub schedule: ScheduleSection,
}

impl RunConfig {
    pub fn corpus_config(&self) -> data::CorpusConfig {
        data::CorpusConfig {
            vocab: self.model.vocab,
            num_tasks: self.data.num_tasks,
            zipf_s: self.data.zipf_s,
            base_size: self.data.base_size,
            seq_len: self.data.seq_len,
            share_fraction: self.data.share_fraction,
            seed: self.data.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus_config().validate()?;
        if !self.train.lr.is_finite() || self.train.lr < 0.0 {
            return Err(Error::Config("lr must be nonnegative".into()));
        }
        if self.train.batch_sequences == 0 {
            return Err(Error::Config("batch_sequences must be at least 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        match (self.train.dense_steps, self.train.dense_epochs) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of dense_steps / dense_epochs, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of dense_steps / dense_epochs is required (0 disables)".into(),
                ))
            }
            _ => {}
        }
        if let Some(t) = self.train.target_ppl {
            if !(t > 1.0) {
                return Err(Error::Config("target_ppl must be greater than 1".into()));
            }
        }
        self.heating()?;
        Ok(())
    }

    pub fn heating(&self) -> Result<HeatingConfig> {
        HeatingConfig::new(self.schedule.t_s, self.schedule.k, self.train.epochs)
    }

    /// Checks that a corpus was built for this config's data shape.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.config.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "corpus vocab {} does not match config vocab {}",
                corpus.config.vocab, self.model.vocab
            )));
        }
        if corpus.tasks.len() != self.data.num_tasks {
            return Err(Error::Config(format!(
                "corpus has {} tasks but config expects {}",
                corpus.tasks.len(),
                self.data.num_tasks
            )));
        }
        Ok(())
    }
}

/// Training phase tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dense,
    Sparse,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Sparse => "sparse",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Phase::Dense),
            "sparse" => Ok(Phase::Sparse),
            other => Err(Error::Data(format!("unknown phase {other:?}"))),
        }
    }
}

/// One per-epoch metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub phase: Phase,
    pub epoch: u32,
    /// Cumulative optimizer steps at the end of the epoch.
    pub step: u64,
    pub temperature: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub elapsed_ms: u64,
}

pub const METRICS_CSV_HEADER: &str =
    "phase,epoch,step,temperature,train_loss,valid_loss,valid_ppl,elapsed_ms";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.phase.as_str(),
            self.epoch,
            self.step,
            self.temperature,
            self.train_loss,
            self.valid_loss,
            self.valid_ppl,
            self.elapsed_ms
        )
    }
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == METRICS_CSV_HEADER => {}
        _ => return Err(Error::Data("bad metrics.csv header".into())),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Data(format!("bad metrics row: {line:?}")));
            }
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad float {s:?} in metrics row")))
            };
            Ok(MetricsRecord {
                phase: fields[0].parse()?,
                epoch: fields[1]
                    .parse()
                    .map_err(|_| Error::Data("bad epoch".into()))?,
                step: fields[2]
                    .parse()
                    .map_err(|_| Error::Data("bad step".into()))?,
                temperature: parse_f(fields[3])?,
                train_loss: parse_f(fields[4])?,
                valid_loss: parse_f(fields[5])?,
                valid_ppl: parse_f(fields[6])?,
                elapsed_ms: fields[7]
                    .parse()
                    .map_err(|_| Error::Data("bad elapsed_ms".into()))?,
            })
        })
        .collect()
}

/// Per-(epoch, expert-bank position, task) expert-preference counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertUsage {
    counts: BTreeMap<(u32, usize, usize), Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageRecord {
    pub epoch: u32,
    pub layer: usize,
    pub task: usize,
    pub counts: Vec<u64>,
}

impl ExpertUsage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates one batch's per-bank preferred-expert histograms.
    pub fn record(&mut self, routing: &[MoeRouting], task: usize, epoch: u32) {
        for r in routing {
            let hist = &r.preferred.loads;
            let entry = self
                .counts
                .entry((epoch, r.block, task))
                .or_insert_with(|| vec![0; hist.len()]);
            for (c, &h) in entry.iter_mut().zip(hist) {
                *c += h as u64;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, epoch: u32, layer: usize, task: usize) -> Option<&[u64]> {
        self.counts.get(&(epoch, layer, task)).map(Vec::as_slice)
    }

    /// Epochs that have any data for `task`, ascending.
    pub fn task_epochs(&self, task: usize) -> Vec<u32> {
        let mut epochs: Vec<u32> = self
            .counts
            .keys()
            .filter(|(_, _, t)| *t == task)
            .map(|(e, _, _)| *e)
            .collect();
        epochs.dedup();
        epochs
    }

    /// Counts for `task` at `epoch`, summed across expert banks.
    pub fn task_counts(&self, epoch: u32, task: usize) -> Option<Vec<u64>> {
        let mut total: Option<Vec<u64>> = None;
        for ((e, _, t), counts) in &self.counts {
            if *e == epoch && *t == task {
                let acc = total.get_or_insert_with(|| vec![0; counts.len()]);
                for (a, &c) in acc.iter_mut().zip(counts) {
                    *a += c;
                }
            }
        }
        total
    }

    pub fn to_records(&self) -> Vec<UsageRecord> {
        self.counts
            .iter()
            .map(|(&(epoch, layer, task), counts)| UsageRecord {
                epoch,
                layer,
                task,
                counts: counts.clone(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<UsageRecord>) -> Self {
        let mut usage = ExpertUsage::new();
        for r in records {
            let entry = usage
                .counts
                .entry((r.epoch, r.layer, r.task))
                .or_insert_with(|| vec![0; r.counts.len()]);
            for (c, &h) in entry.iter_mut().zip(&r.counts) {
                *c += h;
            }
        }
        usage
    }
}

/// Shannon entropy (nats) of a count vector, with `0 ln 0 = 0`.
pub fn usage_entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Domain("entropy of an all-zero count vector".into()));
    }
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum())
}

/// Total-variation distance between two normalized count vectors.
pub fn tv_distance(a: &[u64], b: &[u64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data("count vectors of different lengths".into()));
    }
    let (sa, sb) = (a.iter().sum::<u64>(), b.iter().sum::<u64>());
    if sa == 0 || sb == 0 {
        return Err(Error::Domain("drift of an all-zero count vector".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa as f64 - y as f64 / sb as f64).abs())
        .sum::<f64>()
        / 2.0)
}

/// Drift of one task's expert distribution at one bank between two epochs.
pub fn usage_drift(
    usage: &ExpertUsage,
    task: usize,
    layer: usize,
    e1: u32,
    e2: u32,
) -> Result<f64> {
    let a = usage
        .get(e1, layer, task)
        .ok_or_else(|| Error::Data(format!("no usage for task {task} layer {layer} epoch {e1}")))?;
    let b = usage
        .get(e2, layer, task)
        .ok_or_else(|| Error::Data(format!("no usage for task {task} layer {layer} epoch {e2}")))?;
    tv_distance(a, b)
}

/// Smallest cumulative step count whose record meets the target
/// perplexity; `None` when the series never reaches it.
pub fn steps_to_target(records: &[MetricsRecord], target_ppl: f64) -> Option<u64> {
    records
        .iter()
        .find(|r| r.valid_ppl <= target_ppl)
        .map(|r| r.step)
}

/// Validation result for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskValidation {
    pub task: usize,
    pub tokens: usize,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub accuracy: f64,
}

/// Validation over every task's held-out split, with token-weighted
/// overall means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_task: Vec<TaskValidation>,
    pub tokens: usize,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub accuracy: f64,
}

/// Mean token cross-entropy per task under eval-mode (greedy) routing.
pub fn validate(model: &Model, corpus: &Corpus) -> Result<ValidationReport> {
    let mut per_task = Vec::with_capacity(corpus.tasks.len());
    let mut loss_weighted = 0.0;
    let mut acc_weighted = 0.0;
    let mut total_tokens = 0usize;
    for task in &corpus.tasks {
        if task.valid.is_empty() {
            return Err(Error::Data(format!(
                "task {} has an empty validation split",
                task.spec.task_id
            )));
        }
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for ex in &task.valid {
            tokens.extend_from_slice(&ex.tokens);
            targets.extend_from_slice(&ex.targets);
        }
        let fwd = nn::forward(model, &tokens, task.spec.task_id, RoutingMode::Eval, None)?;
        let loss = nn::loss_only(
            model,
            &tokens,
            &targets,
            task.spec.task_id,
            RoutingMode::Eval,
            None,
        )?;
        let accuracy = nn::accuracy(&fwd.logits, &targets);
        loss_weighted += loss * tokens.len() as f64;
        acc_weighted += accuracy * tokens.len() as f64;
        total_tokens += tokens.len();
        per_task.push(TaskValidation {
            task: task.spec.task_id,
            tokens: tokens.len(),
            valid_loss: loss,
            valid_ppl: loss.exp(),
            accuracy,
        });
    }
    let valid_loss = loss_weighted / total_tokens as f64;
    Ok(ValidationReport {
        per_task,
        tokens: total_tokens,
        valid_loss,
        valid_ppl: valid_loss.exp(),
        accuracy: acc_weighted / total_tokens as f64,
    })
}

/// Serializable PRNG state (ChaCha8: 256-bit seed plus stream position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned snapshot at an epoch boundary; reloading reproduces the rest
/// of the run bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub epochs_done: u32,
    pub global_step: u64,
    pub model: Model,
    pub sampler_rng: RngState,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, ckpt)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    ckpt.config.validate()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after completing this epoch (checkpoint still written).
    pub stop_after_epoch: Option<u32>,
    /// Suppress the per-epoch progress log.
    pub quiet: bool,
}

/// Everything a run produces.
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRecord>,
    pub usage: ExpertUsage,
    pub final_validation: ValidationReport,
    pub checkpoint: Checkpoint,
    /// True when target_ppl stopped the run before the epoch budget.
    pub stopped_early: bool,
}

/// Steps per epoch: one pass worth of tokens at the configured batch size.
pub fn steps_per_epoch(cfg: &RunConfig, corpus: &Corpus) -> u64 {
    let train_tokens: usize = corpus
        .tasks
        .iter()
        .map(|t| t.train.len() * corpus.config.seq_len)
        .sum();
    let batch_tokens = cfg.train.batch_sequences * corpus.config.seq_len;
    ((train_tokens + batch_tokens - 1) / batch_tokens).max(1) as u64
}

fn dense_steps_target(cfg: &RunConfig, spe: u64) -> u64 {
    match (cfg.train.dense_steps, cfg.train.dense_epochs) {
        (Some(steps), None) => steps,
        (None, Some(epochs)) => u64::from(epochs) * spe,
        _ => unreachable!("validated: exactly one dense-phase length"),
    }
}

/// Heating clock for an epoch. With the reset flag, the clock restarts at
/// the first epoch boundary at or after the sparsification step.
fn heating_epoch(cfg: &RunConfig, epoch: u32, dense_target: u64, spe: u64) -> u32 {
    if cfg.train.reset_heating_at_sparsify && dense_target > 0 {
        let first_sparse_epoch = dense_target.div_ceil(spe);
        if u64::from(epoch) >= first_sparse_epoch {
            return epoch - first_sparse_epoch as u32;
        }
    }
    epoch
}

/// Runs (or resumes) training. The corpus must match the config shape.
pub fn run(
    cfg: &RunConfig,
    corpus: &Corpus,
    resume: Option<Checkpoint>,
    opts: &RunOptions,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    let heating = cfg.heating()?;
    let p = data::empirical_task_distribution(corpus)?;
    let spe = steps_per_epoch(cfg, corpus);
    let dense_target = dense_steps_target(cfg, spe);

    let (mut model, mut sampler_rng, start_epoch, mut global_step) = match resume {
        Some(ckpt) => {
            if ckpt.config != *cfg {
                return Err(Error::Config(
                    "checkpoint was produced by a different config".into(),
                ));
            }
            (
                ckpt.model,
                ckpt.sampler_rng.restore(),
                ckpt.epochs_done,
                ckpt.global_step,
            )
        }
        None => {
            let model = Model::Dense(nn::DenseModel::init(
                cfg.model,
                cfg.data.num_tasks,
                cfg.train.seed,
            )?);
            let rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ SAMPLER_SEED_SALT);
            (model, rng, 0, 0)
        }
    };

    let started = std::time::Instant::now();
    let mut metrics = Vec::new();
    let mut usage = ExpertUsage::new();
    let mut stopped_early = false;

    for epoch in start_epoch..cfg.train.epochs {
        let temperature = schedule::temperature_at(
            heating_epoch(cfg, epoch, dense_target, spe),
            &heating,
        );
        let weights = schedule::rescale(&p, temperature)?;

        let mut train_loss_sum = 0.0;
        for _ in 0..spe {
            if matches!(model, Model::Dense(_)) && global_step >= dense_target {
                let Model::Dense(dense) = &model else {
                    unreachable!()
                };
                model = Model::Sparse(nn::sparsify(
                    dense,
                    cfg.model.experts,
                    cfg.train.seed ^ GATE_SEED_SALT,
                    cfg.model.gate_scale,
                ));
            }
            let batch = data::sample_batch(corpus, &weights, cfg.train.batch_sequences, &mut sampler_rng)?;
            let (loss, grads, routing) = nn::loss_and_grad(
                &model,
                &batch.tokens,
                &batch.targets,
                batch.task_id,
                RoutingMode::Train,
            )?;
            for r in &routing {
                let max = r.assignment.loads.iter().max().copied().unwrap_or(0);
                let min = r.assignment.loads.iter().min().copied().unwrap_or(0);
                if max - min > 1 {
                    return Err(Error::Data(format!(
                        "unbalanced routing at block {}: {:?}",
                        r.block, r.assignment.loads
                    )));
                }
            }
            if !loss.is_finite() {
                return Err(Error::Domain(format!(
                    "training diverged (non-finite loss) at step {global_step}; lower lr"
                )));
            }
            usage.record(&routing, batch.task_id, epoch);
            nn::apply_update(&mut model, &grads, cfg.train.lr)?;
            train_loss_sum += loss;
            global_step += 1;
        }

        let report = validate(&model, corpus)?;
        let phase = match &model {
            Model::Dense(_) => Phase::Dense,
            Model::Sparse(_) => Phase::Sparse,
        };
        let record = MetricsRecord {
            phase,
            epoch,
            step: global_step,
            temperature,
            train_loss: train_loss_sum / spe as f64,
            valid_loss: report.valid_loss,
            valid_ppl: report.valid_ppl,
            elapsed_ms: 0,
        };
        if !opts.quiet {
            eprintln!(
                "[{}] epoch {:>3} step {:>7} T={:.4} train={:.4} valid_ppl={:.4} ({} ms)",
                phase.as_str(),
                epoch,
                global_step,
                temperature,
                record.train_loss,
                record.valid_ppl,
                started.elapsed().as_millis()
            );
        }
        metrics.push(record);

        if cfg
            .train
            .target_ppl
            .is_some_and(|target| report.valid_ppl <= target)
        {
            stopped_early = true;
            break;
        }
        if opts.stop_after_epoch == Some(epoch) {
            break;
        }
    }

    let final_validation = validate(&model, corpus)?;
    let epochs_done = metrics.last().map_or(start_epoch, |r| r.epoch + 1);
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epochs_done,
        global_step,
        model,
        sampler_rng: RngState::capture(&sampler_rng),
    };
    Ok(RunArtifacts {
        metrics,
        usage,
        final_validation,
        checkpoint,
        stopped_early,
    })
}
