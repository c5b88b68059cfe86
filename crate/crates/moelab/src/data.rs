//! Deterministic synthetic multi-task corpus.
//!
//! Each task is a substitution cipher over the shared vocabulary: an
//! example is a sequence of uniformly drawn token ids whose targets are
//! the cipher applied position-wise. Task sizes follow a Zipf law (rank 1
//! is the largest), giving a skewed high/low-resource split, and tasks are
//! grouped into families: every non-parent task shares a configurable
//! fraction of its cipher with its group's high-resource parent, which
//! makes cross-task transfer structurally possible and tunable.
//!
//! Everything is derived from the seed with a fixed PRNG (ChaCha8), so a
//! corpus is bit-reproducible from its config.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schedule::TaskWeights;
use crate::{Error, Result};

/// One task: its cipher (a permutation of the vocabulary), its parent in
/// the family tree, and the enforced cipher-sharing fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub cipher: Vec<usize>,
    pub parent: Option<usize>,
    pub share_fraction: f64,
}

/// Corpus generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab: usize,
    pub num_tasks: usize,
    /// Zipf exponent `s`: the rank-`r` task holds `round(base_size * r^-s)`
    /// examples (minimum 1).
    pub zipf_s: f64,
    pub base_size: usize,
    pub seq_len: usize,
    pub share_fraction: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.base_size == 0 {
            return Err(Error::Config("base_size must be at least 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if !self.zipf_s.is_finite() || self.zipf_s < 0.0 {
            return Err(Error::Config("zipf_s must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.share_fraction) {
            return Err(Error::Config("share_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One example: uniformly drawn inputs and their cipher outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub tasks: Vec<TaskData>,
}

/// A sampled training batch: all sequences come from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task_id: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Per-task example counts under a Zipf law: rank `r` (1-indexed) gets
/// `round(base_size * r^-s)`, never below 1. Rank 1 is the largest task.
pub fn zipf_sizes(num_tasks: usize, s: f64, base_size: usize) -> Vec<usize> {
    (1..=num_tasks)
        .map(|r| {
            let size = (base_size as f64 * (r as f64).powf(-s)).round();
            (size as usize).max(1)
        })
        .collect()
}

/// Number of task groups: tasks are spread round-robin over
/// `ceil(num_tasks / 4)` families, so the lowest-id (largest) task of each
/// family is its parent.
pub fn num_groups(num_tasks: usize) -> usize {
    num_tasks.div_ceil(4)
}

/// Task ids counted as low-resource: the bottom half of the size ranking.
pub fn low_resource_tasks(num_tasks: usize) -> Vec<usize> {
    ((num_tasks + 1) / 2..num_tasks).collect()
}

fn derive_cipher(
    parent: &[usize],
    share_fraction: f64,
    vocab: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let shared = (share_fraction * vocab as f64).round() as usize;
    let mut positions: Vec<usize> = (0..vocab).collect();
    positions.shuffle(rng);
    let keep: Vec<usize> = positions[..shared].to_vec();
    let mut is_kept = vec![false; vocab];
    for &p in &keep {
        is_kept[p] = true;
    }
    // Free positions permute the parent's remaining outputs among
    // themselves, keeping the cipher a bijection.
    let free: Vec<usize> = (0..vocab).filter(|&p| !is_kept[p]).collect();
    let mut free_values: Vec<usize> = free.iter().map(|&p| parent[p]).collect();
    free_values.shuffle(rng);
    let mut cipher = vec![0usize; vocab];
    for &p in &keep {
        cipher[p] = parent[p];
    }
    for (&p, &v) in free.iter().zip(&free_values) {
        cipher[p] = v;
    }
    cipher
}

/// Generates the full corpus from the config: task specs (parents first
/// within each family), examples, and the train/validation split (a fixed
/// 10% of each task's examples, at least 1, taken from the tail).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes = zipf_sizes(cfg.num_tasks, cfg.zipf_s, cfg.base_size);
    let groups = num_groups(cfg.num_tasks);

    let mut specs: Vec<TaskSpec> = Vec::with_capacity(cfg.num_tasks);
    for task_id in 0..cfg.num_tasks {
        let spec = if task_id < groups {
            let mut cipher: Vec<usize> = (0..cfg.vocab).collect();
            cipher.shuffle(&mut rng);
            TaskSpec {
                task_id,
                cipher,
                parent: None,
                share_fraction: cfg.share_fraction,
            }
        } else {
            let parent_id = task_id % groups;
            let cipher = derive_cipher(
                &specs[parent_id].cipher,
                cfg.share_fraction,
                cfg.vocab,
                &mut rng,
            );
            TaskSpec {
                task_id,
                cipher,
                parent: Some(parent_id),
                share_fraction: cfg.share_fraction,
            }
        };
        specs.push(spec);
    }

    let tasks = specs
        .into_iter()
        .zip(&sizes)
        .map(|(spec, &size)| {
            let mut examples = Vec::with_capacity(size);
            for _ in 0..size {
                let tokens: Vec<usize> = (0..cfg.seq_len)
                    .map(|_| rng.random_range(0..cfg.vocab))
                    .collect();
                let targets = tokens.iter().map(|&t| spec.cipher[t]).collect();
                examples.push(Example { tokens, targets });
            }
            let n_valid = (size / 10).max(1);
            let valid = examples.split_off(size - n_valid);
            TaskData {
                spec,
                train: examples,
                valid,
            }
        })
        .collect();

    Ok(Corpus {
        config: cfg.clone(),
        tasks,
    })
}

/// The raw data distribution `p`: per-task training size over the total.
pub fn empirical_task_distribution(corpus: &Corpus) -> Result<TaskWeights> {
    let total: usize = corpus.tasks.iter().map(|t| t.train.len()).sum();
    if total == 0 {
        return Err(Error::Domain("corpus has no training examples".into()));
    }
    TaskWeights::new(
        corpus
            .tasks
            .iter()
            .map(|t| t.train.len() as f64 / total as f64)
            .collect(),
    )
}

/// Draws one batch: the task comes from one inverse-CDF draw over
/// `weights`, then `batch_sequences` examples are drawn uniformly with
/// replacement from that task's training split.
pub fn sample_batch(
    corpus: &Corpus,
    weights: &TaskWeights,
    batch_sequences: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if weights.len() != corpus.tasks.len() {
        return Err(Error::Data(format!(
            "weights cover {} tasks but corpus has {}",
            weights.len(),
            corpus.tasks.len()
        )));
    }
    let total: f64 = weights.as_slice().iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("degenerate all-zero sampling weights".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut task_id = weights.len() - 1;
    for (i, &w) in weights.as_slice().iter().enumerate() {
        acc += w;
        if u < acc {
            task_id = i;
            break;
        }
    }
    let task = &corpus.tasks[task_id];
    if task.train.is_empty() {
        return Err(Error::Data(format!(
            "task {task_id} has no training examples"
        )));
    }
    let mut tokens = Vec::with_capacity(batch_sequences * corpus.config.seq_len);
    let mut targets = Vec::with_capacity(batch_sequences * corpus.config.seq_len);
    for _ in 0..batch_sequences {
        let ex = &task.train[rng.random_range(0..task.train.len())];
        tokens.extend_from_slice(&ex.tokens);
        targets.extend_from_slice(&ex.targets);
    }
    Ok(Batch {
        task_id,
        tokens,
        targets,
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
    tasks: Vec<TaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    task: usize,
    tokens: Vec<usize>,
    targets: Vec<usize>,
    split: String,
}

/// Writes the corpus as line-delimited JSON: first the config echo plus
/// task specs, then one line per example.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header = CorpusHeader {
        config: corpus.config.clone(),
        tasks: corpus.tasks.iter().map(|t| t.spec.clone()).collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for task in &corpus.tasks {
        for (split, examples) in [("train", &task.train), ("valid", &task.valid)] {
            for ex in examples {
                let line = ExampleLine {
                    task: task.spec.task_id,
                    tokens: ex.tokens.clone(),
                    targets: ex.targets.clone(),
                    split: split.to_string(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data("empty corpus file".into()))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)?;
    header.config.validate()?;
    let mut tasks: Vec<TaskData> = header
        .tasks
        .into_iter()
        .map(|spec| TaskData {
            spec,
            train: Vec::new(),
            valid: Vec::new(),
        })
        .collect();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let ex: ExampleLine = serde_json::from_str(&line)?;
        let task = tasks
            .get_mut(ex.task)
            .ok_or_else(|| Error::Data(format!("example references unknown task {}", ex.task)))?;
        let example = Example {
            tokens: ex.tokens,
            targets: ex.targets,
        };
        match ex.split.as_str() {
            "train" => task.train.push(example),
            "valid" => task.valid.push(example),
            other => return Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
    Ok(Corpus {
        config: header.config,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            vocab: 16,
            num_tasks: 5,
            zipf_s: 1.0,
            base_size: 60,
            seq_len: 4,
            share_fraction: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn zipf_sizes_hand_evaluated() {
        assert_eq!(zipf_sizes(4, 1.0, 1200), vec![1200, 600, 400, 300]);
        assert_eq!(zipf_sizes(3, 0.0, 50), vec![50, 50, 50]);
        assert_eq!(zipf_sizes(1, 2.0, 9), vec![9]);
        // Minimum size is 1 even for steep tails.
        assert_eq!(zipf_sizes(4, 5.0, 2), vec![2, 1, 1, 1]);
    }

    #[test]
    fn ciphers_are_bijections_with_enforced_sharing() {
        let cfg = CorpusConfig {
            share_fraction: 0.5,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let enforced = (0.5 * cfg.vocab as f64).round() as usize;
        for task in &corpus.tasks {
            let mut seen = vec![false; cfg.vocab];
            for &c in &task.spec.cipher {
                assert!(!seen[c]);
                seen[c] = true;
            }
            if let Some(parent) = task.spec.parent {
                let parent_cipher = &corpus.tasks[parent].spec.cipher;
                let agree = task
                    .spec
                    .cipher
                    .iter()
                    .zip(parent_cipher)
                    .filter(|(a, b)| a == b)
                    .count();
                assert!(agree >= enforced, "agree {agree} < enforced {enforced}");
            }
        }
    }

    #[test]
    fn full_sharing_copies_parent_cipher() {
        let cfg = CorpusConfig {
            share_fraction: 1.0,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for task in &corpus.tasks {
            if let Some(parent) = task.spec.parent {
                assert_eq!(task.spec.cipher, corpus.tasks[parent].spec.cipher);
            }
        }
    }

    #[test]
    fn targets_match_cipher_everywhere() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for task in &corpus.tasks {
            for ex in task.train.iter().chain(&task.valid) {
                for (&t, &y) in ex.tokens.iter().zip(&ex.targets) {
                    assert_eq!(y, task.spec.cipher[t]);
                }
            }
        }
    }

    #[test]
    fn holdout_is_ten_percent_at_least_one() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let sizes = zipf_sizes(5, 1.0, 60); // [60, 30, 20, 15, 12]
        for (task, &size) in corpus.tasks.iter().zip(&sizes) {
            assert_eq!(task.valid.len(), (size / 10).max(1));
            assert_eq!(task.train.len() + task.valid.len(), size);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        assert_eq!(
            generate_corpus(&cfg).unwrap(),
            generate_corpus(&cfg).unwrap()
        );
        let other = CorpusConfig {
            seed: 8,
            ..small_config()
        };
        assert_ne!(
            generate_corpus(&cfg).unwrap(),
            generate_corpus(&other).unwrap()
        );
    }

    #[test]
    fn group_structure_round_robin() {
        let cfg = CorpusConfig {
            num_tasks: 10,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let groups = num_groups(10);
        assert_eq!(groups, 3);
        for task in &corpus.tasks {
            if task.spec.task_id < groups {
                assert_eq!(task.spec.parent, None);
            } else {
                assert_eq!(task.spec.parent, Some(task.spec.task_id % groups));
            }
        }
    }

    #[test]
    fn empirical_distribution_matches_train_sizes() {
        let cfg = CorpusConfig {
            num_tasks: 4,
            base_size: 1200,
            zipf_s: 1.0,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let p = empirical_task_distribution(&corpus).unwrap();
        let expect = [0.48, 0.24, 0.16, 0.12];
        for (got, want) in p.as_slice().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_task_distribution() {
        let cfg = CorpusConfig {
            num_tasks: 1,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let p = empirical_task_distribution(&corpus).unwrap();
        assert_eq!(p.as_slice(), &[1.0]);
    }

    #[test]
    fn degenerate_weights_pick_single_task() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let weights = TaskWeights::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let batch = sample_batch(&corpus, &weights, 2, &mut rng).unwrap();
            assert_eq!(batch.task_id, 0);
            assert_eq!(batch.tokens.len(), 2 * corpus.config.seq_len);
        }
    }

    #[test]
    fn uniform_weights_hit_each_task_within_three_sigma() {
        let cfg = CorpusConfig {
            num_tasks: 4,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let weights = TaskWeights::new(vec![0.25; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[sample_batch(&corpus, &weights, 1, &mut rng).unwrap().task_id] += 1;
        }
        let sigma = (0.25 * 0.75 / draws as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 3.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let p = empirical_task_distribution(&corpus).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_batch(&corpus, &p, 3, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn corpus_file_round_trip_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_config()).unwrap();
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        write_corpus(&corpus, &path_a).unwrap();
        write_corpus(&corpus, &path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
        let loaded = read_corpus(&path_a).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn low_resource_is_bottom_half() {
        assert_eq!(low_resource_tasks(12), vec![6, 7, 8, 9, 10, 11]);
        assert_eq!(low_resource_tasks(5), vec![3, 4]);
        assert_eq!(low_resource_tasks(1), Vec::<usize>::new());
    }
}
