//! Seeded synthetic task streams.
//!
//! Each task places its visual rows in its own low-dimensional subspace of the
//! raw visual space, draws instructions from its own token pool, and labels
//! every sample with a fixed per-task rule over (projected visual mean,
//! intent token). Identical configs give bit-identical streams.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, gaussian, gaussian_vector, orthonormal_columns, Mat, Vector};

/// Token id used for padding.
pub const PAD: usize = 0;

/// Per-entry noise is this fraction of the signal row norm (spread over all dims).
pub const NOISE_FRACTION: f64 = 0.05;
const ROW_JITTER: f64 = 0.3;
const OFF_TOPIC_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub samples_per_task: usize,
    /// Visual tokens per sample (`m`).
    pub visual_tokens: usize,
    /// Raw visual feature width.
    pub visual_dim: usize,
    /// Instruction sequence length including answer and padding slots.
    pub max_len: usize,
    pub vocab: usize,
    pub subspace_dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub answer_len: usize,
    /// Distinct answer tokens per task.
    pub answer_classes: usize,
    /// Distinct intent tokens per task.
    pub intents: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            samples_per_task: 4000,
            visual_tokens: 4,
            visual_dim: 16,
            max_len: 8,
            vocab: 32,
            subspace_dim: 2,
            separation: 10.0,
            seed: 0,
            answer_len: 1,
            answer_classes: 4,
            intents: 2,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_tasks == 0 {
            return fail("n_tasks must be at least 1".into());
        }
        if self.vocab < 2 {
            return fail(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.visual_dim {
            return fail(format!(
                "subspace_dim {} must lie in 1..={}",
                self.subspace_dim, self.visual_dim
            ));
        }
        if self.visual_tokens == 0 {
            return fail("visual_tokens must be at least 1".into());
        }
        if self.answer_len == 0 {
            return fail("answer_len must be at least 1".into());
        }
        if self.max_len < self.answer_len + 1 {
            return fail(format!(
                "max_len {} leaves no room for an instruction before {} answer tokens",
                self.max_len, self.answer_len
            ));
        }
        if self.samples_per_task < 2 {
            return fail("samples_per_task must be at least 2 (train and test)".into());
        }
        if self.answer_classes == 0 || self.intents == 0 {
            return fail("answer_classes and intents must be positive".into());
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return fail(format!("separation must be finite and ≥ 0, got {}", self.separation));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.samples_per_task * 4 / 5).clamp(1, self.samples_per_task - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `m × d_v` raw visual features.
    pub visual: Mat,
    /// `max_len` ids: instruction, then the answer, then padding.
    pub tokens: Vec<usize>,
    /// True exactly on instruction positions.
    pub mask: Vec<bool>,
    pub answer_start: usize,
    pub answer: Vec<usize>,
    /// Ground-truth task index (0-based). Only oracle routing and evaluation read it.
    pub task: usize,
}

impl Sample {
    /// Copy with the answer slots overwritten (used by greedy decoding).
    pub fn with_answer_slots(&self, answer: &[usize]) -> Vec<usize> {
        let mut t = self.tokens.clone();
        for (j, &a) in answer.iter().enumerate() {
            t[self.answer_start + j] = a;
        }
        t
    }
}

/// Hidden labelling rule of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRule {
    pub center: Vector,
    pub topic_tokens: Vec<usize>,
    pub intent_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    /// One `classes × (subspace_dim + intents)` readout per answer position.
    pub readouts: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// `d_v × subspace_dim`, orthonormal columns.
    pub basis: Mat,
    pub rule: TaskRule,
}

impl Task {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn topic_tokens(&self) -> &[usize] {
        &self.rule.topic_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub samples: Vec<&'a Sample>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn sample_batch<'a>(task: &'a Task, split: Split, indices: &[usize]) -> Result<Batch<'a>> {
    let data = task.split(split);
    let samples = indices
        .iter()
        .map(|&i| data.get(i).ok_or(Error::Bounds { index: i, len: data.len() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { samples })
}

pub fn generate_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Disjoint blocks of one random rotation when they fit, otherwise independent subspaces.
    let bases: Vec<Mat> = if cfg.n_tasks * cfg.subspace_dim <= cfg.visual_dim {
        let q = orthonormal_columns(cfg.visual_dim, cfg.visual_dim, &mut rng);
        (0..cfg.n_tasks)
            .map(|k| q.columns(k * cfg.subspace_dim, cfg.subspace_dim).clone_owned())
            .collect()
    } else {
        (0..cfg.n_tasks)
            .map(|_| orthonormal_columns(cfg.visual_dim, cfg.subspace_dim, &mut rng))
            .collect()
    };

    let mut pool: Vec<usize> = (1..cfg.vocab).collect();
    pool.shuffle(&mut rng);
    let pool_size = ((cfg.vocab - 1) / cfg.n_tasks).max(2).min(cfg.vocab - 1);

    let task_seeds: Vec<u64> = (0..cfg.n_tasks).map(|_| rng.gen()).collect();
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (k, basis) in bases.into_iter().enumerate() {
        let mut trng = ChaCha8Rng::seed_from_u64(task_seeds[k]);
        let topic_tokens: Vec<usize> =
            (0..pool_size).map(|i| pool[(k * pool_size + i) % pool.len()]).collect();
        let intent_tokens: Vec<usize> =
            topic_tokens.iter().copied().take(cfg.intents.min(topic_tokens.len())).collect();
        let classes = cfg.answer_classes.min(cfg.vocab - 1).max(1);
        let mut answer_pool: Vec<usize> = (1..cfg.vocab).collect();
        answer_pool.shuffle(&mut trng);
        let answer_tokens = answer_pool[..classes].to_vec();
        let center = Vector::from_element(
            cfg.subspace_dim,
            cfg.separation / (cfg.subspace_dim as f64).sqrt(),
        );
        let readouts = (0..cfg.answer_len)
            .map(|_| gaussian(classes, cfg.subspace_dim + intent_tokens.len(), 1.0, &mut trng))
            .collect();
        let rule = TaskRule { center, topic_tokens, intent_tokens, answer_tokens, readouts };

        let samples: Vec<Sample> = (0..cfg.samples_per_task)
            .map(|_| draw_sample(cfg, k, &basis, &rule, &mut trng))
            .collect();
        let n_train = cfg.train_count();
        let mut train = samples;
        let test = train.split_off(n_train);
        tasks.push(Task { id: k, train, test, basis, rule });
    }
    Ok(TaskStream { config: cfg.clone(), tasks })
}

fn draw_sample(cfg: &StreamConfig, task: usize, basis: &Mat, rule: &TaskRule, rng: &mut ChaCha8Rng) -> Sample {
    let sd = cfg.subspace_dim;
    let coeff = &rule.center + gaussian_vector(sd, 1.0, rng);
    let mut visual = Mat::zeros(cfg.visual_tokens, cfg.visual_dim);
    for j in 0..cfg.visual_tokens {
        let c = &coeff + gaussian_vector(sd, ROW_JITTER, rng);
        let signal = basis * c;
        let noise_std = NOISE_FRACTION * signal.norm() / (cfg.visual_dim as f64).sqrt();
        let noise = gaussian_vector(cfg.visual_dim, noise_std, rng);
        visual.set_row(j, &(signal + noise).transpose());
    }

    let max_instr = cfg.max_len - cfg.answer_len;
    let min_instr = max_instr.min(2);
    let n_instr = rng.gen_range(min_instr..=max_instr);
    let intent_idx = rng.gen_range(0..rule.intent_tokens.len());
    let mut tokens = vec![PAD; cfg.max_len];
    tokens[0] = rule.intent_tokens[intent_idx];
    for slot in tokens.iter_mut().take(n_instr).skip(1) {
        *slot = if rng.gen::<f64>() < OFF_TOPIC_RATE {
            rng.gen_range(1..cfg.vocab)
        } else {
            *rule.topic_tokens.choose(rng).expect("non-empty topic pool")
        };
    }

    // Label rule: centered projected visual mean plus intent one-hot, per-position readout.
    let mean_row = crate::linalg::row_mean(&visual);
    let projected = basis.transpose() * mean_row - &rule.center;
    let mut feature = Vector::zeros(sd + rule.intent_tokens.len());
    feature.rows_mut(0, sd).copy_from(&projected);
    feature[sd + intent_idx] = 1.0;
    let answer: Vec<usize> = rule
        .readouts
        .iter()
        .map(|r| {
            let scores = r * &feature;
            rule.answer_tokens[argmax(scores.iter().copied()).expect("non-empty readout")]
        })
        .collect();
    for (j, &a) in answer.iter().enumerate() {
        tokens[n_instr + j] = a;
    }
    let mask = (0..cfg.max_len).map(|i| i < n_instr).collect();
    Sample { visual, tokens, mask, answer_start: n_instr, answer, task }
}
