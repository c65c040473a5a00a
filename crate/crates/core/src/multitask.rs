//! Multi-task SFT weighting: sequence loss, perplexity, learning progress,
//! clipped instance weights and difficulty-driven task weights.
//!
//! Token NLLs are in nats throughout.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: String,
    pub sample: String,
    /// Per-token NLL keyed by checkpoint tag.
    pub nll_by_checkpoint: BTreeMap<String, Vec<f64>>,
}

fn check_tokens(tokens: &[f64]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(bad) = tokens.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidNll(format!(
            "token NLL {bad} is not a finite non-negative value"
        )));
    }
    Ok(())
}

impl SampleRecord {
    pub fn new(task: impl Into<String>, sample: impl Into<String>) -> Self {
        SampleRecord {
            task: task.into(),
            sample: sample.into(),
            nll_by_checkpoint: BTreeMap::new(),
        }
    }

    /// Adds a trace; every trace of one sample must have the same length.
    pub fn add_trace(&mut self, tag: impl Into<String>, tokens: Vec<f64>) -> Result<()> {
        check_tokens(&tokens)?;
        let tag = tag.into();
        if let Some(existing) = self.nll_by_checkpoint.values().next() {
            if existing.len() != tokens.len() {
                return Err(Error::InvalidNll(format!(
                    "sample `{}`: trace `{tag}` has {} tokens, others have {}",
                    self.sample,
                    tokens.len(),
                    existing.len()
                )));
            }
        }
        if self.nll_by_checkpoint.insert(tag.clone(), tokens).is_some() {
            return Err(Error::InvalidNll(format!(
                "sample `{}` has two traces for checkpoint `{tag}`",
                self.sample
            )));
        }
        Ok(())
    }

    pub fn trace(&self, tag: &str) -> Result<&[f64]> {
        self.nll_by_checkpoint
            .get(tag)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCheckpoint(tag.to_string()))
    }
}

pub fn sequence_nll(tokens: &[f64]) -> Result<f64> {
    check_tokens(tokens)?;
    Ok(tokens.iter().sum())
}

pub fn perplexity(tokens: &[f64]) -> Result<f64> {
    let total = sequence_nll(tokens)?;
    Ok((total / tokens.len() as f64).exp())
}

/// Perplexity drop between two checkpoints; positive means improvement.
pub fn progress(sample: &SampleRecord, prev_tag: &str, curr_tag: &str) -> Result<f64> {
    let prev = perplexity(sample.trace(prev_tag)?)?;
    let curr = perplexity(sample.trace(curr_tag)?)?;
    Ok(prev - curr)
}

/// Perplexity drop estimated from pooled mini-batches: every sample in a
/// batch gets the difference of the batch's token-pooled perplexities.
/// Batches are consecutive chunks of `samples`.
pub fn progress_minibatch(
    samples: &[SampleRecord],
    prev_tag: &str,
    curr_tag: &str,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig(
            "mini-batch size must be positive".into(),
        ));
    }
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(batch_size) {
        let pooled = |tag: &str| -> Result<f64> {
            let mut tokens = Vec::new();
            for s in batch {
                tokens.extend_from_slice(s.trace(tag)?);
            }
            perplexity(&tokens)
        };
        let delta = pooled(prev_tag)? - pooled(curr_tag)?;
        out.extend(std::iter::repeat_n(delta, batch.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub beta: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub alpha: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            beta: 1.0,
            w_min: 0.1,
            w_max: 10.0,
            alpha: 1.0,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.w_min > 0.0
            && self.w_max >= self.w_min
            && self.alpha >= 1.0
            && [self.beta, self.w_min, self.w_max, self.alpha]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "need beta > 0, 0 < w_min <= w_max, alpha >= 1; got {self:?}"
            )))
        }
    }
}

/// `clip(exp(-beta * delta), w_min, w_max)`.
pub fn instance_weight(delta: f64, cfg: &WeightingConfig) -> f64 {
    (-cfg.beta * delta).exp().max(cfg.w_min).min(cfg.w_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task: String,
    pub metric: f64,
    pub difficulty: f64,
    pub weight: f64,
}

/// Task weights proportional to `(1 - metric)^alpha`, uniform when every
/// task is already perfect.
pub fn task_states(metrics: &BTreeMap<String, f64>, alpha: f64) -> Result<Vec<TaskState>> {
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no tasks".into()));
    }
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be >= 1, got {alpha}"
        )));
    }
    for (task, &m) in metrics {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidMetric {
                task: task.clone(),
                value: m,
            });
        }
    }
    let powered: Vec<f64> = metrics.values().map(|m| (1.0 - m).powf(alpha)).collect();
    let total: f64 = powered.iter().sum();
    let uniform = 1.0 / metrics.len() as f64;
    Ok(metrics
        .iter()
        .zip(&powered)
        .map(|((task, &m), &p)| TaskState {
            task: task.clone(),
            metric: m,
            difficulty: 1.0 - m,
            weight: if total > 0.0 { p / total } else { uniform },
        })
        .collect())
}

pub fn task_weights(metrics: &BTreeMap<String, f64>, alpha: f64) -> Result<BTreeMap<String, f64>> {
    Ok(task_states(metrics, alpha)?
        .into_iter()
        .map(|s| (s.task, s.weight))
        .collect())
}

/// How task weights enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskWeightRole {
    /// Scale each task's loss term.
    #[default]
    LossMultiplier,
    /// Draw tasks with probability equal to their weight; losses unscaled.
    Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub task: String,
    pub weight: f64,
    pub loss: f64,
}

/// Weighted objective: for each task, the batch mean of `w * loss` scaled by
/// the task weight, summed over tasks.
pub fn weighted_loss(batch: &[BatchItem], lambdas: &BTreeMap<String, f64>) -> Result<f64> {
    let mut per_task: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for item in batch {
        if !lambdas.contains_key(&item.task) {
            return Err(Error::UnknownTask(item.task.clone()));
        }
        if !item.weight.is_finite() || !item.loss.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite weight or loss for task `{}`",
                item.task
            )));
        }
        let e = per_task.entry(&item.task).or_default();
        e.0 += item.weight * item.loss;
        e.1 += 1;
    }
    Ok(per_task
        .into_iter()
        .map(|(task, (sum, n))| lambdas[task] * sum / n as f64)
        .sum())
}

/// Loss multipliers for the given role: the task weights themselves, or all
/// ones when the weights drive sampling instead.
pub fn loss_multipliers(
    lambdas: &BTreeMap<String, f64>,
    role: TaskWeightRole,
) -> BTreeMap<String, f64> {
    match role {
        TaskWeightRole::LossMultiplier => lambdas.clone(),
        TaskWeightRole::Sampling => lambdas.keys().map(|k| (k.clone(), 1.0)).collect(),
    }
}

pub fn sample_task<'a, R: Rng + ?Sized>(
    lambdas: &'a BTreeMap<String, f64>,
    rng: &mut R,
) -> Result<&'a str> {
    let total: f64 = lambdas.values().sum();
    if lambdas.is_empty()
        || (total - 1.0).abs() > 1e-9
        || lambdas.values().any(|v| *v < 0.0 || !v.is_finite())
    {
        return Err(Error::InvalidWeights(format!(
            "weights must be non-negative and sum to 1, got sum {total}"
        )));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (task, &w) in lambdas {
        if w > 0.0 {
            last = Some(task.as_str());
        }
        acc += w;
        if u < acc {
            return Ok(task);
        }
    }
    // u landed in the rounding slack above the final cumulative sum
    Ok(last.expect("a positive weight exists when the sum is 1"))
}

/// One line of an NLL trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub task: String,
    pub sample: String,
    pub ckpt: String,
    pub nll: Vec<f64>,
}

/// Reads line-delimited trace records into samples, in first-seen order.
pub fn read_traces(reader: impl BufRead) -> Result<Vec<SampleRecord>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut samples: BTreeMap<(String, String), SampleRecord> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?;
        let key = (rec.task.clone(), rec.sample.clone());
        let entry = samples.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            SampleRecord::new(rec.task.clone(), rec.sample.clone())
        });
        entry.add_trace(rec.ckpt, rec.nll)?;
    }
    Ok(order
        .into_iter()
        .map(|k| samples.remove(&k).expect("recorded key"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub task: String,
    pub sample: String,
    pub delta: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub config: WeightingConfig,
    pub role: TaskWeightRole,
    pub samples: Vec<SampleWeight>,
    pub tasks: Vec<TaskState>,
}

/// Instance weights for every sample plus task weights from `metrics`.
/// Tasks seen in the traces but missing from `metrics` are rejected; with no
/// metrics at all every task is treated as equally difficult.
pub fn schedule(
    samples: &[SampleRecord],
    prev_tag: &str,
    curr_tag: &str,
    metrics: Option<&BTreeMap<String, f64>>,
    cfg: &WeightingConfig,
    role: TaskWeightRole,
    minibatch: Option<usize>,
) -> Result<ScheduleReport> {
    cfg.validate()?;
    let deltas = match minibatch {
        Some(size) => progress_minibatch(samples, prev_tag, curr_tag, size)?,
        None => samples
            .iter()
            .map(|s| progress(s, prev_tag, curr_tag))
            .collect::<Result<_>>()?,
    };
    let weights = samples
        .iter()
        .zip(deltas)
        .map(|(s, delta)| SampleWeight {
            task: s.task.clone(),
            sample: s.sample.clone(),
            delta,
            weight: instance_weight(delta, cfg),
        })
        .collect();

    let metrics = match metrics {
        Some(m) => {
            if let Some(s) = samples.iter().find(|s| !m.contains_key(&s.task)) {
                return Err(Error::UnknownTask(s.task.clone()));
            }
            m.clone()
        }
        None => samples.iter().map(|s| (s.task.clone(), 0.0)).collect(),
    };
    let tasks = if metrics.is_empty() {
        Vec::new()
    } else {
        task_states(&metrics, cfg.alpha)?
    };
    Ok(ScheduleReport {
        config: *cfg,
        role,
        samples: weights,
        tasks,
    })
}
