//! Jobs, datasets and workload generation.
//!
//! A dataset is modelled only by the token lengths of its items. Jobs consume
//! their dataset in order, one batch per iteration, wrapping around at the end
//! of an epoch when the iteration budget exceeds one pass over the data.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation time in normalized iteration-time units.
pub type ITime = f64;

/// Opaque job identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn new(id: impl Into<String>) -> Self {
        JobId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for JobId {
    fn from(s: &str) -> Self {
        JobId(s.to_string())
    }
}

/// One training sample, reduced to its token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataItem {
    pub length: u32,
}

impl DataItem {
    pub fn new(length: u32) -> Self {
        DataItem { length }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub items: Vec<DataItem>,
}

impl DatasetProfile {
    pub fn from_lengths(name: impl Into<String>, lengths: &[u32]) -> Self {
        DatasetProfile {
            name: name.into(),
            items: lengths.iter().copied().map(DataItem::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_length(&self) -> u32 {
        self.items.iter().map(|i| i.length).max().unwrap_or(0)
    }

    pub fn lengths(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.length).collect()
    }

    /// Copy of the dataset with items ordered by length.
    pub fn sorted(&self, descending: bool) -> Self {
        let mut items = self.items.clone();
        items.sort();
        if descending {
            items.reverse();
        }
        DatasetProfile {
            name: self.name.clone(),
            items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Config(format!("dataset `{}` is empty", self.name)));
        }
        if self.items.iter().any(|i| i.length == 0) {
            return Err(Error::Config(format!(
                "dataset `{}` has a zero-length item",
                self.name
            )));
        }
        Ok(())
    }
}

/// A LoRA fine-tuning job as submitted to the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: JobId,
    /// Integer weight, larger is more urgent.
    pub priority: u32,
    pub submit_time: ITime,
    pub dataset: DatasetProfile,
    pub batch_size: u32,
    pub lora_rank: u32,
    /// Iterations the job runs when never stopped early.
    pub true_iterations: u32,
    /// Scripted early-stop point, used when no loss/accuracy streams are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_iteration: Option<u32>,
    /// Static memory estimate in GB, used when no fitted memory model is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_gb: Option<f64>,
    /// Per-iteration training loss; `null` encodes a non-finite (NaN) loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_stream: Option<Vec<Option<f64>>>,
    /// Per-iteration validation accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_stream: Option<Vec<f64>>,
}

impl JobSpec {
    /// Minimal job with default rank and no early-stop information.
    pub fn new(
        id: impl Into<String>,
        priority: u32,
        submit_time: ITime,
        dataset: DatasetProfile,
        batch_size: u32,
        true_iterations: u32,
    ) -> Self {
        JobSpec {
            id: JobId::new(id),
            priority,
            submit_time,
            dataset,
            batch_size,
            lora_rank: 8,
            true_iterations,
            early_stop_iteration: None,
            memory_gb: None,
            loss_stream: None,
            accuracy_stream: None,
        }
    }

    pub fn with_early_stop(mut self, iteration: u32) -> Self {
        self.early_stop_iteration = Some(iteration);
        self
    }

    pub fn with_memory(mut self, gb: f64) -> Self {
        self.memory_gb = Some(gb);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("job `{}`: {msg}", self.id)));
        if self.priority == 0 {
            return bad("priority must be >= 1");
        }
        if !self.submit_time.is_finite() || self.submit_time < 0.0 {
            return bad("submit_time must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be >= 1");
        }
        if self.true_iterations == 0 {
            return bad("true_iterations must be >= 1");
        }
        if let Some(l) = self.early_stop_iteration {
            if l == 0 || l > self.true_iterations {
                return bad("early_stop_iteration must lie in [1, true_iterations]");
            }
        }
        if let Some(m) = self.memory_gb {
            if !m.is_finite() || m < 0.0 {
                return bad("memory_gb must be finite and >= 0");
            }
        }
        if let Some(acc) = &self.accuracy_stream {
            if acc.iter().any(|a| !a.is_finite()) {
                return bad("accuracy_stream values must be finite");
            }
        }
        self.dataset.validate()
    }
}

/// Validates every job and checks that ids are unique.
pub fn validate_jobs(jobs: &[JobSpec]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for job in jobs {
        job.validate()?;
        if !seen.insert(&job.id) {
            return Err(Error::Config(format!("duplicate job id `{}`", job.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Pending,
    Running,
    Stopped,
    Completed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Stopped | JobStatus::Completed)
    }
}

/// Runtime state of a job inside one simulation.
#[derive(Debug, Clone)]
pub struct JobState {
    spec: JobSpec,
    status: JobStatus,
    iterations_done: u32,
    cursor: usize,
    iteration_bound: u32,
    start_time: Option<ITime>,
    finish_time: Option<ITime>,
    items_committed: u64,
}

impl JobState {
    /// Fresh state for a job that will run to `true_iterations`.
    pub fn new(spec: JobSpec) -> Self {
        let bound = spec.true_iterations;
        Self::with_bound(spec, bound)
    }

    /// Fresh state whose run ends after `bound` iterations (an early-stop point).
    pub fn with_bound(spec: JobSpec, bound: u32) -> Self {
        let bound = bound.clamp(1, spec.true_iterations);
        JobState {
            spec,
            status: JobStatus::Pending,
            iterations_done: 0,
            cursor: 0,
            iteration_bound: bound,
            start_time: None,
            finish_time: None,
            items_committed: 0,
        }
    }

    pub fn spec(&self) -> &JobSpec {
        &self.spec
    }

    pub fn id(&self) -> &JobId {
        &self.spec.id
    }

    pub fn status(&self) -> JobStatus {
        self.status
    }

    pub fn iterations_done(&self) -> u32 {
        self.iterations_done
    }

    pub fn iteration_bound(&self) -> u32 {
        self.iteration_bound
    }

    pub fn remaining_iterations(&self) -> u32 {
        self.iteration_bound - self.iterations_done
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn start_time(&self) -> Option<ITime> {
        self.start_time
    }

    pub fn finish_time(&self) -> Option<ITime> {
        self.finish_time
    }

    /// Total number of data items consumed by committed batches.
    pub fn items_committed(&self) -> u64 {
        self.items_committed
    }

    fn batch_start(&self) -> usize {
        if self.cursor >= self.spec.dataset.len() {
            0
        } else {
            self.cursor
        }
    }

    /// Items of the next batch, without consuming them.
    ///
    /// Returns at most `batch_size` items from the cursor. A batch never spans
    /// the end of the dataset; the epoch wraps on the following peek.
    pub fn next_candidate_batch(&self) -> Result<&[DataItem]> {
        if self.status.is_finished() {
            return Err(Error::State(format!(
                "job `{}` is {:?}",
                self.spec.id, self.status
            )));
        }
        let start = self.batch_start();
        let end = (start + self.spec.batch_size as usize).min(self.spec.dataset.len());
        Ok(&self.spec.dataset.items[start..end])
    }

    pub fn next_batch_lengths(&self) -> Result<Vec<u32>> {
        Ok(self.next_candidate_batch()?.iter().map(|i| i.length).collect())
    }

    /// Consumes the peeked batch and counts one finished iteration.
    ///
    /// `start_time` is recorded the first time a job commits a batch.
    pub fn commit_batch(&mut self, iteration_start: ITime) -> Result<usize> {
        let n = self.next_candidate_batch()?.len();
        if self.iterations_done >= self.iteration_bound {
            return Err(Error::State(format!(
                "job `{}` has no iterations left",
                self.spec.id
            )));
        }
        self.cursor = self.batch_start() + n;
        self.iterations_done += 1;
        self.items_committed += n as u64;
        if self.start_time.is_none() {
            self.start_time = Some(iteration_start);
        }
        self.status = JobStatus::Running;
        Ok(n)
    }

    /// True once the job has executed all iterations it is going to run.
    pub fn reached_bound(&self) -> bool {
        self.iterations_done >= self.iteration_bound
    }

    /// Moves the job to a terminal status.
    pub fn finish(&mut self, status: JobStatus, time: ITime) -> Result<()> {
        if !status.is_finished() {
            return Err(Error::State(format!("{status:?} is not a terminal status")));
        }
        if self.status.is_finished() {
            return Err(Error::State(format!("job `{}` already finished", self.spec.id)));
        }
        if let Some(start) = self.start_time {
            if time < start {
                return Err(Error::State("finish precedes start".into()));
            }
        } else {
            self.start_time = Some(time);
        }
        self.status = status;
        self.finish_time = Some(time);
        Ok(())
    }
}

/// Sequence-length distribution used to synthesize datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LengthDistribution {
    Uniform {
        min: u32,
        max: u32,
    },
    NormalTruncated {
        mean: f64,
        std_dev: f64,
        min: u32,
        max: u32,
    },
    /// Length -> count. Sampling deals from shuffled copies of the histogram,
    /// so drawing exactly `total` items reproduces the histogram's multiset.
    EmpiricalHistogram {
        histogram: BTreeMap<u32, u32>,
    },
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            LengthDistribution::Uniform { min, max } => {
                if *min == 0 || max < min {
                    return Err(Error::Config(format!(
                        "uniform bounds must satisfy 1 <= min <= max, got [{min}, {max}]"
                    )));
                }
            }
            LengthDistribution::NormalTruncated {
                mean,
                std_dev,
                min,
                max,
            } => {
                if *min == 0 || max < min {
                    return Err(Error::Config(format!(
                        "normal bounds must satisfy 1 <= min <= max, got [{min}, {max}]"
                    )));
                }
                if !mean.is_finite() || !std_dev.is_finite() || *std_dev <= 0.0 {
                    return Err(Error::Config(
                        "normal distribution needs finite mean and std_dev > 0".into(),
                    ));
                }
            }
            LengthDistribution::EmpiricalHistogram { histogram } => {
                if histogram.values().all(|&c| c == 0) {
                    return Err(Error::Config("histogram has no mass".into()));
                }
                if histogram.contains_key(&0) {
                    return Err(Error::Config("histogram contains length 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Largest length the distribution can produce.
    pub fn max_length(&self) -> u32 {
        match self {
            LengthDistribution::Uniform { max, .. } | LengthDistribution::NormalTruncated { max, .. } => *max,
            LengthDistribution::EmpiricalHistogram { histogram } => histogram
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(&l, _)| l)
                .max()
                .unwrap_or(0),
        }
    }

    /// Draws `count` lengths.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<u32>> {
        self.validate()?;
        let out = match self {
            LengthDistribution::Uniform { min, max } => {
                (0..count).map(|_| rng.random_range(*min..=*max)).collect()
            }
            LengthDistribution::NormalTruncated {
                mean,
                std_dev,
                min,
                max,
            } => {
                let normal = Normal::new(*mean, *std_dev)
                    .map_err(|e| Error::Config(format!("normal distribution: {e}")))?;
                (0..count)
                    .map(|_| {
                        for _ in 0..1000 {
                            let x = normal.sample(rng).round();
                            if x >= *min as f64 && x <= *max as f64 {
                                return x as u32;
                            }
                        }
                        // Mass almost entirely outside the window.
                        (mean.round().max(*min as f64).min(*max as f64)) as u32
                    })
                    .collect()
            }
            LengthDistribution::EmpiricalHistogram { histogram } => {
                let deck: Vec<u32> = histogram
                    .iter()
                    .flat_map(|(&len, &c)| std::iter::repeat_n(len, c as usize))
                    .collect();
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let mut d = deck.clone();
                    d.shuffle(rng);
                    let take = (count - out.len()).min(d.len());
                    out.extend_from_slice(&d[..take]);
                }
                out
            }
        };
        Ok(out)
    }
}

/// Where a templated job's dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Fixed {
        #[serde(flatten)]
        profile: DatasetProfile,
    },
    Generated {
        name: String,
        num_items: usize,
        distribution: LengthDistribution,
    },
}

/// A job description whose dataset may still need to be synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTemplate {
    pub id: JobId,
    pub priority: u32,
    #[serde(default)]
    pub submit_time: ITime,
    pub dataset: DatasetSource,
    pub batch_size: u32,
    #[serde(default = "default_rank")]
    pub lora_rank: u32,
    pub true_iterations: u32,
    #[serde(default)]
    pub early_stop_iteration: Option<u32>,
    #[serde(default)]
    pub memory_gb: Option<f64>,
    #[serde(default)]
    pub loss_stream: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub accuracy_stream: Option<Vec<f64>>,
}

fn default_rank() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub seed: u64,
    pub jobs: Vec<JobTemplate>,
}

/// Resolves every template into a concrete job. Pure in `config`.
pub fn generate_workload(config: &WorkloadConfig) -> Result<Vec<JobSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut jobs = Vec::with_capacity(config.jobs.len());
    for t in &config.jobs {
        let dataset = match &t.dataset {
            DatasetSource::Fixed { profile } => profile.clone(),
            DatasetSource::Generated {
                name,
                num_items,
                distribution,
            } => {
                if *num_items == 0 {
                    return Err(Error::Config(format!("job `{}`: num_items must be >= 1", t.id)));
                }
                let lengths = distribution.sample(*num_items, &mut rng)?;
                DatasetProfile::from_lengths(name.clone(), &lengths)
            }
        };
        jobs.push(JobSpec {
            id: t.id.clone(),
            priority: t.priority,
            submit_time: t.submit_time,
            dataset,
            batch_size: t.batch_size,
            lora_rank: t.lora_rank,
            true_iterations: t.true_iterations,
            early_stop_iteration: t.early_stop_iteration,
            memory_gb: t.memory_gb,
            loss_stream: t.loss_stream.clone(),
            accuracy_stream: t.accuracy_stream.clone(),
        });
    }
    validate_jobs(&jobs)?;
    Ok(jobs)
}

/// Parameters for randomized heterogeneous workloads.
///
/// Each job draws its own mean sequence length, so datasets differ from job
/// to job the way domain-specific fine-tuning corpora do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorkload {
    pub num_jobs: usize,
    pub seed: u64,
    pub max_priority: u32,
    pub batch_sizes: Vec<u32>,
    pub items_per_job: usize,
    pub mean_length: (f64, f64),
    pub length_spread: f64,
    pub max_length: u32,
    pub iterations: (u32, u32),
    /// Probability that a job carries an early-stop point.
    pub early_stop_fraction: f64,
    /// Submit times are drawn uniformly from `[0, submit_window]`.
    pub submit_window: ITime,
    /// When set, every job gets this static memory estimate.
    pub memory_gb: Option<(f64, f64)>,
}

impl Default for SyntheticWorkload {
    fn default() -> Self {
        SyntheticWorkload {
            num_jobs: 20,
            seed: 0,
            max_priority: 4,
            batch_sizes: vec![2, 4, 8],
            items_per_job: 64,
            mean_length: (32.0, 480.0),
            length_spread: 0.25,
            max_length: 1024,
            iterations: (10, 60),
            early_stop_fraction: 0.4,
            submit_window: 0.0,
            memory_gb: None,
        }
    }
}

impl SyntheticWorkload {
    pub fn to_config(&self) -> Result<WorkloadConfig> {
        if self.num_jobs == 0 || self.items_per_job == 0 || self.batch_sizes.is_empty() {
            return Err(Error::Config(
                "synthetic workload needs jobs, items and batch sizes".into(),
            ));
        }
        if self.iterations.0 == 0 || self.iterations.1 < self.iterations.0 {
            return Err(Error::Config("iteration range must be 1 <= lo <= hi".into()));
        }
        if self.max_priority == 0 {
            return Err(Error::Config("max_priority must be >= 1".into()));
        }
        if !(self.mean_length.0 >= 1.0 && self.mean_length.1 >= self.mean_length.0) {
            return Err(Error::Config("mean_length range must be 1 <= lo <= hi".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x005E_ED0F_1095);
        let mut jobs = Vec::with_capacity(self.num_jobs);
        for i in 0..self.num_jobs {
            let mean = rng.random_range(self.mean_length.0..=self.mean_length.1);
            let iterations = rng.random_range(self.iterations.0..=self.iterations.1);
            let early_stop = if rng.random_bool(self.early_stop_fraction.clamp(0.0, 1.0)) {
                Some(rng.random_range(1..=iterations))
            } else {
                None
            };
            let submit_time = if self.submit_window > 0.0 {
                (rng.random_range(0.0..=self.submit_window) * 100.0).round() / 100.0
            } else {
                0.0
            };
            let memory_gb = self
                .memory_gb
                .map(|(lo, hi)| ((rng.random_range(lo..=hi)) * 100.0).round() / 100.0);
            jobs.push(JobTemplate {
                id: JobId(format!("job-{i:03}")),
                priority: rng.random_range(1..=self.max_priority),
                submit_time,
                dataset: DatasetSource::Generated {
                    name: format!("synthetic-{i:03}"),
                    num_items: self.items_per_job,
                    distribution: LengthDistribution::NormalTruncated {
                        mean,
                        std_dev: (mean * self.length_spread).max(1.0),
                        min: 1,
                        max: self.max_length,
                    },
                },
                batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
                lora_rank: [4, 8, 16][rng.random_range(0..3)],
                true_iterations: iterations,
                early_stop_iteration: early_stop,
                memory_gb,
                loss_stream: None,
                accuracy_stream: None,
            });
        }
        Ok(WorkloadConfig {
            seed: self.seed,
            jobs,
        })
    }

    pub fn generate(&self) -> Result<Vec<JobSpec>> {
        generate_workload(&self.to_config()?)
    }
}

/// Reads one job per line; blank lines are skipped.
pub fn read_jobs_jsonl<R: BufRead>(reader: R) -> Result<Vec<JobSpec>> {
    let mut jobs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let job: JobSpec = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("workload line {}: {e}", lineno + 1)))?;
        jobs.push(job);
    }
    validate_jobs(&jobs)?;
    Ok(jobs)
}

pub fn write_jobs_jsonl<W: Write>(mut writer: W, jobs: &[JobSpec]) -> Result<()> {
    for job in jobs {
        serde_json::to_writer(&mut writer, job)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
