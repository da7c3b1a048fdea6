//! Early stopping and its effect on throughput.
//!
//! Stop events come from scripted per-iteration loss and accuracy streams.
//! The iteration-count predictor is a synthetic oracle: with probability
//! `accuracy` it returns the true stop point, otherwise a uniformly drawn
//! wrong value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{JobId, JobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCause {
    #[serde(rename = "NaNLoss")]
    NanLoss,
    AccuracyDecline,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopEvent {
    pub job_id: JobId,
    /// 1-based iteration after which the job stops.
    pub iteration: u32,
    pub cause: StopCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopPolicy {
    /// Consecutive non-improving accuracy evaluations tolerated before stopping.
    pub patience: u32,
}

impl Default for StopPolicy {
    fn default() -> Self {
        StopPolicy { patience: 3 }
    }
}

/// First iteration whose loss is missing or non-finite.
pub fn first_nan_loss(losses: &[Option<f64>]) -> Option<u32> {
    losses
        .iter()
        .position(|l| !l.is_some_and(f64::is_finite))
        .map(|i| i as u32 + 1)
}

/// Iteration at which `patience` consecutive evaluations failed to beat the best so far.
pub fn accuracy_decline(accuracy: &[f64], patience: u32) -> Option<u32> {
    let patience = patience.max(1);
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for (i, &a) in accuracy.iter().enumerate() {
        if a > best {
            best = a;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                return Some(i as u32 + 1);
            }
        }
    }
    None
}

/// Earliest stop signalled by either stream. A NaN wins a tie.
pub fn detect_stop(
    job_id: &JobId,
    losses: &[Option<f64>],
    accuracy: &[f64],
    policy: &StopPolicy,
) -> Option<StopEvent> {
    let nan = first_nan_loss(losses).map(|i| (i, StopCause::NanLoss));
    let decline = accuracy_decline(accuracy, policy.patience).map(|i| (i, StopCause::AccuracyDecline));
    [nan, decline]
        .into_iter()
        .flatten()
        .min_by_key(|(i, _)| *i)
        .map(|(iteration, cause)| StopEvent {
            job_id: job_id.clone(),
            iteration,
            cause,
        })
}

/// Where a job stops early, if anywhere.
///
/// Streams are read only up to `true_iterations`. A bare
/// `early_stop_iteration` counts as a validation-driven stop.
pub fn resolve_stop(spec: &JobSpec, policy: &StopPolicy) -> Option<StopEvent> {
    let cap = spec.true_iterations as usize;
    let losses = spec.loss_stream.as_deref().unwrap_or(&[]);
    let accuracy = spec.accuracy_stream.as_deref().unwrap_or(&[]);
    let streamed = detect_stop(
        &spec.id,
        &losses[..losses.len().min(cap)],
        &accuracy[..accuracy.len().min(cap)],
        policy,
    );
    let scripted = spec.early_stop_iteration.map(|iteration| StopEvent {
        job_id: spec.id.clone(),
        iteration,
        cause: StopCause::AccuracyDecline,
    });
    match (streamed, scripted) {
        (Some(a), Some(b)) => Some(if b.iteration < a.iteration { b } else { a }),
        (a, b) => a.or(b),
    }
}

/// Iterations a job actually runs: its stop point when early stopping is on, else all of them.
pub fn effective_iterations(spec: &JobSpec, policy: &StopPolicy, early_stopping: bool) -> u32 {
    if early_stopping {
        resolve_stop(spec, policy)
            .map(|e| e.iteration)
            .unwrap_or(spec.true_iterations)
    } else {
        spec.true_iterations
    }
}

/// Seeded early-stopping predictor with hit probability `accuracy`.
#[derive(Debug, Clone)]
pub struct Predictor {
    accuracy: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Predictor {
    pub fn new(accuracy: f64, seed: u64) -> Result<Self> {
        if !(accuracy > 0.0 && accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "predictor accuracy must lie in (0, 1], got {accuracy}"
            )));
        }
        Ok(Predictor {
            accuracy,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Predicted total iterations for a job whose true count is `truth`.
    ///
    /// Misses are uniform over `[1, true_iterations]` without `truth`.
    pub fn predict_iterations(&mut self, job: &JobSpec, truth: u32) -> u32 {
        let upper = job.true_iterations.max(truth);
        let hit = self.rng.random_bool(self.accuracy);
        if hit || upper <= 1 {
            return truth;
        }
        let draw = self.rng.random_range(1..upper);
        if draw >= truth {
            draw + 1
        } else {
            draw
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputScenario {
    /// Concurrent job slots.
    pub k: usize,
    /// Iterations each of the `N` candidate jobs actually runs.
    pub iterations: Vec<u32>,
    pub accuracy: f64,
}

impl ThroughputScenario {
    pub fn new(k: usize, iterations: Vec<u32>, accuracy: f64) -> Result<Self> {
        let s = ThroughputScenario {
            k,
            iterations,
            accuracy,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.iterations.len() < self.k {
            return Err(Error::Usage(format!(
                "need N >= k >= 1, got N={} k={}",
                self.iterations.len(),
                self.k
            )));
        }
        if self.iterations.contains(&0) {
            return Err(Error::Usage("iteration counts must be >= 1".into()));
        }
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(Error::Usage("accuracy must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.iterations.len()
    }

    fn total(&self) -> f64 {
        self.iterations.iter().map(|&l| l as f64).sum()
    }

    fn top_k_sum(&self) -> f64 {
        let mut v = self.iterations.clone();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v[..self.k].iter().map(|&l| l as f64).sum()
    }
}

/// Jobs per iteration time when scheduling with predictions.
pub fn throughput_with_prediction(s: &ThroughputScenario) -> Result<f64> {
    s.validate()?;
    Ok(s.accuracy * s.k as f64 * s.n() as f64 / s.total())
}

/// Worst case: the `k` longest jobs dominate.
pub fn throughput_worst(s: &ThroughputScenario) -> Result<f64> {
    s.validate()?;
    Ok(s.n() as f64 / s.top_k_sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputGain {
    pub t_e: f64,
    pub t_w: f64,
    /// Mean of the predicted and worst-case throughput.
    pub t_a: f64,
    pub tau: f64,
    /// `(tau - 1) / (tau + 1)`.
    pub eta: f64,
    /// `(t_e - t_a) / t_a`, computed from the throughputs.
    pub eta_direct: f64,
}

/// Relative throughput improvement from prediction-aware scheduling.
pub fn throughput_gain(s: &ThroughputScenario) -> Result<ThroughputGain> {
    let t_e = throughput_with_prediction(s)?;
    let t_w = throughput_worst(s)?;
    let t_a = (t_e + t_w) / 2.0;
    let tau = s.accuracy * s.k as f64 * s.top_k_sum() / s.total();
    let eta = (tau - 1.0) / (tau + 1.0);
    let eta_direct = (t_e - t_a) / t_a;
    debug_assert!((eta - eta_direct).abs() <= 1e-12);
    Ok(ThroughputGain {
        t_e,
        t_w,
        t_a,
        tau,
        eta,
        eta_direct,
    })
}
