//! Scheduling strategies deciding which jobs run together under a memory budget.
//!
//! * `M1` first-in first-out,
//! * `M2` priority (descending, earlier submission first),
//! * `M3` MinPad: the fewest padding tokens for the next fused batch,
//! * `M4` adaptive: a `top_k` window of the priority queue, ordered
//!   shortest-predicted-job first and admitted greedily while memory fits.
//!
//! Every strategy admits greedily in its own order: a job that does not fit
//! the remaining budget is skipped and later jobs are still considered.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::{priority_order, select_minpad_budgeted, BatchCandidate};
use crate::error::{Error, Result};
use crate::memory::{max_packing, MemoryModel, PackingMode, PackingQuery, EXACT_PACKING_LIMIT, MEM_EPS};
use crate::progress::{Predictor, StopEvent};
use crate::workload::{ITime, JobId, JobSpec, JobState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "M1", alias = "fifo")]
    Fifo,
    #[serde(rename = "M2", alias = "priority")]
    Priority,
    #[serde(rename = "M3", alias = "minpad")]
    MinPad,
    #[serde(rename = "M4", alias = "adaptive")]
    Adaptive,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Fifo,
        Strategy::Priority,
        Strategy::MinPad,
        Strategy::Adaptive,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Strategy::Fifo => "M1",
            Strategy::Priority => "M2",
            Strategy::MinPad => "M3",
            Strategy::Adaptive => "M4",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" | "fifo" => Ok(Strategy::Fifo),
            "m2" | "priority" => Ok(Strategy::Priority),
            "m3" | "minpad" => Ok(Strategy::MinPad),
            "m4" | "adaptive" => Ok(Strategy::Adaptive),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub strategy: Strategy,
    /// Size of the priority window considered by `M4`.
    pub top_k: usize,
    pub mem_budget_gb: f64,
    /// Upper bound on concurrently running jobs.
    pub max_concurrent: usize,
    /// `M4` only: choose the window subset that packs memory tightest
    /// instead of the greedy shortest-first admission.
    pub pack: bool,
    /// `M4` only: iterations a job runs before its prediction is trusted.
    /// Jobs still warming up are scheduled ahead of predicted ones, in priority order.
    pub warmup_iterations: u32,
    /// Relative coefficient change of the memory model that triggers a reschedule.
    pub refit_epsilon: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            strategy: Strategy::Adaptive,
            top_k: 8,
            mem_budget_gb: 48.0,
            max_concurrent: 8,
            pack: false,
            warmup_iterations: 0,
            refit_epsilon: 0.01,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be >= 1".into()));
        }
        if !self.mem_budget_gb.is_finite() || self.mem_budget_gb <= 0.0 {
            return Err(Error::Config("mem_budget_gb must be > 0".into()));
        }
        if self.refit_epsilon.is_nan() || self.refit_epsilon < 0.0 {
            return Err(Error::Config("refit_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// How per-job memory is estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum MemorySource {
    /// Each job's own `memory_gb`.
    Static,
    /// The fitted model evaluated at the job's batch size and longest sequence.
    Fitted { model: MemoryModel, floor_gb: f64 },
}

impl MemorySource {
    pub fn estimate(&self, spec: &JobSpec) -> Result<f64> {
        match self {
            MemorySource::Static => spec
                .memory_gb
                .ok_or_else(|| Error::Config(format!("job `{}` has no static memory_gb", spec.id))),
            MemorySource::Fitted { model, floor_gb } => Ok(model
                .estimate(spec.batch_size, spec.dataset.max_length(), *floor_gb)
                .gb),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    /// No queued job fits the budget.
    BudgetExhausted,
    /// At least one considered job was skipped for memory.
    MemoryLimited,
    /// The concurrency cap stopped admission.
    ConcurrencyLimited,
    /// `M4` left queued jobs outside its `top_k` window.
    WindowLimited,
    /// `M4` scheduled jobs still in the prediction warm-up.
    Warmup,
    /// `M4` used the tight-packing variant.
    Packed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedJob {
    pub job_id: JobId,
    pub memory_gb: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_remaining: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub time: ITime,
    pub strategy: Strategy,
    pub selected: Vec<SelectedJob>,
    pub estimated_memory_gb: f64,
    pub mem_budget_gb: f64,
    pub queue_len: usize,
    pub reasons: Vec<ReasonCode>,
}

impl ScheduleDecision {
    pub fn job_ids(&self) -> impl Iterator<Item = &JobId> {
        self.selected.iter().map(|s| &s.job_id)
    }
}

/// Things that can invalidate the current schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerEvent {
    Arrival(JobId),
    /// A job stopped early or completed; it leaves the queue.
    Finished(StopEvent),
    ModelUpdated {
        old: MemoryModel,
        new: MemoryModel,
    },
    /// A job finished its prediction warm-up.
    WarmupDone(JobId),
    IterationDone,
}

/// Stateful scheduler: owns the iteration predictor and its cached predictions.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    predictor: Predictor,
    predictions: BTreeMap<JobId, u32>,
    dirty: bool,
}

struct Entry<'a> {
    state: &'a JobState,
    memory: f64,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, predictor: Predictor) -> Result<Self> {
        config.validate()?;
        Ok(Scheduler {
            config,
            predictor,
            predictions: BTreeMap::new(),
            dirty: true,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Whether the next step must call [`Scheduler::schedule`] again.
    pub fn needs_reschedule(&self) -> bool {
        self.dirty
    }

    /// Records an event; returns true when it triggers a reschedule.
    pub fn on_event(&mut self, event: &SchedulerEvent) -> bool {
        let trigger = match event {
            SchedulerEvent::Arrival(_) | SchedulerEvent::WarmupDone(_) => true,
            SchedulerEvent::Finished(stop) => {
                self.predictions.remove(&stop.job_id);
                true
            }
            SchedulerEvent::ModelUpdated { old, new } => new.relative_change(old) > self.config.refit_epsilon,
            // MinPad reselects before every iteration.
            SchedulerEvent::IterationDone => self.config.strategy == Strategy::MinPad,
        };
        self.dirty |= trigger;
        trigger
    }

    /// Predicted iterations left for `state`, drawing a fresh prediction when
    /// the cached one has been overrun.
    fn predicted_remaining(&mut self, state: &JobState) -> u32 {
        let done = state.iterations_done();
        let truth = state.iteration_bound();
        let cached = self.predictions.get(state.id()).copied();
        let total = match cached {
            Some(p) if p > done => p,
            _ => {
                let p = self.predictor.predict_iterations(state.spec(), truth);
                let p = if cached.is_some() { p.max(done + 1) } else { p };
                self.predictions.insert(state.id().clone(), p);
                p
            }
        };
        total.saturating_sub(done)
    }

    /// Chooses the running set for the next interval.
    ///
    /// `queue` holds the unfinished jobs; jobs already running are
    /// re-evaluated like waiting ones.
    pub fn schedule(
        &mut self,
        time: ITime,
        queue: &[&JobState],
        memory: &MemorySource,
    ) -> Result<ScheduleDecision> {
        for s in queue {
            if s.status().is_finished() {
                return Err(Error::State(format!("job `{}` is finished", s.id())));
            }
        }
        let entries = queue
            .iter()
            .map(|&state| {
                Ok(Entry {
                    state,
                    memory: memory.estimate(state.spec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut reasons = Vec::new();
        let chosen: Vec<(usize, Option<u32>)> = match self.config.strategy {
            Strategy::Fifo => {
                let mut order: Vec<usize> = (0..entries.len()).collect();
                order.sort_by(|&a, &b| {
                    let (sa, sb) = (entries[a].state.spec(), entries[b].state.spec());
                    sa.submit_time.total_cmp(&sb.submit_time).then(a.cmp(&b))
                });
                self.admit(&entries, &order, &mut reasons)
                    .into_iter()
                    .map(|i| (i, None))
                    .collect()
            }
            Strategy::Priority => {
                let order = priority_sorted(&entries);
                self.admit(&entries, &order, &mut reasons)
                    .into_iter()
                    .map(|i| (i, None))
                    .collect()
            }
            Strategy::MinPad => self.minpad(&entries, &mut reasons)?,
            Strategy::Adaptive => self.adaptive(&entries, &mut reasons),
        };

        if chosen.is_empty() && !entries.is_empty() {
            reasons.push(ReasonCode::BudgetExhausted);
        }
        let selected: Vec<SelectedJob> = chosen
            .iter()
            .map(|&(i, predicted_remaining)| SelectedJob {
                job_id: entries[i].state.id().clone(),
                memory_gb: entries[i].memory,
                predicted_remaining,
            })
            .collect();
        let estimated_memory_gb = selected.iter().map(|s| s.memory_gb).sum();
        self.dirty = false;
        reasons.dedup();
        Ok(ScheduleDecision {
            time,
            strategy: self.config.strategy,
            selected,
            estimated_memory_gb,
            mem_budget_gb: self.config.mem_budget_gb,
            queue_len: entries.len(),
            reasons,
        })
    }

    /// Greedy admission in `order`, skipping jobs that do not fit.
    fn admit(&self, entries: &[Entry], order: &[usize], reasons: &mut Vec<ReasonCode>) -> Vec<usize> {
        let budget = self.config.mem_budget_gb;
        let mut used = 0.0;
        let mut out = Vec::new();
        for &i in order {
            if out.len() == self.config.max_concurrent {
                reasons.push(ReasonCode::ConcurrencyLimited);
                break;
            }
            if used + entries[i].memory <= budget + MEM_EPS {
                used += entries[i].memory;
                out.push(i);
            } else if !reasons.contains(&ReasonCode::MemoryLimited) {
                reasons.push(ReasonCode::MemoryLimited);
            }
        }
        out
    }

    fn minpad(&self, entries: &[Entry], reasons: &mut Vec<ReasonCode>) -> Result<Vec<(usize, Option<u32>)>> {
        let candidates = entries
            .iter()
            .map(|e| {
                let spec = e.state.spec();
                Ok(BatchCandidate::new(
                    spec.id.clone(),
                    spec.priority,
                    spec.submit_time,
                    e.state.next_batch_lengths()?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let memory: Vec<f64> = entries.iter().map(|e| e.memory).collect();
        let result = select_minpad_budgeted(
            &candidates,
            &memory,
            self.config.mem_budget_gb,
            self.config.max_concurrent,
        )?;
        if result.chosen.len() < entries.len().min(self.config.max_concurrent) {
            reasons.push(ReasonCode::MemoryLimited);
        } else if result.chosen.len() < entries.len() {
            reasons.push(ReasonCode::ConcurrencyLimited);
        }
        Ok(result
            .chosen
            .iter()
            .map(|id| {
                let i = entries
                    .iter()
                    .position(|e| e.state.id() == id)
                    .expect("chosen from entries");
                (i, None)
            })
            .collect())
    }

    fn adaptive(&mut self, entries: &[Entry], reasons: &mut Vec<ReasonCode>) -> Vec<(usize, Option<u32>)> {
        // Step 1: priority order, front window.
        let mut window = priority_sorted(entries);
        if window.len() > self.config.top_k {
            window.truncate(self.config.top_k);
            reasons.push(ReasonCode::WindowLimited);
        }
        // Steps 2-3: memory is already estimated; annotate with predicted remaining iterations.
        let warmup = self.config.warmup_iterations;
        let mut warming = Vec::new();
        let mut predicted = Vec::new();
        for (rank, &i) in window.iter().enumerate() {
            let state = entries[i].state;
            if state.iterations_done() < warmup {
                warming.push(i);
            } else {
                let rem = self.predicted_remaining(state);
                predicted.push((rem, rank, i));
            }
        }
        if !warming.is_empty() {
            reasons.push(ReasonCode::Warmup);
        }
        // Step 4: shortest job first; ties keep priority order.
        predicted.sort();
        let remaining: BTreeMap<usize, u32> = predicted.iter().map(|&(r, _, i)| (i, r)).collect();
        let order: Vec<usize> = warming
            .iter()
            .copied()
            .chain(predicted.iter().map(|&(_, _, i)| i))
            .collect();

        let admitted = if self.config.pack {
            reasons.push(ReasonCode::Packed);
            self.packed(entries, &order, reasons)
        } else {
            self.admit(entries, &order, reasons)
        };
        admitted
            .into_iter()
            .map(|i| (i, remaining.get(&i).copied()))
            .collect()
    }

    /// Tightest memory packing of the window, keeping the first `max_concurrent` in SJF order.
    fn packed(&self, entries: &[Entry], order: &[usize], reasons: &mut Vec<ReasonCode>) -> Vec<usize> {
        let estimates: Vec<f64> = order.iter().map(|&i| entries[i].memory).collect();
        let mode = if estimates.len() <= EXACT_PACKING_LIMIT {
            PackingMode::Exact
        } else {
            PackingMode::Greedy
        };
        let query = PackingQuery {
            estimates,
            budget: self.config.mem_budget_gb,
        };
        let packing = max_packing(&query, mode).expect("packing within limits");
        if packing.chosen.len() < order.len() {
            reasons.push(ReasonCode::MemoryLimited);
        }
        let mut out: Vec<usize> = packing.chosen.iter().map(|&p| order[p]).collect();
        if out.len() > self.config.max_concurrent {
            out.truncate(self.config.max_concurrent);
            reasons.push(ReasonCode::ConcurrencyLimited);
        }
        out
    }
}

fn priority_sorted(entries: &[Entry]) -> Vec<usize> {
    let cands: Vec<BatchCandidate> = entries
        .iter()
        .map(|e| {
            let s = e.state.spec();
            BatchCandidate::new(s.id.clone(), s.priority, s.submit_time, Vec::new())
        })
        .collect();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| priority_order(&cands[a], a, &cands[b], b));
    order
}
