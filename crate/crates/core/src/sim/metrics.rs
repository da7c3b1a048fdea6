//! Metrics computed purely from a [`SimTrace`].

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::progress::StopCause;
use crate::sim::trace::{SimTrace, TraceEvent};
use crate::workload::{ITime, JobId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobOutcome {
    Completed,
    Stopped,
    Rejected,
    Unfinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job: JobId,
    pub priority: u32,
    pub submit_time: ITime,
    pub start_time: Option<ITime>,
    pub finish_time: Option<ITime>,
    pub iterations: u32,
    pub outcome: JobOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_cause: Option<StopCause>,
    /// Turnaround: finish minus submit.
    pub turnaround: Option<ITime>,
    /// Waiting: first start minus submit.
    pub waiting: Option<ITime>,
    /// Turnaround weighted by priority.
    pub value_turnaround: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jobs_total: usize,
    pub jobs_finished: usize,
    pub jobs_stopped_early: usize,
    pub jobs_rejected: usize,
    pub mean_turnaround: f64,
    pub mean_waiting: f64,
    pub mean_value_turnaround: f64,
    /// Span from the first submission to the last event.
    pub duration: ITime,
    pub makespan: ITime,
    pub busy_time: ITime,
    pub utilization: f64,
    pub total_iterations: u64,
    pub total_tokens: u64,
    pub padding_tokens: u64,
    pub padding_ratio: f64,
    /// All processed tokens per time unit, padding included.
    pub total_throughput: f64,
    /// Real tokens per time unit.
    pub effective_throughput: f64,
    pub non_effective_throughput: f64,
    /// Finished jobs per time unit.
    pub job_throughput: f64,
    pub peak_memory_gb: f64,
    pub mean_memory_gb: f64,
    /// Mean estimated memory over the budget.
    pub memory_occupancy: f64,
    pub peak_actual_memory_gb: f64,
    /// Iterations whose actual footprint exceeded the budget.
    pub over_budget_iterations: u64,
    pub mem_budget_gb: f64,
    pub partial: bool,
    pub empty: bool,
    pub sorted_batches: bool,
    pub jobs: Vec<JobMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn compute_metrics(trace: &SimTrace) -> MetricsReport {
    let mut jobs: BTreeMap<JobId, JobMetrics> = BTreeMap::new();
    let mut order: Vec<JobId> = Vec::new();
    let mut r = MetricsReport {
        mem_budget_gb: trace.mem_budget_gb,
        partial: trace.truncated,
        sorted_batches: trace.sorted_batches.is_some(),
        ..Default::default()
    };
    let mut mem_area = 0.0;

    let blank = |job: &JobId, priority, submit_time, outcome| JobMetrics {
        job: job.clone(),
        priority,
        submit_time,
        start_time: None,
        finish_time: None,
        iterations: 0,
        outcome,
        stop_cause: None,
        turnaround: None,
        waiting: None,
        value_turnaround: None,
    };

    for e in &trace.events {
        match e {
            TraceEvent::JobSubmitted {
                job,
                submit_time,
                priority,
                ..
            } => {
                order.push(job.clone());
                jobs.insert(
                    job.clone(),
                    blank(job, *priority, *submit_time, JobOutcome::Unfinished),
                );
            }
            TraceEvent::JobRejected { job, .. } => {
                if let Some(j) = jobs.get_mut(job) {
                    j.outcome = JobOutcome::Rejected;
                } else {
                    order.push(job.clone());
                    jobs.insert(job.clone(), blank(job, 0, e.time(), JobOutcome::Rejected));
                }
            }
            TraceEvent::JobStarted { time, job } => {
                if let Some(j) = jobs.get_mut(job) {
                    j.start_time.get_or_insert(*time);
                }
            }
            TraceEvent::IterationDone {
                start,
                time,
                jobs: ran,
                total_tokens,
                padding_tokens,
            } => {
                r.busy_time += time - start;
                r.total_tokens += total_tokens;
                r.padding_tokens += padding_tokens;
                for id in ran {
                    if let Some(j) = jobs.get_mut(id) {
                        j.iterations += 1;
                        j.start_time.get_or_insert(*start);
                    }
                }
            }
            TraceEvent::MemorySample {
                interval,
                estimated_gb,
                actual_gb,
                ..
            } => {
                r.peak_memory_gb = r.peak_memory_gb.max(*estimated_gb);
                r.peak_actual_memory_gb = r.peak_actual_memory_gb.max(*actual_gb);
                mem_area += estimated_gb * interval;
                if *actual_gb > trace.mem_budget_gb + crate::memory::MEM_EPS {
                    r.over_budget_iterations += 1;
                }
            }
            TraceEvent::Stopped { time, job, cause, .. } => {
                if let Some(j) = jobs.get_mut(job) {
                    j.finish_time = Some(*time);
                    j.outcome = JobOutcome::Stopped;
                    j.stop_cause = Some(*cause);
                }
            }
            TraceEvent::Completed { time, job, .. } => {
                if let Some(j) = jobs.get_mut(job) {
                    j.finish_time = Some(*time);
                    j.outcome = JobOutcome::Completed;
                }
            }
            TraceEvent::Warmup { .. }
            | TraceEvent::ModelRefit { .. }
            | TraceEvent::Scheduled { .. }
            | TraceEvent::Truncated { .. } => {}
        }
    }

    for j in jobs.values_mut() {
        if let Some(f) = j.finish_time {
            let tt = f - j.submit_time;
            j.turnaround = Some(tt);
            j.value_turnaround = Some(tt * j.priority as f64);
        }
        if let Some(s) = j.start_time {
            j.waiting = Some(s - j.submit_time);
        }
    }

    r.jobs = order.iter().filter_map(|id| jobs.remove(id)).collect();
    r.jobs_total = r.jobs.len();
    r.empty = r.jobs.is_empty() && r.total_tokens == 0;
    if r.empty {
        return r;
    }
    let finished: Vec<&JobMetrics> = r.jobs.iter().filter(|j| j.finish_time.is_some()).collect();
    r.jobs_finished = finished.len();
    r.jobs_stopped_early = r.jobs.iter().filter(|j| j.outcome == JobOutcome::Stopped).count();
    r.jobs_rejected = r
        .jobs
        .iter()
        .filter(|j| j.outcome == JobOutcome::Rejected)
        .count();
    r.mean_turnaround = mean(finished.iter().filter_map(|j| j.turnaround));
    r.mean_waiting = mean(finished.iter().filter_map(|j| j.waiting));
    r.mean_value_turnaround = mean(finished.iter().filter_map(|j| j.value_turnaround));
    r.total_iterations = r.jobs.iter().map(|j| j.iterations as u64).sum();

    let first_submit = r.jobs.iter().map(|j| j.submit_time).fold(f64::INFINITY, f64::min);
    r.duration = (trace.end_time() - first_submit).max(0.0);
    r.makespan = finished
        .iter()
        .filter_map(|j| j.finish_time)
        .fold(first_submit, f64::max)
        - first_submit;
    if r.total_tokens > 0 {
        r.padding_ratio = r.padding_tokens as f64 / r.total_tokens as f64;
    }
    if r.duration > 0.0 {
        r.total_throughput = r.total_tokens as f64 / r.duration;
        r.effective_throughput = (1.0 - r.padding_ratio) * r.total_throughput;
        r.non_effective_throughput = r.total_throughput - r.effective_throughput;
        r.job_throughput = r.jobs_finished as f64 / r.duration;
        r.utilization = r.busy_time / r.duration;
        r.mean_memory_gb = mem_area / r.duration;
        if r.mem_budget_gb > 0.0 {
            r.memory_occupancy = r.mean_memory_gb / r.mem_budget_gb;
        }
    }
    r
}

/// Scalar metrics as `(name, value)` pairs, in a stable order.
pub fn scalar_metrics(r: &MetricsReport) -> Vec<(&'static str, f64)> {
    vec![
        ("jobs_total", r.jobs_total as f64),
        ("jobs_finished", r.jobs_finished as f64),
        ("jobs_stopped_early", r.jobs_stopped_early as f64),
        ("jobs_rejected", r.jobs_rejected as f64),
        ("mean_turnaround", r.mean_turnaround),
        ("mean_waiting", r.mean_waiting),
        ("mean_value_turnaround", r.mean_value_turnaround),
        ("duration", r.duration),
        ("makespan", r.makespan),
        ("utilization", r.utilization),
        ("total_iterations", r.total_iterations as f64),
        ("total_tokens", r.total_tokens as f64),
        ("padding_tokens", r.padding_tokens as f64),
        ("padding_ratio", r.padding_ratio),
        ("total_throughput", r.total_throughput),
        ("effective_throughput", r.effective_throughput),
        ("non_effective_throughput", r.non_effective_throughput),
        ("job_throughput", r.job_throughput),
        ("peak_memory_gb", r.peak_memory_gb),
        ("mean_memory_gb", r.mean_memory_gb),
        ("memory_occupancy", r.memory_occupancy),
        ("peak_actual_memory_gb", r.peak_actual_memory_gb),
        ("over_budget_iterations", r.over_budget_iterations as f64),
        ("mem_budget_gb", r.mem_budget_gb),
        ("partial", r.partial as u8 as f64),
        ("empty", r.empty as u8 as f64),
        ("sorted_batches", r.sorted_batches as u8 as f64),
    ]
}

/// Writes `metric,value` rows.
pub fn write_metrics_csv<W: Write>(writer: W, r: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "value"])?;
    for (name, v) in scalar_metrics(r) {
        w.write_record([name, &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
