use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::batch::SortMode;
use crate::error::{Error, Result};
use crate::memory::MemoryModel;
use crate::progress::StopCause;
use crate::scheduler::Strategy;
use crate::workload::{ITime, JobId};

/// One line of a simulation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    JobSubmitted {
        time: ITime,
        job: JobId,
        submit_time: ITime,
        priority: u32,
        memory_gb: f64,
    },
    /// The job alone exceeds the memory budget and never runs.
    JobRejected {
        time: ITime,
        job: JobId,
        memory_gb: f64,
    },
    Warmup {
        time: ITime,
        probes: usize,
        model: MemoryModel,
    },
    ModelRefit {
        time: ITime,
        model: MemoryModel,
    },
    Scheduled {
        time: ITime,
        selected: Vec<JobId>,
        estimated_memory_gb: f64,
    },
    JobStarted {
        time: ITime,
        job: JobId,
    },
    IterationDone {
        start: ITime,
        time: ITime,
        jobs: Vec<JobId>,
        total_tokens: u64,
        padding_tokens: u64,
    },
    MemorySample {
        time: ITime,
        /// Length of the iteration the sample covers.
        interval: ITime,
        estimated_gb: f64,
        actual_gb: f64,
    },
    Stopped {
        time: ITime,
        job: JobId,
        iteration: u32,
        cause: StopCause,
    },
    Completed {
        time: ITime,
        job: JobId,
        iteration: u32,
    },
    /// The horizon was reached with work left.
    Truncated {
        time: ITime,
    },
}

impl TraceEvent {
    pub fn time(&self) -> ITime {
        match self {
            TraceEvent::JobSubmitted { time, .. }
            | TraceEvent::JobRejected { time, .. }
            | TraceEvent::Warmup { time, .. }
            | TraceEvent::ModelRefit { time, .. }
            | TraceEvent::Scheduled { time, .. }
            | TraceEvent::JobStarted { time, .. }
            | TraceEvent::IterationDone { time, .. }
            | TraceEvent::MemorySample { time, .. }
            | TraceEvent::Stopped { time, .. }
            | TraceEvent::Completed { time, .. }
            | TraceEvent::Truncated { time } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTrace {
    pub strategy: Option<Strategy>,
    pub mem_budget_gb: f64,
    pub truncated: bool,
    /// Set when every dataset was consumed in length-sorted order.
    pub sorted_batches: Option<SortMode>,
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn push(&mut self, event: TraceEvent) {
        debug_assert!(
            self.events.last().is_none_or(|e| e.time() <= event.time()),
            "trace time went backwards"
        );
        self.events.push(event);
    }

    pub fn end_time(&self) -> ITime {
        self.events.last().map_or(0.0, TraceEvent::time)
    }

    /// Writes one JSON event per line.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut writer, e)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads events written by [`SimTrace::write_jsonl`]; header fields are
    /// recovered from the events where possible.
    pub fn read_jsonl<R: BufRead>(reader: R, mem_budget_gb: f64) -> Result<SimTrace> {
        let mut trace = SimTrace {
            mem_budget_gb,
            ..Default::default()
        };
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: TraceEvent = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("trace line {}: {e}", n + 1)))?;
            if matches!(event, TraceEvent::Truncated { .. }) {
                trace.truncated = true;
            }
            trace.events.push(event);
        }
        Ok(trace)
    }
}
