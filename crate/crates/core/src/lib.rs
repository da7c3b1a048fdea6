//! Scheduling and cost modelling for fine-tuning many LoRA adapters on one
//! shared base model.
//!
//! The crate covers the fused forward pass and its cost model, batch
//! selection that minimizes padding, a quadratic memory estimator, early
//! stopping and iteration prediction, four scheduling strategies, and a
//! discrete-event simulator that ties them together.

pub mod batch;
pub mod cost;
pub mod error;
pub mod lora;
pub mod memory;
pub mod progress;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use batch::{BatchCandidate, SelectionResult, SortMode};
pub use cost::{cost_report, launch_saving, memory_cost, CostReport, MemoryFootprint};
pub use error::{Error, Result};
pub use lora::{
    fuse, fused_forward, lora_forward, AdapterWeights, FusedBatch, JobBatch, LaunchMode, Matrix, TokenCounts,
};
pub use memory::{fit, max_packing, FitMode, MemSample, MemoryModel, Packing, PackingMode, PackingQuery};
pub use progress::{
    detect_stop, Predictor, StopCause, StopEvent, StopPolicy, ThroughputGain, ThroughputScenario,
};
pub use scheduler::{MemorySource, ReasonCode, ScheduleDecision, Scheduler, SchedulerConfig, Strategy};
pub use sim::{
    compare_strategies, compute_metrics, run, MetricsReport, SimConfig, SimRun, SimTrace, TraceEvent,
};
pub use workload::{DataItem, DatasetProfile, ITime, JobId, JobSpec, JobState, JobStatus, SyntheticWorkload};
