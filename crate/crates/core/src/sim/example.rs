//! The four-job walkthrough: six planned iterations each, two slots, unit
//! iteration time, stop points after 4, 3 (NaN loss), 3 and 6 iterations.

use serde::{Deserialize, Serialize};

use crate::lora::LaunchMode;
use crate::scheduler::{SchedulerConfig, Strategy};
use crate::sim::{IterationTimeModel, MemoryConfig, SimConfig};
use crate::workload::{DatasetProfile, JobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleVariant {
    /// First come first served, every job runs all six iterations.
    NoEarlyStop,
    /// First come first served, jobs leave at their stop points.
    FcfsEarlyStop,
    /// Two warm-up iterations per job in arrival order, then shortest remaining first.
    WarmupThenSjf,
    /// Shortest remaining first from the start.
    Sjf,
}

pub fn four_job_example(variant: ExampleVariant) -> (SimConfig, Vec<JobSpec>) {
    let data = DatasetProfile::from_lengths("unit", &[1]);
    let job = |id: &str| JobSpec::new(id, 1, 0.0, data.clone(), 1, 6).with_memory(1.0);
    let mut j2 = job("J2");
    let mut losses = vec![Some(1.0), Some(0.9)];
    losses.push(None);
    j2.loss_stream = Some(losses);
    let jobs = vec![
        job("J1").with_early_stop(4),
        j2,
        job("J3").with_early_stop(3),
        job("J4"),
    ];

    let (strategy, warmup_iterations, early_stopping) = match variant {
        ExampleVariant::NoEarlyStop => (Strategy::Fifo, 0, false),
        ExampleVariant::FcfsEarlyStop => (Strategy::Fifo, 0, true),
        ExampleVariant::WarmupThenSjf => (Strategy::Adaptive, 2, true),
        ExampleVariant::Sjf => (Strategy::Adaptive, 0, true),
    };
    let config = SimConfig {
        scheduler: SchedulerConfig {
            strategy,
            top_k: 4,
            mem_budget_gb: 2.0,
            max_concurrent: 2,
            warmup_iterations,
            ..Default::default()
        },
        iteration_time: IterationTimeModel {
            base: 1.0,
            per_token: 0.0,
            per_launch: 0.0,
            ..Default::default()
        },
        execution: LaunchMode::Fused,
        memory: MemoryConfig::Static,
        early_stopping,
        ..Default::default()
    };
    (config, jobs)
}
