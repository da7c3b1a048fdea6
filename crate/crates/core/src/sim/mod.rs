//! Discrete-event simulation of fused multi-job fine-tuning on one device.
//!
//! Each step the scheduler's running set executes one fused iteration. Its
//! cost in abstract time units is
//! `base + per_token * xi + per_launch * launches`, where `xi` counts
//! padded tokens. Per-job execution pays `base` and four launches for every job.

mod example;
mod metrics;
mod trace;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use example::{four_job_example, ExampleVariant};
pub use metrics::{
    compute_metrics, scalar_metrics, write_metrics_csv, JobMetrics, JobOutcome, MetricsReport,
};
pub use trace::{SimTrace, TraceEvent};

use crate::batch::SortMode;
use crate::error::{Error, Result};
use crate::lora::{count_launches, fused_token_counts, LaunchMode, TokenCounts};
use crate::memory::{fit, warmup_plan, FitMode, MemSample, MemoryModel};
use crate::progress::{effective_iterations, resolve_stop, Predictor, StopCause, StopEvent, StopPolicy};
use crate::scheduler::{
    MemorySource, ScheduleDecision, Scheduler, SchedulerConfig, SchedulerEvent, Strategy,
};
use crate::workload::{validate_jobs, ITime, JobSpec, JobState, JobStatus};

/// Coefficients of the device memory curve used as ground truth: 6.56 GB
/// static, then linear and quadratic terms in `B*L` and `B*L^2`.
pub const REFERENCE_DEVICE: [f64; 3] = [6.56, 1.42e-3, -8.76e-8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationTimeModel {
    pub base: f64,
    pub per_token: f64,
    pub per_launch: f64,
    /// Cost of one large (shared base) launch relative to a small one.
    pub large_launch_weight: f64,
    /// Token count below which compute time does not shrink further.
    pub saturation_tokens: u64,
}

impl Default for IterationTimeModel {
    fn default() -> Self {
        IterationTimeModel {
            base: 0.02,
            per_token: 1e-4,
            per_launch: 0.01,
            large_launch_weight: 1.0,
            saturation_tokens: 0,
        }
    }
}

impl IterationTimeModel {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.base,
            self.per_token,
            self.per_launch,
            self.large_launch_weight,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "iteration time constants must be finite and >= 0".into(),
            ));
        }
        if self.base == 0.0 && self.per_token == 0.0 && self.per_launch == 0.0 {
            return Err(Error::Config("iteration time model is identically zero".into()));
        }
        Ok(())
    }

    fn compute(&self, tokens: u64) -> f64 {
        self.per_token * tokens.max(self.saturation_tokens) as f64
    }

    /// Time and token counts of one iteration over the given per-job batches.
    pub fn iteration_time(&self, mode: LaunchMode, batches: &[Vec<u32>]) -> Result<(f64, TokenCounts)> {
        let k = batches.len() as u64;
        let launches = count_launches(k, mode)?.weighted(self.large_launch_weight);
        Ok(match mode {
            LaunchMode::Fused => {
                let counts = fused_token_counts(batches.iter().map(Vec::as_slice));
                let t = self.base + self.compute(counts.total) + self.per_launch * launches;
                (t, counts)
            }
            LaunchMode::PerJob => {
                let mut counts = TokenCounts::default();
                let mut t = self.per_launch * launches;
                for b in batches {
                    let c = fused_token_counts([b.as_slice()]);
                    t += self.base + self.compute(c.total);
                    counts += c;
                }
                (t, counts)
            }
        })
    }
}

/// Memory-estimation setup shared by every strategy of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MemoryConfig {
    /// Jobs carry their own `memory_gb`.
    Static,
    /// Estimates come from a model fitted on warm-up probes of a simulated device.
    Fitted(FittedMemory),
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig::Fitted(FittedMemory::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FittedMemory {
    /// True device curve `[beta0, beta1, beta2]`.
    pub device: [f64; 3],
    /// Standard deviation of measurement noise in GB.
    pub noise_sd_gb: f64,
    pub probe_batch_sizes: Vec<u32>,
    pub probe_seq_lens: Vec<u32>,
    pub fit_mode: FitMode,
    /// Refit from observed iterations every this many iterations; 0 disables refits.
    pub refit_every: u32,
    pub floor_gb: f64,
}

impl Default for FittedMemory {
    fn default() -> Self {
        FittedMemory {
            device: REFERENCE_DEVICE,
            noise_sd_gb: 0.05,
            probe_batch_sizes: vec![1, 2, 4, 8],
            probe_seq_lens: vec![128, 256, 512, 1024],
            fit_mode: FitMode::Unconstrained,
            refit_every: 0,
            floor_gb: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scheduler: SchedulerConfig,
    pub iteration_time: IterationTimeModel,
    pub execution: LaunchMode,
    pub memory: MemoryConfig,
    /// Hit probability of the early-stopping predictor.
    pub predictor_accuracy: f64,
    pub seed: u64,
    /// Simulated time after which the run is cut off.
    pub horizon: ITime,
    pub early_stopping: bool,
    pub stop_policy: StopPolicy,
    /// Consume each dataset in length-sorted order.
    pub batch_order: Option<SortMode>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scheduler: SchedulerConfig::default(),
            iteration_time: IterationTimeModel::default(),
            execution: LaunchMode::Fused,
            memory: MemoryConfig::default(),
            predictor_accuracy: 1.0,
            seed: 0,
            horizon: 1e9,
            early_stopping: true,
            stop_policy: StopPolicy::default(),
            batch_order: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.iteration_time.validate()?;
        if self.horizon.is_nan() || self.horizon <= 0.0 {
            return Err(Error::Config("horizon must be > 0".into()));
        }
        if let MemoryConfig::Fitted(f) = &self.memory {
            if !(f.noise_sd_gb >= 0.0 && f.noise_sd_gb.is_finite()) {
                return Err(Error::Config("noise_sd_gb must be finite and >= 0".into()));
            }
            if f.device.iter().any(|b| !b.is_finite()) {
                return Err(Error::Config("device coefficients must be finite".into()));
            }
        }
        Predictor::new(self.predictor_accuracy, self.seed)?;
        Ok(())
    }

    pub fn with_strategy(&self, strategy: Strategy) -> SimConfig {
        let mut c = self.clone();
        c.scheduler.strategy = strategy;
        c
    }
}

/// Output of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub trace: SimTrace,
    pub decisions: Vec<ScheduleDecision>,
    pub final_model: Option<MemoryModel>,
}

impl SimRun {
    pub fn write_decisions_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut writer, d)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct MemoryState {
    source: MemorySource,
    device: Option<(MemoryModel, Normal<f64>, FittedMemory)>,
    samples: Vec<MemSample>,
}

impl MemoryState {
    fn model(&self) -> Option<MemoryModel> {
        match &self.source {
            MemorySource::Fitted { model, .. } => Some(*model),
            MemorySource::Static => None,
        }
    }

    fn actual(&self, spec: &JobSpec, seq_len: u32) -> f64 {
        match &self.device {
            Some((device, _, _)) => device.predict(spec.batch_size, seq_len),
            None => spec.memory_gb.unwrap_or(0.0),
        }
    }
}

/// Runs one simulation of `jobs` under `config`.
pub fn run(config: &SimConfig, jobs: &[JobSpec]) -> Result<SimRun> {
    config.validate()?;
    validate_jobs(jobs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_6d6f_7279);
    let mut trace = SimTrace {
        strategy: Some(config.scheduler.strategy),
        mem_budget_gb: config.scheduler.mem_budget_gb,
        sorted_batches: config.batch_order,
        ..Default::default()
    };

    let mut mem = match &config.memory {
        MemoryConfig::Static => MemoryState {
            source: MemorySource::Static,
            device: None,
            samples: Vec::new(),
        },
        MemoryConfig::Fitted(f) => {
            let [b0, b1, b2] = f.device;
            let device = MemoryModel::from_coefficients(b0, b1, b2);
            let noise = Normal::new(0.0, f.noise_sd_gb).map_err(|e| Error::Config(format!("noise: {e}")))?;
            let plan = warmup_plan(&f.probe_batch_sizes, &f.probe_seq_lens)?;
            let samples: Vec<MemSample> = plan
                .probes
                .iter()
                .map(|&(b, l)| MemSample::new(b, l, device.predict(b, l) + noise.sample(&mut rng)))
                .collect();
            let model = fit(&samples, f.fit_mode)?;
            trace.push(TraceEvent::Warmup {
                time: 0.0,
                probes: samples.len(),
                model,
            });
            MemoryState {
                source: MemorySource::Fitted {
                    model,
                    floor_gb: f.floor_gb,
                },
                device: Some((device, noise, f.clone())),
                samples,
            }
        }
    };

    let mut states: Vec<JobState> = jobs
        .iter()
        .map(|spec| {
            let mut spec = spec.clone();
            if let Some(order) = config.batch_order {
                spec.dataset = spec.dataset.sorted(order == SortMode::Longest);
            }
            let bound = effective_iterations(&spec, &config.stop_policy, config.early_stopping);
            JobState::with_bound(spec, bound)
        })
        .collect();
    let index: HashMap<_, _> = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id().clone(), i))
        .collect();
    let mut arrivals: Vec<usize> = (0..states.len()).collect();
    arrivals.sort_by(|&a, &b| {
        jobs[a]
            .submit_time
            .total_cmp(&jobs[b].submit_time)
            .then(a.cmp(&b))
    });
    let mut arrivals = arrivals.into_iter().peekable();

    let predictor = Predictor::new(config.predictor_accuracy, config.seed)?;
    let mut scheduler = Scheduler::new(config.scheduler.clone(), predictor)?;
    let budget = config.scheduler.mem_budget_gb;
    let warmup = config.scheduler.warmup_iterations;
    let mut decisions = Vec::new();
    let mut queue: Vec<usize> = Vec::new();
    let mut running: Vec<usize> = Vec::new();
    let mut time: ITime = arrivals.peek().map_or(0.0, |&i| jobs[i].submit_time.max(0.0));
    let mut iterations: u64 = 0;

    loop {
        while let Some(&i) = arrivals.peek() {
            if jobs[i].submit_time > time {
                break;
            }
            arrivals.next();
            let spec = states[i].spec();
            let gb = mem.source.estimate(spec)?;
            if gb > budget + crate::memory::MEM_EPS {
                log::warn!("job `{}` needs {gb:.2} GB, over the {budget} GB budget", spec.id);
                trace.push(TraceEvent::JobRejected {
                    time,
                    job: spec.id.clone(),
                    memory_gb: gb,
                });
                continue;
            }
            trace.push(TraceEvent::JobSubmitted {
                time,
                job: spec.id.clone(),
                submit_time: spec.submit_time,
                priority: spec.priority,
                memory_gb: gb,
            });
            scheduler.on_event(&SchedulerEvent::Arrival(spec.id.clone()));
            queue.push(i);
        }

        if queue.is_empty() {
            match arrivals.peek() {
                Some(&i) => {
                    time = jobs[i].submit_time;
                    continue;
                }
                None => break,
            }
        }
        if time >= config.horizon {
            trace.truncated = true;
            trace.push(TraceEvent::Truncated { time });
            break;
        }

        if scheduler.needs_reschedule() {
            let refs: Vec<&JobState> = queue.iter().map(|&i| &states[i]).collect();
            let decision = scheduler.schedule(time, &refs, &mem.source)?;
            running = decision.job_ids().map(|id| index[id]).collect();
            trace.push(TraceEvent::Scheduled {
                time,
                selected: decision.job_ids().cloned().collect(),
                estimated_memory_gb: decision.estimated_memory_gb,
            });
            decisions.push(decision);
            if running.is_empty() {
                // Only reachable after a refit pushed single jobs over the budget.
                queue.retain(|&i| {
                    let spec = states[i].spec();
                    let gb = mem.source.estimate(spec).unwrap_or(f64::INFINITY);
                    if gb > budget + crate::memory::MEM_EPS {
                        trace.push(TraceEvent::JobRejected {
                            time,
                            job: spec.id.clone(),
                            memory_gb: gb,
                        });
                        false
                    } else {
                        true
                    }
                });
                scheduler.on_event(&SchedulerEvent::IterationDone);
                if queue.is_empty() || !scheduler.needs_reschedule() {
                    return Err(Error::State("scheduler made no progress".into()));
                }
                continue;
            }
        }

        let batches: Vec<Vec<u32>> = running
            .iter()
            .map(|&i| states[i].next_batch_lengths())
            .collect::<Result<_>>()?;
        let (dt, counts) = config.iteration_time.iteration_time(config.execution, &batches)?;
        let start = time;
        for &i in &running {
            if states[i].start_time().is_none() {
                trace.push(TraceEvent::JobStarted {
                    time: start,
                    job: states[i].id().clone(),
                });
            }
            states[i].commit_batch(start)?;
        }
        time += dt;
        iterations += 1;
        trace.push(TraceEvent::IterationDone {
            start,
            time,
            jobs: running.iter().map(|&i| states[i].id().clone()).collect(),
            total_tokens: counts.total,
            padding_tokens: counts.padding,
        });

        let fused_len = batches.iter().flatten().copied().max().unwrap_or(0);
        let mut estimated = 0.0;
        let mut actual = 0.0;
        for (&i, b) in running.iter().zip(&batches) {
            let spec = states[i].spec();
            let len = match config.execution {
                LaunchMode::Fused => fused_len,
                LaunchMode::PerJob => b.iter().copied().max().unwrap_or(0),
            };
            estimated += mem.source.estimate(spec)?;
            let a = mem.actual(spec, len);
            actual += a;
            if let Some((_, noise, _)) = &mem.device {
                mem.samples
                    .push(MemSample::new(spec.batch_size, len, a + noise.sample(&mut rng)));
            }
        }
        trace.push(TraceEvent::MemorySample {
            time,
            interval: dt,
            estimated_gb: estimated,
            actual_gb: actual,
        });

        let mut finished = Vec::new();
        for &i in &running {
            let s = &mut states[i];
            if s.reached_bound() {
                let done = s.iterations_done();
                let stop = if config.early_stopping {
                    resolve_stop(s.spec(), &config.stop_policy).filter(|e| e.iteration == done)
                } else {
                    None
                };
                let event = match stop {
                    Some(e) if done < s.spec().true_iterations || e.cause == StopCause::NanLoss => {
                        s.finish(JobStatus::Stopped, time)?;
                        trace.push(TraceEvent::Stopped {
                            time,
                            job: s.id().clone(),
                            iteration: done,
                            cause: e.cause,
                        });
                        e
                    }
                    _ => {
                        s.finish(JobStatus::Completed, time)?;
                        trace.push(TraceEvent::Completed {
                            time,
                            job: s.id().clone(),
                            iteration: done,
                        });
                        StopEvent {
                            job_id: s.id().clone(),
                            iteration: done,
                            cause: StopCause::Completed,
                        }
                    }
                };
                scheduler.on_event(&SchedulerEvent::Finished(event));
                finished.push(i);
            } else if warmup > 0 && s.iterations_done() == warmup {
                scheduler.on_event(&SchedulerEvent::WarmupDone(s.id().clone()));
            }
        }
        queue.retain(|i| !finished.contains(i));
        running.retain(|i| !finished.contains(i));
        scheduler.on_event(&SchedulerEvent::IterationDone);

        if let (Some((_, _, f)), Some(old)) = (&mem.device, mem.model()) {
            if f.refit_every > 0 && iterations.is_multiple_of(f.refit_every as u64) {
                match fit(&mem.samples, f.fit_mode) {
                    Ok(new) => {
                        mem.source = MemorySource::Fitted {
                            model: new,
                            floor_gb: f.floor_gb,
                        };
                        trace.push(TraceEvent::ModelRefit { time, model: new });
                        scheduler.on_event(&SchedulerEvent::ModelUpdated { old, new });
                    }
                    Err(e) => log::debug!("refit skipped: {e}"),
                }
            }
        }
    }

    Ok(SimRun {
        final_model: mem.model(),
        trace,
        decisions,
    })
}

/// Result of one strategy in a comparison.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub run: SimRun,
    pub metrics: MetricsReport,
}

/// Runs every strategy on the same workload and configuration, in parallel.
pub fn compare_strategies(
    config: &SimConfig,
    jobs: &[JobSpec],
    strategies: &[Strategy],
) -> Result<Vec<StrategyOutcome>> {
    let results: Vec<Result<StrategyOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|&strategy| {
                scope.spawn(move || {
                    let run = run(&config.with_strategy(strategy), jobs)?;
                    let metrics = compute_metrics(&run.trace);
                    Ok(StrategyOutcome {
                        strategy,
                        run,
                        metrics,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Long-format table: one `strategy,metric,value` row per strategy and metric.
pub fn write_comparison_csv<W: Write>(writer: W, outcomes: &[StrategyOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["strategy", "metric", "value"])?;
    for o in outcomes {
        let strategy = o.strategy.to_string();
        for (name, v) in scalar_metrics(&o.metrics) {
            w.write_record([strategy.as_str(), name, &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-strategy summary keyed by strategy code, for JSON output.
pub fn comparison_summary(outcomes: &[StrategyOutcome]) -> BTreeMap<String, BTreeMap<&'static str, f64>> {
    outcomes
        .iter()
        .map(|o| {
            (
                o.strategy.to_string(),
                scalar_metrics(&o.metrics).into_iter().collect(),
            )
        })
        .collect()
}
