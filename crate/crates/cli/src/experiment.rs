//! TOML experiment specs and the `simulate` command.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lorasched_core::sim::{
    compare_strategies, comparison_summary, write_comparison_csv, write_metrics_csv, SimConfig,
    StrategyOutcome,
};
use lorasched_core::workload::{read_jobs_jsonl, WorkloadConfig};
use lorasched_core::{JobSpec, Strategy, SyntheticWorkload};
use serde::{Deserialize, Serialize};

use crate::output::{write_atomic, write_atomic_with};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Where the jobs come from; exactly one source per spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSource {
    /// JSON Lines file of jobs, relative to the spec file.
    pub file: Option<PathBuf>,
    /// Explicit job templates with generated datasets.
    pub generated: Option<WorkloadConfig>,
    pub synthetic: Option<SyntheticWorkload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    /// Relative to the spec file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    pub workload: WorkloadSource,
    #[serde(default)]
    pub sim: SimConfig,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Csv]
}

/// Command-line overrides applied on top of the spec file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategies: Option<Vec<Strategy>>,
    pub top_k: Option<usize>,
    pub mem_budget_gb: Option<f64>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<(ExperimentSpec, PathBuf)> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read spec `{}`: {e}", path.display())))?;
        let spec: ExperimentSpec = toml::from_str(&text)
            .map_err(|e| UsageError(format!("malformed spec `{}`: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        spec.validate()?;
        Ok((spec, base))
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.name.starts_with('.')
        {
            return Err(UsageError(format!(
                "experiment name `{}` must be non-empty and use only letters, digits, `-`, `_`, `.`",
                self.name
            ))
            .into());
        }
        if self.strategies.is_empty() {
            return Err(UsageError("at least one strategy is required".into()).into());
        }
        let w = &self.workload;
        let sources = [w.file.is_some(), w.generated.is_some(), w.synthetic.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(UsageError(
                "workload needs exactly one of `file`, `generated` or `synthetic`".into(),
            )
            .into());
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
        }
        if let Some(s) = &o.strategies {
            self.strategies = s.clone();
        }
        if let Some(k) = o.top_k {
            self.sim.scheduler.top_k = k;
        }
        if let Some(m) = o.mem_budget_gb {
            self.sim.scheduler.mem_budget_gb = m;
        }
    }

    pub fn jobs(&self, base: &Path) -> Result<Vec<JobSpec>> {
        let w = &self.workload;
        if let Some(file) = &w.file {
            let path = base.join(file);
            let f = fs::File::open(&path)
                .map_err(|e| UsageError(format!("cannot open workload `{}`: {e}", path.display())))?;
            return read_jobs_jsonl(BufReader::new(f))
                .with_context(|| format!("reading workload `{}`", path.display()));
        }
        if let Some(g) = &w.generated {
            return Ok(lorasched_core::workload::generate_workload(g)?);
        }
        let s = w.synthetic.as_ref().expect("validated");
        Ok(s.generate()?)
    }
}

pub struct SimulateReport {
    pub dir: PathBuf,
    pub outcomes: Vec<StrategyOutcome>,
}

/// Runs every strategy of the spec and writes its artifacts under `<out>/<name>/`.
pub fn simulate(spec_path: &Path, overrides: &Overrides) -> Result<SimulateReport> {
    let (mut spec, base) = ExperimentSpec::load(spec_path)?;
    spec.apply(overrides);
    spec.sim.validate().map_err(|e| UsageError(e.to_string()))?;
    let jobs = spec.jobs(&base)?;
    let out_root = overrides.out.clone().unwrap_or_else(|| base.join(&spec.out_dir));
    let dir = out_root.join(&spec.name);

    let resolved = serde_json::to_string_pretty(&spec)? + "\n";
    let marker = dir.join("experiment.json");
    if let Ok(existing) = fs::read_to_string(&marker) {
        if existing != resolved {
            return Err(UsageError(format!(
                "experiment `{}` already exists in `{}` with a different spec",
                spec.name,
                out_root.display()
            ))
            .into());
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating `{}`", dir.display()))?;

    log::info!(
        "experiment `{}`: {} jobs, {} strategies",
        spec.name,
        jobs.len(),
        spec.strategies.len()
    );
    let outcomes = compare_strategies(&spec.sim, &jobs, &spec.strategies)?;
    for o in &outcomes {
        let sdir = dir.join(o.strategy.code());
        fs::create_dir_all(&sdir)?;
        write_atomic_with(&sdir.join("trace.jsonl"), |w| Ok(o.run.trace.write_jsonl(w)?))?;
        write_atomic_with(&sdir.join("decisions.jsonl"), |w| {
            Ok(o.run.write_decisions_jsonl(w)?)
        })?;
        if spec.formats.contains(&ReportFormat::Json) {
            write_atomic(
                &sdir.join("metrics.json"),
                (serde_json::to_string_pretty(&o.metrics)? + "\n").as_bytes(),
            )?;
        }
        if spec.formats.contains(&ReportFormat::Csv) {
            write_atomic_with(&sdir.join("metrics.csv"), |w| {
                Ok(write_metrics_csv(w, &o.metrics)?)
            })?;
        }
    }
    write_atomic_with(&dir.join("comparison.csv"), |w| {
        Ok(write_comparison_csv(w, &outcomes)?)
    })?;
    if spec.formats.contains(&ReportFormat::Json) {
        write_atomic(
            &dir.join("comparison.json"),
            (serde_json::to_string_pretty(&comparison_summary(&outcomes))? + "\n").as_bytes(),
        )?;
    }
    write_atomic(&marker, resolved.as_bytes())?;
    Ok(SimulateReport { dir, outcomes })
}
