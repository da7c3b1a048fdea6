//! Closed-form memory and kernel-launch cost of sharing one base model across `k` jobs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{count_launches, LaunchMode};

/// Per-job memory components in GB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    /// Pretrained base weights.
    pub base_gb: f64,
    /// One LoRA adapter.
    pub adapter_gb: f64,
    /// Per-job training overhead (activations, optimizer state, ...).
    pub overhead_gb: f64,
}

impl MemoryFootprint {
    pub fn new(base_gb: f64, adapter_gb: f64, overhead_gb: f64) -> Result<Self> {
        let fp = MemoryFootprint {
            base_gb,
            adapter_gb,
            overhead_gb,
        };
        if [base_gb, adapter_gb, overhead_gb]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Usage("memory components must be finite and >= 0".into()));
        }
        Ok(fp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub k: u64,
    pub total_no_share_gb: f64,
    pub total_shared_gb: f64,
    pub memory_saved_gb: f64,
    pub launch_saving_fraction: f64,
}

fn check_k(k: u64) -> Result<()> {
    if k == 0 {
        Err(Error::Usage("job count k must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Total GB for `k` jobs; `shared` keeps one copy of the base weights.
pub fn memory_cost(fp: &MemoryFootprint, k: u64, shared: bool) -> Result<f64> {
    check_k(k)?;
    let k = k as f64;
    Ok(if shared {
        fp.base_gb + k * (fp.adapter_gb + fp.overhead_gb)
    } else {
        k * (fp.base_gb + fp.adapter_gb + fp.overhead_gb)
    })
}

/// Fraction of launch cost saved by fusion, `(2k - 2) / 4k`.
pub fn launch_saving(k: u64) -> Result<f64> {
    launch_saving_weighted(k, 1.0)
}

/// Launch saving when a large launch costs `large_weight` small ones.
pub fn launch_saving_weighted(k: u64, large_weight: f64) -> Result<f64> {
    check_k(k)?;
    let per_job = count_launches(k, LaunchMode::PerJob)?.weighted(large_weight);
    let fused = count_launches(k, LaunchMode::Fused)?.weighted(large_weight);
    Ok((per_job - fused) / per_job)
}

pub fn cost_report(fp: &MemoryFootprint, k: u64) -> Result<CostReport> {
    let total_no_share_gb = memory_cost(fp, k, false)?;
    let total_shared_gb = memory_cost(fp, k, true)?;
    Ok(CostReport {
        k,
        total_no_share_gb,
        total_shared_gb,
        memory_saved_gb: (k - 1) as f64 * fp.base_gb,
        launch_saving_fraction: launch_saving(k)?,
    })
}
