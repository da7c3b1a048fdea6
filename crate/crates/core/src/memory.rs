//! Memory estimation for LoRA jobs.
//!
//! Memory is modelled as `M = b0 + b1 * B * L + b2 * B * L^2` for batch size
//! `B` and sequence length `L`. The model is linear in its coefficients, so
//! fitting is an ordinary least-squares problem on the features
//! `(1, B*L, B*L^2)`; the nonnegative variant solves the same problem with
//! every coefficient constrained to be `>= 0`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack, in GB, allowed when comparing summed estimates against a budget.
pub const MEM_EPS: f64 = 1e-9;

/// Largest job count accepted by exact packing.
pub const EXACT_PACKING_LIMIT: usize = 30;

/// One observation: a job ran batch size `B_t` at sequence length `L_n` and used `M_gb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemSample {
    #[serde(rename = "B_t")]
    pub batch_size: u32,
    #[serde(rename = "L_n")]
    pub seq_len: u32,
    #[serde(rename = "M_gb")]
    pub memory_gb: f64,
}

impl MemSample {
    pub fn new(batch_size: u32, seq_len: u32, memory_gb: f64) -> Self {
        MemSample {
            batch_size,
            seq_len,
            memory_gb,
        }
    }

    fn features(&self) -> [f64; 3] {
        let u = self.batch_size as f64 * self.seq_len as f64;
        [1.0, u, u * self.seq_len as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[default]
    Unconstrained,
    Nonnegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rmse: f64,
    pub sample_count: usize,
}

/// A clamped prediction; `out_of_domain` marks raw predictions at or below the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub gb: f64,
    pub out_of_domain: bool,
}

impl MemoryModel {
    /// Model with known coefficients and no fit statistics.
    pub fn from_coefficients(beta0: f64, beta1: f64, beta2: f64) -> Self {
        MemoryModel {
            beta0,
            beta1,
            beta2,
            rmse: 0.0,
            sample_count: 0,
        }
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.beta0, self.beta1, self.beta2]
    }

    /// Raw model value in GB.
    pub fn predict(&self, batch_size: u32, seq_len: u32) -> f64 {
        let u = batch_size as f64 * seq_len as f64;
        self.beta0 + self.beta1 * u + self.beta2 * u * seq_len as f64
    }

    /// Prediction clamped to `floor`, with a warning when the model leaves its domain.
    pub fn estimate(&self, batch_size: u32, seq_len: u32, floor: f64) -> Estimate {
        let raw = self.predict(batch_size, seq_len);
        if raw <= 0.0 || raw < floor {
            log::warn!(
                "memory model predicts {raw:.4} GB at B={batch_size}, L={seq_len}; clamped to {floor}"
            );
            Estimate {
                gb: floor,
                out_of_domain: true,
            }
        } else {
            Estimate {
                gb: raw,
                out_of_domain: false,
            }
        }
    }

    /// Largest relative coefficient change versus `other`.
    pub fn relative_change(&self, other: &MemoryModel) -> f64 {
        self.coefficients()
            .iter()
            .zip(other.coefficients())
            .map(|(a, b)| {
                let scale = a.abs().max(b.abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }

    /// Sum of squared residuals on `samples`.
    pub fn sse(&self, samples: &[MemSample]) -> f64 {
        samples
            .iter()
            .map(|s| {
                let r = s.memory_gb - self.predict(s.batch_size, s.seq_len);
                r * r
            })
            .sum()
    }
}

/// Least-squares fit over the feature columns listed in `support`.
///
/// Columns are scaled to unit norm before an SVD solve; returns `None` when
/// the selected columns are numerically rank deficient.
fn solve_support(samples: &[MemSample], support: &[usize]) -> Option<[f64; 3]> {
    let n = samples.len();
    let p = support.len();
    let mut design = DMatrix::<f64>::zeros(n, p);
    for (r, s) in samples.iter().enumerate() {
        let f = s.features();
        for (c, &col) in support.iter().enumerate() {
            design[(r, c)] = f[col];
        }
    }
    let mut scale = vec![1.0; p];
    for (c, sc) in scale.iter_mut().enumerate() {
        let norm = design.column(c).norm();
        if norm == 0.0 {
            return None;
        }
        *sc = norm;
        design.column_mut(c).unscale_mut(norm);
    }
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.memory_gb));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * 1e-12 {
        return None;
    }
    let x = svd.solve(&y, 0.0).ok()?;
    let mut beta = [0.0; 3];
    for (c, &col) in support.iter().enumerate() {
        beta[col] = x[c] / scale[c];
    }
    Some(beta)
}

fn model_from(beta: [f64; 3], samples: &[MemSample]) -> MemoryModel {
    let mut m = MemoryModel::from_coefficients(beta[0], beta[1], beta[2]);
    m.rmse = (m.sse(samples) / samples.len() as f64).sqrt();
    m.sample_count = samples.len();
    m
}

/// Fits the quadratic memory model.
///
/// Requires at least three samples with three distinct `B*L` values and a
/// full-rank design. In nonnegative mode every support set of the three
/// coefficients is solved and the feasible solution with the smallest
/// residual wins; for three unknowns this enumeration is the exact
/// active-set solution.
pub fn fit(samples: &[MemSample], mode: FitMode) -> Result<MemoryModel> {
    if samples.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        if s.batch_size == 0 || s.seq_len == 0 || !s.memory_gb.is_finite() || s.memory_gb <= 0.0 {
            return Err(Error::Fit(format!("invalid sample {s:?}")));
        }
    }
    let distinct: BTreeSet<u64> = samples
        .iter()
        .map(|s| s.batch_size as u64 * s.seq_len as u64)
        .collect();
    if distinct.len() < 3 {
        return Err(Error::Fit(format!(
            "need 3 distinct B*L values, got {}",
            distinct.len()
        )));
    }
    let full = solve_support(samples, &[0, 1, 2])
        .ok_or_else(|| Error::Fit("design matrix is rank deficient".into()))?;
    match mode {
        FitMode::Unconstrained => Ok(model_from(full, samples)),
        FitMode::Nonnegative => {
            if full.iter().all(|&b| b >= 0.0) {
                return Ok(model_from(full, samples));
            }
            let supports: [&[usize]; 7] = [&[0, 1], &[0, 2], &[1, 2], &[0], &[1], &[2], &[]];
            let best = supports
                .iter()
                .filter_map(|s| {
                    if s.is_empty() {
                        Some([0.0; 3])
                    } else {
                        solve_support(samples, s)
                    }
                })
                .filter(|b| b.iter().all(|&x| x >= 0.0))
                .map(|b| (model_from(b, samples), b))
                .min_by(|a, b| a.0.rmse.total_cmp(&b.0.rmse))
                .map(|(m, _)| m)
                .expect("the zero model is always feasible");
            Ok(best)
        }
    }
}

/// Per-job memory estimates and the budget they must fit in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingQuery {
    pub estimates: Vec<f64>,
    pub budget: f64,
}

impl PackingQuery {
    pub fn new(estimates: Vec<f64>, budget: f64) -> Result<Self> {
        if !budget.is_finite() || budget < 0.0 {
            return Err(Error::Usage("memory budget must be finite and >= 0".into()));
        }
        if estimates.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::Usage("memory estimates must be finite and >= 0".into()));
        }
        Ok(PackingQuery { estimates, budget })
    }

    pub fn total(&self, subset: &[usize]) -> f64 {
        subset.iter().map(|&i| self.estimates[i]).sum()
    }

    /// Whether running `subset` together stays within the budget.
    pub fn is_feasible(&self, subset: &[usize]) -> bool {
        self.total(subset) <= self.budget + MEM_EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackingMode {
    Exact,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packing {
    /// Indices into the query, ascending.
    pub chosen: Vec<usize>,
    pub total_gb: f64,
}

/// Feasible subset whose summed memory comes as close to the budget as possible.
///
/// Exact mode is a meet-in-the-middle subset-sum over the real-valued
/// estimates (at most [`EXACT_PACKING_LIMIT`] jobs). Greedy mode packs in
/// descending size order, first fit.
pub fn max_packing(query: &PackingQuery, mode: PackingMode) -> Result<Packing> {
    let mut chosen = match mode {
        PackingMode::Exact => {
            if query.estimates.len() > EXACT_PACKING_LIMIT {
                return Err(Error::Usage(format!(
                    "exact packing handles at most {EXACT_PACKING_LIMIT} jobs, got {}",
                    query.estimates.len()
                )));
            }
            exact_packing(query)
        }
        PackingMode::Greedy => greedy_packing(query),
    };
    chosen.sort_unstable();
    debug_assert!(query.is_feasible(&chosen));
    Ok(Packing {
        total_gb: query.total(&chosen),
        chosen,
    })
}

fn subset_sums(values: &[f64]) -> Vec<(f64, u32)> {
    let mut sums = Vec::with_capacity(1 << values.len());
    sums.push((0.0, 0u32));
    for (i, &v) in values.iter().enumerate() {
        let len = sums.len();
        for j in 0..len {
            let (s, mask) = sums[j];
            sums.push((s + v, mask | (1 << i)));
        }
    }
    sums
}

fn exact_packing(query: &PackingQuery) -> Vec<usize> {
    let n = query.estimates.len();
    let half = n / 2;
    let (lo, hi) = query.estimates.split_at(half);
    let left = subset_sums(lo);
    let mut right = subset_sums(hi);
    right.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let cap = query.budget + MEM_EPS;
    let mut best = (0.0f64, 0u32, 0u32);
    for &(ls, lmask) in &left {
        if ls > cap {
            continue;
        }
        let k = right.partition_point(|&(rs, _)| ls + rs <= cap);
        if k == 0 {
            continue;
        }
        let (rs, rmask) = right[k - 1];
        if ls + rs > best.0 {
            best = (ls + rs, lmask, rmask);
        }
    }
    let (_, lmask, rmask) = best;
    let mut chosen: Vec<usize> = (0..half).filter(|i| lmask & (1 << i) != 0).collect();
    chosen.extend((0..n - half).filter(|i| rmask & (1 << i) != 0).map(|i| i + half));
    chosen
}

fn greedy_packing(query: &PackingQuery) -> Vec<usize> {
    let mut order: Vec<usize> = (0..query.estimates.len()).collect();
    order.sort_by(|&a, &b| query.estimates[b].total_cmp(&query.estimates[a]).then(a.cmp(&b)));
    let mut used = 0.0;
    let mut chosen = Vec::new();
    for i in order {
        if used + query.estimates[i] <= query.budget + MEM_EPS {
            used += query.estimates[i];
            chosen.push(i);
        }
    }
    chosen
}

/// Probe points for the warm-up phase that precedes training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupPlan {
    pub probes: Vec<(u32, u32)>,
    pub distinct_products: usize,
    /// Fewer than three distinct `B*L` values: the plan cannot support a fit.
    pub degenerate: bool,
}

/// Cross product of the (deduplicated) batch sizes and sequence lengths.
pub fn warmup_plan(batch_sizes: &[u32], seq_lens: &[u32]) -> Result<WarmupPlan> {
    if batch_sizes.is_empty() || seq_lens.is_empty() {
        return Err(Error::Usage(
            "warm-up needs batch sizes and sequence lengths".into(),
        ));
    }
    if batch_sizes.contains(&0) || seq_lens.contains(&0) {
        return Err(Error::Usage("warm-up probes must be >= 1".into()));
    }
    let bs: BTreeSet<u32> = batch_sizes.iter().copied().collect();
    let ls: BTreeSet<u32> = seq_lens.iter().copied().collect();
    let probes: Vec<(u32, u32)> = bs.iter().flat_map(|&b| ls.iter().map(move |&l| (b, l))).collect();
    let distinct_products = probes
        .iter()
        .map(|&(b, l)| b as u64 * l as u64)
        .collect::<BTreeSet<_>>()
        .len();
    let degenerate = distinct_products < 3;
    if degenerate {
        log::warn!("warm-up plan has {distinct_products} distinct B*L values; a memory fit needs 3");
    }
    Ok(WarmupPlan {
        probes,
        distinct_products,
        degenerate,
    })
}

/// Reads samples from CSV with header `B_t,L_n,M_gb`.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<MemSample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(writer: W, samples: &[MemSample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}
