//! Dense LoRA forward pass and batch fusion.
//!
//! Layout is row-major with one token per row: an input sequence is a
//! `len x k` matrix, the frozen weight `W0` is `d x k`, and an adapter holds
//! `A: r x k` and `B: d x r`. A forward pass therefore computes
//! `h = x W0^T + (x A^T) B^T`, which is `W0 x + B (A x)` in column form.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::JobId;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix has non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// `self * other^T`, without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Largest entry-wise difference relative to the larger magnitude (floored at 1).
    pub fn max_relative_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Low-rank update `B A` trained by one job.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub job_id: JobId,
    a: Matrix,
    b: Matrix,
}

impl AdapterWeights {
    /// `a` is `r x k`, `b` is `d x r`.
    pub fn new(job_id: JobId, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows != b.cols {
            return Err(Error::Shape(format!(
                "adapter rank mismatch: A has {} rows, B has {} cols",
                a.rows, b.cols
            )));
        }
        let rank = a.rows;
        if rank > b.rows.min(a.cols) {
            return Err(Error::Shape(format!(
                "adapter rank {rank} exceeds min(d={}, k={})",
                b.rows, a.cols
            )));
        }
        Ok(AdapterWeights { job_id, a, b })
    }

    /// Zero adapter of the given rank.
    pub fn zeros(job_id: JobId, d: usize, k: usize, rank: usize) -> Result<Self> {
        Self::new(job_id, Matrix::zeros(rank, k), Matrix::zeros(d, rank))
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `x A^T B^T`, evaluated in that order.
    fn delta(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(&self.a)?.matmul_t(&self.b)
    }
}

/// Single-job forward pass `h = x W0^T + (x A^T) B^T`.
pub fn lora_forward(w0: &Matrix, adapter: &AdapterWeights, x: &Matrix) -> Result<Matrix> {
    check_adapter(w0, adapter)?;
    if x.cols != w0.cols {
        return Err(Error::Shape(format!(
            "input has {} features, W0 expects {}",
            x.cols, w0.cols
        )));
    }
    x.matmul_t(w0)?.add(&adapter.delta(x)?)
}

fn check_adapter(w0: &Matrix, adapter: &AdapterWeights) -> Result<()> {
    if adapter.a.cols != w0.cols || adapter.b.rows != w0.rows {
        return Err(Error::Shape(format!(
            "adapter for `{}` is ({}x{}, {}x{}) but W0 is {}x{}",
            adapter.job_id, adapter.b.rows, adapter.b.cols, adapter.a.rows, adapter.a.cols, w0.rows, w0.cols
        )));
    }
    Ok(())
}

/// One job's input batch: a list of `len_j x k` token-embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct JobBatch {
    pub job_id: JobId,
    pub sequences: Vec<Matrix>,
}

impl JobBatch {
    pub fn new(job_id: JobId, sequences: Vec<Matrix>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Usage(format!("job `{job_id}` has an empty batch")));
        }
        let k = sequences[0].cols;
        if sequences.iter().any(|s| s.cols != k) {
            return Err(Error::Shape(format!("job `{job_id}` mixes embedding dimensions")));
        }
        Ok(JobBatch { job_id, sequences })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.rows).collect()
    }

    pub fn dim(&self) -> usize {
        self.sequences[0].cols
    }
}

/// Token accounting for a fused batch: `total` slots, of which `padding` are filler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub total: u64,
    pub padding: u64,
}

impl TokenCounts {
    pub fn real(&self) -> u64 {
        self.total - self.padding
    }

    /// Padding ratio `padding / total`, zero for an empty batch.
    pub fn padding_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.padding as f64 / self.total as f64
        }
    }
}

impl std::ops::AddAssign for TokenCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.total += rhs.total;
        self.padding += rhs.padding;
    }
}

/// Token counts of fusing the given per-job sequence lengths, all aligned to the global max.
pub fn fused_token_counts<'a, I>(jobs: I) -> TokenCounts
where
    I: IntoIterator<Item = &'a [u32]>,
    I::IntoIter: Clone,
{
    let it = jobs.into_iter();
    let max_len = it.clone().flatten().copied().max().unwrap_or(0) as u64;
    let mut n = 0u64;
    let mut real = 0u64;
    for l in it.flatten() {
        n += 1;
        real += *l as u64;
    }
    TokenCounts {
        total: n * max_len,
        padding: n * max_len - real,
    }
}

/// Inputs of several jobs aligned into one zero-padded block.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch {
    /// `num_sequences * max_len * dim`, sequence-major.
    data: Vec<f64>,
    dim: usize,
    max_len: usize,
    lengths: Vec<usize>,
    /// Job owning each sequence.
    routing: Vec<JobId>,
    /// Per token slot, `true` for real tokens.
    mask: Vec<bool>,
    counts: TokenCounts,
}

impl FusedBatch {
    pub fn num_sequences(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn routing(&self) -> &[JobId] {
        &self.routing
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn counts(&self) -> TokenCounts {
        self.counts
    }

    pub fn total_tokens(&self) -> u64 {
        self.counts.total
    }

    pub fn padding_tokens(&self) -> u64 {
        self.counts.padding
    }

    pub fn padding_ratio(&self) -> f64 {
        self.counts.padding_ratio()
    }

    /// The whole block as a `(num_sequences * max_len) x dim` matrix with padding rows zeroed.
    fn masked_rows(&self) -> Matrix {
        let mut data = self.data.clone();
        for (slot, real) in self.mask.iter().enumerate() {
            if !real {
                data[slot * self.dim..(slot + 1) * self.dim].fill(0.0);
            }
        }
        Matrix {
            rows: self.mask.len(),
            cols: self.dim,
            data,
        }
    }
}

/// Concatenates the batches of several jobs, padding every sequence to the longest one.
///
/// Sequences keep input order: job order first, then order within each job.
pub fn fuse(batches: &[JobBatch]) -> Result<FusedBatch> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Usage("fuse needs at least one job batch".into()))?;
    let dim = first.dim();
    let mut seen = BTreeSet::new();
    for b in batches {
        if b.dim() != dim {
            return Err(Error::Shape(format!(
                "job `{}` has embedding dim {}, expected {dim}",
                b.job_id,
                b.dim()
            )));
        }
        if !seen.insert(&b.job_id) {
            return Err(Error::Usage(format!("job `{}` fused twice", b.job_id)));
        }
    }
    let max_len = batches
        .iter()
        .flat_map(|b| b.sequences.iter().map(|s| s.rows))
        .max()
        .unwrap_or(0);
    let n_seq: usize = batches.iter().map(|b| b.sequences.len()).sum();
    let mut data = vec![0.0; n_seq * max_len * dim];
    let mut mask = vec![false; n_seq * max_len];
    let mut lengths = Vec::with_capacity(n_seq);
    let mut routing = Vec::with_capacity(n_seq);
    let mut s = 0;
    for b in batches {
        for seq in &b.sequences {
            let base = s * max_len;
            data[base * dim..(base + seq.rows) * dim].copy_from_slice(&seq.data);
            mask[base..base + seq.rows].fill(true);
            lengths.push(seq.rows);
            routing.push(b.job_id.clone());
            s += 1;
        }
    }
    let real: usize = lengths.iter().sum();
    let total = (n_seq * max_len) as u64;
    Ok(FusedBatch {
        data,
        dim,
        max_len,
        lengths,
        routing,
        mask,
        counts: TokenCounts {
            total,
            padding: total - real as u64,
        },
    })
}

/// Output of a fused pass for one job, restricted to real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub job_id: JobId,
    pub sequences: Vec<Matrix>,
}

/// Fused forward pass: one shared `X W0^T` over the whole block plus each
/// job's low-rank term over its own segment, split back per job.
pub fn fused_forward(
    w0: &Matrix,
    adapters: &BTreeMap<JobId, AdapterWeights>,
    fb: &FusedBatch,
) -> Result<Vec<JobOutput>> {
    if fb.dim != w0.cols {
        return Err(Error::Shape(format!(
            "fused batch has dim {}, W0 expects {}",
            fb.dim, w0.cols
        )));
    }
    for id in &fb.routing {
        let adapter = adapters.get(id).ok_or_else(|| Error::Routing(id.to_string()))?;
        check_adapter(w0, adapter)?;
    }
    let x = fb.masked_rows();
    let mut h = x.matmul_t(w0)?;
    let d = w0.rows;

    let mut outputs: Vec<JobOutput> = Vec::new();
    let mut seq = 0;
    while seq < fb.num_sequences() {
        let id = &fb.routing[seq];
        let mut end = seq;
        while end < fb.num_sequences() && &fb.routing[end] == id {
            end += 1;
        }
        let (r0, r1) = (seq * fb.max_len, end * fb.max_len);
        let delta = adapters[id].delta(&x.slice_rows(r0, r1))?;
        for (dst, src) in h.data[r0 * d..r1 * d].iter_mut().zip(&delta.data) {
            *dst += src;
        }
        let sequences = (seq..end)
            .map(|s| {
                let start = s * fb.max_len;
                h.slice_rows(start, start + fb.lengths[s])
            })
            .collect();
        outputs.push(JobOutput {
            job_id: id.clone(),
            sequences,
        });
        seq = end;
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    /// Every job runs its own forward: three products and one addition each.
    PerJob,
    /// One shared base product and addition plus one low-rank product pair per job.
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchCounts {
    pub small: u64,
    pub large: u64,
}

impl LaunchCounts {
    pub fn total(&self) -> u64 {
        self.small + self.large
    }

    /// Launch cost with small launches weighted 1 and large ones `large_weight`.
    pub fn weighted(&self, large_weight: f64) -> f64 {
        self.small as f64 + large_weight * self.large as f64
    }
}

/// Kernel launches for one layer's forward over `k` jobs.
pub fn count_launches(k: u64, mode: LaunchMode) -> Result<LaunchCounts> {
    if k == 0 {
        return Err(Error::Usage("launch count needs at least one job".into()));
    }
    Ok(match mode {
        LaunchMode::PerJob => LaunchCounts {
            small: 4 * k,
            large: 0,
        },
        LaunchMode::Fused => LaunchCounts {
            small: 2 * k,
            large: 2,
        },
    })
}
