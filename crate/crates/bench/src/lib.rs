//! Seeded fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use lorasched_core::lora::{AdapterWeights, JobBatch, Matrix};
use lorasched_core::memory::{MemSample, MemoryModel};
use lorasched_core::{BatchCandidate, JobId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// A base weight, one adapter per job and one batch of sequences per job.
pub struct ForwardFixture {
    pub w0: Matrix,
    pub adapters: BTreeMap<JobId, AdapterWeights>,
    pub batches: Vec<JobBatch>,
}

pub fn forward_fixture(jobs: usize, dim: usize, rank: usize, seqs: usize, max_len: usize) -> ForwardFixture {
    let mut rng = rng(jobs as u64);
    let w0 = random_matrix(&mut rng, dim, dim);
    let mut adapters = BTreeMap::new();
    let mut batches = Vec::new();
    for j in 0..jobs {
        let id = JobId::new(format!("j{j}"));
        let a = random_matrix(&mut rng, rank, dim);
        let b = random_matrix(&mut rng, dim, rank);
        adapters.insert(id.clone(), AdapterWeights::new(id.clone(), a, b).unwrap());
        let xs = (0..seqs)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                random_matrix(&mut rng, len, dim)
            })
            .collect();
        batches.push(JobBatch::new(id, xs).unwrap());
    }
    ForwardFixture {
        w0,
        adapters,
        batches,
    }
}

pub fn candidates(n: usize, seed: u64) -> Vec<BatchCandidate> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let lengths = (0..rng.random_range(1..=8))
                .map(|_| rng.random_range(16..=2048))
                .collect();
            BatchCandidate::new(
                JobId::new(format!("c{i}")),
                rng.random_range(1..=5),
                i as f64,
                lengths,
            )
        })
        .collect()
}

pub fn memory_samples(n: usize, seed: u64) -> Vec<MemSample> {
    let truth = MemoryModel::from_coefficients(6.56, 1.42e-3, -8.76e-8);
    let mut rng = rng(seed);
    (0..n)
        .map(|_| {
            let b = rng.random_range(1..=32);
            let l = rng.random_range(64..=4096);
            MemSample::new(b, l, truth.predict(b, l) + rng.random_range(-0.1..0.1))
        })
        .collect()
}
