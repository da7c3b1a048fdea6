//! Choosing which jobs contribute to the next fused batch.
//!
//! A candidate is one job's next batch. Fusing a set of candidates pads every
//! sequence to the longest sequence in the set, so the padding of a set `S`
//! with longest item `L` is `sum over c in S of (n_c * L - tokens_c)`.

use std::cmp::Ordering;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{fused_token_counts, TokenCounts};
use crate::workload::{ITime, JobId};

/// Largest candidate count accepted by the exhaustive oracle.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCandidate {
    pub job_id: JobId,
    pub priority: u32,
    pub submit_time: ITime,
    pub item_lengths: Vec<u32>,
    pub max_len: u32,
    pub token_count: u64,
}

impl BatchCandidate {
    pub fn new(job_id: JobId, priority: u32, submit_time: ITime, item_lengths: Vec<u32>) -> Self {
        let max_len = item_lengths.iter().copied().max().unwrap_or(0);
        let token_count = item_lengths.iter().map(|&l| l as u64).sum();
        BatchCandidate {
            job_id,
            priority,
            submit_time,
            item_lengths,
            max_len,
            token_count,
        }
    }

    fn num_items(&self) -> u64 {
        self.item_lengths.len() as u64
    }

    /// Padding this candidate contributes when the batch is aligned to `len`.
    fn padding_at(&self, len: u32) -> u64 {
        self.num_items() * len as u64 - self.token_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<JobId>,
    pub fused_max_len: u32,
    pub padding_tokens: u64,
    pub total_tokens: u64,
    pub padding_ratio: f64,
}

impl SelectionResult {
    fn empty() -> Self {
        SelectionResult {
            chosen: Vec::new(),
            fused_max_len: 0,
            padding_tokens: 0,
            total_tokens: 0,
            padding_ratio: 0.0,
        }
    }

    fn from_indices(candidates: &[BatchCandidate], idx: &[usize]) -> Self {
        if idx.is_empty() {
            return Self::empty();
        }
        let counts: TokenCounts =
            fused_token_counts(idx.iter().map(|&i| candidates[i].item_lengths.as_slice()));
        SelectionResult {
            chosen: idx.iter().map(|&i| candidates[i].job_id.clone()).collect(),
            fused_max_len: idx.iter().map(|&i| candidates[i].max_len).max().unwrap_or(0),
            padding_tokens: counts.padding,
            total_tokens: counts.total,
            padding_ratio: counts.padding_ratio(),
        }
    }
}

/// Priority descending, then submit time ascending, then input position.
pub fn priority_order(a: &BatchCandidate, ia: usize, b: &BatchCandidate, ib: usize) -> Ordering {
    b.priority
        .cmp(&a.priority)
        .then(a.submit_time.total_cmp(&b.submit_time))
        .then(ia.cmp(&ib))
}

fn sorted_by_priority(candidates: &[BatchCandidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| priority_order(&candidates[a], a, &candidates[b], b));
    idx
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        Err(Error::Usage("batch width M must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// First `m` candidates in arrival order.
pub fn select_fifo(candidates: &[BatchCandidate], m: usize) -> Result<SelectionResult> {
    check_m(m)?;
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        candidates[a]
            .submit_time
            .total_cmp(&candidates[b].submit_time)
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(SelectionResult::from_indices(candidates, &idx))
}

/// Top `m` candidates by priority, earlier submission first on ties.
pub fn select_priority(candidates: &[BatchCandidate], m: usize) -> Result<SelectionResult> {
    check_m(m)?;
    let mut idx = sorted_by_priority(candidates);
    idx.truncate(m);
    Ok(SelectionResult::from_indices(candidates, &idx))
}

/// Size-`min(m, n)` subset with the fewest padding tokens.
///
/// For every distinct item length `L`, the best subset whose longest item is
/// exactly `L` takes the cheapest candidate of max length `L` plus the
/// cheapest remaining candidates of max length `<= L`, where a candidate's
/// cost is its padding at `L`. The minimum over all `L` is the optimum.
pub fn select_minpad(candidates: &[BatchCandidate], m: usize) -> Result<SelectionResult> {
    check_m(m)?;
    Ok(minpad_indices(candidates, m, None)
        .map(|idx| SelectionResult::from_indices(candidates, &idx))
        .unwrap_or_else(SelectionResult::empty))
}

/// MinPad restricted to subsets whose summed `memory` stays within `budget`.
///
/// Prefers the largest feasible subset size up to `m`; within a size, the
/// members beyond the anchor are admitted cheapest-first while they fit.
/// Without a binding budget this returns the same subset as [`select_minpad`].
pub fn select_minpad_budgeted(
    candidates: &[BatchCandidate],
    memory: &[f64],
    budget: f64,
    m: usize,
) -> Result<SelectionResult> {
    check_m(m)?;
    if memory.len() != candidates.len() {
        return Err(Error::Usage("one memory estimate per candidate required".into()));
    }
    Ok(minpad_indices(candidates, m, Some((memory, budget)))
        .map(|idx| SelectionResult::from_indices(candidates, &idx))
        .unwrap_or_else(SelectionResult::empty))
}

fn minpad_indices(
    candidates: &[BatchCandidate],
    m: usize,
    budget: Option<(&[f64], f64)>,
) -> Option<Vec<usize>> {
    let n = candidates.len();
    if n == 0 {
        return None;
    }
    let rank = {
        let order = sorted_by_priority(candidates);
        let mut rank = vec![0; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        rank
    };
    let anchors: Vec<u32> = candidates.iter().map(|c| c.max_len).sorted().dedup().collect();
    let fits = |used: f64, i: usize| match budget {
        None => true,
        Some((mem, cap)) => used + mem[i] <= cap + crate::memory::MEM_EPS,
    };
    let mem_of = |i: usize| budget.map_or(0.0, |(mem, _)| mem[i]);

    for size in (1..=m.min(n)).rev() {
        let mut best: Option<(u64, Vec<usize>)> = None;
        for &len in &anchors {
            let mut eligible: Vec<usize> = (0..n).filter(|&i| candidates[i].max_len <= len).collect();
            if eligible.len() < size {
                continue;
            }
            eligible.sort_by_key(|&i| (candidates[i].padding_at(len), rank[i]));
            let Some(&anchor) = eligible
                .iter()
                .find(|&&i| candidates[i].max_len == len && fits(0.0, i))
            else {
                continue;
            };
            let mut chosen = vec![anchor];
            let mut used = mem_of(anchor);
            for &i in &eligible {
                if chosen.len() == size {
                    break;
                }
                if i != anchor && fits(used, i) {
                    chosen.push(i);
                    used += mem_of(i);
                }
            }
            if chosen.len() < size {
                // Padding-first admission ran out of memory; retry lightest-first
                // so a feasible subset of this size is found whenever one exists.
                let Some(found) = lightest_fit(&eligible, size, len, candidates, &mem_of, &fits) else {
                    continue;
                };
                chosen = found;
            }
            let padding: u64 = chosen.iter().map(|&i| candidates[i].padding_at(len)).sum();
            if best.as_ref().is_none_or(|(p, _)| padding < *p) {
                best = Some((padding, chosen));
            }
        }
        if let Some((_, mut chosen)) = best {
            chosen.sort_by_key(|&i| rank[i]);
            return Some(chosen);
        }
    }
    None
}

/// Some anchor at `len` plus the `size - 1` lightest other eligible
/// candidates, if that fits; anchors are tried in `eligible` order.
fn lightest_fit(
    eligible: &[usize],
    size: usize,
    len: u32,
    candidates: &[BatchCandidate],
    mem_of: &impl Fn(usize) -> f64,
    fits: &impl Fn(f64, usize) -> bool,
) -> Option<Vec<usize>> {
    let mut by_weight = eligible.to_vec();
    by_weight.sort_by(|&a, &b| mem_of(a).total_cmp(&mem_of(b)));
    for &anchor in eligible.iter().filter(|&&i| candidates[i].max_len == len) {
        let mut chosen = vec![anchor];
        let mut used = mem_of(anchor);
        for &i in &by_weight {
            if chosen.len() == size {
                break;
            }
            if i != anchor && fits(used, i) {
                chosen.push(i);
                used += mem_of(i);
            }
        }
        if chosen.len() == size && fits(0.0, anchor) {
            return Some(chosen);
        }
    }
    None
}

/// Exhaustive minimum-padding subset of size `min(m, n)`. Test oracle.
pub fn brute_force_min_padding(candidates: &[BatchCandidate], m: usize) -> Result<SelectionResult> {
    check_m(m)?;
    if candidates.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::Usage(format!(
            "brute force is limited to {BRUTE_FORCE_LIMIT} candidates, got {}",
            candidates.len()
        )));
    }
    let size = m.min(candidates.len());
    if size == 0 {
        return Ok(SelectionResult::empty());
    }
    let best = (0..candidates.len())
        .combinations(size)
        .map(|idx| {
            let counts = fused_token_counts(idx.iter().map(|&i| candidates[i].item_lengths.as_slice()));
            (counts.padding, idx)
        })
        .min_by_key(|(p, _)| *p)
        .map(|(_, idx)| idx)
        .unwrap_or_default();
    Ok(SelectionResult::from_indices(candidates, &best))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortMode {
    Shortest,
    Longest,
}

/// Per-job length-sorted consumption: each call picks the current shortest
/// (or longest) unconsumed item of every job.
///
/// Consuming data in sorted order minimizes padding but is known to hurt
/// convergence; runs built on it should be flagged.
#[derive(Debug, Clone)]
pub struct OptimalBatchSelector {
    mode: SortMode,
    jobs: Vec<(JobId, Vec<u32>, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPicks {
    pub picks: Vec<(JobId, u32)>,
    pub counts: TokenCounts,
}

impl OptimalBatchSelector {
    pub fn new<'a>(mode: SortMode, jobs: impl IntoIterator<Item = (JobId, &'a [u32])>) -> Result<Self> {
        let jobs: Vec<_> = jobs
            .into_iter()
            .map(|(id, lengths)| {
                let mut sorted = lengths.to_vec();
                sorted.sort_unstable();
                if mode == SortMode::Longest {
                    sorted.reverse();
                }
                (id, sorted, 0)
            })
            .collect();
        if let Some((id, _, _)) = jobs.iter().find(|(_, l, _)| l.is_empty()) {
            return Err(Error::Usage(format!("job `{id}` has no data")));
        }
        Ok(OptimalBatchSelector { mode, jobs })
    }

    pub fn mode(&self) -> SortMode {
        self.mode
    }

    /// Picks one item per job; a job that has consumed all its data starts a new sorted pass.
    pub fn next_picks(&mut self) -> OptimalPicks {
        let mut picks = Vec::with_capacity(self.jobs.len());
        for (id, sorted, pos) in &mut self.jobs {
            if *pos >= sorted.len() {
                *pos = 0;
            }
            picks.push((id.clone(), sorted[*pos]));
            *pos += 1;
        }
        let lens: Vec<[u32; 1]> = picks.iter().map(|(_, l)| [*l]).collect();
        let counts = fused_token_counts(lens.iter().map(|l| l.as_slice()));
        OptimalPicks { picks, counts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, priority: u32, submit: f64, lens: &[u32]) -> BatchCandidate {
        BatchCandidate::new(JobId::from(id), priority, submit, lens.to_vec())
    }

    fn ids(r: &SelectionResult) -> Vec<&str> {
        r.chosen.iter().map(|j| j.as_str()).collect()
    }

    #[test]
    fn fifo_prefix_and_no_contention() {
        let c = vec![
            cand("J1", 1, 0.0, &[2]),
            cand("J2", 1, 1.0, &[6]),
            cand("J3", 1, 2.0, &[5]),
        ];
        assert_eq!(ids(&select_fifo(&c, 2).unwrap()), ["J1", "J2"]);
        assert_eq!(select_fifo(&c, 5).unwrap().chosen.len(), 3);
        assert!(select_fifo(&[], 2).unwrap().chosen.is_empty());
        assert!(select_fifo(&c, 0).is_err());
    }

    #[test]
    fn fifo_versus_minpad_two_slot_scenario() {
        // Two slots: arrival order pairs lengths 2 and 6, MinPad pairs 6 and 5.
        let c = vec![
            cand("J1", 1, 0.0, &[2]),
            cand("J2", 1, 1.0, &[6]),
            cand("J3", 1, 2.0, &[5]),
        ];
        assert_eq!(select_fifo(&c, 2).unwrap().padding_tokens, 4);
        let mp = select_minpad(&c, 2).unwrap();
        assert_eq!(mp.padding_tokens, 1);
        assert_eq!(ids(&mp), ["J2", "J3"]);
    }

    #[test]
    fn priority_selection() {
        let c = vec![
            cand("a", 1, 0.0, &[1]),
            cand("b", 3, 0.0, &[1]),
            cand("c", 2, 0.0, &[1]),
        ];
        assert_eq!(ids(&select_priority(&c, 1).unwrap()), ["b"]);
        let tie = vec![cand("late", 2, 5.0, &[1]), cand("early", 2, 1.0, &[1])];
        assert_eq!(ids(&select_priority(&tie, 1).unwrap()), ["early"]);
        let c = vec![
            cand("x", 5, 2.0, &[1]),
            cand("y", 5, 1.0, &[1]),
            cand("z", 1, 0.0, &[1]),
        ];
        assert_eq!(ids(&select_priority(&c, 2).unwrap()), ["y", "x"]);
    }

    #[test]
    fn minpad_examples() {
        let c = vec![
            cand("J1", 1, 0.0, &[4, 4]),
            cand("J2", 1, 1.0, &[4, 4]),
            cand("J3", 1, 2.0, &[7, 7]),
        ];
        let r = select_minpad(&c, 2).unwrap();
        assert_eq!((ids(&r), r.padding_tokens), (vec!["J1", "J2"], 0));

        let c = vec![
            cand("J1", 1, 0.0, &[3]),
            cand("J2", 1, 1.0, &[5]),
            cand("J3", 1, 2.0, &[5]),
        ];
        let r = select_minpad(&c, 2).unwrap();
        assert_eq!((ids(&r), r.padding_tokens), (vec!["J2", "J3"], 0));
    }

    #[test]
    fn minpad_identical_candidates_follow_submit_order() {
        let c: Vec<_> = (0..5)
            .map(|i| cand(&format!("J{i}"), 1, (5 - i) as f64, &[8, 8]))
            .collect();
        let r = select_minpad(&c, 2).unwrap();
        assert_eq!(r.padding_tokens, 0);
        assert_eq!(ids(&r), ["J4", "J3"]);
    }

    #[test]
    fn minpad_beats_largest_length_heuristic_on_uneven_batches() {
        // Anchor 10: the candidate with max 9 carries three short items and
        // pads far more than the one with a single item of length 8.
        let c = vec![
            cand("anchor", 1, 0.0, &[10]),
            cand("wide", 1, 1.0, &[9, 1, 1, 1]),
            cand("narrow", 1, 2.0, &[8]),
        ];
        let r = select_minpad(&c, 2).unwrap();
        assert_eq!(r.padding_tokens, 2);
        assert_eq!(
            r.padding_tokens,
            brute_force_min_padding(&c, 2).unwrap().padding_tokens
        );
    }

    #[test]
    fn brute_force_guard_and_singleton() {
        let many: Vec<_> = (0..21).map(|i| cand(&i.to_string(), 1, 0.0, &[1])).collect();
        assert!(brute_force_min_padding(&many, 2).is_err());
        let c = vec![cand("a", 1, 0.0, &[3, 5]), cand("b", 1, 0.0, &[4, 4, 4])];
        let r = brute_force_min_padding(&c, 1).unwrap();
        assert_eq!((ids(&r), r.padding_tokens), (vec!["b"], 0));
    }

    #[test]
    fn greedy_by_smallest_max_is_suboptimal_but_oracle_is_not() {
        let c = vec![
            cand("short", 1, 0.0, &[1]),
            cand("long1", 1, 1.0, &[10; 8]),
            cand("long2", 1, 2.0, &[10; 8]),
        ];
        // Smallest-max greedy would pair `short` and `long1`: padding 9.
        let greedy = fused_token_counts([c[0].item_lengths.as_slice(), &c[1].item_lengths]);
        let oracle = brute_force_min_padding(&c, 2).unwrap();
        assert_eq!(greedy.padding, 9);
        assert_eq!(oracle.padding_tokens, 0);
        assert!(oracle.padding_tokens < greedy.padding);
    }

    #[test]
    fn budgeted_minpad_respects_memory() {
        let c = vec![
            cand("a", 1, 0.0, &[5]),
            cand("b", 1, 1.0, &[5]),
            cand("c", 1, 2.0, &[3]),
        ];
        let r = select_minpad_budgeted(&c, &[6.0, 6.0, 3.0], 10.0, 2).unwrap();
        assert_eq!(r.chosen.len(), 2);
        assert!(ids(&r).contains(&"c"));
        let r = select_minpad_budgeted(&c, &[6.0, 6.0, 6.0], 10.0, 2).unwrap();
        assert_eq!(r.chosen.len(), 1);
        // Non-binding budget matches plain MinPad.
        let free = select_minpad_budgeted(&c, &[1.0; 3], 100.0, 2).unwrap();
        assert_eq!(free, select_minpad(&c, 2).unwrap());
    }

    #[test]
    fn optimal_batch_sorted_consumption() {
        let lens = [5u32, 2, 9];
        let mut sel = OptimalBatchSelector::new(SortMode::Shortest, [(JobId::from("a"), &lens[..])]).unwrap();
        let got: Vec<u32> = (0..3).map(|_| sel.next_picks().picks[0].1).collect();
        assert_eq!(got, [2, 5, 9]);

        let (a, b) = ([1u32, 9], [2u32, 8]);
        let jobs = || [(JobId::from("a"), &a[..]), (JobId::from("b"), &b[..])];
        let mut s = OptimalBatchSelector::new(SortMode::Shortest, jobs()).unwrap();
        let p = s.next_picks();
        assert_eq!(p.picks.iter().map(|x| x.1).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(p.counts.padding, 1);
        let mut s = OptimalBatchSelector::new(SortMode::Longest, jobs()).unwrap();
        let p = s.next_picks();
        assert_eq!(p.picks.iter().map(|x| x.1).collect::<Vec<_>>(), [9, 8]);
        assert_eq!(p.counts.padding, 1);
    }
}
