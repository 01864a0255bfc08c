//! Weighted maximum coverage over predicted ratings.
//!
//! A candidate covers a user when its predicted rating strictly exceeds the
//! threshold `tau`. Each covered user contributes the rating of the one item
//! it is assigned to; the goal is to pick `K` candidates maximizing the sum.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{predicted_rating, LatentModel};
use crate::sampler::CandidateSet;

/// Largest number of subsets [`brute_force_cover`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Predicted ratings of every user for every candidate.
pub trait RatingSource: Sync {
    fn num_users(&self) -> usize;
    fn num_candidates(&self) -> usize;
    fn rating(&self, user: usize, candidate: usize) -> f64;

    /// Calls `f(user, rating)`, in increasing user order, for every user whose
    /// rating of `candidate` is strictly above `tau`.
    fn for_each_above(&self, candidate: usize, tau: f64, f: &mut dyn FnMut(usize, f64)) {
        for u in 0..self.num_users() {
            let r = self.rating(u, candidate);
            if r > tau {
                f(u, r);
            }
        }
    }
}

impl RatingSource for ArrayView2<'_, f64> {
    fn num_users(&self) -> usize {
        self.nrows()
    }

    fn num_candidates(&self) -> usize {
        self.ncols()
    }

    fn rating(&self, user: usize, candidate: usize) -> f64 {
        self[[user, candidate]]
    }
}

impl RatingSource for Array2<f64> {
    fn num_users(&self) -> usize {
        self.nrows()
    }

    fn num_candidates(&self) -> usize {
        self.ncols()
    }

    fn rating(&self, user: usize, candidate: usize) -> f64 {
        self[[user, candidate]]
    }
}

/// Ratings computed on demand from user and candidate latents, for instances
/// whose full matrix would not fit in memory.
#[derive(Clone, Copy, Debug)]
pub struct LatentRatings<'a> {
    users: ArrayView2<'a, f64>,
    candidates: ArrayView2<'a, f64>,
}

impl<'a> LatentRatings<'a> {
    pub fn new(users: ArrayView2<'a, f64>, candidates: ArrayView2<'a, f64>) -> Result<Self> {
        check_dim("candidate latent width", users.ncols(), candidates.ncols())?;
        Ok(LatentRatings { users, candidates })
    }
}

impl RatingSource for LatentRatings<'_> {
    fn num_users(&self) -> usize {
        self.users.nrows()
    }

    fn num_candidates(&self) -> usize {
        self.candidates.nrows()
    }

    fn rating(&self, user: usize, candidate: usize) -> f64 {
        predicted_rating(self.users.row(user), self.candidates.row(candidate))
    }

    fn for_each_above(&self, candidate: usize, tau: f64, f: &mut dyn FnMut(usize, f64)) {
        // sigmoid is monotone, so most users are rejected on the raw score;
        // survivors are checked on the exact rating
        let cutoff = if tau <= 0.0 {
            f64::NEG_INFINITY
        } else if tau >= 1.0 {
            return;
        } else {
            (tau / (1.0 - tau)).ln() - 1e-6
        };
        let c = self.candidates.row(candidate);
        for (u, z) in self.users.rows().into_iter().enumerate() {
            if z.dot(&c) > cutoff {
                let r = predicted_rating(z, c);
                if r > tau {
                    f(u, r);
                }
            }
        }
    }
}

pub struct CoverageProblem<R: RatingSource> {
    pub ratings: R,
    pub tau: f64,
    pub k: usize,
}

impl<R: RatingSource> CoverageProblem<R> {
    pub fn new(ratings: R, tau: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
        }
        if k == 0 || k > ratings.num_candidates() {
            return Err(Error::invalid(format!(
                "K must lie in 1..={}, got {k}",
                ratings.num_candidates()
            )));
        }
        Ok(CoverageProblem { ratings, tau, k })
    }

    fn gain(&self, candidate: usize, covered: &[bool]) -> f64 {
        let mut g = 0.0;
        self.ratings.for_each_above(candidate, self.tau, &mut |u, r| {
            if !covered[u] {
                g += r;
            }
        });
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageSolution {
    /// Candidate indices in selection order.
    pub selected: Vec<usize>,
    /// Candidate covering each user, if any.
    pub assignment: Vec<Option<usize>>,
    pub objective: f64,
    pub coverage_proportion: f64,
    /// Objective gained by each selection, in selection order.
    pub per_item_marginal: Vec<f64>,
    pub tau: f64,
    pub k: usize,
}

impl CoverageSolution {
    fn finish<R: RatingSource>(p: &CoverageProblem<R>, selected: Vec<usize>, assignment: Vec<Option<usize>>, per_item_marginal: Vec<f64>) -> Self {
        let objective = assignment
            .iter()
            .enumerate()
            .filter_map(|(u, c)| c.map(|c| p.ratings.rating(u, c)))
            .fold(0.0, |a, b| a + b);
        let mut sol = CoverageSolution {
            selected,
            assignment,
            objective,
            coverage_proportion: 0.0,
            per_item_marginal,
            tau: p.tau,
            k: p.k,
        };
        sol.coverage_proportion = coverage_proportion(&sol, p.ratings.num_users());
        sol
    }

    pub fn covered_users(&self) -> usize {
        self.assignment.iter().filter(|c| c.is_some()).count()
    }

    /// The first `k` selections with the users they covered, which is the
    /// greedy solution for `K = k`.
    pub fn prefix(&self, k: usize) -> Result<CoverageSolution> {
        if k == 0 || k > self.selected.len() {
            return Err(Error::invalid(format!("prefix length {k} out of 1..={}", self.selected.len())));
        }
        let kept = &self.selected[..k];
        let assignment: Vec<Option<usize>> = self
            .assignment
            .iter()
            .map(|c| c.filter(|c| kept.contains(c)))
            .collect();
        let per_item_marginal = self.per_item_marginal[..k].to_vec();
        let objective = per_item_marginal.iter().fold(0.0, |a, b| a + b);
        let covered = assignment.iter().filter(|c| c.is_some()).count();
        Ok(CoverageSolution {
            selected: kept.to_vec(),
            objective,
            coverage_proportion: covered as f64 / assignment.len().max(1) as f64,
            assignment,
            per_item_marginal,
            tau: self.tau,
            k,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SolutionFile {
            selected: self.selected.clone(),
            assignment: self
                .assignment
                .iter()
                .enumerate()
                .filter_map(|(u, c)| c.map(|c| (u, c)))
                .collect(),
            num_users: self.assignment.len(),
            objective: self.objective,
            coverage_proportion: self.coverage_proportion,
            per_item_marginal: self.per_item_marginal.clone(),
            tau: self.tau,
            k: self.k,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SolutionFile = serde_json::from_str(text)?;
        let mut assignment = vec![None; f.num_users];
        for (u, c) in f.assignment {
            if u >= f.num_users {
                return Err(Error::Integrity(format!("assignment names user {u} of {}", f.num_users)));
            }
            assignment[u] = Some(c);
        }
        Ok(CoverageSolution {
            selected: f.selected,
            assignment,
            objective: f.objective,
            coverage_proportion: f.coverage_proportion,
            per_item_marginal: f.per_item_marginal,
            tau: f.tau,
            k: f.k,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        CoverageSolution::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    selected: Vec<usize>,
    /// user -> candidate, covered users only
    assignment: BTreeMap<usize, usize>,
    num_users: usize,
    objective: f64,
    coverage_proportion: f64,
    per_item_marginal: Vec<f64>,
    tau: f64,
    k: usize,
}

/// Fraction of the `num_users` users that the solution assigns to an item.
pub fn coverage_proportion(sol: &CoverageSolution, num_users: usize) -> f64 {
    if num_users == 0 {
        return 0.0;
    }
    sol.covered_users() as f64 / num_users as f64
}

/// Dense `M x T` matrix of `sigmoid(z_u . z_t)`.
pub fn build_rating_matrix(model: &dyn LatentModel, candidates: &CandidateSet) -> Result<Array2<f64>> {
    check_dim("candidate latent width", model.latent_dim(), candidates.latent_dim())?;
    let users = model.user_embeddings();
    let mut out = users.dot(&candidates.latents.t());
    out.mapv_inplace(|s| crate::nn::clamp_prob(crate::nn::sigmoid(s)));
    Ok(out)
}

/// Heap entry: larger gain first, then lower index.
#[derive(Clone, Copy, Debug)]
struct Entry {
    gain: f64,
    index: usize,
    /// Selection round in which `gain` was computed.
    round: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Greedy selection: each step picks the unselected candidate with the largest
/// total rating from still-uncovered users above `tau`, lowest index on ties.
///
/// Gains only shrink as users get covered, so stale gains kept in a max-heap
/// are upper bounds and only the top entry needs refreshing each step.
pub fn greedy_cover<R: RatingSource>(p: &CoverageProblem<R>) -> CoverageSolution {
    let m = p.ratings.num_users();
    let t = p.ratings.num_candidates();
    let mut covered = vec![false; m];
    let mut assignment = vec![None; m];
    let initial: Vec<f64> = (0..t).into_par_iter().map(|c| p.gain(c, &covered)).collect();
    let mut heap: BinaryHeap<Entry> = initial
        .into_iter()
        .enumerate()
        .map(|(index, gain)| Entry { gain, index, round: 0 })
        .collect();
    let mut selected = Vec::with_capacity(p.k);
    let mut marginals = Vec::with_capacity(p.k);
    let mut is_selected = vec![false; t];

    let mut round = 0;
    while selected.len() < p.k {
        let top = heap.pop().expect("K <= T");
        if top.gain <= 0.0 {
            // every remaining gain is zero: fill with the lowest free indices
            for c in 0..t {
                if selected.len() == p.k {
                    break;
                }
                if !is_selected[c] {
                    is_selected[c] = true;
                    selected.push(c);
                    marginals.push(0.0);
                }
            }
            break;
        }
        if top.round != round {
            heap.push(Entry {
                gain: p.gain(top.index, &covered),
                round,
                ..top
            });
            continue;
        }
        let c = top.index;
        p.ratings.for_each_above(c, p.tau, &mut |u, _| {
            if !covered[u] {
                covered[u] = true;
                assignment[u] = Some(c);
            }
        });
        is_selected[c] = true;
        selected.push(c);
        marginals.push(top.gain);
        round += 1;
    }
    CoverageSolution::finish(p, selected, assignment, marginals)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return acc;
        }
    }
    acc
}

/// Exact optimum by enumerating every `K`-subset in lexicographic order; the
/// first optimal subset wins. Each covered user is assigned to its
/// highest-rated covering item.
pub fn brute_force_cover<R: RatingSource>(p: &CoverageProblem<R>) -> Result<CoverageSolution> {
    let m = p.ratings.num_users();
    let t = p.ratings.num_candidates();
    let subsets = binomial(t, p.k);
    if subsets > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "C({t}, {}) = {subsets} subsets exceeds {BRUTE_FORCE_LIMIT}",
            p.k
        )));
    }
    let above: Vec<Vec<f64>> = (0..m)
        .map(|u| {
            (0..t)
                .map(|c| {
                    let r = p.ratings.rating(u, c);
                    if r > p.tau {
                        r
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let value = |subset: &[usize]| -> f64 {
        above
            .iter()
            .map(|row| subset.iter().map(|&c| row[c]).fold(0.0, f64::max))
            .sum()
    };
    let mut subset: Vec<usize> = (0..p.k).collect();
    let mut best = subset.clone();
    let mut best_value = value(&subset);
    loop {
        // next combination in lexicographic order
        let mut i = p.k;
        while i > 0 && subset[i - 1] == t - p.k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..p.k {
            subset[j] = subset[j - 1] + 1;
        }
        let v = value(&subset);
        if v > best_value {
            best_value = v;
            best = subset.clone();
        }
    }
    let mut assignment = vec![None; m];
    let mut marginals = vec![0.0; p.k];
    for (u, row) in above.iter().enumerate() {
        let mut pick: Option<(usize, f64)> = None;
        for (pos, &c) in best.iter().enumerate() {
            if row[c] > 0.0 && pick.is_none_or(|(_, r)| row[c] > r) {
                pick = Some((pos, row[c]));
            }
        }
        if let Some((pos, r)) = pick {
            assignment[u] = Some(best[pos]);
            marginals[pos] += r;
        }
    }
    Ok(CoverageSolution::finish(p, best, assignment, marginals))
}
