//! Evaluation of generated items: optimal matching to ideal items, distance
//! to the nearest existing item, predicted versus ground-truth coverage, and
//! held-out rating error.

use std::fs::OpenOptions;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::coverage::CoverageSolution;
use crate::dataset::RatingTriple;
use crate::error::{check_dim, Error, Result};
use crate::model::{predicted_rating, LatentModel};
use crate::synth::SyntheticDataset;

/// Minimum-cost perfect matching of a square cost matrix by the Hungarian
/// method with row and column potentials. Returns the column assigned to each
/// row.
pub fn linear_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    check_dim("assignment cost columns", n, cost.ncols())?;
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based indices; column 0 is a virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    Ok(col_of)
}

/// Optimal matching of a rectangular cost matrix: `min(rows, cols)` pairs
/// `(row, col)`, sorted by row.
pub fn match_rectangular(cost: ArrayView2<'_, f64>) -> Result<Vec<(usize, usize)>> {
    let (r, c) = cost.dim();
    let n = r.max(c);
    // padding with a constant shifts every perfect matching equally
    let mut square = Array2::zeros((n, n));
    square.slice_mut(ndarray::s![..r, ..c]).assign(&cost);
    let perm = linear_assignment(square.view())?;
    Ok(perm
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < r && j < c)
        .collect())
}

/// Root mean squared difference of two equal-length vectors.
pub fn rmse(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub generated: usize,
    pub ideal: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealMatch {
    /// Mean RMSE over the matched pairs.
    pub mean_rmse: f64,
    pub pairs: Vec<MatchedPair>,
}

/// Matches generated items to ideal items minimizing total RMSE, then
/// averages over the `min(K, K_g)` matched pairs.
pub fn rmse_to_ideal(generated: ArrayView2<'_, f64>, ideal: ArrayView2<'_, f64>) -> Result<IdealMatch> {
    if generated.nrows() == 0 || ideal.nrows() == 0 {
        return Err(Error::invalid("need at least one generated and one ideal item"));
    }
    check_dim("generated item width", ideal.ncols(), generated.ncols())?;
    let cost = Array2::from_shape_fn((generated.nrows(), ideal.nrows()), |(g, i)| rmse(generated.row(g), ideal.row(i)));
    let pairs: Vec<MatchedPair> = match_rectangular(cost.view())?
        .into_iter()
        .map(|(g, i)| MatchedPair {
            generated: g,
            ideal: i,
            rmse: cost[[g, i]],
        })
        .collect();
    let mean_rmse = pairs.iter().map(|p| p.rmse).sum::<f64>() / pairs.len() as f64;
    Ok(IdealMatch { mean_rmse, pairs })
}

/// Mean over ideal items of the RMSE to the closest observed item.
pub fn nearest_existing_rmse(ideal: ArrayView2<'_, f64>, observed: ArrayView2<'_, f64>) -> Result<f64> {
    if observed.nrows() == 0 || ideal.nrows() == 0 {
        return Err(Error::invalid("need at least one ideal and one observed item"));
    }
    check_dim("observed item width", ideal.ncols(), observed.ncols())?;
    let total: f64 = ideal
        .rows()
        .into_iter()
        .map(|x| {
            observed
                .rows()
                .into_iter()
                .map(|o| rmse(x, o))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / ideal.nrows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub predicted: f64,
    /// `None` without a ground-truth rating oracle.
    pub real: Option<f64>,
}

/// Predicted coverage of the solution and, given ground truth, the fraction
/// of all users whose true rating of the decoded item they were assigned to
/// exceeds `tau`. Row `k` of `decoded` is the features of `sol.selected[k]`.
pub fn coverage_report(sol: &CoverageSolution, truth: Option<&SyntheticDataset>, decoded: ArrayView2<'_, f64>) -> Result<CoverageReport> {
    check_dim("decoded item count", sol.selected.len(), decoded.nrows())?;
    let Some(sd) = truth else {
        return Ok(CoverageReport {
            predicted: sol.coverage_proportion,
            real: None,
        });
    };
    check_dim("solution user count", sd.base.num_users(), sol.assignment.len())?;
    let mut hits = 0usize;
    for (u, c) in sol.assignment.iter().enumerate() {
        if let Some(c) = c {
            let pos = sol
                .selected
                .iter()
                .position(|s| s == c)
                .ok_or_else(|| Error::Integrity(format!("user {u} assigned to unselected candidate {c}")))?;
            if sd.true_rating(u, decoded.row(pos))? > sol.tau {
                hits += 1;
            }
        }
    }
    Ok(CoverageReport {
        predicted: sol.coverage_proportion,
        real: Some(hits as f64 / sd.base.num_users().max(1) as f64),
    })
}

/// RMSE between `sigmoid(z_u . z_i)` and the (unit-scale) ratings of `triples`.
pub fn rating_rmse_heldout(model: &dyn LatentModel, features: ArrayView2<'_, f64>, triples: &[RatingTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("held-out set is empty"));
    }
    let items: Vec<usize> = triples.iter().map(|t| t.item).collect();
    if let Some(&bad) = items.iter().find(|&&i| i >= features.nrows()) {
        return Err(Error::invalid(format!("unknown item {bad}")));
    }
    let z = model.encode_batch(features.select(Axis(0), &items).view())?;
    let users = model.user_embeddings();
    let mut sq = 0.0;
    for (k, t) in triples.iter().enumerate() {
        if t.user >= users.nrows() {
            return Err(Error::invalid(format!("unknown user {}", t.user)));
        }
        let d = predicted_rating(users.row(t.user), z.row(k)) - t.rating;
        sq += d * d;
    }
    Ok((sq / triples.len() as f64).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_to_ideal: Option<f64>,
    pub nearest_existing_rmse: Option<f64>,
    pub predicted_coverage: f64,
    pub real_coverage: Option<f64>,
    pub rating_rmse_heldout: Option<f64>,
    pub per_item_table: Vec<MatchedPair>,
}

/// One line of the experiment ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub model: String,
    pub groups: usize,
    pub items_per_group: usize,
    pub seed: u64,
    pub k: usize,
    pub tau: f64,
    pub candidates: usize,
    pub rmse_to_ideal: Option<f64>,
    pub nearest_existing_rmse: Option<f64>,
    pub predicted_coverage: f64,
    pub real_coverage: Option<f64>,
    pub rating_rmse_heldout: Option<f64>,
    pub config_hash: String,
}

/// Appends `row` to a CSV ledger, writing the header if the file is new or empty.
pub fn append_ledger_row(path: &Path, row: &LedgerRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn total(cost: &Array2<f64>, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
    }

    #[test]
    fn diagonal_zero_cost_gives_identity() {
        let n = 5;
        let cost = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(linear_assignment(cost.view()).unwrap(), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn equal_costs() {
        let cost = Array2::from_elem((4, 4), 2.5);
        let perm = linear_assignment(cost.view()).unwrap();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(total(&cost, &perm), 10.0);
    }

    #[test]
    fn rejects_bad_costs() {
        assert!(linear_assignment(array![[1.0, f64::NAN], [0.0, 1.0]].view()).is_err());
        assert!(linear_assignment(Array2::<f64>::zeros((2, 3)).view()).is_err());
        assert!(linear_assignment(Array2::<f64>::zeros((0, 0)).view()).unwrap().is_empty());
    }

    #[test]
    fn random_six_by_six_matches_enumeration() {
        let mut rng = rng::substream(2, "hungarian");
        let perms = permutations(6);
        for _ in 0..20 {
            let cost = Array2::from_shape_simple_fn((6, 6), || rng.random_range(-3.0..10.0));
            let best = perms.iter().map(|p| total(&cost, p)).fold(f64::INFINITY, f64::min);
            let got = total(&cost, &linear_assignment(cost.view()).unwrap());
            assert_abs_diff_eq!(got, best, epsilon = 1e-9);
        }
    }

    #[test]
    fn rectangular_matching_uses_min_pairs() {
        let cost = array![[5.0, 1.0, 9.0], [1.0, 8.0, 9.0]];
        assert_eq!(match_rectangular(cost.view()).unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(match_rectangular(cost.t()).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn ideal_rmse_cases() {
        let ideal = array![[0.1, 0.2], [0.8, 0.9]];
        assert_eq!(rmse_to_ideal(ideal.view(), ideal.view()).unwrap().mean_rmse, 0.0);
        let shifted = ideal.mapv(|v| v + 0.1);
        let m = rmse_to_ideal(shifted.slice(ndarray::s![1..2, ..]), ideal.view()).unwrap();
        assert_abs_diff_eq!(m.mean_rmse, 0.1, epsilon = 1e-12);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].ideal, 1);
        assert!(rmse_to_ideal(array![[0.1]].view(), ideal.view()).is_err());
    }

    #[test]
    fn ideal_rmse_three_by_three_matches_enumeration() {
        let mut rng = rng::substream(4, "ideal");
        let g = Array2::from_shape_simple_fn((3, 5), || rng.random_range(0.0..1.0));
        let i = Array2::from_shape_simple_fn((3, 5), || rng.random_range(0.0..1.0));
        let best = permutations(3)
            .iter()
            .map(|p| p.iter().enumerate().map(|(a, &b)| rmse(g.row(a), i.row(b))).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(rmse_to_ideal(g.view(), i.view()).unwrap().mean_rmse, best, epsilon = 1e-12);
    }

    #[test]
    fn nearest_existing_cases() {
        let ideal = array![[0.5, 0.5], [0.2, 0.9]];
        let observed = array![[0.0, 0.0], [0.5, 0.5]];
        let want = (0.0 + rmse(ideal.row(1), observed.row(1)).min(rmse(ideal.row(1), observed.row(0)))) / 2.0;
        assert_abs_diff_eq!(nearest_existing_rmse(ideal.view(), observed.view()).unwrap(), want, epsilon = 1e-15);
        let offset = ideal.mapv(|v| v + 0.2);
        assert_abs_diff_eq!(nearest_existing_rmse(ideal.view(), offset.view()).unwrap(), 0.2, epsilon = 1e-12);
    }

    fn small_synth() -> SyntheticDataset {
        generate_synthetic(&SyntheticSpec {
            num_users: 40,
            num_groups: 2,
            items_per_group: 5,
            rating_noise: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn ideal_items_realize_every_predicted_cover() {
        let sd = small_synth();
        let sol = CoverageSolution {
            selected: vec![7, 3],
            assignment: sd.group_of_user.iter().map(|&g| Some([7, 3][g])).collect(),
            objective: 0.0,
            coverage_proportion: 1.0,
            per_item_marginal: vec![0.0, 0.0],
            tau: 0.7,
            k: 2,
        };
        let rep = coverage_report(&sol, Some(&sd), sd.ideal_items.view()).unwrap();
        assert_eq!(rep, CoverageReport { predicted: 1.0, real: Some(1.0) });
        let nobody = CoverageSolution {
            assignment: vec![None; 40],
            coverage_proportion: 0.0,
            ..sol
        };
        let rep = coverage_report(&nobody, Some(&sd), sd.ideal_items.view()).unwrap();
        assert_eq!(rep, CoverageReport { predicted: 0.0, real: Some(0.0) });
        assert_eq!(coverage_report(&nobody, None, sd.ideal_items.view()).unwrap().real, None);
    }

    #[test]
    fn heldout_rmse_by_hand() {
        use crate::linear_model::LinearModel;
        use crate::nn::LossKind;
        let users = array![[1.0], [-2.0]];
        let enc = array![[1.0, 0.0]];
        let m = LinearModel::new(enc, Array2::zeros((2, 1)), users, LossKind::CrossEntropy).unwrap();
        let feats = array![[0.0, 0.3], [0.5, 0.1]];
        let triples = [
            RatingTriple { user: 0, item: 0, rating: 1.0 },
            RatingTriple { user: 0, item: 1, rating: 0.25 },
            RatingTriple { user: 1, item: 1, rating: 0.0 },
        ];
        let sig = |s: f64| 1.0 / (1.0 + (-s).exp());
        let want = (((0.5 - 1.0f64).powi(2) + (sig(0.5) - 0.25).powi(2) + sig(-1.0).powi(2)) / 3.0).sqrt();
        assert_abs_diff_eq!(rating_rmse_heldout(&m, feats.view(), &triples).unwrap(), want, epsilon = 1e-12);
        // constant one-half against balanced 0/1 ratings
        let zero = LinearModel::new(Array2::zeros((1, 2)), Array2::zeros((2, 1)), users_zero(), LossKind::CrossEntropy).unwrap();
        let balanced = [
            RatingTriple { user: 0, item: 0, rating: 1.0 },
            RatingTriple { user: 0, item: 1, rating: 0.0 },
        ];
        assert_abs_diff_eq!(rating_rmse_heldout(&zero, feats.view(), &balanced).unwrap(), 0.5, epsilon = 1e-12);
        assert!(rating_rmse_heldout(&zero, feats.view(), &[]).is_err());
    }

    fn users_zero() -> Array2<f64> {
        Array2::zeros((1, 1))
    }

    #[test]
    fn ledger_appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let row = LedgerRow {
            model: "vae".into(),
            groups: 4,
            items_per_group: 20,
            seed: 1,
            k: 4,
            tau: 0.7,
            candidates: 1000,
            rmse_to_ideal: Some(0.1),
            nearest_existing_rmse: Some(0.2),
            predicted_coverage: 0.9,
            real_coverage: None,
            rating_rmse_heldout: Some(0.05),
            config_hash: "abc".into(),
        };
        append_ledger_row(&path, &row).unwrap();
        append_ledger_row(&path, &LedgerRow { seed: 2, ..row.clone() }).unwrap();
        let rows = read_ledger(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], row);
        assert_eq!(rows[1].seed, 2);
    }

    proptest! {
        #[test]
        fn hungarian_beats_spot_checks(seed in 0u64..10_000, n in 1usize..=7) {
            let mut rng = rng::substream(seed, "spot");
            let cost = Array2::from_shape_simple_fn((n, n), || rng.random_range(0.0..1.0));
            let best = total(&cost, &linear_assignment(cost.view()).unwrap());
            let mut p: Vec<usize> = (0..n).collect();
            prop_assert!(best <= total(&cost, &p) + 1e-12);
            for _ in 0..100 {
                p.shuffle(&mut rng);
                prop_assert!(best <= total(&cost, &p) + 1e-12);
            }
        }

        #[test]
        fn ideal_rmse_ignores_row_order(seed in 0u64..10_000) {
            let mut rng = rng::substream(seed, "order");
            let g = Array2::from_shape_simple_fn((4, 3), || rng.random_range(0.0..1.0));
            let i = Array2::from_shape_simple_fn((3, 3), || rng.random_range(0.0..1.0));
            let base = rmse_to_ideal(g.view(), i.view()).unwrap().mean_rmse;
            let mut rows: Vec<usize> = (0..4).collect();
            rows.shuffle(&mut rng);
            let g2 = g.select(Axis(0), &rows);
            let i2 = i.select(Axis(0), &[2, 0, 1]);
            prop_assert!((rmse_to_ideal(g2.view(), i2.view()).unwrap().mean_rmse - base).abs() < 1e-12);
        }
    }
}
