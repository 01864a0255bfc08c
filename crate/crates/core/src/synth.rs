//! Synthetic benchmark: user groups with unobserved ideal items.
//!
//! Each group owns an ideal item placed uniformly in a box inside the unit
//! cube. Observed items are Gaussian perturbations of their group's ideal.
//! Users rate items of their own group by closeness to the ideal and items
//! of other groups with low uniform ratings. The ideal items themselves are
//! never rated, and serve as ground truth for generated items.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_dataset, RatingScale, RatingTriple, RatingsDataset};
use crate::error::{Error, Result};
use crate::rng;

pub const IDEAL_ITEMS_FILE: &str = "ideal_items.csv";
pub const GROUPS_FILE: &str = "groups.json";

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_groups: usize,
    pub items_per_group: usize,
    pub feature_dim: usize,
    /// Standard deviation of observed items around their ideal item.
    pub item_spread: f64,
    /// Standard deviation of the noise added to same-group ratings.
    pub rating_noise: f64,
    pub ratings_per_user: usize,
    /// Ideal items are drawn from `[box_low, box_high]^feature_dim`.
    pub box_low: f64,
    pub box_high: f64,
    /// Minimum pairwise distance between ideal items, as a multiple of
    /// `sqrt(feature_dim)`.
    pub min_separation: f64,
    /// Distance at which the same-group rating reaches its floor, as a
    /// multiple of `item_spread * sqrt(feature_dim)`.
    pub falloff: f64,
    pub same_group_floor: f64,
    pub cross_group_low: f64,
    pub cross_group_high: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 5000,
            num_groups: 4,
            items_per_group: 20,
            feature_dim: 20,
            item_spread: 0.08,
            rating_noise: 0.03,
            ratings_per_user: 20,
            box_low: 0.25,
            box_high: 0.75,
            min_separation: 0.15,
            falloff: 3.0,
            same_group_floor: 0.3,
            cross_group_low: 0.1,
            cross_group_high: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_groups", self.num_groups),
            ("items_per_group", self.items_per_group),
            ("feature_dim", self.feature_dim),
            ("ratings_per_user", self.ratings_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.num_users % self.num_groups != 0 {
            return Err(Error::invalid(format!(
                "{} users cannot be split evenly into {} groups",
                self.num_users, self.num_groups
            )));
        }
        if !(self.item_spread > 0.0) {
            return Err(Error::invalid("item_spread must be positive"));
        }
        if !(self.rating_noise >= 0.0) {
            return Err(Error::invalid("rating_noise must be non-negative"));
        }
        if !(0.0 <= self.box_low && self.box_low < self.box_high && self.box_high <= 1.0) {
            return Err(Error::invalid("placement box must satisfy 0 <= low < high <= 1"));
        }
        if !(self.falloff > 0.0) || !(self.min_separation >= 0.0) {
            return Err(Error::invalid("falloff must be positive and min_separation non-negative"));
        }
        if !(self.cross_group_low <= self.cross_group_high) {
            return Err(Error::invalid("cross-group rating range is empty"));
        }
        Ok(())
    }

    /// Distance beyond which a same-group rating sits at its floor.
    pub fn max_distance(&self) -> f64 {
        self.falloff * self.item_spread * (self.feature_dim as f64).sqrt()
    }

    /// Noise-free same-group rating at distance `d` from the ideal item.
    pub fn rating_at_distance(&self, d: f64) -> f64 {
        (1.0 - d / self.max_distance()).clamp(self.same_group_floor, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub base: RatingsDataset,
    pub ideal_items: Array2<f64>,
    pub group_of_user: Vec<usize>,
    pub group_of_item: Vec<usize>,
    pub spec: SyntheticSpec,
}

impl SyntheticDataset {
    /// Ground-truth rating of a feature vector by `user`, without noise.
    pub fn true_rating(&self, user: usize, x: ArrayView1<'_, f64>) -> Result<f64> {
        let group = *self
            .group_of_user
            .get(user)
            .ok_or_else(|| Error::invalid(format!("unknown user {user}")))?;
        if x.len() != self.spec.feature_dim {
            return Err(Error::DimensionMismatch {
                context: "true_rating",
                expected: self.spec.feature_dim,
                actual: x.len(),
            });
        }
        let d = euclidean(x, self.ideal_items.row(group));
        Ok(self.spec.rating_at_distance(d))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(&self.base, dir)?;
        let mut w = csv::Writer::from_path(dir.join(IDEAL_ITEMS_FILE))?;
        let mut header = vec!["group_id".to_string()];
        header.extend((0..self.spec.feature_dim).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for (g, row) in self.ideal_items.rows().into_iter().enumerate() {
            let mut rec = vec![g.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let groups = GroupsFile {
            users: self
                .group_of_user
                .iter()
                .enumerate()
                .map(|(u, &g)| (self.base.ids().users[u].clone(), g))
                .collect(),
            items: self
                .group_of_item
                .iter()
                .enumerate()
                .map(|(i, &g)| (self.base.ids().items[i].clone(), g))
                .collect(),
            spec: self.spec.clone(),
        };
        fs::write(dir.join(GROUPS_FILE), serde_json::to_string_pretty(&groups)?)?;
        Ok(())
    }

    /// Reattaches the ground truth written by [`SyntheticDataset::save`] to a
    /// dataset loaded from the same directory.
    pub fn load_ground_truth(base: RatingsDataset, dir: &Path) -> Result<Self> {
        let path = dir.join(GROUPS_FILE);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let groups: GroupsFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let lookup = |map: &BTreeMap<String, usize>, ids: &[String], what: &str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| Error::Integrity(format!("{what} {id:?} missing from {GROUPS_FILE}")))
                })
                .collect()
        };
        let group_of_user = lookup(&groups.users, &base.ids().users, "user")?;
        let group_of_item = lookup(&groups.items, &base.ids().items, "item")?;

        let ideal_path = dir.join(IDEAL_ITEMS_FILE);
        if !ideal_path.exists() {
            return Err(Error::MissingInput(ideal_path));
        }
        let mut reader = csv::Reader::from_path(&ideal_path)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let values = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        path: ideal_path.display().to_string(),
                        line,
                        message: format!("cannot parse {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(values);
        }
        let dim = groups.spec.feature_dim;
        if rows.len() != groups.spec.num_groups || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Integrity(format!("{IDEAL_ITEMS_FILE} does not match the stored spec")));
        }
        let ideal_items = Array2::from_shape_vec((rows.len(), dim), rows.concat())
            .expect("row lengths checked");
        let base = if base.ratings_in_unit_interval() {
            base.with_rating_scale(RatingScale::UNIT)?
        } else {
            base
        };
        Ok(SyntheticDataset {
            base,
            ideal_items,
            group_of_user,
            group_of_item,
            spec: groups.spec,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GroupsFile {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
    spec: SyntheticSpec,
}

pub(crate) fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn place_ideals<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Array2<f64>> {
    let d = spec.feature_dim;
    let separation = spec.min_separation * (d as f64).sqrt();
    let mut ideals: Vec<Array1<f64>> = Vec::with_capacity(spec.num_groups);
    let mut attempts = 0;
    while ideals.len() < spec.num_groups {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                groups: spec.num_groups,
                separation,
                attempts,
            });
        }
        attempts += 1;
        let candidate: Array1<f64> =
            (0..d).map(|_| rng.random_range(spec.box_low..=spec.box_high)).collect();
        if ideals.iter().all(|o| euclidean(o.view(), candidate.view()) >= separation) {
            ideals.push(candidate);
        }
    }
    let flat: Vec<f64> = ideals.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Array2::from_shape_vec((spec.num_groups, d), flat).expect("fixed shape"))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, rng::SYNTH);
    let d = spec.feature_dim;
    let ideal_items = place_ideals(spec, &mut rng)?;

    let spread = Normal::new(0.0, spec.item_spread).expect("validated spread");
    let n_items = spec.num_groups * spec.items_per_group;
    let mut features = Array2::zeros((n_items, d));
    let mut group_of_item = Vec::with_capacity(n_items);
    for g in 0..spec.num_groups {
        for k in 0..spec.items_per_group {
            let i = g * spec.items_per_group + k;
            loop {
                for j in 0..d {
                    features[[i, j]] = (ideal_items[[g, j]] + spread.sample(&mut rng)).clamp(0.0, 1.0);
                }
                // ideal items must stay unobserved
                if euclidean(features.row(i), ideal_items.row(g)) > 0.0 {
                    break;
                }
            }
            group_of_item.push(g);
        }
    }

    let users_per_group = spec.num_users / spec.num_groups;
    let group_of_user: Vec<usize> = (0..spec.num_users).map(|u| u / users_per_group).collect();
    let per_user = spec.ratings_per_user.min(n_items);
    if per_user < spec.ratings_per_user {
        log::warn!(
            "only {n_items} items exist; each user rates {per_user} instead of {}",
            spec.ratings_per_user
        );
    }
    let noise = Normal::new(0.0, spec.rating_noise).expect("validated noise");
    let mut triples = Vec::with_capacity(spec.num_users * per_user);
    for (user, &g) in group_of_user.iter().enumerate() {
        let mut picked = index::sample(&mut rng, n_items, per_user).into_vec();
        picked.sort_unstable();
        for item in picked {
            let rating = if group_of_item[item] == g {
                let dist = euclidean(features.row(item), ideal_items.row(g));
                let r = spec.rating_at_distance(dist);
                let eps = if spec.rating_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (r + eps).clamp(0.0, 1.0)
            } else {
                rng.random_range(spec.cross_group_low..=spec.cross_group_high)
            };
            triples.push(RatingTriple { user, item, rating });
        }
    }

    let base = RatingsDataset::new(spec.num_users, features, triples)?.with_rating_scale(RatingScale::UNIT)?;
    Ok(SyntheticDataset {
        base,
        ideal_items,
        group_of_user,
        group_of_item,
        spec: spec.clone(),
    })
}
