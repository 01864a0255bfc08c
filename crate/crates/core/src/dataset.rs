//! Rating triples plus item features: loading, validation, rescaling and splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const RATINGS_FILE: &str = "ratings.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const ID_MAP_FILE: &str = "id_map.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const UNIT: RatingScale = RatingScale { min: 0.0, max: 1.0 };

    /// Maps a value on the unit interval back onto this scale.
    pub fn to_original(&self, unit: f64) -> f64 {
        self.min + unit * (self.max - self.min)
    }
}

/// Original string identifiers, indexed by dense position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IdMapFile {
    users: BTreeMap<String, usize>,
    items: BTreeMap<String, usize>,
}

impl IdMap {
    pub fn sequential(num_users: usize, num_items: usize) -> Self {
        IdMap {
            users: (0..num_users).map(|u| u.to_string()).collect(),
            items: (0..num_items).map(|i| i.to_string()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IdMapFile {
            users: self.users.iter().cloned().zip(0..).collect(),
            items: self.items.iter().cloned().zip(0..).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IdMapFile = serde_json::from_str(text)?;
        let invert = |map: BTreeMap<String, usize>, what: &str| -> Result<Vec<String>> {
            let mut out = vec![None; map.len()];
            for (name, idx) in map {
                let slot = out.get_mut(idx).ok_or_else(|| {
                    Error::Integrity(format!("{what} index {idx} out of range in id map"))
                })?;
                *slot = Some(name);
            }
            out.into_iter()
                .enumerate()
                .map(|(i, s)| s.ok_or_else(|| Error::Integrity(format!("{what} index {i} missing in id map"))))
                .collect()
        };
        Ok(IdMap {
            users: invert(file.users, "user")?,
            items: invert(file.items, "item")?,
        })
    }
}

/// An immutable set of observed ratings over items with known features.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsDataset {
    num_users: usize,
    features: Array2<f64>,
    triples: Vec<RatingTriple>,
    rating_scale: RatingScale,
    original_scale: RatingScale,
    ids: IdMap,
}

impl RatingsDataset {
    /// Builds a dataset from dense indices, validating every invariant.
    ///
    /// The rating scale is taken from the observed minimum and maximum.
    pub fn new(num_users: usize, features: Array2<f64>, triples: Vec<RatingTriple>) -> Result<Self> {
        let ids = IdMap::sequential(num_users, features.nrows());
        Self::with_ids(num_users, features, triples, ids)
    }

    pub fn with_ids(
        num_users: usize,
        features: Array2<f64>,
        triples: Vec<RatingTriple>,
        ids: IdMap,
    ) -> Result<Self> {
        let num_items = features.nrows();
        if let Some((idx, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let d = features.ncols().max(1);
            return Err(Error::Integrity(format!(
                "feature ({}, {}) is not finite",
                idx / d,
                idx % d
            )));
        }
        if ids.users.len() != num_users || ids.items.len() != num_items {
            return Err(Error::Integrity("id map does not match dataset dimensions".into()));
        }
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.user >= num_users {
                return Err(Error::Integrity(format!("user index {} out of range", t.user)));
            }
            if t.item >= num_items {
                return Err(Error::Integrity(format!(
                    "item index {} has no feature row",
                    t.item
                )));
            }
            if !t.rating.is_finite() {
                return Err(Error::Integrity(format!(
                    "rating for (user {}, item {}) is not finite",
                    t.user, t.item
                )));
            }
            if !seen.insert((t.user, t.item)) {
                return Err(Error::Integrity(format!(
                    "duplicate rating for (user {}, item {})",
                    t.user, t.item
                )));
            }
        }
        let scale = observed_scale(&triples);
        Ok(RatingsDataset {
            num_users,
            features,
            triples,
            rating_scale: scale,
            original_scale: scale,
            ids,
        })
    }

    /// Declares the nominal scale of the ratings (e.g. a 1..7 Likert scale)
    /// instead of the observed min/max.
    pub fn with_rating_scale(mut self, scale: RatingScale) -> Result<Self> {
        if !(scale.min.is_finite() && scale.max.is_finite()) {
            return Err(Error::invalid("rating scale bounds must be finite"));
        }
        let observed = observed_scale(&self.triples);
        if !self.triples.is_empty() && (observed.min < scale.min || observed.max > scale.max) {
            return Err(Error::invalid(format!(
                "ratings span [{}, {}] outside the declared scale [{}, {}]",
                observed.min, observed.max, scale.min, scale.max
            )));
        }
        self.rating_scale = scale;
        self.original_scale = scale;
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn item_features(&self, item: usize) -> ArrayView1<'_, f64> {
        self.features.row(item)
    }

    pub fn triples(&self) -> &[RatingTriple] {
        &self.triples
    }

    /// Scale the ratings are currently expressed on.
    pub fn rating_scale(&self) -> RatingScale {
        self.rating_scale
    }

    /// Scale of the ratings as loaded, kept for mapping predictions back.
    pub fn original_scale(&self) -> RatingScale {
        self.original_scale
    }

    pub fn ids(&self) -> &IdMap {
        &self.ids
    }

    pub fn features_in_unit_interval(&self) -> bool {
        self.features.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn ratings_in_unit_interval(&self) -> bool {
        self.triples.iter().all(|t| (0.0..=1.0).contains(&t.rating))
    }

    /// Sum of observed ratings per item.
    pub fn item_rating_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_items()];
        for t in &self.triples {
            sums[t.item] += t.rating;
        }
        sums
    }

    pub fn ratings_per_user(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_users];
        for t in &self.triples {
            counts[t.user] += 1;
        }
        counts
    }
}

fn observed_scale(triples: &[RatingTriple]) -> RatingScale {
    if triples.is_empty() {
        return RatingScale::UNIT;
    }
    let (min, max) = triples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t.rating), hi.max(t.rating))
    });
    RatingScale { min, max }
}

/// Affine map of every rating onto [0, 1] using the dataset's rating scale.
pub fn rescale_ratings(ds: RatingsDataset) -> Result<RatingsDataset> {
    let RatingScale { min, max } = ds.rating_scale;
    if max <= min {
        return Err(Error::DegenerateScale(min));
    }
    let span = max - min;
    let triples = ds
        .triples
        .iter()
        .map(|t| RatingTriple {
            rating: ((t.rating - min) / span).clamp(0.0, 1.0),
            ..*t
        })
        .collect();
    Ok(RatingsDataset {
        triples,
        rating_scale: RatingScale::UNIT,
        ..ds
    })
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} {field:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{what} {field:?} is not finite")));
    }
    Ok(v)
}

/// Reads a ratings CSV and a features CSV, assigning dense indices.
///
/// Items are indexed in the order they appear in the features file, users in
/// order of first appearance in the ratings file.
pub fn load_dataset(ratings_path: &Path, features_path: &Path) -> Result<RatingsDataset> {
    load_with_ids(ratings_path, features_path, None)
}

fn load_with_ids(ratings_path: &Path, features_path: &Path, known: Option<&IdMap>) -> Result<RatingsDataset> {
    let mut reader = open_csv(features_path)?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("item_id") || header.len() < 2 {
        return Err(parse_err(features_path, 1, "expected header item_id,f0,...,f{d-1}"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(
                features_path,
                1,
                format!("feature column {} should be named f{j}, found {name:?}", j + 1),
            ));
        }
    }
    let dim = header.len() - 1;
    let mut item_ids = Vec::new();
    let mut item_index = HashMap::new();
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != dim + 1 {
            return Err(parse_err(
                features_path,
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if item_index.insert(id.clone(), item_ids.len()).is_some() {
            return Err(parse_err(features_path, line, format!("duplicate item id {id:?}")));
        }
        item_ids.push(id);
        for field in rec.iter().skip(1) {
            values.push(parse_f64(features_path, line, field, "feature")?);
        }
    }
    let mut features = Array2::from_shape_vec((item_ids.len(), dim), values)
        .expect("row lengths checked while parsing");
    if let Some(map) = known {
        if map.items.len() != item_ids.len() {
            return Err(Error::Integrity(format!(
                "id map lists {} items but {} has {}",
                map.items.len(),
                features_path.display(),
                item_ids.len()
            )));
        }
        let mut reordered = Array2::zeros(features.raw_dim());
        for (dense, id) in map.items.iter().enumerate() {
            let row = *item_index
                .get(id)
                .ok_or_else(|| Error::Integrity(format!("item {id:?} from id map has no feature row")))?;
            reordered.row_mut(dense).assign(&features.row(row));
        }
        features = reordered;
        item_ids = map.items.clone();
        item_index = item_ids.iter().cloned().zip(0..).collect();
    }

    let mut reader = open_csv(ratings_path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["user_id", "item_id", "rating"] {
        return Err(parse_err(ratings_path, 1, "expected header user_id,item_id,rating"));
    }
    let mut user_ids = known.map(|m| m.users.clone()).unwrap_or_default();
    let mut user_index: HashMap<String, usize> = user_ids.iter().cloned().zip(0..).collect();
    let mut triples = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            return Err(parse_err(ratings_path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let item = *item_index.get(&rec[1]).ok_or_else(|| {
            Error::Integrity(format!(
                "{}:{line}: item {:?} has no row in {}",
                ratings_path.display(),
                &rec[1],
                features_path.display()
            ))
        })?;
        let user = match user_index.get(&rec[0]) {
            Some(&u) => u,
            None if known.is_some() => {
                return Err(Error::Integrity(format!(
                    "{}:{line}: user {:?} is not in the id map",
                    ratings_path.display(),
                    &rec[0]
                )))
            }
            None => {
                user_index.insert(rec[0].to_string(), user_ids.len());
                user_ids.push(rec[0].to_string());
                user_ids.len() - 1
            }
        };
        let rating = parse_f64(ratings_path, line, &rec[2], "rating")?;
        triples.push(RatingTriple { user, item, rating });
    }
    let ids = IdMap {
        users: user_ids,
        items: item_ids,
    };
    RatingsDataset::with_ids(ids.users.len(), features, triples, ids)
}

/// Loads `ratings.csv` + `features.csv` from a directory. When an
/// `id_map.json` sidecar is present its indices are kept.
pub fn load_dataset_dir(dir: &Path) -> Result<RatingsDataset> {
    let map_path = dir.join(ID_MAP_FILE);
    let known = if map_path.exists() {
        Some(IdMap::from_json(&fs::read_to_string(map_path)?)?)
    } else {
        None
    };
    load_with_ids(&dir.join(RATINGS_FILE), &dir.join(FEATURES_FILE), known.as_ref())
}

/// Writes `ratings.csv`, `features.csv` and the `id_map.json` sidecar.
///
/// Numbers use the shortest representation that parses back to the same
/// bits, so load/save/load is exact.
pub fn save_dataset(ds: &RatingsDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(RATINGS_FILE))?;
    w.write_record(["user_id", "item_id", "rating"])?;
    for t in &ds.triples {
        w.write_record([
            ds.ids.users[t.user].as_str(),
            ds.ids.items[t.item].as_str(),
            &t.rating.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(FEATURES_FILE))?;
    let mut header = vec!["item_id".to_string()];
    header.extend((0..ds.feature_dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, row) in ds.features.rows().into_iter().enumerate() {
        let mut rec = vec![ds.ids.items[i].clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    fs::write(dir.join(ID_MAP_FILE), ds.ids.to_json()?)?;
    Ok(())
}

/// Disjoint train / validation / test index lists into `triples()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-user stratified random split.
///
/// Every user with at least three ratings keeps one of them in the training
/// set. Sizes are `round(fraction * n)` for validation and test; the
/// remainder goes to training.
pub fn split_dataset(ds: &RatingsDataset, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (f_train, f_val, f_test) = fractions;
    if !(f_train > 0.0 && f_val > 0.0 && f_test > 0.0) {
        return Err(Error::invalid(format!("split fractions must be positive, got {fractions:?}")));
    }
    if ((f_train + f_val + f_test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let n = ds.triples.len();
    let n_val = (f_val * n as f64).round() as usize;
    let n_test = ((f_test * n as f64).round() as usize).min(n - n_val.min(n));

    let mut rng = rng::substream(seed, rng::SPLIT);
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.num_users];
    for (idx, t) in ds.triples.iter().enumerate() {
        by_user[t.user].push(idx);
    }
    let cold = by_user.iter().filter(|v| v.is_empty()).count();
    if cold > 0 {
        log::warn!("{cold} users have no ratings; they are kept as cold users");
    }

    let mut reserved = Vec::new();
    let mut pool = Vec::with_capacity(n);
    for list in &mut by_user {
        list.shuffle(&mut rng);
        if list.len() >= 3 {
            reserved.push(list[0]);
            pool.extend_from_slice(&list[1..]);
        } else {
            pool.extend_from_slice(list);
        }
    }
    pool.shuffle(&mut rng);
    if pool.len() < n_val + n_test {
        // Only possible when nearly every user has a single reserved rating.
        reserved.shuffle(&mut rng);
        pool.append(&mut reserved);
    }
    let validation: Vec<usize> = pool[..n_val].to_vec();
    let test: Vec<usize> = pool[n_val..n_val + n_test].to_vec();
    let mut train: Vec<usize> = pool[n_val + n_test..].to_vec();
    train.extend(reserved);

    let mut split = DatasetSplit {
        train,
        validation,
        test,
    };
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "r.csv", "user_id,item_id,rating\nalice,m1,1\nbob,m2,5\nalice,m2,3\n");
        let f = write(dir.path(), "f.csv", "item_id,f0,f1\nm1,0.1,0.2\nm2,0.3,0.4\n");
        let ds = load_dataset(&r, &f).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 2);
        assert_eq!(ds.triples().len(), 3);
        assert_eq!(ds.ids().users, vec!["alice", "bob"]);
        assert_eq!(ds.rating_scale(), RatingScale { min: 1.0, max: 5.0 });
    }

    #[test]
    fn unknown_item_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "r.csv", "user_id,item_id,rating\nu,zzz,1\n");
        let f = write(dir.path(), "f.csv", "item_id,f0\nm1,0.5\n");
        assert!(matches!(load_dataset(&r, &f), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(dir.path(), "r.csv", "user_id,item_id,rating\nu,m1,1\nu2,m1,abc\n");
        let f = write(dir.path(), "f.csv", "item_id,f0\nm1,0.5\n");
        match load_dataset(&r, &f) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn twenty_feature_columns() {
        let dir = tempfile::tempdir().unwrap();
        let header: Vec<String> = (0..20).map(|j| format!("f{j}")).collect();
        let row: Vec<String> = (0..20).map(|_| "0.5".to_string()).collect();
        let f = write(
            dir.path(),
            "f.csv",
            &format!("item_id,{}\ni,{}\n", header.join(","), row.join(",")),
        );
        let r = write(dir.path(), "r.csv", "user_id,item_id,rating\nu,i,0.3\n");
        assert_eq!(load_dataset(&r, &f).unwrap().feature_dim(), 20);
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(&dir.path().join("nope.csv"), &dir.path().join("f.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    fn tiny(ratings: &[f64]) -> RatingsDataset {
        let triples = ratings
            .iter()
            .enumerate()
            .map(|(i, &r)| RatingTriple { user: i, item: 0, rating: r })
            .collect();
        RatingsDataset::new(ratings.len(), array![[0.5]], triples).unwrap()
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let ds = rescale_ratings(tiny(&[1.0, 3.0, 5.0])).unwrap();
        let r: Vec<f64> = ds.triples().iter().map(|t| t.rating).collect();
        assert_eq!(r, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.original_scale(), RatingScale { min: 1.0, max: 5.0 });

        let likert = tiny(&[4.0, 2.0])
            .with_rating_scale(RatingScale { min: 1.0, max: 7.0 })
            .unwrap();
        assert_eq!(rescale_ratings(likert).unwrap().triples()[0].rating, 0.5);
    }

    #[test]
    fn rescale_identity_on_unit_scale() {
        let ds = tiny(&[0.2, 0.9])
            .with_rating_scale(RatingScale::UNIT)
            .unwrap();
        let once = rescale_ratings(ds.clone()).unwrap();
        assert_eq!(once.triples(), ds.triples());
        assert_eq!(rescale_ratings(once.clone()).unwrap(), once);
    }

    #[test]
    fn constant_ratings_are_degenerate() {
        assert!(matches!(rescale_ratings(tiny(&[2.0, 2.0])), Err(Error::DegenerateScale(_))));
    }

    fn hundred() -> RatingsDataset {
        let triples = (0..100)
            .map(|k| RatingTriple { user: k % 10, item: k / 10, rating: (k % 7) as f64 / 6.0 })
            .collect();
        RatingsDataset::new(10, Array2::zeros((10, 2)), triples).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = hundred();
        let s = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for u in 0..10 {
            assert!(s.train.iter().any(|&i| ds.triples()[i].user == u));
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_dataset(&hundred(), (0.5, 0.5, 0.5), 1).is_err());
        assert!(split_dataset(&hundred(), (1.0, 0.0, 0.0), 1).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let features = array![[0.1234567891234, 1.0 / 3.0], [2e-17, 0.75]];
        let triples = vec![
            RatingTriple { user: 0, item: 1, rating: 0.1 + 0.2 },
            RatingTriple { user: 1, item: 0, rating: 1.0 / 7.0 },
        ];
        let ds = RatingsDataset::new(3, features, triples).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.triples(), ds.triples());
        let map = IdMap::from_json(&fs::read_to_string(dir.path().join(ID_MAP_FILE)).unwrap()).unwrap();
        assert_eq!(&map, ds.ids());
        // user 2 has no ratings but survives through the id map
        assert_eq!(back.num_users(), 3);
    }
}
