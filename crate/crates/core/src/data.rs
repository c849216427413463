//! Datasets, splits, client partitions and synthetic generators.
//!
//! Inputs are stored feature-major: `x` is `p x n`, one column per example.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        if x.cols() != y.len() {
            return Err(FedError::DimensionMismatch(format!("{} input columns for {} targets", x.cols(), y.len())));
        }
        if feature_names.len() != x.rows() {
            return Err(FedError::DimensionMismatch(format!(
                "{} feature names for {} features",
                feature_names.len(),
                x.rows()
            )));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(FedError::NonFinite("dataset values".into()));
        }
        Ok(Self { x, y, feature_names })
    }

    /// Names `x0, x1, ...`.
    pub fn unnamed(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        let names = (0..x.rows()).map(|i| format!("x{i}")).collect();
        Self::new(x, y, names)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_cols(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Examples of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.num_features() != other.num_features() {
            return Err(FedError::DimensionMismatch("datasets differ in feature count".into()));
        }
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(Self { x: DenseMatrix::hstack(&[&self.x, &other.x])?, y, feature_names: self.feature_names.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub dataset: Dataset,
    /// Rows skipped because a cell was empty, non-numeric or non-finite.
    pub dropped_rows: usize,
}

pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| FedError::Parse(e.to_string()))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| FedError::Parse(e.to_string()))?.iter().map(str::to_string).collect();
    let t = match target {
        TargetColumn::Index(i) if *i < headers.len() => *i,
        TargetColumn::Index(i) => return Err(FedError::MissingTarget(format!("#{i}"))),
        TargetColumn::Name(n) => {
            headers.iter().position(|h| h == n).ok_or_else(|| FedError::MissingTarget(n.clone()))?
        }
    };
    let p = headers.len() - 1;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut y = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record.map_err(|e| FedError::Parse(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(FedError::Parse(format!(
                "line {}: {} fields, header has {}",
                record.position().map_or(0, |p| p.line()),
                record.len(),
                headers.len()
            )));
        }
        let parsed: Option<Vec<f64>> = record.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
        let Some(values) = parsed else {
            dropped += 1;
            continue;
        };
        let mut k = 0;
        for (j, v) in values.into_iter().enumerate() {
            if j == t {
                y.push(v);
            } else {
                cols[k].push(v);
                k += 1;
            }
        }
    }
    let n = y.len();
    let x = DenseMatrix::from_fn(p, n, |r, c| cols[r][c]);
    let names = headers.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, h)| h.clone()).collect();
    Ok(CsvLoad { dataset: Dataset::new(x, y, names)?, dropped_rows: dropped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Uniform random 8:1:1 train/test/validation split; rounding remainders go
/// to the training set.
pub fn split_811(n: usize, seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(FedError::TooFewRows { needed: 10, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = n / 10;
    let test = idx[..tenth].to_vec();
    let valid = idx[tenth..2 * tenth].to_vec();
    let train = idx[2 * tenth..].to_vec();
    Ok(Split { train, test, valid })
}

/// Per-feature and target affine standardisation fitted on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    // constant columns are centred but left unscaled
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(FedError::EmptyInput);
        }
        let (x_mean, x_std) = (0..train.num_features()).map(|r| mean_std(train.x.row(r))).unzip();
        let (y_mean, y_std) = mean_std(&train.y);
        Ok(Self { x_mean, x_std, y_mean, y_std })
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        let x = DenseMatrix::from_fn(ds.x.rows(), ds.x.cols(), |r, c| (ds.x[(r, c)] - self.x_mean[r]) / self.x_std[r]);
        let y = ds.y.iter().map(|v| (v - self.y_mean) / self.y_std).collect();
        Dataset { x, y, feature_names: ds.feature_names.clone() }
    }

    pub fn inverse_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }
}

/// Assignment of example indices to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    /// Feature used to order examples, when the partition is sorted.
    pub sort_feature: Option<usize>,
    /// Example indices in sort order; empty for unsorted partitions.
    pub sorted_order: Vec<usize>,
    /// Chunk `j` is `sorted_order[chunk_bounds[j]..chunk_bounds[j + 1]]`.
    pub chunk_bounds: Vec<usize>,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Non-i.i.d. partition: order examples by the feature most correlated with
/// the target, cut into `2k` contiguous chunks and hand each client two
/// chunks chosen by a seeded shuffle.
pub fn correlation_sorted_partition(train: &Dataset, num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(FedError::InvalidConfig("need at least one client".into()));
    }
    let n = train.len();
    let chunks = 2 * num_clients;
    if n < chunks {
        return Err(FedError::TooFewRows { needed: chunks, got: n });
    }
    let mut best: Option<(usize, f64)> = None;
    for r in 0..train.num_features() {
        if let Some(c) = pearson(train.x.row(r), &train.y) {
            if best.is_none_or(|(_, b)| c.abs() > b) {
                best = Some((r, c.abs()));
            }
        }
    }
    let (feature, _) = best.ok_or(FedError::DegenerateFeature(0))?;
    let values = train.x.row(feature);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let bounds: Vec<usize> = (0..=chunks).map(|j| j * n / chunks).collect();
    let mut ids: Vec<usize> = (0..chunks).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let clients = (0..num_clients)
        .map(|c| {
            let mut pair = [ids[2 * c], ids[2 * c + 1]];
            pair.sort_unstable();
            pair.iter().flat_map(|&k| order[bounds[k]..bounds[k + 1]].iter().copied()).collect()
        })
        .collect();
    Ok(PartitionPlan { clients, sort_feature: Some(feature), sorted_order: order, chunk_bounds: bounds })
}

/// Clients by contiguous ranges of the first feature: client `i` holds
/// `boundaries[i-1] <= x < boundaries[i]`.
pub fn range_partition(ds: &Dataset, boundaries: &[f64]) -> Result<PartitionPlan> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FedError::InvalidConfig("range boundaries must be strictly increasing".into()));
    }
    if ds.num_features() == 0 {
        return Err(FedError::EmptyInput);
    }
    let mut clients = vec![Vec::new(); boundaries.len() + 1];
    for (j, &v) in ds.x.row(0).iter().enumerate() {
        let c = boundaries.partition_point(|&b| b <= v);
        clients[c].push(j);
    }
    if let Some(empty) = clients.iter().position(Vec::is_empty) {
        return Err(FedError::EmptyClient(empty));
    }
    Ok(PartitionPlan { clients, sort_feature: None, sorted_order: Vec::new(), chunk_bounds: Vec::new() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticFn {
    Identity,
    /// `x sin(x)`
    XSinX,
    /// `1{x > 0}`
    Step,
}

impl SyntheticFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            SyntheticFn::Identity => x,
            SyntheticFn::XSinX => x * x.sin(),
            SyntheticFn::Step => f64::from(u8::from(x > 0.0)),
        }
    }
}

/// `n` inputs uniform on `[lo, hi]` with targets `f(x) + N(0, noise^2)`.
pub fn synthetic_1d(f: SyntheticFn, range: (f64, f64), n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let (lo, hi) = range;
    if !(lo < hi) || !(noise >= 0.0) || n == 0 {
        return Err(FedError::InvalidConfig(format!("synthetic range [{lo}, {hi}], n = {n}, noise = {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    let y = xs
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            f.eval(x) + noise * z
        })
        .collect();
    Dataset::new(DenseMatrix::row_vector(&xs), y, vec!["x".into()])
}

/// Four-feature power-plant style regression data: ambient temperature,
/// exhaust vacuum, pressure and humidity against electrical output. The
/// output is dominated by a strong negative dependence on temperature.
pub fn ccpp_like(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(FedError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut cols: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let at: f64 = rng.random_range(2.0..37.0);
        let v = (25.0 + 1.25 * at + 6.0 * noise.sample(&mut rng)).clamp(25.0, 82.0);
        let ap = 1013.0 - 0.2 * (at - 20.0) + 5.5 * noise.sample(&mut rng);
        let rh = (95.0 - 1.2 * at + 12.0 * noise.sample(&mut rng)).clamp(25.0, 100.0);
        let pe = 497.0 - 1.75 * at - 0.25 * v + 0.06 * (ap - 1013.0) - 0.14 * (rh - 70.0)
            + 2.5 * (at / 6.0).sin()
            + 0.004 * (at - 20.0) * (rh - 70.0)
            + 3.5 * noise.sample(&mut rng);
        for (c, val) in cols.iter_mut().zip([at, v, ap, rh]) {
            c.push(val);
        }
        y.push(pe);
    }
    let x = DenseMatrix::from_fn(4, n, |r, c| cols[r][c]);
    Dataset::new(x, y, ["AT", "V", "AP", "RH"].map(String::from).to_vec())
}
