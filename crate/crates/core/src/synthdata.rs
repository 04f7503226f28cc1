//! Deterministic synthetic long-tailed datasets.
//!
//! Class means are unit vectors with a minimum pairwise angle; samples are
//! the class mean plus isotropic Gaussian noise, so raw feature norms vary
//! within a class. Class sizes decay from `head_count` to
//! `head_count / imbalance_ratio`.

use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, Matrix};
use crate::scalar::Scalar;

const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Geometric,
    Zipf,
}

impl std::str::FromStr for Decay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "zipf" => Ok(Self::Zipf),
            other => Err(format!("expected `geometric` or `zipf`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Largest class count divided by smallest class count.
    pub imbalance_ratio: f64,
    pub head_count: usize,
    pub decay: Decay,
    /// Standard deviation of the per-coordinate noise around a class mean.
    pub cluster_spread: f64,
    pub unknown_class_count: usize,
    /// Minimum angle between any two class means, in degrees.
    pub min_separation_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 16,
            imbalance_ratio: 100.0,
            head_count: 1000,
            decay: Decay::Geometric,
            cluster_spread: 0.2,
            unknown_class_count: 0,
            min_separation_deg: 30.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "need feature dimension >= 2, got {}",
                self.dim
            )));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.head_count == 0 {
            return Err(Error::InvalidArgument("head_count must be positive".into()));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cluster spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        if self.unknown_class_count >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "unknown class count {} must be below the class count {}",
                self.unknown_class_count, self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-class sample counts, largest first.
    pub fn class_sizes(&self) -> Vec<usize> {
        let c = self.num_classes;
        let head = self.head_count as f64;
        (0..c)
            .map(|j| {
                let n = match self.decay {
                    Decay::Geometric => head * self.imbalance_ratio.powf(-(j as f64) / (c - 1) as f64),
                    Decay::Zipf => {
                        let a = self.imbalance_ratio.ln() / (c as f64).ln();
                        head / ((j + 1) as f64).powf(a)
                    }
                };
                (n.round() as usize).max(1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Held-out samples of classes never seen in training.
    Unknown,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "unknown" => Ok(Self::Unknown),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub known_mask: Vec<bool>,
    pub num_classes: usize,
    pub spec: Option<SyntheticSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    spec: Option<SyntheticSpec>,
    num_classes: usize,
    dim: usize,
    known_mask: Vec<bool>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn known_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&j| self.known_mask[j]).collect()
    }

    /// Per-class counts over one split.
    pub fn counts_in(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in 0..self.len() {
            if self.split[i] == split {
                counts[self.labels[i]] += 1;
            }
        }
        counts
    }

    /// Writes `<stem>.csv` (features, label, split) and `<stem>.json` (spec sidecar).
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.as_f64().to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.split[i].name().into());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            num_classes: self.num_classes,
            dim: self.dim(),
            known_mask: self.known_mask.clone(),
        };
        std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
        let mut r = csv::Reader::from_path(csv_path).map_err(csv_err)?;
        let dim = sidecar.dim;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut split = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = row + 2;
            if rec.len() != dim + 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} columns, got {}", dim + 2, rec.len()),
                });
            }
            for k in 0..dim {
                let v: f64 = rec[k].parse().map_err(|e| Error::Parse {
                    line,
                    message: format!("feature f{k}: {e}"),
                })?;
                data.push(T::lit(v));
            }
            let label: usize = rec[dim].parse().map_err(|e| Error::Parse {
                line,
                message: format!("label: {e}"),
            })?;
            if label >= sidecar.num_classes {
                return Err(Error::Parse {
                    line,
                    message: format!("label {label} out of range"),
                });
            }
            labels.push(label);
            split.push(rec[dim + 1].parse().map_err(|message| Error::Parse { line, message })?);
        }
        Ok(Self {
            features: Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            split,
            known_mask: sidecar.known_mask,
            num_classes: sidecar.num_classes,
            spec: sidecar.spec,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_normalize(&v);
        if !n.degenerate {
            return n.unit;
        }
    }
}

/// Unit class means with pairwise angle at least `min_separation_deg`.
pub fn class_means(
    num_classes: usize,
    dim: usize,
    min_separation_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_separation_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for j in 0..num_classes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = random_unit(rng, dim);
            if means.iter().all(|m| dot(m, &cand) <= max_cos) {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place class mean {j} of {num_classes} with {min_separation_deg}° separation in {dim} dimensions; use a larger dim or a smaller separation"
            )));
        }
    }
    Ok(means)
}

/// Generates every sample with split `Train` and all classes known.
pub fn generate<T: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec.num_classes, spec.dim, spec.min_separation_deg, &mut rng)?;
    let sizes = spec.class_sizes();
    let total: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (j, (&n, mean)) in sizes.iter().zip(&means).enumerate() {
        for _ in 0..n {
            for &mu in mean {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(T::lit(mu + spec.cluster_spread * noise));
            }
            labels.push(j);
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(total, spec.dim, data)?,
        split: vec![Split::Train; total],
        labels,
        known_mask: vec![true; spec.num_classes],
        num_classes: spec.num_classes,
        spec: Some(spec.clone()),
    })
}

/// Stratified split. Each class with at least three samples gets at least one
/// validation and one test sample; the remainder goes to train. Samples in
/// the `Unknown` pool are left untouched.
pub fn split<T: Scalar>(mut dataset: Dataset<T>, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset<T>> {
    let (f_train, f_val, f_test) = fractions;
    if !(f_train > 0.0 && f_val > 0.0 && f_test > 0.0) || f_train + f_val + f_test > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to at most 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in 0..dataset.len() {
        if dataset.split[i] != Split::Unknown {
            members[dataset.labels[i]].push(i);
        }
    }
    for (j, idx) in members.iter_mut().enumerate() {
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            warn!("class {j} has only {n} samples; assigning all to train");
            for &i in idx.iter() {
                dataset.split[i] = Split::Train;
            }
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = ((f_val * n as f64).round() as usize).max(1);
        let n_test = ((f_test * n as f64).round() as usize).max(1);
        let (n_val, n_test) = if n_val + n_test >= n { (1, 1) } else { (n_val, n_test) };
        for (k, &i) in idx.iter().enumerate() {
            dataset.split[i] = if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(dataset)
}

/// Marks `unknown_class_count` uniformly chosen classes unknown and moves
/// all their samples to the `Unknown` pool.
pub fn open_set_partition<T: Scalar>(
    mut dataset: Dataset<T>,
    unknown_class_count: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if unknown_class_count >= dataset.num_classes {
        return Err(Error::InvalidArgument(format!(
            "unknown class count {unknown_class_count} must be below {}",
            dataset.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0e_11c1_a55e);
    let chosen = index::sample(&mut rng, dataset.num_classes, unknown_class_count);
    for j in chosen {
        dataset.known_mask[j] = false;
    }
    for i in 0..dataset.len() {
        if !dataset.known_mask[dataset.labels[i]] {
            dataset.split[i] = Split::Unknown;
        }
    }
    Ok(dataset)
}

/// Generation, open-set partition and stratified split in one call.
pub fn build<T: Scalar>(spec: &SyntheticSpec, fractions: (f64, f64, f64)) -> Result<Dataset<T>> {
    let ds = generate(spec)?;
    let ds = open_set_partition(ds, spec.unknown_class_count, spec.seed)?;
    split(ds, fractions, spec.seed.wrapping_add(1))
}
