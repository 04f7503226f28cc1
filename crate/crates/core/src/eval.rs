//! Closed-set and open-set evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, argmax, stable_softmax, Matrix};
use crate::priors::{ClassPartition, Group};
use crate::scalar::Scalar;

/// Confidence statistic used for open-set rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Largest cosine similarity to any known prototype.
    #[default]
    MaxCosine,
    /// Largest softmax probability of the scaled cosine logits.
    MaxSoftmax,
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "max_cosine" => Ok(Self::MaxCosine),
            "max_softmax" => Ok(Self::MaxSoftmax),
            other => Err(format!("expected `max_cosine` or `max_softmax`, got `{other}`")),
        }
    }
}

/// Argmax over cosine logits and the winning cosine, per sample.
pub fn predict<T: Scalar>(units: &Matrix<T>, prototype_units: &Matrix<T>) -> Result<(Vec<usize>, Vec<T>)> {
    let mut preds = Vec::with_capacity(units.rows());
    let mut scores = Vec::with_capacity(units.rows());
    for x in units.iter_rows() {
        let z = linalg::cosine_logits(x, prototype_units)?;
        let k = argmax(&z).ok_or_else(|| Error::InvalidArgument("no prototypes".into()))?;
        preds.push(k);
        scores.push(z[k]);
    }
    Ok((preds, scores))
}

/// Argmax over unnormalized dot-product logits (the CE classifier).
pub fn predict_dot<T: Scalar>(raw: &Matrix<T>, weights: &Matrix<T>) -> Result<Vec<usize>> {
    if raw.cols() != weights.cols() {
        return Err(Error::Shape {
            context: "predict_dot",
            expected: weights.cols(),
            actual: raw.cols(),
        });
    }
    raw.iter_rows()
        .map(|x| {
            let z: Vec<T> = weights.iter_rows().map(|w| linalg::dot(w, x)).collect();
            argmax(&z).ok_or_else(|| Error::InvalidArgument("no prototypes".into()))
        })
        .collect()
}

/// Open-set score per sample.
pub fn open_set_scores<T: Scalar>(
    units: &Matrix<T>,
    prototype_units: &Matrix<T>,
    kind: ScoreKind,
    scale: T,
) -> Result<Vec<T>> {
    units
        .iter_rows()
        .map(|x| {
            let z = linalg::cosine_logits(x, prototype_units)?;
            Ok(match kind {
                ScoreKind::MaxCosine => z.iter().copied().fold(T::neg_infinity(), T::max),
                ScoreKind::MaxSoftmax => {
                    let a: Vec<T> = z.iter().map(|&v| v * scale).collect();
                    stable_softmax(&a).into_iter().fold(T::neg_infinity(), T::max)
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    pub threshold: f64,
    /// TPR achieved on the calibration scores.
    pub calibration_tpr: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    /// `None` for classes without test samples.
    pub per_class_recall: Vec<Option<f64>>,
    pub per_class_precision: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    /// Mean recall over member classes; keys `head`, `between`, `tail`, `overall`.
    pub group_recall: BTreeMap<String, f64>,
    pub open_set: Option<OpenSetMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn closed_set_metrics(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
    partition: Option<&ClassPartition>,
) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            context: "closed_set_metrics",
            expected: labels.len(),
            actual: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if let Some(p) = partition {
        if p.num_classes() != num_classes {
            return Err(Error::Shape {
                context: "closed_set_metrics partition",
                expected: num_classes,
                actual: p.num_classes(),
            });
        }
    }
    let mut present = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id out of range: pred {p}, label {y}, classes {num_classes}"
            )));
        }
        present[y] += 1;
        predicted[p] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    let rank1 = hits as f64 / labels.len() as f64;

    let mut recall = vec![None; num_classes];
    let mut precision = vec![None; num_classes];
    let mut f1 = vec![None; num_classes];
    for j in 0..num_classes {
        if present[j] == 0 {
            continue;
        }
        let r = correct[j] as f64 / present[j] as f64;
        let p = if predicted[j] == 0 {
            0.0
        } else {
            correct[j] as f64 / predicted[j] as f64
        };
        recall[j] = Some(r);
        precision[j] = Some(p);
        f1[j] = Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let macro_recall = mean(recall.iter().flatten().copied());
    let macro_precision = mean(precision.iter().flatten().copied());
    let macro_f1 = mean(f1.iter().flatten().copied());

    let mut group_recall = BTreeMap::new();
    group_recall.insert("overall".to_string(), macro_recall);
    if let Some(part) = partition {
        for g in Group::ALL {
            let vals: Vec<f64> = part.members(g).into_iter().filter_map(|j| recall[j]).collect();
            if !vals.is_empty() {
                group_recall.insert(g.name().to_string(), mean(vals.into_iter()));
            }
        }
    }
    Ok(EvalReport {
        rank1,
        per_class_recall: recall,
        per_class_precision: precision,
        per_class_f1: f1,
        macro_recall,
        macro_precision,
        macro_f1,
        group_recall,
        open_set: None,
    })
}

/// Smallest number of known scores for which a 95% target is resolvable.
pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Largest threshold `τ` with `|{s ≥ τ}| / n ≥ target_tpr`; returns `(τ, achieved TPR)`.
pub fn calibrate_threshold<T: Scalar>(known_scores: &[T], target_tpr: f64) -> Result<(T, f64)> {
    let n = known_scores.len();
    if n < MIN_CALIBRATION_SCORES {
        return Err(Error::InvalidArgument(format!(
            "{n} calibration scores give a TPR granularity of {:.3}; need at least {MIN_CALIBRATION_SCORES}",
            1.0 / n.max(1) as f64
        )));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target TPR must lie in (0, 1], got {target_tpr}"
        )));
    }
    if let Some(i) = known_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            what: "calibration score",
        });
    }
    let mut sorted = known_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    // number of accepted scores needed; the small slack absorbs target·n rounding
    let k = ((target_tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let tau = sorted[k.min(n) - 1];
    let accepted = known_scores.iter().filter(|&&s| s >= tau).count();
    Ok((tau, accepted as f64 / n as f64))
}

/// TPR on known scores, TNR on unknown scores and overall accuracy at `τ`.
pub fn open_set_eval<T: Scalar>(known_scores: &[T], unknown_scores: &[T], tau: T) -> Result<(f64, f64, f64)> {
    if known_scores.is_empty() || unknown_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "open-set evaluation needs known and unknown scores".into(),
        ));
    }
    let accepted = known_scores.iter().filter(|&&s| s >= tau).count();
    let rejected = unknown_scores.iter().filter(|&&s| s < tau).count();
    let tpr = accepted as f64 / known_scores.len() as f64;
    let tnr = rejected as f64 / unknown_scores.len() as f64;
    let acc = (accepted + rejected) as f64 / (known_scores.len() + unknown_scores.len()) as f64;
    Ok((tpr, tnr, acc))
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub report: EvalReport,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "run_id,mode,seed,rank1,macro_recall,macro_precision,macro_f1,recall_head,recall_between,recall_tail,tpr,tnr,acc";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let r = &self.report;
        let group = |k: &str| f(r.group_recall.get(k).copied());
        let os = r.open_set;
        [
            self.run_id.clone(),
            self.mode.clone(),
            self.seed.to_string(),
            f(Some(r.rank1)),
            f(Some(r.macro_recall)),
            f(Some(r.macro_precision)),
            f(Some(r.macro_f1)),
            group("head"),
            group("between"),
            group("tail"),
            f(os.map(|o| o.tpr)),
            f(os.map(|o| o.tnr)),
            f(os.map(|o| o.acc)),
        ]
        .join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}
