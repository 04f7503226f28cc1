//! Per-class statistics derived from training labels: empirical priors,
//! effective numbers, effective priors and the class-relative margin
//! adjustments `Δ_j ∈ [0, m]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stability constant added to `−log ρ̃_j` before normalization.
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_BETA: f64 = 0.9;

/// Which prior feeds the margin adjustments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// `ρ̃_j`, the average of the empirical prior and the normalized effective number.
    #[default]
    Effective,
    /// Raw `ρ_j = N_j / N`; kept for ablations.
    Empirical,
}

impl std::str::FromStr for PriorSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "effective" => Ok(Self::Effective),
            "empirical" => Ok(Self::Empirical),
            other => Err(format!("expected `effective` or `empirical`, got `{other}`")),
        }
    }
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let slot = counts.get_mut(y).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "label {y} at position {i} out of range for {num_classes} classes"
            ))
        })?;
        *slot += 1;
    }
    Ok(counts)
}

/// `ρ_j = N_j / Σ_k N_k`.
pub fn empirical_priors<T: Scalar>(counts: &[usize]) -> Result<Vec<T>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let total = T::lit(total as f64);
    Ok(counts.iter().map(|&n| T::lit(n as f64) / total).collect())
}

/// `E_j = (1 − β^{N_j}) / (1 − β)`; zero for empty classes.
pub fn effective_numbers<T: Scalar>(counts: &[usize], beta: T) -> Result<Vec<T>> {
    if !(beta >= T::zero() && beta < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing beta must lie in [0, 1), got {beta}"
        )));
    }
    let one = T::one();
    Ok(counts
        .iter()
        .map(|&n| {
            if n == 0 {
                T::zero()
            } else {
                // powi saturates at i32::MAX, and beta^N is already 0 long before that
                let exp = i32::try_from(n).unwrap_or(i32::MAX);
                (one - beta.powi(exp)) / (one - beta)
            }
        })
        .collect())
}

/// `ρ̃_j = ½ (ρ_j + E_j / Σ_k E_k)`.
pub fn effective_priors<T: Scalar>(priors: &[T], effective: &[T]) -> Result<Vec<T>> {
    if priors.len() != effective.len() {
        return Err(Error::Shape {
            context: "effective_priors",
            expected: priors.len(),
            actual: effective.len(),
        });
    }
    let total: T = effective.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::InvalidArgument("effective numbers sum to zero".into()));
    }
    let half = T::lit(0.5);
    Ok(priors
        .iter()
        .zip(effective)
        .map(|(&rho, &e)| half * (rho + e / total))
        .collect())
}

/// `Δ_j = α(−log ρ_j + ε) · m` with `α` the min-max normalization across
/// classes. All-equal priors give `Δ ≡ 0`.
pub fn margin_adjustments<T: Scalar>(priors: &[T], base_margin: T, epsilon: T) -> Result<Vec<T>> {
    if base_margin <= T::zero() {
        return Err(Error::InvalidArgument(format!(
            "base margin must be positive, got {base_margin}"
        )));
    }
    if let Some(j) = priors.iter().position(|&p| !(p > T::zero())) {
        return Err(Error::InvalidArgument(format!(
            "prior of class {j} is {} (must be > 0)",
            priors[j]
        )));
    }
    let u: Vec<T> = priors.iter().map(|&p| -p.ln() + epsilon).collect();
    let lo = u.iter().copied().fold(T::infinity(), T::min);
    let hi = u.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    if !(span > T::zero()) {
        return Ok(vec![T::zero(); priors.len()]);
    }
    Ok(u.iter()
        .map(|&v| ((v - lo) / span).max(T::zero()).min(T::one()) * base_margin)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct ClassStats<T> {
    pub counts: Vec<usize>,
    pub priors: Vec<T>,
    pub effective_numbers: Vec<T>,
    pub effective_priors: Vec<T>,
    /// Margin adjustments in margin units, `Δ_j ∈ [0, m]`.
    pub deltas: Vec<T>,
    pub num_classes: usize,
    pub base_margin: T,
    pub beta: T,
    pub epsilon: T,
    pub source: PriorSource,
}

impl<T: Scalar> ClassStats<T> {
    /// Classes with no samples get `Δ_j = m` and are left out of the
    /// min-max statistics.
    pub fn from_counts(counts: &[usize], beta: T, base_margin: T, epsilon: T, source: PriorSource) -> Result<Self> {
        let priors = empirical_priors::<T>(counts)?;
        let effective_numbers = effective_numbers(counts, beta)?;
        let effective_priors = effective_priors(&priors, &effective_numbers)?;
        let basis = match source {
            PriorSource::Effective => &effective_priors,
            PriorSource::Empirical => &priors,
        };
        let present: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] > 0).collect();
        let present_priors: Vec<T> = present.iter().map(|&j| basis[j]).collect();
        let present_deltas = margin_adjustments(&present_priors, base_margin, epsilon)?;
        let mut deltas = vec![base_margin; counts.len()];
        for (&j, d) in present.iter().zip(present_deltas) {
            deltas[j] = d;
        }
        Ok(Self {
            counts: counts.to_vec(),
            priors,
            effective_numbers,
            effective_priors,
            deltas,
            num_classes: counts.len(),
            base_margin,
            beta,
            epsilon,
            source,
        })
    }

    pub fn from_labels(
        labels: &[usize],
        num_classes: usize,
        beta: T,
        base_margin: T,
        epsilon: T,
        source: PriorSource,
    ) -> Result<Self> {
        let counts = class_counts(labels, num_classes)?;
        Self::from_counts(&counts, beta, base_margin, epsilon, source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Between,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Between, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Between => "between",
            Group::Tail => "tail",
        }
    }
}

/// Head/between/tail assignment by training cardinality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub head_threshold: usize,
    pub tail_threshold: usize,
    pub group_of: Vec<Group>,
}

impl ClassPartition {
    pub fn members(&self, group: Group) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&j| self.group_of[j] == group)
            .collect()
    }

    pub fn tail_classes(&self) -> Vec<usize> {
        self.members(Group::Tail)
    }

    pub fn num_classes(&self) -> usize {
        self.group_of.len()
    }
}

/// Head if `N_j > head_threshold`, tail if `N_j < tail_threshold`, between otherwise.
pub fn partition_classes(counts: &[usize], head_threshold: usize, tail_threshold: usize) -> Result<ClassPartition> {
    if tail_threshold == 0 || tail_threshold >= head_threshold {
        return Err(Error::InvalidArgument(format!(
            "need 0 < tail_threshold < head_threshold, got tail={tail_threshold} head={head_threshold}"
        )));
    }
    let group_of = counts
        .iter()
        .map(|&n| {
            if n > head_threshold {
                Group::Head
            } else if n < tail_threshold {
                Group::Tail
            } else {
                Group::Between
            }
        })
        .collect();
    Ok(ClassPartition {
        head_threshold,
        tail_threshold,
        group_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_tally() {
        assert_eq!(class_counts(&[0, 0, 1], 2).unwrap(), vec![2, 1]);
        assert_eq!(class_counts(&[], 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(class_counts(&[2, 2, 2, 0], 3).unwrap(), vec![1, 0, 3]);
        assert!(class_counts(&[3], 3).is_err());
    }

    #[test]
    fn empirical_prior_examples() {
        assert_eq!(empirical_priors::<f64>(&[3, 1]).unwrap(), vec![0.75, 0.25]);
        assert_eq!(empirical_priors::<f64>(&[5, 5]).unwrap(), vec![0.5, 0.5]);
        let p = empirical_priors::<f64>(&[6269, 6]).unwrap();
        assert!((p[0] - 6269.0 / 6275.0).abs() < 1e-15);
        assert!((p[0] - 0.999044).abs() < 1e-6);
        assert!((p[1] - 0.000956).abs() < 1e-6);
        assert!(matches!(empirical_priors::<f64>(&[0, 0]), Err(Error::EmptyTrainingSet)));
    }

    #[test]
    fn effective_number_examples() {
        let e = effective_numbers(&[1, 2, 100, 0], 0.9f64).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!((e[1] - 1.9).abs() < 1e-14);
        assert!((e[2] - 9.999734).abs() < 1e-6);
        assert_eq!(e[3], 0.0);
        assert!(effective_numbers(&[1], 1.0f64).is_err());
        assert!(effective_numbers(&[1], -0.1f64).is_err());
    }

    #[test]
    fn effective_prior_examples() {
        let r = effective_priors(&[0.5, 0.5], &[3.0, 3.0]).unwrap();
        assert_eq!(r, vec![0.5, 0.5]);
        let r = effective_priors(&[0.75f64, 0.25], &[1.9, 1.0]).unwrap();
        assert!((r[0] - 0.5 * (0.75 + 1.9 / 2.9)).abs() < 1e-15);
        assert!((r[0] - 0.702586).abs() < 1e-6);
        assert!((r[1] - 0.297413).abs() < 1e-6);
        assert_eq!(effective_priors(&[1.0], &[4.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn margin_adjustment_examples() {
        assert_eq!(margin_adjustments(&[0.25f64; 4], 0.15, 1e-6).unwrap(), vec![0.0; 4]);
        let d = margin_adjustments(&[0.7, 0.2, 0.1], 0.15, 1e-6).unwrap();
        let middle = 0.15 * (0.7f64 / 0.2).ln() / (0.7f64 / 0.1).ln();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - middle).abs() < 1e-14);
        assert!((d[1] - 0.0965).abs() < 1e-4);
        assert!((d[2] - 0.15).abs() < 1e-15);
        assert!(margin_adjustments(&[0.5, 0.0, 0.5], 0.15, 1e-6).is_err());
        assert!(margin_adjustments(&[0.5, 0.5], 0.0, 1e-6).is_err());
    }

    #[test]
    fn empty_class_gets_full_margin() {
        let s = ClassStats::from_counts(&[100, 0, 10], 0.9f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
        assert_eq!(s.deltas[1], 0.15);
        assert_eq!(s.deltas[0], 0.0);
        assert!((s.deltas[2] - 0.15).abs() < 1e-15);
        assert!((s.effective_priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_source_switch() {
        let eff = ClassStats::from_counts(&[50, 20, 5], 0.9f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
        let emp = ClassStats::from_counts(&[50, 20, 5], 0.9f64, 0.15, 1e-6, PriorSource::Empirical).unwrap();
        let expect = margin_adjustments(&emp.priors, 0.15, 1e-6).unwrap();
        assert_eq!(emp.deltas, expect);
        assert_ne!(eff.deltas[1], emp.deltas[1]);
    }

    #[test]
    fn partition_examples() {
        use Group::*;
        let p = partition_classes(&[6269, 983, 6], 2000, 100).unwrap();
        assert_eq!(p.group_of, vec![Head, Between, Tail]);
        let p = partition_classes(&[50; 4], 2000, 100).unwrap();
        assert!(p.group_of.iter().all(|&g| g == Tail));
        let p = partition_classes(&[2001, 2000, 100, 99], 2000, 100).unwrap();
        assert_eq!(p.group_of, vec![Head, Between, Between, Tail]);
        assert!(partition_classes(&[1], 100, 100).is_err());
    }

    #[test]
    fn stats_roundtrip_json() {
        let s = ClassStats::from_counts(&[9, 3, 1], 0.9f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ClassStats<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn deltas_bounded_and_monotone(counts in prop::collection::vec(1usize..5000, 2..12)) {
            let m = 0.15;
            let s = ClassStats::from_counts(&counts, 0.9f64, m, 1e-6, PriorSource::Effective).unwrap();
            prop_assert!((s.priors.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((s.effective_priors.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..counts.len() {
                prop_assert!(s.deltas[j] >= 0.0 && s.deltas[j] <= m);
                prop_assert!(s.effective_numbers[j] >= 1.0 && s.effective_numbers[j] <= 10.0 + 1e-12);
                for k in 0..counts.len() {
                    if s.effective_priors[j] < s.effective_priors[k] {
                        prop_assert!(s.deltas[j] >= s.deltas[k]);
                    }
                }
            }
        }

        #[test]
        fn beta_zero_reduces_to_uniform_mix(counts in prop::collection::vec(1usize..500, 1..10)) {
            let s = ClassStats::from_counts(&counts, 0.0f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
            let c = counts.len() as f64;
            for j in 0..counts.len() {
                prop_assert_eq!(s.effective_numbers[j], 1.0);
                prop_assert!((s.effective_priors[j] - (0.5 * s.priors[j] + 0.5 / c)).abs() <= 1e-15);
            }
        }

        #[test]
        fn permutation_equivariant(
            counts in prop::collection::vec(1usize..3000, 2..10),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..counts.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<usize> = perm.iter().map(|&j| counts[j]).collect();
            let a = ClassStats::from_counts(&counts, 0.9f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
            let b = ClassStats::from_counts(&permuted, 0.9f64, 0.15, 1e-6, PriorSource::Effective).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert!((a.deltas[old] - b.deltas[new]).abs() <= 1e-15);
                prop_assert!((a.effective_priors[old] - b.effective_priors[new]).abs() <= 1e-15);
            }
        }
    }
}
