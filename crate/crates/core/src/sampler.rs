//! Batch assembly: a uniform base batch of `B` samples, Bernoulli-gated
//! oversampling of `b` tail-class samples, and retention of the `B`
//! candidates with the lowest embedding norms.

use log::warn;
use rand::seq::index;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{normalize_rows, Matrix};
use crate::priors::ClassPartition;
use crate::scalar::Scalar;

/// Raw embeddings with their unit view and norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub raw: Matrix<T>,
    pub units: Matrix<T>,
    pub norms: Vec<T>,
    pub degenerate: Vec<bool>,
    pub labels: Vec<usize>,
    /// Encoder parameter version the embeddings were produced with.
    pub params_version: u64,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(raw: Matrix<T>, labels: Vec<usize>) -> Self {
        Self::with_version(raw, labels, 0)
    }

    pub fn with_version(raw: Matrix<T>, labels: Vec<usize>, params_version: u64) -> Self {
        assert_eq!(raw.rows(), labels.len(), "one label per embedding row");
        let n = normalize_rows(&raw);
        Self {
            raw,
            units: n.units,
            norms: n.norms,
            degenerate: n.degenerate,
            labels,
            params_version,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            raw: self.raw.select_rows(positions),
            units: self.units.select_rows(positions),
            norms: positions.iter().map(|&i| self.norms[i]).collect(),
            degenerate: positions.iter().map(|&i| self.degenerate[i]).collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            params_version: self.params_version,
        }
    }

    /// Fails when the norms were computed with other encoder parameters.
    pub fn check_fresh(&self, current_version: u64) -> Result<()> {
        if self.params_version != current_version {
            return Err(Error::StaleEmbeddings {
                expected: current_version,
                found: self.params_version,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Keep the `B` lowest-norm candidates.
    #[default]
    NormGuided,
    /// Keep `B` candidates chosen uniformly at random.
    Random,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "norm_guided" => Ok(Self::NormGuided),
            "random" => Ok(Self::Random),
            other => Err(format!("expected `norm_guided` or `random`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Base batch size `B`.
    pub batch_size: usize,
    /// Tail-class oversampling size `b`.
    pub oversample: usize,
    /// Bernoulli probability `p` that a batch is oversampled.
    pub oversample_prob: f64,
    /// Probability that an oversampled sample is perturbed.
    pub perturb_prob: f64,
    pub perturb_strength: f64,
    pub selection: SelectionStrategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            oversample: 8,
            oversample_prob: 0.1,
            perturb_prob: 0.9,
            perturb_strength: 0.1,
            selection: SelectionStrategy::NormGuided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub base_indices: Vec<usize>,
    pub extra_indices: Vec<usize>,
    pub oversample_fired: bool,
    pub perturbation_mask: Vec<bool>,
}

impl BatchPlan {
    /// Base indices followed by the oversampled ones.
    pub fn candidates(&self) -> Vec<usize> {
        let mut all = self.base_indices.clone();
        all.extend_from_slice(&self.extra_indices);
        all
    }

    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("batch plan serializes")
    }
}

/// Draws one batch plan.
///
/// `pool` holds the sample ids eligible for the base batch, `tail_pool` the
/// ids eligible for oversampling. Oversampled ids may repeat and may
/// duplicate base ids.
pub fn plan_batch<R: RngCore>(
    pool: &[usize],
    tail_pool: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<BatchPlan> {
    if pool.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples, fewer than batch size {}",
            pool.len(),
            cfg.batch_size
        )));
    }
    let base_indices: Vec<usize> = index::sample(rng, pool.len(), cfg.batch_size)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    let mut fired = cfg.oversample > 0 && rng.random_bool(cfg.oversample_prob.clamp(0.0, 1.0));
    if fired && tail_pool.is_empty() {
        warn!("oversampling fired but no tail-class samples exist; skipping");
        fired = false;
    }
    let (extra_indices, perturbation_mask) = if fired {
        let extra: Vec<usize> = (0..cfg.oversample)
            .map(|_| tail_pool[rng.random_range(0..tail_pool.len())])
            .collect();
        let mask = (0..cfg.oversample)
            .map(|_| rng.random_bool(cfg.perturb_prob.clamp(0.0, 1.0)))
            .collect();
        (extra, mask)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(BatchPlan {
        base_indices,
        extra_indices,
        oversample_fired: fired,
        perturbation_mask,
    })
}

/// Owns the planning RNG and the sample pools for a run.
#[derive(Debug, Clone)]
pub struct BatchPlanner<R> {
    pool: Vec<usize>,
    tail_pool: Vec<usize>,
    cfg: SamplerConfig,
    rng: R,
}

impl<R: RngCore> BatchPlanner<R> {
    /// `labels[i]` is the class of sample `pool[k] = i`; tail membership comes
    /// from `partition`.
    pub fn new(pool: Vec<usize>, labels: &[usize], partition: &ClassPartition, cfg: SamplerConfig, rng: R) -> Self {
        let tail_pool = pool
            .iter()
            .copied()
            .filter(|&i| partition.group_of[labels[i]] == crate::priors::Group::Tail)
            .collect();
        Self {
            pool,
            tail_pool,
            cfg,
            rng,
        }
    }

    pub fn plan(&mut self) -> Result<BatchPlan> {
        plan_batch(&self.pool, &self.tail_pool, &self.cfg, &mut self.rng)
    }

    pub fn tail_pool(&self) -> &[usize] {
        &self.tail_pool
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

/// Feature-space stand-in for image augmentation.
///
/// Returns `x + strength·ε + w·(partner − x)` with `ε ~ N(0, I)` and
/// `w ~ U(0, min(strength, 1))`. `strength = 0` is the identity.
pub fn perturb<T: Scalar, R: Rng>(features: &[T], partner: Option<&[T]>, strength: T, rng: &mut R) -> Vec<T> {
    if strength == T::zero() {
        return features.to_vec();
    }
    let w_max = strength.min(T::one()).as_f64();
    let w = T::lit(rng.random_range(0.0..=w_max));
    features
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let eps: f64 = rng.sample(StandardNormal);
            let mix = partner.map_or(T::zero(), |p| w * (p[k] - x));
            x + strength * T::lit(eps) + mix
        })
        .collect()
}

/// Positions of the `keep` lowest-norm candidates, ascending by position.
/// Ties break toward the lower position.
pub fn norm_select_indices<T: Scalar>(norms: &[T], keep: usize) -> Result<Vec<usize>> {
    if norms.len() < keep {
        return Err(Error::InvalidArgument(format!(
            "norm selection needs at least {keep} candidates, got {}",
            norms.len()
        )));
    }
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| {
        norms[a]
            .partial_cmp(&norms[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    Ok(kept)
}

pub fn norm_select<T: Scalar>(candidates: &EmbeddingBatch<T>, keep: usize) -> Result<EmbeddingBatch<T>> {
    if candidates.len() == keep {
        return Ok(candidates.clone());
    }
    let kept = norm_select_indices(&candidates.norms, keep)?;
    Ok(candidates.subset(&kept))
}

/// `keep` positions out of `n`, uniformly at random, ascending.
pub fn random_select<R: RngCore>(n: usize, keep: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < keep {
        return Err(Error::InvalidArgument(format!(
            "random selection needs at least {keep} candidates, got {n}"
        )));
    }
    if n == keep {
        return Ok((0..n).collect());
    }
    let mut kept = index::sample(rng, n, keep).into_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::partition_classes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: f64) -> SamplerConfig {
        SamplerConfig {
            oversample_prob: p,
            ..Default::default()
        }
    }

    #[test]
    fn bernoulli_off_never_oversamples() {
        let pool: Vec<usize> = (0..100).collect();
        let tail: Vec<usize> = (90..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let plan = plan_batch(&pool, &tail, &cfg(0.0), &mut rng).unwrap();
            assert!(plan.extra_indices.is_empty());
            assert!(!plan.oversample_fired);
            assert_eq!(plan.base_indices.len(), 32);
        }
    }

    #[test]
    fn bernoulli_on_always_oversamples_from_tail() {
        let pool: Vec<usize> = (0..100).collect();
        let tail: Vec<usize> = (90..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let plan = plan_batch(&pool, &tail, &cfg(1.0), &mut rng).unwrap();
            assert_eq!(plan.extra_indices.len(), 8);
            assert_eq!(plan.perturbation_mask.len(), 8);
            assert!(plan.extra_indices.iter().all(|i| tail.contains(i)));
            let mut base = plan.base_indices.clone();
            base.sort_unstable();
            base.dedup();
            assert_eq!(base.len(), 32, "base drawn without replacement");
        }
    }

    #[test]
    fn missing_tail_pool_falls_back() {
        let pool: Vec<usize> = (0..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = plan_batch(&pool, &[], &cfg(1.0), &mut rng).unwrap();
        assert!(!plan.oversample_fired);
        assert!(plan.extra_indices.is_empty());
    }

    #[test]
    fn too_small_pool_is_rejected() {
        let pool: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(plan_batch(&pool, &[], &cfg(0.1), &mut rng).is_err());
    }

    #[test]
    fn planner_uses_partition_tail() {
        let labels = vec![0, 0, 0, 1, 1, 2];
        let partition = partition_classes(&[300, 150, 5], 200, 10).unwrap();
        let planner = BatchPlanner::new(
            (0..6).collect(),
            &labels,
            &partition,
            cfg(1.0),
            ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(planner.tail_pool(), &[5]);
    }

    #[test]
    fn planning_is_deterministic() {
        let pool: Vec<usize> = (0..500).collect();
        let tail: Vec<usize> = (480..500).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| plan_batch(&pool, &tail, &cfg(0.3), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn plan_serializes_as_single_json_line() {
        let plan = BatchPlan {
            base_indices: vec![1, 2],
            extra_indices: vec![7],
            oversample_fired: true,
            perturbation_mask: vec![false],
        };
        let line = plan.to_jsonl();
        assert!(!line.contains('\n'));
        let back: BatchPlan = serde_json::from_str(&line).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn perturb_identity_at_zero_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = [0.3, -1.0, 2.0];
        assert_eq!(perturb(&x, Some(&[1.0, 1.0, 1.0]), 0.0, &mut rng), x.to_vec());
    }

    #[test]
    fn perturb_noise_moves_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = perturb(&[0.0f64; 6], None, 0.1, &mut rng);
        assert!(crate::linalg::l2_norm(&out) > 0.0);
    }

    #[test]
    fn perturb_is_unbiased_for_mean_zero_partners() {
        // partner = x + zero-mean noise; E[out] = x
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = [0.5, -0.25];
        let strength = 0.3;
        let draws = 100_000;
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..draws {
            let partner: Vec<f64> = x.iter().map(|&v| v + rng.sample::<f64, _>(StandardNormal)).collect();
            let out = perturb(&x, Some(&partner), strength, &mut rng);
            for k in 0..2 {
                sum[k] += out[k];
                sumsq[k] += out[k] * out[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / draws as f64;
            let var = sumsq[k] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!((mean - x[k]).abs() <= 3.0 * se, "coord {k}: {mean} vs {}", x[k]);
        }
    }

    #[test]
    fn norm_select_examples() {
        assert_eq!(norm_select_indices(&[3.0, 1.0, 2.0, 5.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(norm_select_indices(&[1.0; 6], 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(norm_select_indices(&[1.0, 2.0], 3).is_err());

        let batch = EmbeddingBatch::new(
            Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0], [2.0, 0.0]]).unwrap(),
            vec![0, 1, 0],
        );
        assert_eq!(norm_select(&batch, 3).unwrap(), batch);
        let kept = norm_select(&batch, 2).unwrap();
        assert_eq!(kept.labels, vec![1, 0]);
        assert_eq!(kept.norms, vec![1.0, 2.0]);
    }

    #[test]
    fn stale_embeddings_are_rejected() {
        let batch = EmbeddingBatch::with_version(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), vec![0], 4);
        assert!(batch.check_fresh(4).is_ok());
        assert!(matches!(batch.check_fresh(5), Err(Error::StaleEmbeddings { .. })));
    }

    #[test]
    fn random_select_is_sorted_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kept = random_select(40, 32, &mut rng).unwrap();
        assert_eq!(kept.len(), 32);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!(kept.iter().all(|&i| i < 40));
    }

    proptest! {
        #[test]
        fn retained_norms_dominate_discarded(
            norms in prop::collection::vec(0.0f64..10.0, 1..60),
            frac in 0.0f64..1.0,
        ) {
            let keep = ((norms.len() as f64) * frac) as usize;
            let kept = norm_select_indices(&norms, keep).unwrap();
            prop_assert_eq!(kept.len(), keep);
            let max_kept = kept.iter().map(|&i| norms[i]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..norms.len() {
                if !kept.contains(&i) {
                    prop_assert!(norms[i] >= max_kept);
                }
            }
        }
    }
}
