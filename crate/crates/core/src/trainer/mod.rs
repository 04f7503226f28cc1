//! Training loop: priors and margins once, then per step plan a batch,
//! embed the candidates, retain `B` of them, apply the loss and update the
//! encoder, the prototypes and `γ` with one optimizer.

pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, error, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, Activation, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    self, calibrate_threshold, closed_set_metrics, open_set_eval, EvalReport, OpenSetMetrics, ScoreKind,
};
use crate::linalg::Matrix;
use crate::loss::{dual_margin_backward, dual_margin_forward, total_loss, LossMode, MarginConfig, PrototypeBank};
use crate::priors::{partition_classes, ClassPartition, ClassStats};
use crate::sampler::{
    norm_select_indices, perturb, random_select, BatchPlanner, EmbeddingBatch, SamplerConfig, SelectionStrategy,
};
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Split};

pub use optim::{Optimizer, OptimizerKind};

/// Batch losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub margin: MarginConfig<T>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Training-count thresholds for head (`>`) and tail (`<`) classes.
    pub head_threshold: usize,
    pub tail_threshold: usize,
    /// Multiplier on the learning rate used for `γ`.
    pub gamma_lr_scale: f64,
    pub gamma_weight_decay: bool,
    /// Writes `last.json` and `best.json` here after every epoch when set.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 1e-3,
            weight_decay: 1e-6,
            lr_decay_epochs: vec![8, 16, 24],
            lr_decay_factor: 0.1,
            sampler: SamplerConfig::default(),
            seed: 0,
            optimizer: OptimizerKind::AdaptiveDecoupled,
            margin: MarginConfig::default(),
            hidden: vec![64, 32],
            embed_dim: 16,
            activation: Activation::Tanh,
            head_threshold: 200,
            tail_threshold: 50,
            gamma_lr_scale: 1.0,
            gamma_weight_decay: true,
            checkpoint_dir: None,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if self.sampler.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.sampler.oversample_prob) || !(0.0..=1.0).contains(&self.sampler.perturb_prob) {
            return bad("sampler probabilities must lie in [0, 1]".into());
        }
        if !(self.sampler.perturb_strength >= 0.0 && self.sampler.perturb_strength.is_finite()) {
            return bad("perturbation strength must be finite and non-negative".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        self.margin.validate()
    }

    /// Whether candidate retention uses embedding norms.
    pub fn norm_guided(&self) -> bool {
        self.sampler.selection == SelectionStrategy::NormGuided && self.margin.mode.is_margin_based()
    }
}

/// `base_lr · factor^{#(decay epochs ≤ epoch)}`.
pub fn lr_at<T: Scalar>(epoch: usize, cfg: &TrainConfig<T>) -> f64 {
    let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(k as i32)
}

/// A trained encoder with its prototypes, over the known classes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub encoder: EncoderParams<T>,
    pub prototypes: PrototypeBank<T>,
    pub gamma: T,
    pub mode: LossMode,
    pub s: T,
    /// Dataset class id of each model class.
    pub class_ids: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed(&self, features: &Matrix<T>) -> Result<EmbeddingBatch<T>> {
        let (raw, _) = self.encoder.forward(features)?;
        let n = raw.rows();
        Ok(EmbeddingBatch::with_version(raw, vec![0; n], self.encoder.version))
    }

    /// Predicted model classes and open-set scores.
    pub fn predict(&self, features: &Matrix<T>, score: ScoreKind) -> Result<(Vec<usize>, Vec<T>)> {
        let batch = self.embed(features)?;
        let preds = if self.mode.is_margin_based() {
            eval::predict(&batch.units, self.prototypes.unit_weights())?.0
        } else {
            eval::predict_dot(&batch.raw, &self.prototypes.weights)?
        };
        let scores = eval::open_set_scores(&batch.units, self.prototypes.unit_weights(), score, self.s)?;
        Ok((preds, scores))
    }

    /// Maps dataset labels to model classes; unknown classes map to `None`.
    pub fn label_map(&self, num_dataset_classes: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; num_dataset_classes];
        for (k, &j) in self.class_ids.iter().enumerate() {
            map[j] = Some(k);
        }
        map
    }
}

/// Serialized ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (the value is 128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| Error::InvalidArgument(format!("bad rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    /// Random-retention stream, kept apart so both retention strategies see
    /// the same batch plans.
    pub select_rng: RngState,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when the validation split holds no known-class samples.
    pub val_macro_recall: Option<f64>,
    pub gamma: f64,
    pub oversampled_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        epoch: usize,
        step: u64,
        loss: f64,
        lr: f64,
        oversampled: bool,
    },
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub final_state: TrainState<T>,
    /// Model with the best validation macro recall (earliest on ties).
    pub best: Model<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stats: ClassStats<T>,
    pub partition: ClassPartition,
}

pub fn train<T: Scalar>(cfg: &TrainConfig<T>, dataset: &Dataset<T>) -> Result<TrainOutcome<T>> {
    train_logged(cfg, dataset, &mut |_| {})
}

/// Writes a JSON file through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    write_atomic(path, serde_json::to_string(state)?.as_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let mut state: TrainState<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    state.model.prototypes.ensure_view();
    Ok(state)
}

pub fn train_logged<T: Scalar>(
    cfg: &TrainConfig<T>,
    dataset: &Dataset<T>,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let class_ids = dataset.known_classes();
    let c = class_ids.len();
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 known classes, got {c}"
        )));
    }
    let mut to_model = vec![usize::MAX; dataset.num_classes];
    for (k, &j) in class_ids.iter().enumerate() {
        to_model[j] = k;
    }
    let train_idx = dataset.indices_in(Split::Train);
    if let Some(&i) = train_idx.iter().find(|&&i| !dataset.known_mask[dataset.labels[i]]) {
        return Err(Error::InvalidArgument(format!(
            "training sample {i} belongs to unknown class {}",
            dataset.labels[i]
        )));
    }
    if train_idx.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let labels: Vec<usize> = dataset.labels.iter().map(|&y| to_model[y]).collect();
    let mut counts = vec![0usize; c];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in &train_idx {
        counts[labels[i]] += 1;
        members[labels[i]].push(i);
    }
    let stats = cfg.margin.class_stats(&counts)?;
    let partition = partition_classes(&counts, cfg.head_threshold, cfg.tail_threshold)?;
    info!(
        "training {} on {} samples, {c} classes, {} tail",
        cfg.margin.mode.name(),
        train_idx.len(),
        partition.tail_classes().len()
    );

    let mut dims = vec![dataset.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.embed_dim);
    let encoder = init_params::<T>(&dims, cfg.activation, cfg.seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
    let proto_data = (0..c * cfg.embed_dim)
        .map(|_| T::lit(init_rng.sample::<f64, _>(StandardNormal) * scale))
        .collect();
    let prototypes = PrototypeBank::new(Matrix::from_vec(c, cfg.embed_dim, proto_data)?);
    let mut model = Model {
        encoder,
        prototypes,
        gamma: cfg.margin.gamma,
        mode: cfg.margin.mode,
        s: cfg.margin.s,
        class_ids,
    };
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let planner_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut planner = BatchPlanner::new(train_idx.clone(), &labels, &partition, cfg.sampler, planner_rng);
    let mut select_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    select_rng.set_stream(1);

    let val_idx: Vec<usize> = dataset
        .indices_in(Split::Val)
        .into_iter()
        .filter(|&i| dataset.known_mask[dataset.labels[i]])
        .collect();
    let b = cfg.sampler.batch_size;
    let steps_per_epoch = train_idx.len().div_ceil(b);
    let learns_gamma = cfg.margin.learns_gamma();
    let wd = T::lit(cfg.weight_decay);
    let strength = T::lit(cfg.sampler.perturb_strength);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let lr = T::lit(lr_at(epoch, cfg));
        let gamma_hyper = (
            lr * T::lit(cfg.gamma_lr_scale),
            if cfg.gamma_weight_decay { wd } else { T::zero() },
        );
        let mut epoch_loss = 0.0;
        let mut oversampled = 0;
        for _ in 0..steps_per_epoch {
            let plan = planner.plan()?;
            let cand = plan.candidates();
            let mut feats = Matrix::zeros(cand.len(), dataset.dim());
            for (r, &i) in cand.iter().enumerate() {
                let row = dataset.features.row(i);
                if r >= b && plan.perturbation_mask[r - b] {
                    let peers = &members[labels[i]];
                    let rng = planner.rng_mut();
                    let partner = peers[rng.random_range(0..peers.len())];
                    let out = perturb(row, Some(dataset.features.row(partner)), strength, rng);
                    feats.row_mut(r).copy_from_slice(&out);
                } else {
                    feats.row_mut(r).copy_from_slice(row);
                }
            }
            let cand_labels: Vec<usize> = cand.iter().map(|&i| labels[i]).collect();
            let (raw, cache) = model.encoder.forward(&feats)?;
            let candidates = EmbeddingBatch::with_version(raw, cand_labels, model.encoder.version);
            let (batch, cache) = if candidates.len() > b {
                oversampled += 1;
                candidates.check_fresh(model.encoder.version)?;
                let keep = if cfg.norm_guided() {
                    norm_select_indices(&candidates.norms, b)?
                } else {
                    random_select(candidates.len(), b, &mut select_rng)?
                };
                (candidates.subset(&keep), cache.select_rows(&keep))
            } else {
                (candidates, cache)
            };

            let mcfg = MarginConfig {
                gamma: model.gamma,
                ..cfg.margin
            };
            let fwd = dual_margin_forward(&batch, &model.prototypes, &stats, &mcfg)?;
            let loss = total_loss(&fwd, &mcfg).as_f64();
            if !(loss <= DIVERGENCE_LIMIT) {
                error!(
                    "diverged at epoch {epoch} step {step}: loss {loss}, gamma {}, labels {:?}",
                    model.gamma, batch.labels
                );
                return Err(Error::Diverged { epoch, step, loss });
            }
            let grads = dual_margin_backward(&fwd, &batch, &model.prototypes);
            let (enc_grads, _) = model.encoder.backward(&cache, &grads.embeddings)?;

            let gamma_grad = [grads.gamma];
            let mut grad_bufs = enc_grads.slices();
            grad_bufs.push(grads.prototypes.as_slice());
            let mut params = model.encoder.slices_mut();
            params.push(model.prototypes.weights_mut().as_mut_slice());
            let mut hyper = vec![(lr, wd); params.len()];
            if learns_gamma {
                params.push(std::slice::from_mut(&mut model.gamma));
                grad_bufs.push(&gamma_grad);
                hyper.push(gamma_hyper);
            }
            let res = optimizer.step(&mut params, &grad_bufs, &hyper);
            model.prototypes.refresh();
            if let Err(e) = res {
                error!("optimizer step {step} rejected: {e}");
                return Err(e);
            }
            model.encoder.version += 1;

            log(&LogEvent::Step {
                epoch,
                step,
                loss,
                lr: lr.as_f64(),
                oversampled: plan.oversample_fired,
            });
            step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }

        let val_macro_recall = if val_idx.is_empty() {
            None
        } else {
            let feats = dataset.features.select_rows(&val_idx);
            let (preds, _) = model.predict(&feats, ScoreKind::MaxCosine)?;
            let truth: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
            Some(closed_set_metrics(&preds, &truth, c, None)?.macro_recall)
        };
        let record = EpochRecord {
            epoch,
            lr: lr.as_f64(),
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_macro_recall,
            gamma: model.gamma.as_f64(),
            oversampled_batches: oversampled,
        };
        debug!("{record:?}");
        log(&LogEvent::Epoch(record.clone()));
        history.push(record);

        let score = val_macro_recall.unwrap_or(f64::NEG_INFINITY);
        if score > best_recall || (val_macro_recall.is_none() && epoch + 1 == cfg.epochs) {
            best_recall = score;
            best = model.clone();
            best_epoch = epoch;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir)?;
            let state = TrainState {
                model: model.clone(),
                optimizer: optimizer.clone(),
                epoch: epoch + 1,
                step,
                rng: RngState::capture(planner.rng_mut()),
                select_rng: RngState::capture(&select_rng),
                step_losses: step_losses.clone(),
            };
            save_checkpoint(&dir.join("last.json"), &state)?;
            write_atomic(&dir.join("best.json"), serde_json::to_string(&best)?.as_bytes())?;
        }
    }

    let final_state = TrainState {
        model,
        optimizer,
        epoch: cfg.epochs,
        step,
        rng: RngState::capture(planner.rng_mut()),
        select_rng: RngState::capture(&select_rng),
        step_losses,
    };
    Ok(TrainOutcome {
        final_state,
        best,
        best_epoch,
        history,
        stats,
        partition,
    })
}

/// Closed-set metrics on the known-class samples of `split`, with group
/// recall from `partition` (in model class ids).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    split: Split,
    partition: Option<&ClassPartition>,
) -> Result<EvalReport> {
    let map = model.label_map(dataset.num_classes);
    let idx: Vec<usize> = dataset
        .indices_in(split)
        .into_iter()
        .filter(|&i| map[dataset.labels[i]].is_some())
        .collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no known-class samples in the {} split",
            split.name()
        )));
    }
    let (preds, _) = model.predict(&dataset.features.select_rows(&idx), ScoreKind::MaxCosine)?;
    let truth: Vec<usize> = idx.iter().map(|&i| map[dataset.labels[i]].expect("filtered")).collect();
    closed_set_metrics(&preds, &truth, model.num_classes(), partition)
}

/// Calibrates `τ` on known validation scores and evaluates known test
/// samples against the unknown pool.
pub fn evaluate_open_set<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    target_tpr: f64,
    score: ScoreKind,
) -> Result<OpenSetMetrics> {
    let known = |split: Split| -> Vec<usize> {
        dataset
            .indices_in(split)
            .into_iter()
            .filter(|&i| dataset.known_mask[dataset.labels[i]])
            .collect()
    };
    let scores = |idx: &[usize]| -> Result<Vec<T>> { Ok(model.predict(&dataset.features.select_rows(idx), score)?.1) };
    let val = scores(&known(Split::Val))?;
    let test = scores(&known(Split::Test))?;
    let unknown = scores(&dataset.indices_in(Split::Unknown))?;
    let (tau, calibration_tpr) = calibrate_threshold(&val, target_tpr)?;
    let (tpr, tnr, acc) = open_set_eval(&test, &unknown, tau)?;
    Ok(OpenSetMetrics {
        threshold: tau.as_f64(),
        calibration_tpr,
        tpr,
        tnr,
        acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build, SyntheticSpec};

    fn blobs() -> Dataset<f64> {
        let spec = SyntheticSpec {
            num_classes: 2,
            dim: 4,
            imbalance_ratio: 1.0,
            head_count: 60,
            cluster_spread: 0.05,
            min_separation_deg: 60.0,
            seed: 11,
            ..Default::default()
        };
        build(&spec, (0.6, 0.2, 0.2)).unwrap()
    }

    fn small_cfg() -> TrainConfig<f64> {
        TrainConfig {
            epochs: 5,
            base_lr: 1e-2,
            sampler: SamplerConfig {
                batch_size: 8,
                oversample: 2,
                ..SamplerConfig::default()
            },
            hidden: vec![8],
            embed_dim: 4,
            head_threshold: 30,
            tail_threshold: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::<f64>::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert!((lr_at(7, &cfg) - 0.001).abs() < 1e-18);
        assert!((lr_at(8, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(24, &cfg) - 1e-6).abs() < 1e-20);
        let flat = TrainConfig::<f64> {
            lr_decay_epochs: vec![],
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(29, &flat), 0.001);
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::<f64>::default();
        assert_eq!(
            (cfg.epochs, cfg.sampler.batch_size, cfg.sampler.oversample),
            (30, 32, 8)
        );
        assert_eq!(cfg.sampler.oversample_prob, 0.1);
        assert_eq!(cfg.weight_decay, 1e-6);
        cfg.validate().unwrap();
        assert!(TrainConfig::<f64> {
            epochs: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::<f64> { base_lr: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let ds = blobs();
        let out = train(&small_cfg(), &ds).unwrap();
        let report = evaluate(&out.best, &ds, Split::Val, None).unwrap();
        assert_eq!(report.rank1, 1.0);
    }

    #[test]
    fn deterministic_history() {
        let ds = blobs();
        let a = train(&small_cfg(), &ds).unwrap();
        let b = train(&small_cfg(), &ds).unwrap();
        assert_eq!(a.final_state.step_losses, b.final_state.step_losses);
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_state.model, b.final_state.model);
    }

    #[test]
    fn logits_ignore_prototype_scale() {
        let ds = blobs();
        let out = train(&small_cfg(), &ds).unwrap();
        let model = out.final_state.model;
        let batch = model.embed(&ds.features).unwrap();
        let mut rescaled = model.prototypes.clone();
        let d = rescaled.dim();
        for (k, v) in rescaled.weights_mut().as_mut_slice().iter_mut().enumerate() {
            *v *= 1.0 + 7.5 * (k / d) as f64;
        }
        rescaled.refresh();
        for x in batch.units.iter_rows() {
            let a = crate::linalg::cosine_logits(x, model.prototypes.unit_weights()).unwrap();
            let b = crate::linalg::cosine_logits(x, rescaled.unit_weights()).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn small_step_decreases_frozen_batch_loss() {
        let ds = blobs();
        let out = train(
            &TrainConfig {
                epochs: 1,
                base_lr: 1e-9,
                ..small_cfg()
            },
            &ds,
        )
        .unwrap();
        let mut model = out.final_state.model;
        let cfg = MarginConfig::<f64>::default();
        let idx: Vec<usize> = ds.indices_in(Split::Train).into_iter().take(16).collect();
        let feats = ds.features.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let eval_loss = |m: &Model<f64>| {
            let (raw, _) = m.encoder.forward(&feats).unwrap();
            let batch = EmbeddingBatch::new(raw, labels.clone());
            let fwd = dual_margin_forward(&batch, &m.prototypes, &out.stats, &cfg).unwrap();
            total_loss(&fwd, &cfg)
        };
        let before = eval_loss(&model);
        let (raw, cache) = model.encoder.forward(&feats).unwrap();
        let batch = EmbeddingBatch::new(raw, labels.clone());
        let fwd = dual_margin_forward(&batch, &model.prototypes, &out.stats, &cfg).unwrap();
        let g = dual_margin_backward(&fwd, &batch, &model.prototypes);
        let (eg, _) = model.encoder.backward(&cache, &g.embeddings).unwrap();
        let mut sgd = Optimizer::new(OptimizerKind::Sgd);
        let mut grads = eg.slices();
        grads.push(g.prototypes.as_slice());
        let mut params = model.encoder.slices_mut();
        params.push(model.prototypes.weights_mut().as_mut_slice());
        let hyper = vec![(1e-4, 0.0); params.len()];
        sgd.step(&mut params, &grads, &hyper).unwrap();
        model.prototypes.refresh();
        let after = eval_loss(&model);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = blobs();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..small_cfg()
        };
        let out = train(&cfg, &ds).unwrap();
        let state: TrainState<f64> = load_checkpoint(&dir.path().join("last.json")).unwrap();
        assert_eq!(state.model, out.final_state.model);
        assert_eq!(state.step_losses, out.final_state.step_losses);
        let mut rng = state.rng.restore().unwrap();
        let mut orig = out.final_state.rng.restore().unwrap();
        assert_eq!(rng.random::<u64>(), orig.random::<u64>());
    }

    #[test]
    fn unknown_classes_never_train() {
        let spec = SyntheticSpec {
            num_classes: 5,
            dim: 6,
            imbalance_ratio: 4.0,
            head_count: 40,
            unknown_class_count: 2,
            seed: 3,
            ..Default::default()
        };
        let ds: Dataset<f64> = build(&spec, (0.6, 0.2, 0.2)).unwrap();
        let out = train(
            &TrainConfig {
                epochs: 1,
                ..small_cfg()
            },
            &ds,
        )
        .unwrap();
        assert_eq!(out.best.num_classes(), 3);
        for &j in &out.best.class_ids {
            assert!(ds.known_mask[j]);
        }
    }
}
