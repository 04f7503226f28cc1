//! Dual-margin penalization loss with power-based margin scaling.
//!
//! For a sample with label `y` the logit of class `j` is shifted by a margin
//! before the scaled softmax:
//!
//! ```text
//! a_j = s (z_j − m_j),   m_y = m + Δ̃_y,   m_k = Δ̃_k (k ≠ y)
//! L_i = −log softmax(a)_y
//! ```
//!
//! `Δ̃` is the prior-derived adjustment `Δ` reshaped by a learnable exponent
//! `ζ(γ) = 1 + softplus(γ)`, and `L_reg = Σ_j (Δ_j − Δ̃_j)²` keeps the reshaped
//! margins near their prior-derived values. The batch objective is
//! `mean_i L_i + λ L_reg`.
//!
//! Gradients are returned with respect to the *raw* embeddings and
//! prototypes, i.e. they include the Jacobian of the L2 normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, normalize_backward, normalize_rows, Matrix, RowNormalized};
use crate::priors::{ClassStats, PriorSource};
use crate::sampler::EmbeddingBatch;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Target margin `m + Δ̃_y`, non-target margins `Δ̃_k`.
    #[default]
    DualMargin,
    /// Constant target margin `m`, no non-target margins.
    AmSoftmax,
    /// Plain softmax cross-entropy on raw dot-product logits (`s = 1`, `m = 0`).
    Ce,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::DualMargin => "dual_margin",
            LossMode::AmSoftmax => "am_softmax",
            LossMode::Ce => "ce",
        }
    }

    /// Whether logits are cosine similarities between unit vectors.
    pub fn is_margin_based(self) -> bool {
        !matches!(self, LossMode::Ce)
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dual_margin" => Ok(Self::DualMargin),
            "am_softmax" => Ok(Self::AmSoftmax),
            "ce" => Ok(Self::Ce),
            other => Err(format!("expected one of dual_margin, am_softmax, ce; got `{other}`")),
        }
    }
}

/// Sign convention of the power-scaled margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSign {
    /// `Δ̃_j = −m (|Δ_j| / m)^ζ`, non-positive.
    #[default]
    Literal,
    /// `Δ̃_j = +m (|Δ_j| / m)^ζ`, a shrunken non-negative margin.
    Magnitude,
}

impl std::str::FromStr for MarginSign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(Self::Literal),
            "magnitude" => Ok(Self::Magnitude),
            other => Err(format!("expected `literal` or `magnitude`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct MarginConfig<T> {
    /// Logit scale `s`.
    pub s: T,
    /// Base margin `m ∈ (0, 1)`.
    pub m: T,
    /// Effective-number smoothing `β ∈ [0, 1)`.
    pub beta: T,
    pub epsilon: T,
    /// Regularizer weight `λ`.
    pub lambda: T,
    /// Learnable exponent parameter; this is the initial value in a training config.
    pub gamma: T,
    pub mode: LossMode,
    pub scaled_sign: MarginSign,
    /// When off, `Δ̃ = Δ` and `γ` receives no gradient.
    pub power_scaling: bool,
    pub prior_source: PriorSource,
}

impl<T: Scalar> Default for MarginConfig<T> {
    fn default() -> Self {
        Self {
            s: T::lit(32.0),
            m: T::lit(0.15),
            beta: T::lit(crate::priors::DEFAULT_BETA),
            epsilon: T::lit(crate::priors::DEFAULT_EPSILON),
            lambda: T::lit(5.0),
            gamma: T::zero(),
            mode: LossMode::DualMargin,
            scaled_sign: MarginSign::Literal,
            power_scaling: true,
            prior_source: PriorSource::Effective,
        }
    }
}

impl<T: Scalar> MarginConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.s > T::zero()) || !self.s.is_finite() {
            return bad(format!("logit scale s must be positive, got {}", self.s));
        }
        if !(self.m > T::zero() && self.m < T::one()) {
            return bad(format!("base margin m must lie in (0, 1), got {}", self.m));
        }
        if !(self.beta >= T::zero() && self.beta < T::one()) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.epsilon > T::zero()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !self.gamma.is_finite() {
            return bad(format!("gamma must be finite, got {}", self.gamma));
        }
        Ok(())
    }

    pub fn class_stats(&self, counts: &[usize]) -> Result<ClassStats<T>> {
        ClassStats::from_counts(counts, self.beta, self.m, self.epsilon, self.prior_source)
    }

    /// Whether `γ` participates in the objective.
    pub fn learns_gamma(&self) -> bool {
        self.mode == LossMode::DualMargin && self.power_scaling
    }
}

/// `ζ(γ) = 1 + softplus(γ)`, strictly greater than one.
#[inline]
pub fn zeta<T: Scalar>(gamma: T) -> T {
    T::one() + gamma.softplus()
}

/// Power-scaled margins together with their derivative in `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerScaling<T> {
    pub zeta: T,
    pub scaled: Vec<T>,
    /// `dΔ̃_j / dγ`.
    pub d_gamma: Vec<T>,
}

pub fn power_scale<T: Scalar>(deltas: &[T], m: T, gamma: T, sign: MarginSign) -> Result<PowerScaling<T>> {
    if !(m > T::zero()) {
        return Err(Error::InvalidArgument(format!("base margin must be positive, got {m}")));
    }
    let z = zeta(gamma);
    let dz = gamma.sigmoid();
    let sgn = match sign {
        MarginSign::Literal => -T::one(),
        MarginSign::Magnitude => T::one(),
    };
    let mut scaled = Vec::with_capacity(deltas.len());
    let mut d_gamma = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let r = d.abs() / m;
        if r == T::zero() {
            scaled.push(T::zero());
            d_gamma.push(T::zero());
        } else {
            let rz = r.powf(z);
            scaled.push(sgn * m * rz);
            d_gamma.push(sgn * m * rz * r.ln() * dz);
        }
    }
    Ok(PowerScaling {
        zeta: z,
        scaled,
        d_gamma,
    })
}

/// `Δ̃_j = ∓m (|Δ_j| / m)^{ζ(γ)}`.
pub fn power_scaled_margins<T: Scalar>(deltas: &[T], m: T, gamma: T, sign: MarginSign) -> Result<Vec<T>> {
    power_scale(deltas, m, gamma, sign).map(|p| p.scaled)
}

/// `Σ_j (Δ_j − Δ̃_j)²` and its derivative in `γ`.
pub fn margin_regularizer<T: Scalar>(deltas: &[T], scaling: &PowerScaling<T>) -> Result<(T, T)> {
    if deltas.len() != scaling.scaled.len() {
        return Err(Error::Shape {
            context: "margin_regularizer",
            expected: deltas.len(),
            actual: scaling.scaled.len(),
        });
    }
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad = T::zero();
    for ((&d, &t), &dt) in deltas.iter().zip(&scaling.scaled).zip(&scaling.d_gamma) {
        let diff = d - t;
        value = value + diff * diff;
        grad = grad - two * diff * dt;
    }
    Ok((value, grad))
}

/// Margins applied to each class when it is the target and when it is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct MarginVector<T> {
    pub target_margins: Vec<T>,
    pub nontarget_margins: Vec<T>,
}

impl<T: Scalar> MarginVector<T> {
    pub fn from_adjustments(m: T, adjustments: &[T]) -> Self {
        Self {
            target_margins: adjustments.iter().map(|&d| m + d).collect(),
            nontarget_margins: adjustments.to_vec(),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            target_margins: vec![T::zero(); c],
            nontarget_margins: vec![T::zero(); c],
        }
    }

    /// Per-class margins seen by a sample of class `label`.
    pub fn for_label(&self, label: usize) -> Vec<T> {
        let mut out = self.nontarget_margins.clone();
        out[label] = self.target_margins[label];
        out
    }

    pub fn num_classes(&self) -> usize {
        self.target_margins.len()
    }
}

/// Single-sample margin softmax: returns `(L, p)` for logits `z`, per-class
/// margins `margins` (already resolved for this label) and scale `s`.
pub fn margin_softmax<T: Scalar>(z: &[T], label: usize, margins: &[T], s: T) -> (T, Vec<T>) {
    let a: Vec<T> = z.iter().zip(margins).map(|(&zj, &mj)| s * (zj - mj)).collect();
    let loss = linalg::log_sum_exp(&a) - a[label];
    (loss, linalg::stable_softmax(&a))
}

/// Class prototypes `w_j` with their unit-normalized view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct PrototypeBank<T> {
    pub weights: Matrix<T>,
    #[serde(skip)]
    normalized: Option<RowNormalized<T>>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(weights: Matrix<T>) -> Self {
        let normalized = Some(normalize_rows(&weights));
        Self { weights, normalized }
    }

    fn view(&self) -> &RowNormalized<T> {
        self.normalized
            .as_ref()
            .expect("prototype view refreshed after construction or update")
    }

    pub fn unit_weights(&self) -> &Matrix<T> {
        &self.view().units
    }

    pub fn norms(&self) -> &[T] {
        &self.view().norms
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Recomputes the unit view after `weights` changed.
    pub fn refresh(&mut self) {
        self.normalized = Some(normalize_rows(&self.weights));
    }

    pub fn weights_mut(&mut self) -> &mut Matrix<T> {
        self.normalized = None;
        &mut self.weights
    }

    /// Re-establishes the unit view after deserialization.
    pub fn ensure_view(&mut self) {
        if self.normalized.is_none() {
            self.refresh();
        }
    }
}

/// Everything computed by the forward pass that the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub mode: LossMode,
    /// Effective scale (1 in CE mode).
    pub s: T,
    pub lambda: T,
    pub labels: Vec<usize>,
    /// `n × c` logits before margins and scaling.
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub per_sample: Vec<T>,
    pub margins: MarginVector<T>,
    pub scaling: Option<PowerScaling<T>>,
    pub reg_value: T,
    pub reg_grad_gamma: T,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn mean_loss(&self) -> T {
        if self.per_sample.is_empty() {
            return T::zero();
        }
        self.per_sample.iter().copied().sum::<T>() / T::lit(self.per_sample.len() as f64)
    }

    pub fn total(&self) -> T {
        self.mean_loss() + self.lambda * self.reg_value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// `n × d`, with respect to the raw embeddings.
    pub embeddings: Matrix<T>,
    /// `c × d`, with respect to the raw prototypes.
    pub prototypes: Matrix<T>,
    pub gamma: T,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub total: T,
    pub per_sample: Vec<T>,
    pub probs: Matrix<T>,
    pub grad_embeddings: Matrix<T>,
    pub grad_prototypes: Matrix<T>,
    pub grad_gamma: T,
    pub reg_value: T,
}

/// Resolves `Δ̃` and the margin vector for a configuration.
pub fn resolve_margins<T: Scalar>(
    stats: &ClassStats<T>,
    cfg: &MarginConfig<T>,
) -> Result<(MarginVector<T>, Option<PowerScaling<T>>)> {
    let c = stats.num_classes;
    match cfg.mode {
        LossMode::Ce => Ok((MarginVector::zeros(c), None)),
        LossMode::AmSoftmax => Ok((MarginVector::from_adjustments(cfg.m, &vec![T::zero(); c]), None)),
        LossMode::DualMargin if cfg.power_scaling => {
            let scaling = power_scale(&stats.deltas, cfg.m, cfg.gamma, cfg.scaled_sign)?;
            Ok((MarginVector::from_adjustments(cfg.m, &scaling.scaled), Some(scaling)))
        }
        LossMode::DualMargin => Ok((MarginVector::from_adjustments(cfg.m, &stats.deltas), None)),
    }
}

pub fn dual_margin_forward<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    prototypes: &PrototypeBank<T>,
    stats: &ClassStats<T>,
    cfg: &MarginConfig<T>,
) -> Result<ForwardPass<T>> {
    let n = batch.len();
    let c = prototypes.num_classes();
    if stats.num_classes != c {
        return Err(Error::Shape {
            context: "dual_margin_forward: classes in stats vs prototypes",
            expected: c,
            actual: stats.num_classes,
        });
    }
    if batch.dim() != prototypes.dim() {
        return Err(Error::Shape {
            context: "dual_margin_forward: embedding dim",
            expected: prototypes.dim(),
            actual: batch.dim(),
        });
    }
    if let Some(i) = batch.labels.iter().position(|&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {} of sample {i} out of range for {c} classes",
            batch.labels[i]
        )));
    }

    let (margins, scaling) = resolve_margins(stats, cfg)?;
    let (reg_value, reg_grad_gamma) = match &scaling {
        Some(sc) => margin_regularizer(&stats.deltas, sc)?,
        None => (T::zero(), T::zero()),
    };
    let s = if cfg.mode == LossMode::Ce { T::one() } else { cfg.s };

    let mut logits = Matrix::zeros(n, c);
    let mut probs = Matrix::zeros(n, c);
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let z = if cfg.mode.is_margin_based() {
            linalg::cosine_logits(batch.units.row(i), prototypes.unit_weights())?
        } else {
            prototypes
                .weights
                .iter_rows()
                .map(|w| linalg::dot(w, batch.raw.row(i)))
                .collect()
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                what: "logit",
            });
        }
        let y = batch.labels[i];
        let (loss, p) = margin_softmax(&z, y, &margins.for_label(y), s);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                what: "per-sample loss",
            });
        }
        logits.row_mut(i).copy_from_slice(&z);
        probs.row_mut(i).copy_from_slice(&p);
        per_sample.push(loss);
    }

    Ok(ForwardPass {
        mode: cfg.mode,
        s,
        lambda: cfg.lambda,
        labels: batch.labels.clone(),
        logits,
        probs,
        per_sample,
        margins,
        scaling,
        reg_value,
        reg_grad_gamma,
    })
}

/// Backward pass of the batch-mean objective plus `λ L_reg`.
pub fn dual_margin_backward<T: Scalar>(
    fwd: &ForwardPass<T>,
    batch: &EmbeddingBatch<T>,
    prototypes: &PrototypeBank<T>,
) -> Gradients<T> {
    let n = batch.len();
    let c = prototypes.num_classes();
    let d = prototypes.dim();
    let inv_n = if n == 0 { T::zero() } else { T::one() / T::lit(n as f64) };

    // upstream gradient on the scaled, shifted logits: (p − onehot) / n
    let mut g = fwd.probs.clone();
    for i in 0..n {
        let row = g.row_mut(i);
        row[fwd.labels[i]] = row[fwd.labels[i]] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_n;
        }
    }

    let mut grad_emb = Matrix::zeros(n, d);
    let mut grad_proto = Matrix::zeros(c, d);

    if fwd.mode.is_margin_based() {
        let units_w = prototypes.unit_weights();
        let mut grad_units_w = Matrix::zeros(c, d);
        for i in 0..n {
            let xi = batch.units.row(i);
            let mut grad_xu = vec![T::zero(); d];
            for j in 0..c {
                let gz = fwd.s * g[(i, j)];
                if gz == T::zero() {
                    continue;
                }
                for (acc, &w) in grad_xu.iter_mut().zip(units_w.row(j)) {
                    *acc = *acc + gz * w;
                }
                for (acc, &x) in grad_units_w.row_mut(j).iter_mut().zip(xi) {
                    *acc = *acc + gz * x;
                }
            }
            let raw = normalize_backward(xi, batch.norms[i], batch.degenerate[i], &grad_xu);
            grad_emb.row_mut(i).copy_from_slice(&raw);
        }
        let norms = prototypes.norms();
        for j in 0..c {
            let guarded = norms[j] <= T::lit(linalg::NORM_EPS);
            let raw = normalize_backward(units_w.row(j), norms[j], guarded, grad_units_w.row(j));
            grad_proto.row_mut(j).copy_from_slice(&raw);
        }
    } else {
        for i in 0..n {
            let xi = batch.raw.row(i);
            for j in 0..c {
                let gz = g[(i, j)];
                if gz == T::zero() {
                    continue;
                }
                for (acc, &w) in grad_emb.row_mut(i).iter_mut().zip(prototypes.weights.row(j)) {
                    *acc = *acc + gz * w;
                }
                for (acc, &x) in grad_proto.row_mut(j).iter_mut().zip(xi) {
                    *acc = *acc + gz * x;
                }
            }
        }
    }

    // Δ̃_j enters both as target margin (m + Δ̃_j) and as non-target margin
    // (Δ̃_j) with unit coefficient, so dL/dΔ̃_j = −s Σ_i g_ij.
    let mut grad_gamma = T::zero();
    if let Some(sc) = &fwd.scaling {
        for j in 0..c {
            let col: T = (0..n).map(|i| g[(i, j)]).sum();
            grad_gamma = grad_gamma - fwd.s * col * sc.d_gamma[j];
        }
        grad_gamma = grad_gamma + fwd.lambda * fwd.reg_grad_gamma;
    }

    Gradients {
        embeddings: grad_emb,
        prototypes: grad_proto,
        gamma: grad_gamma,
    }
}

/// `L = mean_i L_i + λ L_reg`.
pub fn total_loss<T: Scalar>(fwd: &ForwardPass<T>, cfg: &MarginConfig<T>) -> T {
    fwd.mean_loss() + cfg.lambda * fwd.reg_value
}

/// Forward and backward in one call.
pub fn dual_margin_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    prototypes: &PrototypeBank<T>,
    stats: &ClassStats<T>,
    cfg: &MarginConfig<T>,
) -> Result<LossOutput<T>> {
    let fwd = dual_margin_forward(batch, prototypes, stats, cfg)?;
    let grads = dual_margin_backward(&fwd, batch, prototypes);
    Ok(LossOutput {
        total: total_loss(&fwd, cfg),
        per_sample: fwd.per_sample,
        probs: fwd.probs,
        grad_embeddings: grads.embeddings,
        grad_prototypes: grads.prototypes,
        grad_gamma: grads.gamma,
        reg_value: fwd.reg_value,
    })
}
