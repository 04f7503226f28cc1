//! Numerical checks: central finite differences against analytic
//! gradients, and probes for the two prototype-gradient propositions in the
//! normalized space (embeddings treated as fixed unit vectors).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, argmax, l2_norm, Matrix};
use crate::loss::{
    dual_margin_forward, dual_margin_loss, margin_softmax, total_loss, LossMode, MarginConfig, MarginSign,
    MarginVector, PrototypeBank,
};
use crate::priors::{ClassStats, PriorSource};
use crate::sampler::EmbeddingBatch;
use crate::scalar::Scalar;

/// Max over coordinates of `|fd_i − a_i| / max(1, |a_i|)` with central differences.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], h: f64, analytic: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape {
            context: "finite_diff_check",
            expected: point.len(),
            actual: analytic.len(),
        });
    }
    let fd = central_differences(&mut f, point, h)?;
    Ok(fd
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| (n - a).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}

fn central_differences<F>(f: &mut F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x)?;
        x[i] = x0 - h;
        let fm = f(&x)?;
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                what: "function value in finite differences",
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Least-squares slope of `log err(h)` against `log h`, where `err` is the
/// max absolute finite-difference error. Central differences give about 2.
pub fn convergence_order<F>(mut f: F, point: &[f64], analytic: &[f64], steps: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if steps.len() < 2 {
        return Err(Error::InvalidArgument("need at least two step sizes".into()));
    }
    let mut xs = Vec::with_capacity(steps.len());
    let mut ys = Vec::with_capacity(steps.len());
    for &h in steps {
        let fd = central_differences(&mut f, point, h)?;
        let err = fd.iter().zip(analytic).map(|(n, a)| (n - a).abs()).fold(0.0, f64::max);
        if err <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "finite differences are exact at h = {h}; order is undefined"
            )));
        }
        xs.push(h.ln());
        ys.push(err.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// A self-contained loss evaluation point for gradient checking.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub embeddings: Matrix<f64>,
    pub labels: Vec<usize>,
    pub prototypes: Matrix<f64>,
    pub counts: Vec<usize>,
    pub cfg: MarginConfig<f64>,
}

impl LossInstance {
    /// Random instance with `n ≤ 8`, `c ≤ 5`, `d ≤ 7` and a random configuration.
    pub fn random<R: Rng>(rng: &mut R, s: f64) -> Self {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let d = rng.random_range(2..=7);
        let gauss = |rng: &mut R, len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * rng.random_range(0.5..2.0))
                .collect()
        };
        let embeddings = Matrix::from_vec(n, d, gauss(rng, n * d)).expect("shape");
        let prototypes = Matrix::from_vec(c, d, gauss(rng, c * d)).expect("shape");
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        let counts = (0..c).map(|_| rng.random_range(1..400)).collect();
        let mode = match rng.random_range(0..3) {
            0 => LossMode::DualMargin,
            1 => LossMode::AmSoftmax,
            _ => LossMode::Ce,
        };
        let cfg = MarginConfig {
            s,
            m: rng.random_range(0.05..0.3),
            beta: rng.random_range(0.5..0.999),
            lambda: rng.random_range(0.0..5.0),
            gamma: rng.random_range(-1.5..1.5),
            mode,
            scaled_sign: if rng.random_bool(0.5) {
                MarginSign::Literal
            } else {
                MarginSign::Magnitude
            },
            power_scaling: rng.random_bool(0.75),
            prior_source: if rng.random_bool(0.8) {
                PriorSource::Effective
            } else {
                PriorSource::Empirical
            },
            ..MarginConfig::default()
        };
        Self {
            embeddings,
            labels,
            prototypes,
            counts,
            cfg,
        }
    }

    fn stats(&self) -> Result<ClassStats<f64>> {
        self.cfg.class_stats(&self.counts)
    }

    /// Parameter vector: embeddings, prototypes, then `γ`.
    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.embeddings.as_slice().to_vec();
        v.extend_from_slice(self.prototypes.as_slice());
        v.push(self.cfg.gamma);
        v
    }

    /// Total loss at a packed parameter vector.
    pub fn loss_at(&self, params: &[f64], stats: &ClassStats<f64>) -> Result<f64> {
        let (n, d) = (self.embeddings.rows(), self.embeddings.cols());
        let c = self.prototypes.rows();
        let emb = Matrix::from_vec(n, d, params[..n * d].to_vec())?;
        let protos = PrototypeBank::new(Matrix::from_vec(c, d, params[n * d..n * d + c * d].to_vec())?);
        let cfg = MarginConfig {
            gamma: params[n * d + c * d],
            ..self.cfg
        };
        let batch = EmbeddingBatch::new(emb, self.labels.clone());
        let fwd = dual_margin_forward(&batch, &protos, stats, &cfg)?;
        Ok(total_loss(&fwd, &cfg))
    }

    /// Analytic gradient, packed like [`LossInstance::pack`].
    pub fn analytic_gradient(&self, stats: &ClassStats<f64>) -> Result<Vec<f64>> {
        let batch = EmbeddingBatch::new(self.embeddings.clone(), self.labels.clone());
        let protos = PrototypeBank::new(self.prototypes.clone());
        let out = dual_margin_loss(&batch, &protos, stats, &self.cfg)?;
        let mut g = out.grad_embeddings.into_vec();
        g.extend(out.grad_prototypes.into_vec());
        g.push(out.grad_gamma);
        Ok(g)
    }

    /// Max relative error between analytic and central-difference gradients.
    pub fn gradcheck(&self, h: f64) -> Result<f64> {
        let stats = self.stats()?;
        let analytic = self.analytic_gradient(&stats)?;
        finite_diff_check(|p| self.loss_at(p, &stats), &self.pack(), h, &analytic)
    }
}

/// Prototype-alignment quantities for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProbe {
    pub class: usize,
    pub mean: Vec<f64>,
    pub mean_prob: f64,
    /// Sample standard deviation (`N − 1` denominator).
    pub prob_std: f64,
    pub alpha: f64,
    pub residual: f64,
    pub bound: f64,
}

impl AlignmentProbe {
    pub fn holds(&self, tol: f64) -> bool {
        self.residual <= self.bound + tol
    }
}

/// Alignment probe from given target-class probabilities `p_{i,c}`.
///
/// Uses the per-sample partial `(1 − p_{i,c}) x̂_i` with the positive sign
/// of the original argument; the true loss gradient has the opposite sign,
/// which leaves the residual norm unchanged.
pub fn alignment_from_probs<T: Scalar>(class: usize, units: &Matrix<T>, probs: &[T]) -> Result<AlignmentProbe> {
    let n = units.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment probe for class {class} needs at least 2 samples, got {n}"
        )));
    }
    if probs.len() != n {
        return Err(Error::Shape {
            context: "alignment_from_probs",
            expected: n,
            actual: probs.len(),
        });
    }
    let d = units.cols();
    let p: Vec<f64> = probs.iter().map(|v| v.as_f64()).collect();
    let nf = n as f64;
    let p_bar = p.iter().sum::<f64>() / nf;
    let var = p.iter().map(|v| (v - p_bar).powi(2)).sum::<f64>() / (nf - 1.0);
    let mut mean = vec![0.0; d];
    let mut grad_sum = vec![0.0; d];
    for (i, x) in units.iter_rows().enumerate() {
        for k in 0..d {
            let xk = x[k].as_f64();
            mean[k] += xk / nf;
            grad_sum[k] += (1.0 - p[i]) * xk;
        }
    }
    let alpha = nf * (1.0 - p_bar);
    let diff: Vec<f64> = grad_sum.iter().zip(&mean).map(|(g, m)| g - alpha * m).collect();
    let max_dev = p.iter().map(|v| (p_bar - v).abs()).fold(0.0, f64::max);
    Ok(AlignmentProbe {
        class,
        mean,
        mean_prob: p_bar,
        prob_std: var.sqrt(),
        alpha,
        residual: l2_norm(&diff),
        bound: nf * max_dev,
    })
}

/// Alignment probe for samples of class `class`, with probabilities from the
/// margin softmax over `prototype_units`.
pub fn alignment_probe<T: Scalar>(
    class: usize,
    units: &Matrix<T>,
    prototype_units: &Matrix<T>,
    margins: &MarginVector<T>,
    s: T,
) -> Result<AlignmentProbe> {
    let ms = margins.for_label(class);
    let probs = units
        .iter_rows()
        .map(|x| {
            let z = linalg::cosine_logits(x, prototype_units)?;
            Ok(margin_softmax(&z, class, &ms, s).1[class])
        })
        .collect::<Result<Vec<T>>>()?;
    alignment_from_probs(class, units, &probs)
}

/// Probes along a constructed sequence: `p_i = p̄ + σ z_i` with `z` of zero
/// mean and unit sample deviation, so that the probability spread equals `σ`.
pub fn annealed_alignment<R: Rng>(
    units: &Matrix<f64>,
    mean_prob: f64,
    sigmas: &[f64],
    rng: &mut R,
) -> Result<Vec<AlignmentProbe>> {
    let n = units.rows();
    if n < 2 {
        return Err(Error::InvalidArgument("annealing needs at least 2 samples".into()));
    }
    let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zm = z.iter().sum::<f64>() / n as f64;
    z.iter_mut().for_each(|v| *v -= zm);
    let sd = (z.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    z.iter_mut().for_each(|v| *v /= sd);
    let zmax = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    sigmas
        .iter()
        .map(|&sigma| {
            if mean_prob - sigma * zmax < 0.0 || mean_prob + sigma * zmax > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "σ = {sigma} pushes probabilities outside [0, 1] around {mean_prob}"
                )));
            }
            let p: Vec<f64> = z.iter().map(|v| mean_prob + sigma * v).collect();
            alignment_from_probs(0, units, &p)
        })
        .collect()
}

/// Gradient bound quantities for a sample of class `label` on the prototype of class `class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundProbe {
    pub label: usize,
    pub class: usize,
    pub prob: f64,
    pub grad_norm: f64,
    pub bound: f64,
    /// `label` is the argmax of the margin softmax.
    pub condition_met: bool,
}

impl BoundProbe {
    pub fn holds(&self, tol: f64) -> bool {
        !self.condition_met || self.grad_norm <= self.bound + tol
    }
}

/// Evaluates `‖∂L/∂ŵ_c‖ = p_c ‖x̂‖` and the bound `exp(s (m_y − m_c))`,
/// where `m_y` is the target margin of `label` and `m_c` the non-target
/// margin of `class`.
pub fn bound_probe<T: Scalar>(
    x_unit: &[T],
    label: usize,
    class: usize,
    prototype_units: &Matrix<T>,
    margins: &MarginVector<T>,
    s: T,
) -> Result<BoundProbe> {
    if label == class {
        return Err(Error::InvalidArgument(format!(
            "bound probe needs a class other than the label {label}"
        )));
    }
    let c = prototype_units.rows();
    if label >= c || class >= c {
        return Err(Error::InvalidArgument(format!(
            "class ids ({label}, {class}) out of range for {c} prototypes"
        )));
    }
    let z = linalg::cosine_logits(x_unit, prototype_units)?;
    let (_, p) = margin_softmax(&z, label, &margins.for_label(label), s);
    let prob = p[class].as_f64();
    let gap = (margins.target_margins[label] - margins.nontarget_margins[class]).as_f64();
    Ok(BoundProbe {
        label,
        class,
        prob,
        grad_norm: prob * l2_norm(x_unit).as_f64(),
        bound: (s.as_f64() * gap).exp(),
        condition_met: argmax(&p) == Some(label),
    })
}

/// One line of `verify.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub check: String,
    pub detail: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl VerifyRow {
    pub const HEADER: &'static str = "check,detail,value,bound,pass";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{}",
            self.check, self.detail, self.value, self.bound, self.pass
        )
    }
}

pub fn verify_csv(rows: &[VerifyRow]) -> String {
    let mut out = String::from(VerifyRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn alignment_csv(probes: &[AlignmentProbe]) -> String {
    let mut out = String::from("class,mean_prob,prob_std,alpha,residual,bound\n");
    for p in probes {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            p.class, p.mean_prob, p.prob_std, p.alpha, p.residual, p.bound
        ));
    }
    out
}

pub fn bound_csv(probes: &[BoundProbe]) -> String {
    let mut out = String::from("label,class,prob,grad_norm,bound,condition_met\n");
    for p in probes {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{}\n",
            p.label, p.class, p.prob, p.grad_norm, p.bound, p.condition_met
        ));
    }
    out
}
