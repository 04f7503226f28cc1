//! Small MLP feature encoder with hand-written backpropagation.
//!
//! Every layer is affine; all but the last are followed by the activation,
//! so the output embedding is unnormalized and its norm varies per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Piecewise linear; gradient checks are only meaningful away from zero.
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(format!("expected `tanh` or `relu`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct EncoderParams<T> {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    /// `weights[l]` is `dims[l+1] × dims[l]`.
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
    pub activation: Activation,
    /// Bumped on every parameter update; used to detect stale embeddings.
    #[serde(default)]
    pub version: u64,
}

/// Gradients with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Layer outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `activations[0]` is the input, `activations[l+1]` the output of layer `l`.
    activations: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.activations.last().expect("cache holds at least the input")
    }

    /// Cache restricted to a subset of samples.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            activations: self.activations.iter().map(|a| a.select_rows(rows)).collect(),
        }
    }
}

pub fn init_params<T: Scalar>(dims: &[usize], activation: Activation, seed: u64) -> Result<EncoderParams<T>> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "encoder needs at least an input and an output width, got {dims:?}"
        )));
    }
    if let Some(pos) = dims.iter().position(|&w| w == 0) {
        return Err(Error::InvalidArgument(format!(
            "layer width at position {pos} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.random_range(-limit..limit)))
            .collect();
        weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        biases.push(vec![T::zero(); fan_out]);
    }
    Ok(EncoderParams {
        dims: dims.to_vec(),
        weights,
        biases,
        activation,
        version: 0,
    })
}

impl<T: Scalar> EncoderParams<T> {
    /// Builds parameters from explicit layers, checking that shapes chain.
    pub fn from_layers(weights: Vec<Matrix<T>>, biases: Vec<Vec<T>>, activation: Activation) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::InvalidArgument("encoder needs at least one layer".into()))?;
        let mut dims = vec![first.cols()];
        for w in &weights {
            dims.push(w.rows());
        }
        let params = Self {
            dims,
            weights,
            biases,
            activation,
            version: 0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.dims.len().saturating_sub(1);
        if layers == 0 || self.weights.len() != layers || self.biases.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "encoder with dims {:?} needs {layers} weight and bias entries, found {} and {}",
                self.dims,
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..layers {
            let w = &self.weights[l];
            if w.rows() != self.dims[l + 1] || w.cols() != self.dims[l] {
                return Err(Error::Shape {
                    context: "encoder weight",
                    expected: self.dims[l + 1] * self.dims[l],
                    actual: w.rows() * w.cols(),
                });
            }
            if self.biases[l].len() != self.dims[l + 1] {
                return Err(Error::Shape {
                    context: "encoder bias",
                    expected: self.dims[l + 1],
                    actual: self.biases[l].len(),
                });
            }
            if !w.is_finite() || self.biases[l].iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Mutable parameter buffers in the order of [`ParamGrads::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        if features.cols() != self.input_dim() {
            return Err(Error::Shape {
                context: "encoder input width",
                expected: self.input_dim(),
                actual: features.cols(),
            });
        }
        if let Some(index) = features.first_non_finite_row() {
            return Err(Error::NonFinite {
                index,
                what: "encoder input",
            });
        }
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(features.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = activations.last().expect("non-empty");
            let mut out = Matrix::zeros(input.rows(), w.rows());
            for i in 0..input.rows() {
                let x = input.row(i);
                for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                    let h = dot(w.row(k), x) + b[k];
                    *o = if l == last { h } else { self.activation.apply(h) };
                }
            }
            activations.push(out);
        }
        let cache = ForwardCache { activations };
        let embeddings = cache.output().clone();
        if let Some(index) = embeddings.first_non_finite_row() {
            return Err(Error::NonFinite {
                index,
                what: "embedding",
            });
        }
        Ok((embeddings, cache))
    }

    /// Gradients of an upstream scalar with respect to parameters and inputs.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Matrix<T>) -> Result<(ParamGrads<T>, Matrix<T>)> {
        let out = cache.output();
        if grad_out.rows() != out.rows() || grad_out.cols() != out.cols() {
            return Err(Error::Shape {
                context: "encoder backward upstream gradient",
                expected: out.rows() * out.cols(),
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        let layers = self.weights.len();
        let mut gw: Vec<Matrix<T>> = self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut gb: Vec<Vec<T>> = self.biases.iter().map(|b| vec![T::zero(); b.len()]).collect();

        // gradient with respect to the pre-activation of the current layer
        let mut delta = grad_out.clone();
        for l in (0..layers).rev() {
            let input = &cache.activations[l];
            let w = &self.weights[l];
            for i in 0..input.rows() {
                let d = delta.row(i);
                let x = input.row(i);
                for (k, &dk) in d.iter().enumerate() {
                    if dk == T::zero() {
                        continue;
                    }
                    gb[l][k] = gb[l][k] + dk;
                    for (g, &xv) in gw[l].row_mut(k).iter_mut().zip(x) {
                        *g = *g + dk * xv;
                    }
                }
            }
            let mut prev = Matrix::zeros(input.rows(), input.cols());
            for i in 0..input.rows() {
                let d = delta.row(i);
                let p = prev.row_mut(i);
                for (k, &dk) in d.iter().enumerate() {
                    if dk == T::zero() {
                        continue;
                    }
                    for (pv, &wv) in p.iter_mut().zip(w.row(k)) {
                        *pv = *pv + dk * wv;
                    }
                }
            }
            if l > 0 {
                // input of layer l is the activation output of layer l-1
                for (pv, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *pv = *pv * self.activation.grad_from_output(a);
                }
            }
            delta = prev;
        }
        Ok((
            ParamGrads {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_features(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params::<f64>(&[4, 8, 3], Activation::Tanh, 7).unwrap();
        let b = init_params::<f64>(&[4, 8, 3], Activation::Tanh, 7).unwrap();
        let c = init_params::<f64>(&[4, 8, 3], Activation::Tanh, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert_eq!((a.weights[0].rows(), a.weights[0].cols()), (8, 4));
        assert_eq!((a.weights[1].rows(), a.weights[1].cols()), (3, 8));
        assert!(a.biases.iter().flatten().all(|&b| b == 0.0));
        assert_eq!(a.num_params(), 8 * 4 + 8 + 3 * 8 + 3);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_params::<f64>(&[4], Activation::Tanh, 0).is_err());
        assert!(init_params::<f64>(&[4, 0, 2], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let mut p = init_params::<f64>(&[3, 5, 2], Activation::Tanh, 1).unwrap();
        for s in p.slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let (emb, _) = p.forward(&rand_features(4, 3, 2)).unwrap();
        assert!(emb.as_slice().iter().all(|&v| v == 0.0));
        let batch = crate::sampler::EmbeddingBatch::new(emb, vec![0; 4]);
        assert!(batch.degenerate.iter().all(|&d| d));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p =
            EncoderParams::from_layers(vec![Matrix::<f64>::identity(3)], vec![vec![0.0; 3]], Activation::Tanh).unwrap();
        let x = rand_features(5, 3, 3);
        let (emb, _) = p.forward(&x).unwrap();
        assert_eq!(emb, x);
    }

    #[test]
    fn nan_input_reports_sample() {
        let p = init_params::<f64>(&[2, 3], Activation::Tanh, 0).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [f64::NAN, 0.0]]).unwrap();
        match p.forward(&x) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(p.forward(&rand_features(2, 3, 0)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_params::<f64>(&[3, 4, 2], Activation::Tanh, 4).unwrap();
        let (_, cache) = p.forward(&rand_features(3, 3, 5)).unwrap();
        let (g, gi) = p.backward(&cache, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.backward(&cache, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn linear_layer_grad_is_outer_product() {
        let p = init_params::<f64>(&[3, 2], Activation::Tanh, 6).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let up = Matrix::from_rows(&[[0.3, -0.7]]).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        let (g, _) = p.backward(&cache, &up).unwrap();
        for k in 0..2 {
            for j in 0..3 {
                assert!((g.weights[0][(k, j)] - up[(0, k)] * x[(0, j)]).abs() < 1e-15);
            }
            assert_eq!(g.biases[0][k], up[(0, k)]);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut p = init_params::<f64>(&[3, 5, 4, 2], act, 9).unwrap();
            // offset biases so relu units sit away from their kink
            for b in p.biases.iter_mut().flatten() {
                *b = 0.05;
            }
            let x = rand_features(3, 3, 10);
            let up = rand_features(3, 2, 11);
            let objective = |p: &EncoderParams<f64>, x: &Matrix<f64>| {
                let (e, _) = p.forward(x).unwrap();
                e.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = p.forward(&x).unwrap();
            let (g, gx) = p.backward(&cache, &up).unwrap();
            let analytic: Vec<f64> = g.slices().concat();
            let mut fd = Vec::new();
            let count: Vec<usize> = p.slices_mut().iter().map(|s| s.len()).collect();
            for (s, &len) in count.iter().enumerate() {
                for k in 0..len {
                    let orig = p.slices_mut()[s][k];
                    p.slices_mut()[s][k] = orig + 1e-6;
                    let up_v = objective(&p, &x);
                    p.slices_mut()[s][k] = orig - 1e-6;
                    let down_v = objective(&p, &x);
                    p.slices_mut()[s][k] = orig;
                    fd.push((up_v - down_v) / 2e-6);
                }
            }
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() / a.abs().max(1.0) < 1e-6, "{act:?}: {a} vs {n}");
            }
            for k in 0..x.as_slice().len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_mut_slice()[k] += 1e-6;
                xm.as_mut_slice()[k] -= 1e-6;
                let n = (objective(&p, &xp) - objective(&p, &xm)) / 2e-6;
                assert!((gx.as_slice()[k] - n).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn json_checkpoint_roundtrip_and_shape_check() {
        let p = init_params::<f64>(&[4, 6, 3], Activation::Relu, 12).unwrap();
        let text = p.to_json().unwrap();
        assert_eq!(EncoderParams::<f64>::from_json(&text).unwrap(), p);
        let broken = text.replacen("\"dims\": [\n    4,", "\"dims\": [\n    5,", 1);
        assert!(EncoderParams::<f64>::from_json(&broken).is_err());
    }
}
