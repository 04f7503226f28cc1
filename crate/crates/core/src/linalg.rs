//! Dense vector/matrix primitives: normalization, softmax and cosine logits.
//!
//! Everything here is pure. Vectors are plain slices; [`Matrix`] is a
//! row-major buffer with explicit shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norms at or below this value are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                context: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    context: "Matrix::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact on an empty-column matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first row holding a non-finite entry.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.iter_rows().position(|r| r.iter().any(|v| !v.is_finite()))
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm, rescaled by the largest magnitude so tiny and huge
/// entries neither underflow nor overflow when squared.
pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if scale == T::zero() || !scale.is_finite() {
        return scale;
    }
    let ss = v.iter().fold(T::zero(), |acc, &x| {
        let y = x / scale;
        acc + y * y
    });
    scale * ss.sqrt()
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T> {
    pub unit: Vec<T>,
    pub norm: T,
    /// Set when the input norm was at or below [`NORM_EPS`]; `unit` is then `e₁`.
    pub degenerate: bool,
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Normalized<T> {
    let norm = l2_norm(v);
    if norm <= T::lit(NORM_EPS) {
        let mut unit = vec![T::zero(); v.len()];
        if let Some(first) = unit.first_mut() {
            *first = T::one();
        }
        return Normalized {
            unit,
            norm,
            degenerate: true,
        };
    }
    Normalized {
        unit: v.iter().map(|&x| x / norm).collect(),
        norm,
        degenerate: false,
    }
}

/// Row-wise normalization of a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowNormalized<T> {
    pub units: Matrix<T>,
    pub norms: Vec<T>,
    pub degenerate: Vec<bool>,
}

pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> RowNormalized<T> {
    let mut units = Matrix::zeros(m.rows(), m.cols());
    let mut norms = Vec::with_capacity(m.rows());
    let mut degenerate = Vec::with_capacity(m.rows());
    for (i, row) in m.iter_rows().enumerate() {
        let n = l2_normalize(row);
        units.row_mut(i).copy_from_slice(&n.unit);
        norms.push(n.norm);
        degenerate.push(n.degenerate);
    }
    RowNormalized {
        units,
        norms,
        degenerate,
    }
}

/// Backpropagates through `u = v / ‖v‖`: returns `(I − u uᵀ) g / ‖v‖`.
///
/// Degenerate (guarded) rows receive a zero gradient.
pub fn normalize_backward<T: Scalar>(unit: &[T], norm: T, degenerate: bool, grad_unit: &[T]) -> Vec<T> {
    if degenerate {
        return vec![T::zero(); unit.len()];
    }
    let proj = dot(unit, grad_unit);
    unit.iter()
        .zip(grad_unit)
        .map(|(&u, &g)| (g - u * proj) / norm)
        .collect()
}

pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let sum = logits.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + sum.ln()
}

/// Max-shifted softmax; never overflows for finite input.
pub fn stable_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `z_j = ŵ_jᵀ x̂` for every prototype row.
pub fn cosine_logits<T: Scalar>(x_unit: &[T], prototypes_unit: &Matrix<T>) -> Result<Vec<T>> {
    if x_unit.len() != prototypes_unit.cols() {
        return Err(Error::Shape {
            context: "cosine_logits",
            expected: prototypes_unit.cols(),
            actual: x_unit.len(),
        });
    }
    Ok(prototypes_unit.iter_rows().map(|w| dot(w, x_unit)).collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_three_four_five() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!(close(&n.unit, &[0.6, 0.8], 1e-15));
        assert_eq!(n.norm, 5.0);
        assert!(!n.degenerate);
    }

    #[test]
    fn normalize_already_unit() {
        let n = l2_normalize(&[1.0, 0.0, 0.0]);
        assert_eq!(n.unit, vec![1.0, 0.0, 0.0]);
        assert_eq!(n.norm, 1.0);
    }

    #[test]
    fn normalize_guard_path() {
        let n = l2_normalize(&[1e-30f64, 0.0]);
        assert_eq!(n.unit, vec![1.0, 0.0]);
        assert!((n.norm - 1e-30).abs() < 1e-45);
        assert!(n.degenerate);

        let z = l2_normalize(&[0.0f64; 4]);
        assert!(z.degenerate);
        assert_eq!(z.norm, 0.0);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let big = stable_softmax(&[1000.0f64, 0.0]);
        assert!(big.iter().all(|p| p.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] < 1e-300);
        let p = stable_softmax(&[1.0, 2.0, 3.0]);
        assert!(close(&p, &[0.09003057, 0.24472847, 0.66524096], 1e-8));
    }

    #[test]
    fn cosine_logit_examples() {
        let eye = Matrix::<f64>::identity(3);
        assert_eq!(cosine_logits(&[1.0, 0.0, 0.0], &eye).unwrap(), vec![1.0, 0.0, 0.0]);

        let w = Matrix::from_rows(&[[0.6f64, 0.8]]).unwrap();
        let z = cosine_logits(&[1.0, 0.0], &w).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-15);
        let z = cosine_logits(&[0.6, 0.8], &w).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-15);

        assert!(matches!(cosine_logits(&[1.0, 0.0, 0.0], &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_tie() {
        assert_eq!(argmax(&[0.3, 0.7, 0.7]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let v = [0.3, -1.2, 0.8];
        let g = [0.5, 0.1, -0.7];
        let f = |v: &[f64]| dot(&l2_normalize(v).unit, &g);
        let n = l2_normalize(&v);
        let analytic = normalize_backward(&n.unit, n.norm, false, &g);
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let n = l2_normalize(&[3.0f32, 4.0]);
        assert!((n.unit[0] - 0.6).abs() < 1e-6);
        let p = stable_softmax(&[1.0f32, 2.0, 3.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn unit_norm_is_one(v in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            prop_assume!(l2_norm(&v) > NORM_EPS);
            let n = l2_normalize(&v);
            prop_assert!((l2_norm(&n.unit) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..10),
            c in -1e3f64..1e3,
        ) {
            let p = stable_softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let q = stable_softmax(&shifted);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!(*a > 0.0 && *a <= 1.0);
            }
        }

        #[test]
        fn cosine_logits_bounded(
            x in prop::collection::vec(-5.0f64..5.0, 4),
            w in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            prop_assume!(l2_norm(&x) > 1e-6);
            let protos = normalize_rows(&Matrix::from_vec(3, 4, w).unwrap()).units;
            let z = cosine_logits(&l2_normalize(&x).unit, &protos).unwrap();
            for v in z {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
    }
}
