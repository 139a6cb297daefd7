//! The operation vocabulary the model is written against.
//!
//! The transformer forward pass is defined once, generically over [`Ops`].
//! Interpreting it with [`DualOps`](super::dual::DualOps) gives plain
//! evaluation (no tangents) or forward-mode tangent propagation, and
//! interpreting it with [`Tape`](super::tape::Tape) records a reverse-mode
//! graph for training.
//!
//! Every tensor is a row-major 2-D matrix; rows index sequence positions.

use ndarray::{s, Array2, ArrayView2, Axis};

pub const NORM_EPS: f64 = 1e-5;

pub trait Ops<'p> {
    type T: Clone;

    /// A borrowed parameter tensor. `index` is its slot in the parameter
    /// list so reverse mode can route gradients back to it.
    fn param(&mut self, value: &'p Array2<f64>, index: usize) -> Self::T;
    fn constant(&mut self, value: Array2<f64>) -> Self::T;
    fn value<'a>(&'a self, x: &'a Self::T) -> ArrayView2<'a, f64>;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// `a · bᵀ`
    fn matmul_t(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    /// Adds a `1 x c` row to every row of `a`.
    fn add_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    fn mul_row(&mut self, a: &Self::T, row: &Self::T) -> Self::T;
    fn scale(&mut self, a: &Self::T, c: f64) -> Self::T;
    /// Per-row `(x - mean) / sqrt(var + NORM_EPS)`.
    fn normalize_rows(&mut self, a: &Self::T) -> Self::T;
    fn gelu(&mut self, a: &Self::T) -> Self::T;
    /// Row-wise softmax where row `i` sees columns `0..=offset + i`.
    fn causal_softmax(&mut self, scores: &Self::T, offset: usize) -> Self::T;
    fn slice_cols(&mut self, a: &Self::T, start: usize, end: usize) -> Self::T;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Self::T;
    fn slice_rows(&mut self, a: &Self::T, start: usize, end: usize) -> Self::T;
    fn concat_rows(&mut self, top: &Self::T, bottom: &Self::T) -> Self::T;
    fn gather_rows(&mut self, table: &Self::T, ids: &[usize]) -> Self::T;
}

// Kernels shared by the dual and tape interpreters.

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Returns the normalized rows and each row's `1 / sqrt(var + eps)`.
pub(crate) fn normalize_rows(a: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let cols = a.ncols() as f64;
    let mut out = a.to_owned();
    let mut inv_std = Vec::with_capacity(a.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / cols;
        row.mapv_inplace(|x| x - mean);
        let var = row.iter().map(|x| x * x).sum::<f64>() / cols;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|x| x * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Linearization of `normalize_rows` at output `y`: maps a perturbation of
/// the input to a perturbation of the output. The map is symmetric, so the
/// same routine serves as the reverse-mode adjoint.
pub(crate) fn normalize_rows_linear(
    y: ArrayView2<f64>,
    inv_std: &[f64],
    dx: ArrayView2<f64>,
) -> Array2<f64> {
    let cols = y.ncols() as f64;
    let mut out = Array2::zeros(dx.raw_dim());
    for (i, (mut o, (yr, dr))) in out
        .rows_mut()
        .into_iter()
        .zip(y.rows().into_iter().zip(dx.rows()))
        .enumerate()
    {
        let mean_d = dr.sum() / cols;
        let mean_yd = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
        for ((o, &yv), &dv) in o.iter_mut().zip(yr.iter()).zip(dr.iter()) {
            *o = (dv - mean_d - yv * mean_yd) * inv_std[i];
        }
    }
    out
}

pub(crate) fn causal_softmax(scores: ArrayView2<f64>, offset: usize) -> Array2<f64> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, (mut o, row)) in out.rows_mut().into_iter().zip(scores.rows()).enumerate() {
        let visible = (offset + i + 1).min(row.len());
        let max = row
            .slice(s![..visible])
            .iter()
            .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            o[j] = e;
            total += e;
        }
        for j in 0..visible {
            o[j] /= total;
        }
    }
    out
}

/// Linearization of softmax at probabilities `p`; also its own adjoint.
pub(crate) fn softmax_linear(p: ArrayView2<f64>, d: ArrayView2<f64>) -> Array2<f64> {
    let mut out = &p * &d;
    for (mut o, pr) in out.rows_mut().into_iter().zip(p.rows()) {
        let dot = o.sum();
        for (ov, &pv) in o.iter_mut().zip(pr.iter()) {
            *ov -= pv * dot;
        }
    }
    out
}

pub(crate) fn gather_rows(table: ArrayView2<f64>, ids: &[usize]) -> Array2<f64> {
    table.select(Axis(0), ids)
}

pub(crate) fn concat_cols<'a>(parts: &[ArrayView2<'a, f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}

pub(crate) fn concat_rows<'a>(top: ArrayView2<'a, f64>, bottom: ArrayView2<'a, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[top, bottom]).expect("column counts agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x * Phi(x) with Phi(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-14);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_mask_hides_future() {
        let scores = array![[1.0, 5.0, 9.0], [1.0, 1.0, 9.0], [0.0, 0.0, 0.0]];
        let p = causal_softmax(scores.view(), 0);
        assert_eq!(p.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(p[[1, 2]], 0.0);
        assert!((p[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((p.row(2).sum() - 1.0).abs() < 1e-15);
        let shifted = causal_softmax(scores.slice(s![2.., ..]), 2);
        assert!((shifted[[0, 2]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let a = array![[1.0, 2.0, 3.0, 10.0], [-4.0, 0.5, 0.25, 8.0]];
        let (y, _) = normalize_rows(a.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|x| x * x).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
