//! Distance matrix between training and validation embeddings, and the
//! cost matrix `M = D - lambda * g * 1^T` that folds the gradient-norm bonus
//! into every row.

use std::borrow::Cow;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::Pool;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Manhattan,
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = f64::from(x) - f64::from(y);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Metric::Manhattan => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                .sum(),
        }
    }

    pub fn distance_f64(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Row access shared by the dense and on-demand cost matrices. Rows are
/// training points, columns validation points.
pub trait CostRows: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn row(&self, i: usize) -> Cow<'_, [f64]>;

    /// Dense copy of the given rows, in order.
    fn submatrix(&self, rows: &[usize]) -> Array2<f64> {
        let n = self.n_cols();
        let mut out = Array2::zeros((rows.len(), n));
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(k)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&self.row(i));
        }
        out
    }
}

fn check_dims(train: &Pool, val: &Pool) -> Result<()> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: val.dim(),
        });
    }
    Ok(())
}

fn fill_distance_row(train: &Pool, val: &Pool, metric: Metric, i: usize, out: &mut [f64]) {
    let a = train.embedding(i);
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = metric.distance(a, val.embedding(j));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    entries: Array2<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    /// Euclidean distances between every training and validation embedding.
    pub fn compute(train: &Pool, val: &Pool) -> Result<Self> {
        Self::compute_with(train, val, Metric::Euclidean)
    }

    pub fn compute_with(train: &Pool, val: &Pool, metric: Metric) -> Result<Self> {
        check_dims(train, val)?;
        let (m, n) = (train.len(), val.len());
        let mut entries = Array2::zeros((m, n));
        entries
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| fill_distance_row(train, val, metric, i, row));
        Ok(Self { entries, metric })
    }

    /// Wraps an existing matrix. Entries must be finite and non-negative.
    pub fn from_array(entries: Array2<f64>, metric: Metric) -> Result<Self> {
        if let Some(v) = entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "distance entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { entries, metric })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }
}

impl CostRows for DistanceMatrix {
    fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    fn n_cols(&self) -> usize {
        self.entries.ncols()
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.entries.row(i).to_slice().expect("standard layout"))
    }
}

/// Min-max rescales gradient norms into `[0, 1]`. A constant vector maps to
/// all zeros.
pub fn normalize_grad_norms(g: &[f64]) -> Vec<f64> {
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; g.len()];
    }
    g.iter().map(|v| (v - lo) / span).collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Dense cost matrix `M(i, j) = D(i, j) - lambda * g(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooCostMatrix {
    entries: Array2<f64>,
    lambda: f64,
    grad_norms: Vec<f64>,
}

impl PooCostMatrix {
    pub fn build(d: &DistanceMatrix, g: &[f64], lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if g.len() != d.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: d.n_rows(),
                actual: g.len(),
            });
        }
        let mut entries = d.entries.clone();
        for (mut row, &gi) in entries.rows_mut().into_iter().zip(g) {
            let bonus = lambda * gi;
            row.mapv_inplace(|x| x - bonus);
        }
        Ok(Self {
            entries,
            lambda,
            grad_norms: g.to_vec(),
        })
    }

    /// Wraps an arbitrary finite matrix as a cost matrix with `lambda = 0`.
    /// Handy for tests and for callers that precompute costs themselves.
    pub fn from_array(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("cost entries must be finite".into()));
        }
        let rows = entries.nrows();
        Ok(Self {
            entries,
            lambda: 0.0,
            grad_norms: vec![0.0; rows],
        })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn grad_norms(&self) -> &[f64] {
        &self.grad_norms
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }
}

impl CostRows for PooCostMatrix {
    fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    fn n_cols(&self) -> usize {
        self.entries.ncols()
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.entries.row(i).to_slice().expect("standard layout"))
    }
}

/// Cost matrix whose rows are computed from the pools on every access.
/// Memory stays at the size of the pools; use it when `|T| x |V|` doesn't fit.
pub struct LazyPooMatrix<'a> {
    train: &'a Pool,
    val: &'a Pool,
    metric: Metric,
    lambda: f64,
    grad_norms: Vec<f64>,
}

impl<'a> LazyPooMatrix<'a> {
    pub fn new(train: &'a Pool, val: &'a Pool, metric: Metric, g: &[f64], lambda: f64) -> Result<Self> {
        check_dims(train, val)?;
        check_lambda(lambda)?;
        if g.len() != train.len() {
            return Err(Error::DimensionMismatch {
                expected: train.len(),
                actual: g.len(),
            });
        }
        Ok(Self {
            train,
            val,
            metric,
            lambda,
            grad_norms: g.to_vec(),
        })
    }

    /// Visits the matrix in blocks of `tile_rows` rows, passing the first row
    /// index and a row-major block.
    pub fn for_each_tile(&self, tile_rows: usize, mut f: impl FnMut(usize, &Array2<f64>)) {
        let tile_rows = tile_rows.max(1);
        let n = self.n_cols();
        let mut start = 0;
        while start < self.n_rows() {
            let end = (start + tile_rows).min(self.n_rows());
            let mut block = Array2::zeros((end - start, n));
            block
                .as_slice_mut()
                .expect("standard layout")
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(k, row)| self.fill_row(start + k, row));
            f(start, &block);
            start = end;
        }
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        fill_distance_row(self.train, self.val, self.metric, i, out);
        let bonus = self.lambda * self.grad_norms[i];
        out.iter_mut().for_each(|x| *x -= bonus);
    }

    pub fn materialize(&self) -> PooCostMatrix {
        let mut entries = Array2::zeros((self.n_rows(), self.n_cols()));
        self.for_each_tile(256, |start, block| {
            entries
                .slice_mut(ndarray::s![start..start + block.nrows(), ..])
                .assign(block);
        });
        PooCostMatrix {
            entries,
            lambda: self.lambda,
            grad_norms: self.grad_norms.clone(),
        }
    }
}

impl CostRows for LazyPooMatrix<'_> {
    fn n_rows(&self) -> usize {
        self.train.len()
    }

    fn n_cols(&self) -> usize {
        self.val.len()
    }

    fn row(&self, i: usize) -> Cow<'_, [f64]> {
        let mut out = vec![0.0; self.n_cols()];
        self.fill_row(i, &mut out);
        Cow::Owned(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::PoolRole;
    use ndarray::array;

    fn pool(dim: usize, values: &[f32]) -> Pool {
        Pool::new(PoolRole::Training, dim, values.to_vec(), None, None).unwrap()
    }

    #[test]
    fn three_four_five() {
        let d = DistanceMatrix::compute(&pool(2, &[0.0, 0.0]), &pool(2, &[3.0, 4.0])).unwrap();
        assert_eq!(d.entries(), &array![[5.0]]);
    }

    #[test]
    fn identical_point_is_zero() {
        let d = DistanceMatrix::compute(&pool(2, &[1.5, -2.0]), &pool(2, &[1.5, -2.0])).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn two_by_two_hand_computed() {
        let d = DistanceMatrix::compute(
            &pool(2, &[0.0, 0.0, 1.0, 0.0]),
            &pool(2, &[0.0, 0.0, 0.0, 2.0]),
        )
        .unwrap();
        let expected = [[0.0, 2.0], [1.0, 5f64.sqrt()]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((d.get(i, j) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn swapping_roles_transposes() {
        let a = pool(3, &[0.1, 0.2, 0.3, -1.0, 2.0, 0.5, 4.0, 4.0, 4.0]);
        let b = pool(3, &[1.0, 1.0, 1.0, 0.0, -2.0, 3.0]);
        let ab = DistanceMatrix::compute(&a, &b).unwrap();
        let ba = DistanceMatrix::compute(&b, &a).unwrap();
        assert_eq!(ab.entries().t(), ba.entries());
    }

    #[test]
    fn dimension_mismatch() {
        let err = DistanceMatrix::compute(&pool(2, &[0.0, 0.0]), &pool(3, &[0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn poo_matrix_substitution() {
        let d = DistanceMatrix::from_array(array![[1.0, 2.0], [3.0, 4.0]], Metric::Euclidean).unwrap();
        let m = PooCostMatrix::build(&d, &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(m.entries(), &array![[0.5, 1.5], [2.0, 3.0]]);
        let m0 = PooCostMatrix::build(&d, &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(m0.entries(), d.entries());
    }

    #[test]
    fn poo_matrix_errors() {
        let d = DistanceMatrix::from_array(array![[1.0, 2.0], [3.0, 4.0]], Metric::Euclidean).unwrap();
        assert!(PooCostMatrix::build(&d, &[1.0, 2.0], -0.1).is_err());
        assert!(PooCostMatrix::build(&d, &[1.0], 0.1).is_err());
    }

    #[test]
    fn normalization_maps_to_unit_interval() {
        assert_eq!(normalize_grad_norms(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_grad_norms(&[7.0, 7.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn lazy_matches_dense() {
        let a = pool(2, &[0.0, 0.0, 1.0, 2.0, -3.0, 0.5]);
        let b = pool(2, &[1.0, 1.0, 0.0, 4.0]);
        let g = [0.5, 1.0, 2.0];
        let dense = PooCostMatrix::build(&DistanceMatrix::compute(&a, &b).unwrap(), &g, 0.3).unwrap();
        let lazy = LazyPooMatrix::new(&a, &b, Metric::Euclidean, &g, 0.3).unwrap();
        for i in 0..3 {
            assert_eq!(lazy.row(i).as_ref(), dense.row(i).as_ref());
        }
        assert_eq!(lazy.materialize(), dense);
        let mut seen = 0;
        lazy.for_each_tile(2, |start, block| {
            assert_eq!(start, seen);
            seen += block.nrows();
        });
        assert_eq!(seen, 3);
    }
}
