//! Forward-mode interpretation: every value carries an optional tangent.
//!
//! A missing tangent means "identically zero", which keeps plain evaluation
//! (no tangents anywhere) as cheap as a dedicated evaluator.

use ndarray::{Array2, ArrayView2, CowArray, Ix2};

use super::ops::{self, Ops};

#[derive(Debug, Clone)]
pub struct Dual<'p> {
    pub v: CowArray<'p, f64, Ix2>,
    pub t: Option<Array2<f64>>,
}

impl<'p> Dual<'p> {
    pub fn new(v: Array2<f64>, t: Option<Array2<f64>>) -> Self {
        Dual {
            v: CowArray::from(v),
            t,
        }
    }

    pub fn primal(v: Array2<f64>) -> Self {
        Self::new(v, None)
    }

    pub fn tangent_or_zero(&self) -> Array2<f64> {
        self.t
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.v.raw_dim()))
    }
}

fn sum(a: Option<Array2<f64>>, b: Option<Array2<f64>>) -> Option<Array2<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a + b),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Stateless forward-mode interpreter.
#[derive(Debug, Default, Clone, Copy)]
pub struct DualOps;

impl<'p> Ops<'p> for DualOps {
    type T = Dual<'p>;

    fn param(&mut self, value: &'p Array2<f64>, _index: usize) -> Dual<'p> {
        Dual {
            v: CowArray::from(value.view()),
            t: None,
        }
    }

    fn constant(&mut self, value: Array2<f64>) -> Dual<'p> {
        Dual::primal(value)
    }

    fn value<'a>(&'a self, x: &'a Dual<'p>) -> ArrayView2<'a, f64> {
        x.v.view()
    }

    fn matmul(&mut self, a: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        let v = a.v.dot(&b.v);
        let ta = a.t.as_ref().map(|t| t.dot(&b.v));
        let tb = b.t.as_ref().map(|t| a.v.dot(t));
        Dual::new(v, sum(ta, tb))
    }

    fn matmul_t(&mut self, a: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        let bt = b.v.t();
        let v = a.v.dot(&bt);
        let ta = a.t.as_ref().map(|t| t.dot(&bt));
        let tb = b.t.as_ref().map(|t| a.v.dot(&t.t()));
        Dual::new(v, sum(ta, tb))
    }

    fn add(&mut self, a: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        let v = &a.v + &b.v;
        Dual::new(v, sum(a.t.clone(), b.t.clone()))
    }

    fn add_row(&mut self, a: &Dual<'p>, row: &Dual<'p>) -> Dual<'p> {
        let v = &a.v + &row.v;
        let tr = row
            .t
            .as_ref()
            .map(|t| t.broadcast(a.v.raw_dim()).expect("row broadcast").to_owned());
        Dual::new(v, sum(a.t.clone(), tr))
    }

    fn mul_row(&mut self, a: &Dual<'p>, row: &Dual<'p>) -> Dual<'p> {
        let v = &a.v * &row.v;
        let ta = a.t.as_ref().map(|t| t * &row.v);
        let tr = row.t.as_ref().map(|t| &a.v * t);
        Dual::new(v, sum(ta, tr))
    }

    fn scale(&mut self, a: &Dual<'p>, c: f64) -> Dual<'p> {
        Dual::new(&a.v * c, a.t.as_ref().map(|t| t * c))
    }

    fn normalize_rows(&mut self, a: &Dual<'p>) -> Dual<'p> {
        let (y, inv_std) = ops::normalize_rows(a.v.view());
        let t = a
            .t
            .as_ref()
            .map(|t| ops::normalize_rows_linear(y.view(), &inv_std, t.view()));
        Dual::new(y, t)
    }

    fn gelu(&mut self, a: &Dual<'p>) -> Dual<'p> {
        let v = a.v.mapv(ops::gelu);
        let t = a.t.as_ref().map(|t| {
            let mut g = a.v.mapv(ops::gelu_grad);
            g *= t;
            g
        });
        Dual::new(v, t)
    }

    fn causal_softmax(&mut self, scores: &Dual<'p>, offset: usize) -> Dual<'p> {
        let p = ops::causal_softmax(scores.v.view(), offset);
        let t = scores
            .t
            .as_ref()
            .map(|t| ops::softmax_linear(p.view(), t.view()));
        Dual::new(p, t)
    }

    fn slice_cols(&mut self, a: &Dual<'p>, start: usize, end: usize) -> Dual<'p> {
        let v = a.v.slice(ndarray::s![.., start..end]).to_owned();
        let t = a
            .t
            .as_ref()
            .map(|t| t.slice(ndarray::s![.., start..end]).to_owned());
        Dual::new(v, t)
    }

    fn concat_cols(&mut self, parts: &[Dual<'p>]) -> Dual<'p> {
        let views: Vec<_> = parts.iter().map(|p| p.v.view()).collect();
        let v = ops::concat_cols(&views);
        let t = if parts.iter().any(|p| p.t.is_some()) {
            let owned: Vec<_> = parts.iter().map(|p| p.tangent_or_zero()).collect();
            let views: Vec<_> = owned.iter().map(|t| t.view()).collect();
            Some(ops::concat_cols(&views))
        } else {
            None
        };
        Dual::new(v, t)
    }

    fn slice_rows(&mut self, a: &Dual<'p>, start: usize, end: usize) -> Dual<'p> {
        let v = a.v.slice(ndarray::s![start..end, ..]).to_owned();
        let t = a
            .t
            .as_ref()
            .map(|t| t.slice(ndarray::s![start..end, ..]).to_owned());
        Dual::new(v, t)
    }

    fn concat_rows(&mut self, top: &Dual<'p>, bottom: &Dual<'p>) -> Dual<'p> {
        let v = ops::concat_rows(top.v.view(), bottom.v.view());
        let t = if top.t.is_some() || bottom.t.is_some() {
            Some(ops::concat_rows(
                top.tangent_or_zero().view(),
                bottom.tangent_or_zero().view(),
            ))
        } else {
            None
        };
        Dual::new(v, t)
    }

    fn gather_rows(&mut self, table: &Dual<'p>, ids: &[usize]) -> Dual<'p> {
        let v = ops::gather_rows(table.v.view(), ids);
        let t = table.t.as_ref().map(|t| ops::gather_rows(t.view(), ids));
        Dual::new(v, t)
    }
}
