//! Reverse-mode differentiation over a Wengert list of matrix operations.

use ndarray::{s, Array2, ArrayView2, CowArray, Ix2};

use super::ops::{self, Ops};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Normalize { a: usize, inv_std: Vec<f64> },
    Gelu(usize),
    Softmax(usize),
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { a: usize, start: usize },
    ConcatRows(usize, usize),
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    CrossEntropy { logits: usize, grad: Array2<f64> },
}

#[derive(Debug)]
struct Node<'p> {
    value: CowArray<'p, f64, Ix2>,
    op: Op,
}

/// Records operations so gradients can be pulled back to parameters.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: impl Into<CowArray<'p, f64, Ix2>>, op: Op) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) - &self.val(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.val(a) * &self.val(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.val(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a.0))
    }

    /// Mean next-token cross-entropy over the rows that have a target.
    /// Rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.val(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target slot per row");
        let count = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
        let mut grad = Array2::zeros(lv.raw_dim());
        let mut loss = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = lv.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[target];
            let mut g = grad.row_mut(i);
            for (gv, &x) in g.iter_mut().zip(row.iter()) {
                *gv = (x - log_z).exp() / count;
            }
            g[target] -= 1.0 / count;
        }
        self.push(
            Array2::from_elem((1, 1), loss / count),
            Op::CrossEntropy {
                logits: logits.0,
                grad,
            },
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v)[[0, 0]]
    }

    /// Pulls the gradient of scalar node `output` back to every parameter
    /// leaf. Returns gradients indexed by parameter slot; slots never
    /// touched by the graph come back as `None`.
    pub fn backward(&self, output: Var, n_params: usize) -> Result<Vec<Option<Array2<f64>>>> {
        let out = self.val(output);
        if out.dim() != (1, 1) {
            return Err(Error::Numeric(format!(
                "backward needs a scalar output, got shape {:?}",
                out.dim()
            )));
        }
        if !out[[0, 0]].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", out[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut params: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        acc(&mut params[*p], g);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.nodes[*a].value.view();
                    let bv = self.nodes[*b].value.view();
                    let ga = g.dot(&bv.t());
                    let gb = av.t().dot(&g);
                    acc(&mut grads[*a], ga);
                    acc(&mut grads[*b], gb);
                }
                Op::MatMulT(a, b) => {
                    // c = a · bᵀ
                    let av = self.nodes[*a].value.view();
                    let bv = self.nodes[*b].value.view();
                    let ga = g.dot(&bv);
                    let gb = g.t().dot(&av);
                    acc(&mut grads[*a], ga);
                    acc(&mut grads[*b], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[*b], g.clone());
                    acc(&mut grads[*a], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[*b], -&g);
                    acc(&mut grads[*a], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    acc(&mut grads[*a], ga);
                    acc(&mut grads[*b], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    acc(&mut grads[*row], gr);
                    acc(&mut grads[*a], g);
                }
                Op::MulRow(a, row) => {
                    let av = &self.nodes[*a].value;
                    let rv = &self.nodes[*row].value;
                    let gr = (&g * av)
                        .sum_axis(ndarray::Axis(0))
                        .insert_axis(ndarray::Axis(0));
                    let ga = &g * rv;
                    acc(&mut grads[*row], gr);
                    acc(&mut grads[*a], ga);
                }
                Op::Scale(a, c) => acc(&mut grads[*a], g * *c),
                Op::Normalize { a, inv_std } => {
                    let ga = ops::normalize_rows_linear(node.value.view(), inv_std, g.view());
                    acc(&mut grads[*a], ga);
                }
                Op::Gelu(a) => {
                    let mut ga = self.nodes[*a].value.mapv(ops::gelu_grad);
                    ga *= &g;
                    acc(&mut grads[*a], ga);
                }
                Op::Softmax(a) => {
                    let ga = ops::softmax_linear(node.value.view(), g.view());
                    acc(&mut grads[*a], ga);
                }
                Op::SliceCols { a, start } => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[*a], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        acc(&mut grads[*p], g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::SliceRows { a, start } => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads[*a], ga);
                }
                Op::ConcatRows(top, bottom) => {
                    let h = self.nodes[*top].value.nrows();
                    acc(&mut grads[*top], g.slice(s![..h, ..]).to_owned());
                    acc(&mut grads[*bottom], g.slice(s![h.., ..]).to_owned());
                }
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut target = gt.row_mut(id);
                        target += &g.row(row);
                    }
                    acc(&mut grads[*table], gt);
                }
                Op::Sum(a) => {
                    let scale = g[[0, 0]];
                    acc(
                        &mut grads[*a],
                        Array2::from_elem(self.nodes[*a].value.raw_dim(), scale),
                    );
                }
                Op::CrossEntropy { logits, grad } => {
                    acc(&mut grads[*logits], grad * g[[0, 0]]);
                }
            }
        }
        Ok(params)
    }
}

impl<'p> Ops<'p> for Tape<'p> {
    type T = Var;

    fn param(&mut self, value: &'p Array2<f64>, index: usize) -> Var {
        self.push(value.view(), Op::Leaf { param: Some(index) })
    }

    fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    fn value<'a>(&'a self, x: &'a Var) -> ArrayView2<'a, f64> {
        self.val(*x)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).dot(&self.val(*b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).dot(&self.val(*b).t());
        self.push(v, Op::MatMulT(a.0, b.0))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.val(*a) + &self.val(*b);
        self.push(v, Op::Add(a.0, b.0))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = &self.val(*a) + &self.val(*row);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    fn mul_row(&mut self, a: &Var, row: &Var) -> Var {
        let v = &self.val(*a) * &self.val(*row);
        self.push(v, Op::MulRow(a.0, row.0))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = &self.val(*a) * c;
        self.push(v, Op::Scale(a.0, c))
    }

    fn normalize_rows(&mut self, a: &Var) -> Var {
        let (y, inv_std) = ops::normalize_rows(self.val(*a));
        self.push(y, Op::Normalize { a: a.0, inv_std })
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let v = self.val(*a).mapv(ops::gelu);
        self.push(v, Op::Gelu(a.0))
    }

    fn causal_softmax(&mut self, scores: &Var, offset: usize) -> Var {
        let v = ops::causal_softmax(self.val(*scores), offset);
        self.push(v, Op::Softmax(scores.0))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let v = self.val(*a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { a: a.0, start })
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.val(*p)).collect();
        let v = ops::concat_cols(&views);
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Var {
        let v = self.val(*a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows { a: a.0, start })
    }

    fn concat_rows(&mut self, top: &Var, bottom: &Var) -> Var {
        let v = ops::concat_rows(self.val(*top), self.val(*bottom));
        self.push(v, Op::ConcatRows(top.0, bottom.0))
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Var {
        let v = ops::gather_rows(self.val(*table), ids);
        self.push(
            v,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }
}

/// Evaluates `loss` on a fresh tape with `tensors` as parameter leaves and
/// returns the loss together with a gradient for every tensor (zeros where
/// the loss does not depend on it).
pub fn value_and_grad<'p, F>(tensors: &'p [Array2<f64>], loss: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: FnOnce(&mut Tape<'p>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(t, i))
        .collect();
    let out = loss(&mut tape, &leaves);
    let value = tape.scalar(out);
    let grads = tape.backward(out, tensors.len())?;
    let grads = grads
        .into_iter()
        .zip(tensors)
        .map(|(g, t)| g.unwrap_or_else(|| Array2::zeros(t.raw_dim())))
        .collect();
    Ok((value, grads))
}
