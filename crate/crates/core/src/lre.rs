//! Relational operators estimated from the subject-to-object Jacobian.
//!
//! For training pairs `i` with subject state `s_i`, per-sample Jacobian
//! `W_i` and output `F(s_i)`:
//!
//! * `W = mean_i W_i`
//! * `b = mean_i (F(s_i) − W_i s_i)`
//! * `b_translation = mean_i (F(s_i) − s_i)`
//!
//! Each sample's prompt uses the other training pairs as its examples.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::diff::{jacobian, JacobianMethod, SubjectObjectMap, VectorMap};
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::relations::prompt::examples_for;
use crate::relations::{build_prompt, RelationCategory, RelationPair, Vocab};

pub const DEFAULT_BETA: f64 = 7.0;
pub const DEFAULT_SAMPLES: usize = 8;
const CONTAINER_KIND: &str = "operator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Affine,
    Linear,
    Bias,
    Translation,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Affine,
        OperatorKind::Linear,
        OperatorKind::Bias,
        OperatorKind::Translation,
    ];

    pub fn has_matrix(self) -> bool {
        matches!(self, OperatorKind::Affine | OperatorKind::Linear)
    }

    pub fn has_offset(self) -> bool {
        self != OperatorKind::Linear
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OperatorKind::Affine => "affine",
            OperatorKind::Linear => "linear",
            OperatorKind::Bias => "bias",
            OperatorKind::Translation => "translation",
        })
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Input(format!("unknown operator kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationalOperator {
    pub kind: OperatorKind,
    /// Mean Jacobian; present for affine and linear operators.
    pub w: Option<Array2<f64>>,
    /// Additive term: the Jacobian-based bias for affine and bias
    /// operators, the mean `o − s` for translation operators.
    pub b: Option<Array1<f64>>,
    pub beta: f64,
    pub source_layer: usize,
    pub relation_id: String,
    pub n_samples: usize,
    pub sample_ids: Vec<String>,
}

impl RelationalOperator {
    pub fn new(
        kind: OperatorKind,
        w: Option<Array2<f64>>,
        b: Option<Array1<f64>>,
        beta: f64,
        source_layer: usize,
        relation_id: impl Into<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let op = RelationalOperator {
            kind,
            w,
            b,
            beta,
            source_layer,
            relation_id: relation_id.into(),
            n_samples: sample_ids.len(),
            sample_ids,
        };
        op.check()?;
        Ok(op)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Operator(m));
        if self.kind.has_matrix() != self.w.is_some() {
            return bad(format!("{} operator with matrix present = {}", self.kind, self.w.is_some()));
        }
        if self.kind.has_offset() != self.b.is_some() {
            return bad(format!("{} operator with offset present = {}", self.kind, self.b.is_some()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} is not a positive number", self.beta));
        }
        if self.n_samples == 0 || self.n_samples != self.sample_ids.len() {
            return bad(format!(
                "n_samples {} does not match {} sample ids",
                self.n_samples,
                self.sample_ids.len()
            ));
        }
        let d = self.dim();
        if let Some(w) = &self.w {
            if w.dim() != (d, d) {
                return bad(format!("matrix is {:?}, expected {d} x {d}", w.dim()));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return bad("matrix has non-finite entries".into());
            }
        }
        if let Some(b) = &self.b {
            if b.len() != d {
                return bad(format!("offset has length {}, expected {d}", b.len()));
            }
            if b.iter().any(|x| !x.is_finite()) {
                return bad("offset has non-finite entries".into());
            }
        }
        Ok(())
    }

    /// Width of the states the operator maps.
    pub fn dim(&self) -> usize {
        match (&self.w, &self.b) {
            (Some(w), _) => w.ncols(),
            (None, Some(b)) => b.len(),
            (None, None) => 0,
        }
    }

    /// The translation offset `E[o − s]`, for translation operators.
    pub fn b_translation(&self) -> Option<&Array1<f64>> {
        match self.kind {
            OperatorKind::Translation => self.b.as_ref(),
            _ => None,
        }
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut op = self.clone();
        op.beta = beta;
        op.check()?;
        Ok(op)
    }

    pub fn apply(&self, s: &[f64]) -> Result<Array1<f64>> {
        if self.kind.has_matrix() != self.w.is_some() || self.kind.has_offset() != self.b.is_some() {
            return Err(Error::Operator(format!("{} operator has the wrong fields", self.kind)));
        }
        let d = self.dim();
        if s.len() != d {
            return Err(Error::Input(format!("state has length {}, operator expects {d}", s.len())));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("state has non-finite entries".into()));
        }
        let s = Array1::from(s.to_vec());
        let (w, b) = (self.w.as_ref(), self.b.as_ref());
        Ok(match self.kind {
            OperatorKind::Affine => w.expect("checked").dot(&s) * self.beta + b.expect("checked"),
            OperatorKind::Linear => w.expect("checked").dot(&s),
            OperatorKind::Bias | OperatorKind::Translation => s + b.expect("checked"),
        })
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": self.kind,
            "beta": self.beta,
            "source_layer": self.source_layer,
            "relation_id": self.relation_id,
            "n_samples": self.n_samples,
            "sample_ids": self.sample_ids,
            "d": self.dim(),
        });
        let mut c = Container::new(CONTAINER_KIND, meta);
        if let Some(w) = &self.w {
            c.push("w", w.clone());
        }
        if let Some(b) = &self.b {
            c.push("b", b.clone().insert_axis(ndarray::Axis(0)));
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != CONTAINER_KIND {
            return Err(Error::Format(format!("expected an operator file, found {:?}", c.kind)));
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Meta {
            kind: OperatorKind,
            beta: f64,
            source_layer: usize,
            relation_id: String,
            n_samples: usize,
            sample_ids: Vec<String>,
            d: usize,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Format(format!("operator metadata: {e}")))?;
        for (name, _) in &c.tensors {
            if name != "w" && name != "b" {
                return Err(Error::Format(format!("unexpected tensor {name:?}")));
            }
        }
        let w = c.get("w").cloned();
        let b = match c.get("b") {
            Some(t) if t.nrows() == 1 => Some(t.row(0).to_owned()),
            Some(t) => return Err(Error::Format(format!("offset tensor is {:?}, expected 1 x d", t.dim()))),
            None => None,
        };
        let op = RelationalOperator {
            kind: meta.kind,
            w,
            b,
            beta: meta.beta,
            source_layer: meta.source_layer,
            relation_id: meta.relation_id,
            n_samples: meta.n_samples,
            sample_ids: meta.sample_ids,
        };
        op.check().map_err(|e| Error::Format(e.to_string()))?;
        if op.dim() != meta.d {
            return Err(Error::Format(format!(
                "operator tensors have width {}, header says {}",
                op.dim(),
                meta.d
            )));
        }
        Ok(op)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    /// Loads an operator and checks that it maps states of width `d`.
    pub fn load_for_model(path: &Path, d: usize) -> Result<Self> {
        let op = Self::load(path)?;
        if op.dim() != d {
            return Err(Error::Format(format!(
                "{}: operator width {} does not match model width {d}",
                path.display(),
                op.dim()
            )));
        }
        Ok(op)
    }
}

/// One estimation sample: a map, the point to linearize at, and an id.
pub struct Sample<'a> {
    pub id: String,
    pub map: &'a dyn VectorMap,
    pub s: Array1<f64>,
}

/// The quantities every operator kind is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub b_translation: Array1<f64>,
    pub source_layer: usize,
    pub relation_id: String,
    pub sample_ids: Vec<String>,
}

impl Estimate {
    /// Averages per-sample Jacobians, Jacobian-based offsets and `F(s) − s`.
    /// Sums run in sorted-id order, so reordering `samples` changes only the
    /// order of `sample_ids`.
    pub fn from_samples(
        relation_id: &str,
        source_layer: usize,
        samples: &[Sample<'_>],
        method: JacobianMethod,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Estimation(format!("{relation_id}: no training samples")));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
        let parts = order
            .par_iter()
            .map(|&i| {
                let smp = &samples[i];
                let s = smp.s.as_slice().expect("contiguous");
                let jac = jacobian(smp.map, s, method).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("sample {}: {m}", smp.id)),
                    other => other,
                })?;
                let offset = &jac.value - &jac.w.dot(&smp.s);
                let shift = &jac.value - &smp.s;
                Ok((jac.w, offset, shift))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = parts.len() as f64;
        let (d_out, d_in) = parts[0].0.dim();
        let mut w = Array2::zeros((d_out, d_in));
        let mut b = Array1::zeros(d_out);
        let mut t = Array1::zeros(d_out);
        for (wi, bi, ti) in &parts {
            w += wi;
            b += bi;
            t += ti;
        }
        Ok(Estimate {
            w: w / n,
            b: b / n,
            b_translation: t / n,
            source_layer,
            relation_id: relation_id.to_string(),
            sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn operator(&self, kind: OperatorKind, beta: f64) -> Result<RelationalOperator> {
        let (w, b) = match kind {
            OperatorKind::Affine => (Some(self.w.clone()), Some(self.b.clone())),
            OperatorKind::Linear => (Some(self.w.clone()), None),
            OperatorKind::Bias => (None, Some(self.b.clone())),
            OperatorKind::Translation => (None, Some(self.b_translation.clone())),
        };
        RelationalOperator::new(
            kind,
            w,
            b,
            beta,
            self.source_layer,
            self.relation_id.clone(),
            self.sample_ids.clone(),
        )
    }
}

/// Builds each training pair's prompt with the other training pairs as
/// examples and averages over the resulting subject-to-object maps.
pub fn estimate_relation(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    train_pairs: &[RelationPair],
    source_layer: usize,
) -> Result<Estimate> {
    if train_pairs.is_empty() {
        return Err(Error::Estimation(format!("{}: no training pairs", category.id)));
    }
    let maps = train_pairs
        .par_iter()
        .map(|pair| {
            let icl = examples_for(train_pairs, &pair.subject);
            let prompt = build_prompt(vocab, category, &pair.subject, &icl)?;
            SubjectObjectMap::new(params, &prompt.tokens, prompt.subject_position, source_layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample<'_>> = train_pairs
        .iter()
        .zip(&maps)
        .map(|(pair, map)| Sample {
            id: pair.subject.clone(),
            map,
            s: map.base_state().clone(),
        })
        .collect();
    Estimate::from_samples(&category.id, source_layer, &samples, JacobianMethod::ForwardMode)
}

pub fn estimate(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    train_pairs: &[RelationPair],
    source_layer: usize,
    kind: OperatorKind,
    beta: f64,
) -> Result<RelationalOperator> {
    estimate_relation(params, vocab, category, train_pairs, source_layer)?.operator(kind, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::map::AffineMap;
    use ndarray::array;

    fn affine() -> AffineMap {
        AffineMap {
            matrix: array![[2.0, -1.0, 0.5], [0.0, 3.0, 1.0], [1.5, 0.25, -2.0]],
            offset: array![0.3, -0.7, 1.1],
        }
    }

    fn op(kind: OperatorKind) -> RelationalOperator {
        let map = affine();
        let samples = [Sample {
            id: "a".into(),
            map: &map,
            s: array![1.0, 2.0, 3.0],
        }];
        Estimate::from_samples("r", 1, &samples, JacobianMethod::ForwardMode)
            .unwrap()
            .operator(kind, 1.0)
            .unwrap()
    }

    #[test]
    fn identity_and_zero_offsets() {
        let lin = RelationalOperator::new(
            OperatorKind::Linear,
            Some(Array2::eye(3)),
            None,
            1.0,
            0,
            "r",
            vec!["x".into()],
        )
        .unwrap();
        assert_eq!(lin.apply(&[1.0, -2.0, 3.0]).unwrap().to_vec(), vec![1.0, -2.0, 3.0]);
        let bias = RelationalOperator::new(
            OperatorKind::Bias,
            None,
            Some(Array1::zeros(3)),
            1.0,
            0,
            "r",
            vec!["x".into()],
        )
        .unwrap();
        assert_eq!(bias.apply(&[1.0, -2.0, 3.0]).unwrap().to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn affine_estimate_recovers_the_map() {
        let map = affine();
        let a = op(OperatorKind::Affine);
        for s in [[0.0, 0.0, 0.0], [5.0, -1.0, 2.5], [-3.0, 7.0, 0.1]] {
            let want = map.eval(&s).unwrap();
            let got = a.apply(&s).unwrap();
            assert!((&got - &want).iter().all(|e| e.abs() <= 1e-12));
        }
        let t = op(OperatorKind::Translation);
        // F(s0) − s0 at s0 = (1, 2, 3)
        let f = map.eval(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.b_translation().unwrap(), &(f - array![1.0, 2.0, 3.0]));
    }

    #[test]
    fn field_mismatches_are_rejected() {
        let ids = vec!["x".to_string()];
        let w = Some(Array2::<f64>::eye(2));
        let b = Some(Array1::<f64>::zeros(2));
        assert!(RelationalOperator::new(OperatorKind::Linear, w.clone(), b.clone(), 1.0, 0, "r", ids.clone()).is_err());
        assert!(RelationalOperator::new(OperatorKind::Bias, w.clone(), b.clone(), 1.0, 0, "r", ids.clone()).is_err());
        assert!(RelationalOperator::new(OperatorKind::Affine, w.clone(), None, 1.0, 0, "r", ids.clone()).is_err());
        assert!(RelationalOperator::new(OperatorKind::Affine, w.clone(), b.clone(), 0.0, 0, "r", ids.clone()).is_err());
        assert!(RelationalOperator::new(OperatorKind::Affine, w, b, 1.0, 0, "r", vec![]).is_err());
        let mut broken = op(OperatorKind::Linear);
        broken.w = None;
        assert!(matches!(broken.apply(&[0.0; 3]), Err(Error::Operator(_))));
    }

    #[test]
    fn empty_sample_set_is_an_estimation_error() {
        let r = Estimate::from_samples("r", 0, &[], JacobianMethod::ForwardMode);
        assert!(matches!(r, Err(Error::Estimation(_))));
    }

    #[test]
    fn file_round_trip() {
        for kind in OperatorKind::ALL {
            let o = op(kind).with_beta(7.0).unwrap();
            let back = RelationalOperator::from_bytes(&o.to_bytes()).unwrap();
            assert_eq!(back, o);
            assert_eq!(back.to_bytes(), o.to_bytes());
        }
    }

    #[test]
    fn truncated_files_fail() {
        let bytes = op(OperatorKind::Affine).to_bytes();
        for cut in [0, 4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                RelationalOperator::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }

    #[test]
    fn kind_names() {
        for k in OperatorKind::ALL {
            assert_eq!(k.to_string().parse::<OperatorKind>().unwrap(), k);
        }
        assert!("scale".parse::<OperatorKind>().is_err());
    }
}
