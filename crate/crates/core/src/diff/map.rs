//! The subject-to-object map `F(s)` and its derivatives.
//!
//! For a fixed prompt, `F` takes the residual state at the subject's last
//! token after `source_layer` blocks, writes it into the residual stream in
//! place of the clean state, reruns every downstream computation that can
//! see it, and returns the final residual state at the last prompt position.

use ndarray::{Array1, Array2, CowArray};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dual::{Dual, DualOps};
use super::fd;
use super::ops::Ops;
use crate::error::{Error, Result};
use crate::model::forward::{self, block, keys_values, ActivationTrace};
use crate::model::Parameters;

/// A differentiable vector function.
pub trait VectorMap: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, s: &[f64]) -> Result<Array1<f64>>;
    /// `F(s)` together with the directional derivative `(∂F/∂s)·v`.
    fn eval_jvp(&self, s: &[f64], v: &[f64]) -> Result<(Array1<f64>, Array1<f64>)>;
}

fn check_finite(what: &str, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Input(format!("{what} component {i} is not finite"))),
        None => Ok(()),
    }
}

fn check_len(what: &str, x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Input(format!(
            "{what} has length {}, expected {n}",
            x.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SubjectObjectMap<'a> {
    params: &'a Parameters,
    prompt_tokens: Vec<usize>,
    subject_position: usize,
    source_layer: usize,
    base_state: Array1<f64>,
    clean_output: Array1<f64>,
    /// Clean keys/values of positions `0..subject_position`, one entry per
    /// block after the source layer.
    prefix: Vec<(Array2<f64>, Array2<f64>)>,
    /// Clean residual rows after the subject at the source layer.
    tail: Array2<f64>,
}

impl<'a> SubjectObjectMap<'a> {
    pub fn new(
        params: &'a Parameters,
        prompt_tokens: &[usize],
        subject_position: usize,
        source_layer: usize,
    ) -> Result<Self> {
        let trace = forward::forward_trace(params, prompt_tokens)?;
        Self::from_trace(params, &trace, subject_position, source_layer)
    }

    /// Builds the map from an existing clean trace of the prompt.
    pub fn from_trace(
        params: &'a Parameters,
        trace: &ActivationTrace,
        subject_position: usize,
        source_layer: usize,
    ) -> Result<Self> {
        let n = trace.len();
        let layers = params.config().n_layers;
        if subject_position >= n {
            return Err(Error::Input(format!(
                "subject position {subject_position} outside prompt of length {n}"
            )));
        }
        if source_layer > layers {
            return Err(Error::Input(format!(
                "source layer {source_layer} outside 0..={layers}"
            )));
        }
        let p = subject_position;
        let mut ops = DualOps;
        let w = params.weights(&mut ops);
        let prefix = (source_layer..layers)
            .map(|l| {
                let rows = trace.x[l].slice(ndarray::s![..p, ..]).to_owned();
                let x = ops.constant(rows);
                let (k, v) = keys_values(&mut ops, &w.blocks[l], &x);
                (k.v.into_owned(), v.v.into_owned())
            })
            .collect();
        Ok(SubjectObjectMap {
            params,
            prompt_tokens: trace.tokens.clone(),
            subject_position: p,
            source_layer,
            base_state: trace.state(source_layer, p),
            clean_output: trace.final_state(),
            prefix,
            tail: trace.x[source_layer].slice(ndarray::s![p + 1.., ..]).to_owned(),
        })
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    pub fn prompt_tokens(&self) -> &[usize] {
        &self.prompt_tokens
    }

    pub fn subject_position(&self) -> usize {
        self.subject_position
    }

    pub fn source_layer(&self) -> usize {
        self.source_layer
    }

    /// The clean subject state the prompt itself produces.
    pub fn base_state(&self) -> &Array1<f64> {
        &self.base_state
    }

    /// The clean final state at the last position.
    pub fn clean_output(&self) -> &Array1<f64> {
        &self.clean_output
    }

    fn run(&self, s: &[f64], v: Option<&[f64]>) -> (Array1<f64>, Option<Array1<f64>>) {
        let cfg = self.params.config();
        let d = cfg.d_model;
        let row = |x: &[f64]| Array2::from_shape_vec((1, d), x.to_vec()).expect("checked length");
        let mut ops = DualOps;
        let w = self.params.weights(&mut ops);
        let patched = Dual::new(row(s), v.map(row));
        let mut x = if self.tail.nrows() > 0 {
            let tail = Dual {
                v: CowArray::from(self.tail.view()),
                t: None,
            };
            ops.concat_rows(&patched, &tail)
        } else {
            patched
        };
        let p = self.subject_position;
        for (i, l) in (self.source_layer..cfg.n_layers).enumerate() {
            let prefix = (p > 0).then(|| {
                let (k, v) = &self.prefix[i];
                (
                    Dual {
                        v: CowArray::from(k.view()),
                        t: None,
                    },
                    Dual {
                        v: CowArray::from(v.view()),
                        t: None,
                    },
                )
            });
            x = block(&mut ops, cfg, &w.blocks[l], &x, prefix.as_ref(), p).out;
        }
        let last = x.v.nrows() - 1;
        let value = x.v.row(last).to_owned();
        let tangent = v.map(|_| match &x.t {
            Some(t) => t.row(last).to_owned(),
            None => Array1::zeros(d),
        });
        (value, tangent)
    }
}

impl VectorMap for SubjectObjectMap<'_> {
    fn dim_in(&self) -> usize {
        self.params.config().d_model
    }

    fn dim_out(&self) -> usize {
        self.params.config().d_model
    }

    fn eval(&self, s: &[f64]) -> Result<Array1<f64>> {
        check_len("subject state", s, self.dim_in())?;
        check_finite("subject state", s)?;
        Ok(self.run(s, None).0)
    }

    fn eval_jvp(&self, s: &[f64], v: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        check_len("subject state", s, self.dim_in())?;
        check_len("tangent", v, self.dim_in())?;
        check_finite("subject state", s)?;
        check_finite("tangent", v)?;
        let (value, tangent) = self.run(s, Some(v));
        Ok((value, tangent.expect("tangent requested")))
    }
}

/// `F(s) = A s + c`; useful as an exactly affine oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
}

impl VectorMap for AffineMap {
    fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }

    fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }

    fn eval(&self, s: &[f64]) -> Result<Array1<f64>> {
        check_len("input", s, self.dim_in())?;
        check_finite("input", s)?;
        Ok(self.matrix.dot(&Array1::from(s.to_vec())) + &self.offset)
    }

    fn eval_jvp(&self, s: &[f64], v: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        check_len("tangent", v, self.dim_in())?;
        check_finite("tangent", v)?;
        Ok((self.eval(s)?, self.matrix.dot(&Array1::from(v.to_vec()))))
    }
}

/// Directional derivative `(∂F/∂s)|_s · v`.
pub fn jvp(map: &dyn VectorMap, s: &[f64], v: &[f64]) -> Result<Array1<f64>> {
    Ok(map.eval_jvp(s, v)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMethod {
    ForwardMode,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianResult {
    /// `dim_out x dim_in`
    pub w: Array2<f64>,
    /// `F(s0)`
    pub value: Array1<f64>,
    pub method: JacobianMethod,
    pub s0: Array1<f64>,
}

/// Full Jacobian at `s`. Forward mode assembles one column per basis
/// vector; finite differences use central steps of [`fd::STEP`].
pub fn jacobian(map: &dyn VectorMap, s: &[f64], method: JacobianMethod) -> Result<JacobianResult> {
    let n = map.dim_in();
    check_len("input", s, n)?;
    check_finite("input", s)?;
    let value = map.eval(s)?;
    if let Some(i) = value.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("F(s) output {i} is not finite")));
    }
    let columns: Vec<Array1<f64>> = match method {
        JacobianMethod::ForwardMode => (0..n)
            .into_par_iter()
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                jvp(map, s, &e)
            })
            .collect::<Result<_>>()?,
        JacobianMethod::FiniteDifference => (0..n)
            .into_par_iter()
            .map(|i| fd::central_column(map, s, i, fd::STEP))
            .collect::<Result<_>>()?,
    };
    let mut w = Array2::zeros((map.dim_out(), n));
    for (i, col) in columns.iter().enumerate() {
        if let Some(r) = col.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "Jacobian entry ({r}, {i}) is not finite (input coordinate {i})"
            )));
        }
        w.column_mut(i).assign(col);
    }
    Ok(JacobianResult {
        w,
        value,
        method,
        s0: Array1::from(s.to_vec()),
    })
}

/// `‖F(s0 + εv) − F(s0) − ε (∂F/∂s)v‖` for each `ε`. The remainder of a
/// smooth map shrinks quadratically in `ε`.
pub fn taylor_remainder(
    map: &dyn VectorMap,
    s0: &[f64],
    v: &[f64],
    epsilons: &[f64],
) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("direction has norm {norm}, expected 1")));
    }
    if epsilons.iter().any(|e| e.is_nan() || *e < 0.0 || e.is_infinite()) {
        return Err(Error::Input("step sizes must be finite and non-negative".into()));
    }
    if epsilons.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Input("step sizes must be descending".into()));
    }
    let (f0, dir) = map.eval_jvp(s0, v)?;
    epsilons
        .iter()
        .map(|&eps| {
            let shifted: Vec<f64> = s0.iter().zip(v).map(|(s, d)| s + eps * d).collect();
            let f = map.eval(&shifted)?;
            let r = (&f - &f0 - &dir * eps).mapv(|x| x * x).sum().sqrt();
            if !r.is_finite() {
                return Err(Error::Numeric(format!("remainder at step {eps} is not finite")));
            }
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Square;

    impl VectorMap for Square {
        fn dim_in(&self) -> usize {
            2
        }
        fn dim_out(&self) -> usize {
            2
        }
        fn eval(&self, s: &[f64]) -> Result<Array1<f64>> {
            Ok(s.iter().map(|x| x * x).collect())
        }
        fn eval_jvp(&self, s: &[f64], v: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
            Ok((self.eval(s)?, s.iter().zip(v).map(|(x, d)| 2.0 * x * d).collect()))
        }
    }

    fn model(seed: u64) -> Parameters {
        let mut c = ModelConfig::with_heads(16, 3, 2, 20, 12).unwrap();
        c.seed = seed;
        Parameters::build(&c).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn square_hook_jacobian_is_diagonal() {
        for method in [JacobianMethod::ForwardMode, JacobianMethod::FiniteDifference] {
            let j = jacobian(&Square, &[1.0, 2.0], method).unwrap();
            let expected = array![[2.0, 0.0], [0.0, 4.0]];
            for (a, b) in j.w.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-8, "{method:?}: {}", j.w);
            }
        }
    }

    #[test]
    fn identity_map_at_last_layer() {
        let p = model(1);
        let tokens = [3, 5, 7, 2];
        let map = SubjectObjectMap::new(&p, &tokens, 3, 3).unwrap();
        let s = [0.5; 16];
        assert_eq!(map.eval(&s).unwrap().to_vec(), s.to_vec());
        let j = jacobian(&map, map.base_state().as_slice().unwrap(), JacobianMethod::ForwardMode).unwrap();
        assert_eq!(j.w, Array2::<f64>::eye(16));
        assert_eq!(&j.value, map.base_state());
    }

    #[test]
    fn base_state_reproduces_clean_output() {
        let p = model(2);
        let tokens = [1, 4, 9, 9, 0, 11];
        let trace = forward::forward_trace(&p, &tokens).unwrap();
        for pos in [0, 2, 5] {
            for layer in 0..=3 {
                let map = SubjectObjectMap::from_trace(&p, &trace, pos, layer).unwrap();
                let out = map.eval(map.base_state().as_slice().unwrap()).unwrap();
                let diff = (&out - &trace.final_state()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(diff <= 1e-12, "pos {pos} layer {layer}: {diff}");
            }
        }
    }

    #[test]
    fn perturbation_changes_output() {
        let p = model(3);
        let map = SubjectObjectMap::new(&p, &[2, 6, 1, 8], 1, 1).unwrap();
        let mut s = map.base_state().to_vec();
        s[0] += 0.1;
        let diff = (&map.eval(&s).unwrap() - map.clean_output()).mapv(|x| x * x).sum().sqrt();
        assert!(diff > 1e-4, "{diff}");
    }

    #[test]
    fn index_errors() {
        let p = model(4);
        assert!(matches!(SubjectObjectMap::new(&p, &[1, 2], 2, 0), Err(Error::Input(_))));
        assert!(matches!(SubjectObjectMap::new(&p, &[1, 2], 0, 4), Err(Error::Input(_))));
    }

    #[test]
    fn zero_tangent_gives_zero() {
        let p = model(5);
        let map = SubjectObjectMap::new(&p, &[2, 6, 1, 8, 3], 2, 1).unwrap();
        let out = jvp(&map, map.base_state().as_slice().unwrap(), &[0.0; 16]).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jvp_matches_central_differences() {
        let p = model(6);
        let map = SubjectObjectMap::new(&p, &[2, 6, 1, 8, 3, 10], 2, 1).unwrap();
        let s = map.base_state().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let v = random_vec(&mut rng, 16);
            let exact = jvp(&map, &s, &v).unwrap();
            let h = 1e-5;
            let plus: Vec<f64> = s.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = s.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let approx = (map.eval(&plus).unwrap() - map.eval(&minus).unwrap()) / (2.0 * h);
            let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = (&exact - &approx).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err <= 1e-6 * scale, "err {err} scale {scale}");
        }
    }

    #[test]
    fn jvp_is_linear_in_the_tangent() {
        let p = model(7);
        let map = SubjectObjectMap::new(&p, &[5, 5, 1, 19], 3, 0).unwrap();
        let s = map.base_state().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_vec(&mut rng, 16);
        let v = random_vec(&mut rng, 16);
        let (alpha, beta) = (0.7, -2.3);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = jvp(&map, &s, &mix).unwrap();
        let rhs = jvp(&map, &s, &u).unwrap() * alpha + jvp(&map, &s, &v).unwrap() * beta;
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn columns_equal_basis_jvps_exactly() {
        let p = model(8);
        let map = SubjectObjectMap::new(&p, &[1, 2, 3, 4, 5], 4, 1).unwrap();
        let s = map.base_state().to_vec();
        let j = jacobian(&map, &s, JacobianMethod::ForwardMode).unwrap();
        for i in [0, 7, 15] {
            let mut e = vec![0.0; 16];
            e[i] = 1.0;
            assert_eq!(j.w.column(i).to_owned(), jvp(&map, &s, &e).unwrap());
        }
        assert_eq!(j.value, map.eval(&s).unwrap());
    }

    #[test]
    fn affine_map_derivatives_are_exact() {
        let a = array![[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]];
        let map = AffineMap {
            matrix: a.clone(),
            offset: array![0.1, 0.2],
        };
        let v = [0.3, -0.4, 0.2];
        let out = jvp(&map, &[1.0, 1.0, 1.0], &v).unwrap();
        let expected = a.dot(&Array1::from(v.to_vec()));
        assert!((&out - &expected).iter().all(|x| x.abs() <= 1e-10));
        let unit = [0.6, 0.8, 0.0];
        let rem = taylor_remainder(&map, &[1.0, -2.0, 0.5], &unit, &[1.0, 0.1, 0.0]).unwrap();
        assert!(rem.iter().all(|&r| r <= 1e-10));
        assert_eq!(rem[2], 0.0);
    }

    #[test]
    fn remainder_decays_quadratically() {
        let p = model(9);
        let map = SubjectObjectMap::new(&p, &[4, 8, 15, 16, 2], 4, 1).unwrap();
        let s = map.base_state().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v = random_vec(&mut rng, 16);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let r = taylor_remainder(&map, &s, &v, &[1e-2, 5e-3, 0.0]).unwrap();
        let ratio = r[0] / r[1];
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn remainder_rejects_bad_inputs() {
        let map = Square;
        assert!(taylor_remainder(&map, &[1.0, 1.0], &[1.0, 1.0], &[0.1]).is_err());
        assert!(taylor_remainder(&map, &[1.0, 1.0], &[1.0, 0.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = model(10);
        let map = SubjectObjectMap::new(&p, &[1, 2], 1, 1).unwrap();
        let mut s = vec![0.0; 16];
        s[3] = f64::NAN;
        assert!(matches!(jvp(&map, &s, &[0.0; 16]), Err(Error::Input(_))));
        assert!(matches!(
            jacobian(&map, &s, JacobianMethod::ForwardMode),
            Err(Error::Input(_))
        ));
    }
}
