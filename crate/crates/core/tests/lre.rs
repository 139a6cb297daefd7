use approx::assert_abs_diff_eq;
use lrelab::diff::{JacobianMethod, VectorMap};
use lrelab::lre::{Estimate, OperatorKind, RelationalOperator, Sample};
use lrelab::{Error, Result};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

/// `F(s) = A s + c ⊙ sin(s)`, with the Jacobian `A + diag(c ⊙ cos(s))`
/// written out by hand.
struct Wavy {
    a: Array2<f64>,
    c: Array1<f64>,
}

impl Wavy {
    fn new(d: usize) -> Self {
        let a = Array2::from_shape_fn((d, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let c = Array1::from_shape_fn(d, |i| 0.5 + 0.25 * i as f64);
        Wavy { a, c }
    }

    fn jacobian(&self, s: &Array1<f64>) -> Array2<f64> {
        let mut j = self.a.clone();
        for i in 0..s.len() {
            j[[i, i]] += self.c[i] * s[i].cos();
        }
        j
    }
}

impl VectorMap for Wavy {
    fn dim_in(&self) -> usize {
        self.c.len()
    }

    fn dim_out(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, s: &[f64]) -> Result<Array1<f64>> {
        let s = Array1::from(s.to_vec());
        Ok(self.a.dot(&s) + &self.c * &s.mapv(f64::sin))
    }

    fn eval_jvp(&self, s: &[f64], v: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        let sa = Array1::from(s.to_vec());
        let va = Array1::from(v.to_vec());
        let dir = self.a.dot(&va) + &self.c * &sa.mapv(f64::cos) * &va;
        Ok((self.eval(s)?, dir))
    }
}

fn points(d: usize, n: usize) -> Vec<Array1<f64>> {
    (0..n)
        .map(|k| Array1::from_shape_fn(d, |i| ((k * 5 + i * 11) % 13) as f64 / 6.0 - 1.0))
        .collect()
}

fn samples<'a>(map: &'a Wavy, pts: &[Array1<f64>]) -> Vec<Sample<'a>> {
    pts.iter()
        .enumerate()
        .map(|(k, s)| Sample {
            id: format!("x{k:02}"),
            map,
            s: s.clone(),
        })
        .collect()
}

fn estimate(map: &Wavy, pts: &[Array1<f64>]) -> Estimate {
    Estimate::from_samples("wavy", 2, &samples(map, pts), JacobianMethod::ForwardMode).unwrap()
}

#[test]
fn estimates_are_sample_means() {
    let map = Wavy::new(4);
    let pts = points(4, 6);
    let est = estimate(&map, &pts);
    let n = pts.len() as f64;
    let mut w = Array2::<f64>::zeros((4, 4));
    let mut b = Array1::<f64>::zeros(4);
    let mut t = Array1::<f64>::zeros(4);
    for s in &pts {
        let j = map.jacobian(s);
        let f = map.eval(s.as_slice().unwrap()).unwrap();
        b += &(&f - &j.dot(s));
        t += &(&f - s);
        w += &j;
    }
    assert_abs_diff_eq!(est.w, w / n, epsilon = 1e-12);
    assert_abs_diff_eq!(est.b, b / n, epsilon = 1e-12);
    assert_abs_diff_eq!(est.b_translation, t / n, epsilon = 1e-12);
}

#[test]
fn finite_differences_agree_with_forward_mode() {
    let map = Wavy::new(3);
    let pts = points(3, 4);
    let fm = estimate(&map, &pts);
    let fd = Estimate::from_samples("wavy", 2, &samples(&map, &pts), JacobianMethod::FiniteDifference).unwrap();
    assert_abs_diff_eq!(fm.w, fd.w, epsilon = 1e-8);
    assert_abs_diff_eq!(fm.b, fd.b, epsilon = 1e-8);
}

#[test]
fn operator_kinds_share_their_parts() {
    let map = Wavy::new(4);
    let est = estimate(&map, &points(4, 5));
    let s = [0.3, -1.2, 0.8, 0.05];
    let sa = Array1::from(s.to_vec());
    let apply = |k, beta| est.operator(k, beta).unwrap().apply(&s).unwrap();
    let linear = apply(OperatorKind::Linear, 1.0);
    assert_abs_diff_eq!(linear, est.w.dot(&sa), epsilon = 1e-12);
    assert_abs_diff_eq!(apply(OperatorKind::Affine, 1.0), &linear + &est.b, epsilon = 1e-12);
    assert_abs_diff_eq!(apply(OperatorKind::Affine, 3.5), &linear * 3.5 + &est.b, epsilon = 1e-12);
    assert_abs_diff_eq!(apply(OperatorKind::Bias, 1.0), &sa + &est.b, epsilon = 1e-12);
    assert_abs_diff_eq!(apply(OperatorKind::Translation, 1.0), &sa + &est.b_translation, epsilon = 1e-12);
    let t = est.operator(OperatorKind::Translation, 1.0).unwrap();
    assert_eq!(t.b_translation(), Some(&est.b_translation));
    assert_eq!(est.operator(OperatorKind::Affine, 1.0).unwrap().b_translation(), None);
}

#[test]
fn sample_order_does_not_change_the_estimate() {
    let map = Wavy::new(5);
    let pts = points(5, 7);
    let fwd = samples(&map, &pts);
    let mut rev = samples(&map, &pts);
    rev.reverse();
    let a = Estimate::from_samples("r", 1, &fwd, JacobianMethod::ForwardMode).unwrap();
    let b = Estimate::from_samples("r", 1, &rev, JacobianMethod::ForwardMode).unwrap();
    assert_eq!(a.w, b.w);
    assert_eq!(a.b, b.b);
    assert_eq!(a.b_translation, b.b_translation);
    let mut ids = b.sample_ids.clone();
    ids.reverse();
    assert_eq!(a.sample_ids, ids);
}

#[test]
fn no_samples_is_an_estimation_error() {
    let r = Estimate::from_samples("empty", 0, &[], JacobianMethod::ForwardMode);
    assert!(matches!(r, Err(Error::Estimation(_))));
}

#[test]
fn operators_survive_a_round_trip_on_disk() {
    let map = Wavy::new(3);
    let est = estimate(&map, &points(3, 3));
    let dir = tempfile::tempdir().unwrap();
    for kind in OperatorKind::ALL {
        let op = est.operator(kind, 2.5).unwrap();
        let path = dir.path().join(format!("{kind}.lrel"));
        op.save(&path).unwrap();
        assert_eq!(RelationalOperator::load(&path).unwrap(), op);
        assert_eq!(RelationalOperator::from_bytes(&op.to_bytes()).unwrap(), op);
        assert_eq!(RelationalOperator::load_for_model(&path, 3).unwrap(), op);
        assert!(matches!(RelationalOperator::load_for_model(&path, 4), Err(Error::Format(_))));
    }
}

#[test]
fn truncated_operator_files_are_rejected() {
    let map = Wavy::new(3);
    let bytes = estimate(&map, &points(3, 2)).operator(OperatorKind::Affine, 1.0).unwrap().to_bytes();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(RelationalOperator::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn invalid_operators_are_refused() {
    let ids = vec!["a".to_string()];
    let new = |kind, w, b, beta| RelationalOperator::new(kind, w, b, beta, 0, "r", ids.clone());
    assert!(new(OperatorKind::Linear, None, None, 1.0).is_err());
    assert!(new(OperatorKind::Bias, Some(Array2::eye(2)), Some(Array1::zeros(2)), 1.0).is_err());
    assert!(new(OperatorKind::Affine, Some(Array2::eye(2)), Some(Array1::zeros(3)), 1.0).is_err());
    assert!(new(OperatorKind::Affine, Some(Array2::eye(2)), Some(Array1::zeros(2)), 0.0).is_err());
    assert!(new(OperatorKind::Bias, None, Some(Array1::from(vec![f64::NAN])), 1.0).is_err());
    let ok = new(OperatorKind::Bias, None, Some(Array1::zeros(2)), 1.0).unwrap();
    assert!(matches!(ok.apply(&[1.0]), Err(Error::Input(_))));
    assert!(matches!(ok.apply(&[1.0, f64::INFINITY]), Err(Error::Input(_))));
}

fn state(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn linear_operators_are_homogeneous(s in state(4), lambda in -5.0f64..5.0, beta in 0.1f64..9.0) {
        let map = Wavy::new(4);
        let op = estimate(&map, &points(4, 3)).operator(OperatorKind::Linear, beta).unwrap();
        let scaled: Vec<f64> = s.iter().map(|x| x * lambda).collect();
        let lhs = op.apply(&scaled).unwrap();
        let rhs = op.apply(&s).unwrap() * lambda;
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn one_sample_reproduces_the_map_at_its_point(s in state(4)) {
        let map = Wavy::new(4);
        let est = estimate(&map, &[Array1::from(s.clone())]);
        let f = map.eval(&s).unwrap();
        for kind in [OperatorKind::Affine, OperatorKind::Translation] {
            let out = est.operator(kind, 1.0).unwrap().apply(&s).unwrap();
            for (a, b) in out.iter().zip(&f) {
                prop_assert!((a - b).abs() <= 1e-10, "{kind}: {a} vs {b}");
            }
        }
    }
}
