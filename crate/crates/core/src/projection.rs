//! Two-dimensional views of subject, approximated and object states.
//!
//! The plane is spanned by the operator's bias direction and a seeded random
//! direction orthogonalized against it.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Scored;
use crate::lre::{OperatorKind, RelationalOperator};
use crate::model::{decode_argmax, Parameters};

pub const DEFAULT_BETAS: [f64; 4] = [1.0, 3.0, 5.0, 7.0];
const MIN_RESIDUAL: f64 = 1e-8;

/// A plotted point and its series label.
pub type LabeledPoint = (String, [f64; 2]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBasis {
    pub u1: Array1<f64>,
    pub u2: Array1<f64>,
    pub seed: u64,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// `u1 = b / |b|`, `u2` the normalized part of a seeded random unit vector
/// orthogonal to `u1`.
pub fn gs_basis(b: &Array1<f64>, seed: u64) -> Result<ProjectionBasis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = b.len();
    gs_basis_with(b, seed, || {
        (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
    })
}

/// [`gs_basis`] with the random directions supplied by `draw`. Draws whose
/// residual after removing `u1` is shorter than 1e-8 are discarded.
pub fn gs_basis_with<F>(b: &Array1<f64>, seed: u64, mut draw: F) -> Result<ProjectionBasis>
where
    F: FnMut() -> Array1<f64>,
{
    let nb = norm(b);
    if !(nb > 0.0 && nb.is_finite()) {
        return Err(Error::Input("projection direction is zero or not finite".into()));
    }
    if b.len() < 2 {
        return Err(Error::Input("a projection plane needs at least two dimensions".into()));
    }
    let u1 = b / nb;
    for _ in 0..1000 {
        let r = draw();
        if r.len() != b.len() {
            return Err(Error::Input("random direction has the wrong length".into()));
        }
        let nr = norm(&r);
        if !(nr > 0.0 && nr.is_finite()) {
            continue;
        }
        let r = r / nr;
        let resid = &r - &(&u1 * r.dot(&u1));
        let n = norm(&resid);
        if n >= MIN_RESIDUAL {
            let u2 = resid / n;
            // one more pass removes the rounding left by the first
            let u2 = &u2 - &(&u1 * u2.dot(&u1));
            let u2 = &u2 / norm(&u2);
            return Ok(ProjectionBasis { u1, u2, seed });
        }
    }
    Err(Error::Numeric("no usable random direction after 1000 draws".into()))
}

impl ProjectionBasis {
    pub fn project(&self, v: &Array1<f64>) -> Result<[f64; 2]> {
        if v.len() != self.u1.len() {
            return Err(Error::Input(format!(
                "state has length {}, basis has {}",
                v.len(),
                self.u1.len()
            )));
        }
        Ok([v.dot(&self.u1), v.dot(&self.u2)])
    }
}

pub fn project_states(
    basis: &ProjectionBasis,
    states: &[(String, Array1<f64>)],
) -> Result<Vec<LabeledPoint>> {
    states
        .iter()
        .map(|(l, v)| Ok((l.clone(), basis.project(v)?)))
        .collect()
}

/// Subject state and the model's own final state for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub s: Array1<f64>,
    pub o: Array1<f64>,
}

/// Subject state at `layer` and final state of each prepared test prompt.
pub fn pair_states(prepared: &[Scored], layer: usize) -> Vec<PairState> {
    prepared
        .iter()
        .map(|p| PairState {
            s: p.trace.state(layer, p.subject_position),
            o: p.trace.final_state(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    /// Mean over pairs of the planar distance between `βWs + b` and `o`.
    pub projected_distance: f64,
    /// Planar distance between the two clouds' centroids.
    pub centroid_distance: f64,
    /// Mean full-space distance.
    pub full_distance: f64,
    pub faithfulness: f64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distances and faithfulness of an affine operator at each `β`.
pub fn beta_sweep(
    params: &Parameters,
    op: &RelationalOperator,
    pairs: &[PairState],
    betas: &[f64],
    basis: &ProjectionBasis,
) -> Result<Vec<BetaRow>> {
    if op.kind != OperatorKind::Affine {
        return Err(Error::Operator(format!("beta sweep needs an affine operator, got {}", op.kind)));
    }
    if pairs.is_empty() {
        return Err(Error::Evaluation("beta sweep over no pairs".into()));
    }
    let tops = pairs
        .iter()
        .map(|p| decode_argmax(params, p.o.as_slice().expect("contiguous")))
        .collect::<Result<Vec<_>>>()?;
    betas
        .iter()
        .map(|&beta| {
            let op = op.with_beta(beta)?;
            let n = pairs.len() as f64;
            let (mut proj, mut full, mut matched) = (0.0, 0.0, 0usize);
            let (mut ca, mut co) = ([0.0; 2], [0.0; 2]);
            for (p, &top) in pairs.iter().zip(&tops) {
                let approx = op.apply(p.s.as_slice().expect("contiguous"))?;
                let pa = basis.project(&approx)?;
                let po = basis.project(&p.o)?;
                proj += dist2(pa, po);
                full += norm(&(&approx - &p.o));
                for k in 0..2 {
                    ca[k] += pa[k] / n;
                    co[k] += po[k] / n;
                }
                matched += (decode_argmax(params, approx.as_slice().expect("contiguous"))? == top) as usize;
            }
            Ok(BetaRow {
                beta,
                projected_distance: proj / n,
                centroid_distance: dist2(ca, co),
                full_distance: full / n,
                faithfulness: matched as f64 / n,
            })
        })
        .collect()
}

/// `β` of the row with the smallest projected distance; ties go to the
/// first.
pub fn argmin_beta(rows: &[BetaRow]) -> Option<f64> {
    rows.iter()
        .fold(None::<&BetaRow>, |best, r| match best {
            Some(b) if b.projected_distance <= r.projected_distance => Some(b),
            _ => Some(r),
        })
        .map(|r| r.beta)
}

/// Cosine between an operator's Jacobian-based bias and a translation
/// operator's mean `o − s`.
pub fn bias_concept_cosine(op: &RelationalOperator, translation: &RelationalOperator) -> Result<f64> {
    if !matches!(op.kind, OperatorKind::Affine | OperatorKind::Bias) {
        return Err(Error::Operator(format!("{} operator has no Jacobian bias", op.kind)));
    }
    let t = translation
        .b_translation()
        .ok_or_else(|| Error::Operator(format!("{} operator is not a translation", translation.kind)))?;
    cosine(op.b.as_ref().expect("checked kind"), t)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input("cosine of vectors with different lengths".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine with a zero vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// The `quantile` of cosines between `v` and `n` seeded Gaussian vectors.
pub fn random_cosine_quantile(v: &Array1<f64>, n: usize, quantile: f64, seed: u64) -> Result<f64> {
    if n == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Input("need n > 0 and a quantile in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = (0..n)
        .map(|_| {
            let r: Array1<f64> = (0..v.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            cosine(v, &r)
        })
        .collect::<Result<Vec<f64>>>()?;
    c.sort_by(f64::total_cmp);
    let idx = ((n - 1) as f64 * quantile).round() as usize;
    Ok(c[idx])
}

/// Labelled planar points for one operator at its own `β`: the subject
/// state, `βWs`, `βWs + b`, and the model's object state.
pub fn scatter_points(
    op: &RelationalOperator,
    pairs: &[PairState],
    basis: &ProjectionBasis,
) -> Result<Vec<LabeledPoint>> {
    let w = op
        .w
        .as_ref()
        .ok_or_else(|| Error::Operator(format!("{} operator has no matrix", op.kind)))?;
    let mut out = Vec::with_capacity(4 * pairs.len());
    for p in pairs {
        let ws = w.dot(&p.s) * op.beta;
        let full = op.apply(p.s.as_slice().expect("contiguous"))?;
        out.push(("s".to_string(), basis.project(&p.s)?));
        out.push(("beta_ws".to_string(), basis.project(&ws)?));
        out.push(("beta_ws_b".to_string(), basis.project(&full)?));
        out.push(("o".to_string(), basis.project(&p.o)?));
    }
    Ok(out)
}

fn color(label: &str) -> &'static str {
    match label {
        "s" => "gray",
        "beta_ws" => "magenta",
        "beta_ws_b" => "red",
        "o" => "blue",
        _ => "black",
    }
}

/// A fixed-size SVG scatter plot of labelled points.
pub fn svg_scatter(title: &str, points: &[LabeledPoint]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 40.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for (_, p) in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
    let to_px = |p: [f64; 2]| {
        let x = PAD + (p[0] - lo[0]) / span(0) * (SIZE - 2.0 * PAD);
        let y = SIZE - PAD - (p[1] - lo[1]) / span(1) * (SIZE - 2.0 * PAD);
        (x, y)
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    ));
    for (label, p) in points {
        let (x, y) = to_px(*p);
        s.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"><title>{}</title></circle>\n",
            color(label),
            escape(label)
        ));
    }
    for (i, label) in ["s", "beta_ws", "beta_ws_b", "o"].iter().enumerate() {
        let y = SIZE - 12.0 - 14.0 * (3 - i) as f64;
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            SIZE - 110.0,
            y - 4.0,
            color(label),
            SIZE - 100.0,
            y
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row per point: label, x, y.
pub fn points_csv(points: &[LabeledPoint]) -> String {
    let mut s = String::from("label,x,y\n");
    for (l, p) in points {
        s.push_str(&format!("{l},{:.9},{:.9}\n", p[0], p[1]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_gram_schmidt() {
        let b = array![1.0, 0.0];
        let basis = gs_basis_with(&b, 0, || array![1.0, 1.0]).unwrap();
        assert_eq!(basis.u1, array![1.0, 0.0]);
        assert!((basis.u2[0]).abs() < 1e-15);
        assert!((basis.u2[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parallel_draws_are_resampled() {
        let b = array![2.0, 0.0, 0.0];
        let mut draws = vec![array![0.0, 1.0, 0.0], array![-4.0, 0.0, 0.0]];
        let basis = gs_basis_with(&b, 0, || draws.pop().unwrap()).unwrap();
        assert_eq!(basis.u2, array![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_direction_is_rejected() {
        assert!(matches!(gs_basis(&array![0.0, 0.0], 1), Err(Error::Input(_))));
    }

    #[test]
    fn projections_of_basis_vectors() {
        let basis = gs_basis(&array![3.0, 4.0, 0.0, 1.0], 7).unwrap();
        let p = basis.project(&basis.u1).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        // orthogonal to both
        let mut v = array![1.0, 2.0, 3.0, 4.0];
        v = &v - &(&basis.u1 * v.dot(&basis.u1));
        v = &v - &(&basis.u2 * v.dot(&basis.u2));
        let p = basis.project(&v).unwrap();
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn cosines() {
        let a = array![1.0, 2.0];
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&array![1.0, 0.0], &array![0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine(&a, &array![0.0, 0.0]).is_err());
        let q = random_cosine_quantile(&Array1::ones(64), 1000, 0.99, 0).unwrap();
        assert!(q > 0.1 && q < 0.6, "{q}");
    }

    #[test]
    fn svg_has_one_circle_per_point() {
        let pts = vec![("s".to_string(), [0.0, 1.0]), ("o".to_string(), [2.0, -1.0])];
        let svg = svg_scatter("r & β", &pts);
        assert_eq!(svg.matches("<circle").count(), 2 + 4);
        assert!(svg.contains("fill=\"blue\""));
        assert!(svg.contains("r &amp; β"));
    }
}
