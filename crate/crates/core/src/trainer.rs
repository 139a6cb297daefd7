//! Next-token training with Adam.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::ops::Ops;
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::model::forward::sequence_logits;
use crate::model::{argmax, Parameters};
use crate::relations::{filter_known, RelationCategory, RelationPair, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps per loss-curve point.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            steps: 2000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name}"), format!("{v} is not positive")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        positive("grad_clip", self.grad_clip)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("train.{name}"), format!("{b} is outside (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean per-token loss over the window ending at `step`.
    pub loss: f64,
    /// Next-token accuracy over the same window.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy\n");
        for p in &self.points {
            s.push_str(&format!("{},{:.6},{:.6}\n", p.step, p.loss, p.accuracy));
        }
        s
    }
}

/// Summed loss, correct predictions and target count of one sequence,
/// together with the gradient of the summed loss.
#[derive(Debug, Clone)]
pub struct SequenceGrad {
    pub loss_sum: f64,
    pub correct: usize,
    pub targets: usize,
    pub grads: Vec<Array2<f64>>,
}

pub fn sequence_grad(params: &Parameters, tokens: &[usize]) -> Result<SequenceGrad> {
    if tokens.len() < 2 {
        return Err(Error::Input("a training sequence needs at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    crate::model::forward::check_tokens(params.config(), inputs)?;
    let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).collect();
    let mut tape = Tape::new();
    let w = params.weights(&mut tape);
    let logits = sequence_logits(&mut tape, params.config(), &w, inputs);
    let correct = tape
        .value(&logits)
        .rows()
        .into_iter()
        .zip(&tokens[1..])
        .filter(|(row, &t)| argmax(row.as_slice().expect("row-major")) == t)
        .count();
    let mean = tape.cross_entropy(logits, &targets);
    let n = targets.len();
    let total = tape.scale(&mean, n as f64);
    let loss_sum = tape.scalar(total);
    if !loss_sum.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss_sum}")));
    }
    let grads = tape
        .backward(total, params.tensors().len())?
        .into_iter()
        .zip(params.tensors())
        .map(|(g, t)| g.unwrap_or_else(|| Array2::zeros(t.raw_dim())))
        .collect();
    Ok(SequenceGrad {
        loss_sum,
        correct,
        targets: n,
        grads,
    })
}

/// Mean per-token loss over `sequences`, without gradients.
pub fn corpus_loss(params: &Parameters, sequences: &[Vec<usize>]) -> Result<f64> {
    let parts = sequences
        .par_iter()
        .map(|s| {
            let inputs = &s[..s.len() - 1];
            let mut ops = crate::diff::DualOps;
            let w = params.weights(&mut ops);
            let logits = sequence_logits(&mut ops, params.config(), &w, inputs);
            let lv = ops.value(&logits);
            let mut sum = 0.0;
            for (row, &t) in lv.rows().into_iter().zip(&s[1..]) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                sum += max + z.ln() - row[t];
            }
            Ok((sum, s.len() - 1))
        })
        .collect::<Result<Vec<(f64, usize)>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(sum / n.max(1) as f64)
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &Parameters) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Parameters, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            });
        }
    }
}

/// Minimizes mean next-token cross-entropy over `corpus`. Sequences are
/// visited in seeded shuffled epochs.
pub fn train(
    mut params: Parameters,
    corpus: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<(Parameters, LossCurve)> {
    config.validate()?;
    let mut curve = LossCurve::default();
    if config.steps == 0 {
        return Ok((params, curve));
    }
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.len() < 2 || s.len() > params.config().max_seq_len + 1 {
            return Err(Error::Input(format!(
                "sequence {i} has {} tokens, need 2..={}",
                s.len(),
                params.config().max_seq_len + 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::new(&params);
    let (mut win_loss, mut win_correct, mut win_targets) = (0.0, 0usize, 0usize);

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let parts = batch
            .par_iter()
            .map(|s| sequence_grad(&params, s))
            .collect::<Vec<Result<SequenceGrad>>>();
        let mut total: Option<Vec<Array2<f64>>> = None;
        let (mut loss, mut correct, mut targets) = (0.0, 0, 0);
        for part in parts {
            let part = match part {
                Ok(p) => p,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Divergence {
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            loss += part.loss_sum;
            correct += part.correct;
            targets += part.targets;
            match &mut total {
                None => total = Some(part.grads),
                Some(t) => {
                    for (a, b) in t.iter_mut().zip(&part.grads) {
                        *a += b;
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        let scale = 1.0 / targets as f64;
        let mut norm2 = 0.0;
        for g in &mut grads {
            *g *= scale;
            norm2 += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() || !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss * scale,
            });
        }
        if norm > config.grad_clip {
            let c = config.grad_clip / norm;
            for g in &mut grads {
                *g *= c;
            }
        }
        adam.step(&mut params, &grads, config);

        win_loss += loss;
        win_correct += correct;
        win_targets += targets;
        if step % config.eval_every == 0 || step == config.steps {
            let point = CurvePoint {
                step,
                loss: win_loss / win_targets as f64,
                accuracy: win_correct as f64 / win_targets as f64,
            };
            log::info!(
                "step {step}: loss {:.4} accuracy {:.3}",
                point.loss,
                point.accuracy
            );
            curve.points.push(point);
            (win_loss, win_correct, win_targets) = (0.0, 0, 0);
        }
    }
    Ok((params, curve))
}

/// Fraction of `pairs` whose prompt the model completes with an acceptable
/// object's first token.
pub fn lm_accuracy(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    pairs: &[RelationPair],
    icl: &[RelationPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let known = filter_known(params, vocab, category, pairs, icl)?;
    Ok(known.len() as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Parameters {
        let c = ModelConfig::with_heads(8, 1, 2, 6, 8).unwrap();
        Parameters::build(&c).unwrap()
    }

    #[test]
    fn zero_steps_returns_input() {
        let p = tiny();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (out, curve) = train(p.clone(), &[vec![1, 2, 3]], &cfg).unwrap();
        assert_eq!(out.to_bytes(), p.to_bytes());
        assert!(curve.points.is_empty());
    }

    #[test]
    fn learns_a_cycle() {
        let corpus: Vec<Vec<usize>> = (0..6).map(|s| (0..8).map(|i| (s + i) % 6).collect()).collect();
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 4,
            learning_rate: 1e-2,
            eval_every: 25,
            ..TrainConfig::default()
        };
        let before = corpus_loss(&tiny(), &corpus).unwrap();
        let (p, curve) = train(tiny(), &corpus, &cfg).unwrap();
        let after = corpus_loss(&p, &corpus).unwrap();
        assert!(after < 0.1 * before, "{before} -> {after}");
        assert!(curve.points.last().unwrap().accuracy > 0.95);
        assert_eq!(curve.points.len(), 6);
    }

    #[test]
    fn bad_configs() {
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let cfg = TrainConfig {
            learning_rate: 1e300,
            grad_clip: 1e300,
            steps: 50,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let corpus = vec![vec![1, 2, 3, 4], vec![4, 3, 2, 1]];
        match train(tiny(), &corpus, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
