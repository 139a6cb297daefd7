//! Faithfulness of relational operators and layer sweeps.
//!
//! An operator is faithful on a prompt when decoding `apply(s)` gives the
//! same top token as decoding the model's own final state.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lre::{estimate_relation, OperatorKind, RelationalOperator};
use crate::model::{decode_argmax, forward_trace, ActivationTrace, Parameters};
use crate::relations::prompt::examples_for;
use crate::relations::{build_prompt, filter_known, split_pairs, Group, RelationCategory, RelationPair, Tokenizer, Vocab};

/// A test prompt after its clean forward pass.
#[derive(Debug, Clone)]
pub struct Scored {
    pub pair: RelationPair,
    pub trace: ActivationTrace,
    pub subject_position: usize,
    /// Token the model itself predicts.
    pub model_top: usize,
    /// First tokens of the acceptable objects that are in the vocabulary.
    pub gold: Vec<usize>,
}

/// Runs the clean forward pass for each test pair, with `icl` as examples.
pub fn prepare(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    test_pairs: &[RelationPair],
    icl: &[RelationPair],
) -> Result<Vec<Scored>> {
    test_pairs
        .par_iter()
        .map(|pair| {
            let prompt = build_prompt(vocab, category, &pair.subject, icl)?;
            let trace = forward_trace(params, &prompt.tokens)?;
            let model_top = crate::model::argmax(trace.logits.as_slice().expect("contiguous"));
            let gold = pair
                .objects
                .iter()
                .filter_map(|o| o.split_whitespace().next())
                .filter_map(|w| vocab.id(w).ok())
                .collect();
            Ok(Scored {
                pair: pair.clone(),
                trace,
                subject_position: prompt.subject_position,
                model_top,
                gold,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub matched: usize,
    pub gold_matched: usize,
    pub n_test: usize,
    pub faithfulness: f64,
    pub gold_accuracy: f64,
    /// Decoded top token of the operator output, per test pair.
    pub predictions: Vec<usize>,
}

fn check_disjoint(op: &RelationalOperator, subjects: &[&str]) -> Result<()> {
    if subjects.is_empty() {
        return Err(Error::Evaluation(format!("{}: empty test set", op.relation_id)));
    }
    if let Some(s) = subjects.iter().find(|s| op.sample_ids.iter().any(|id| id == *s)) {
        return Err(Error::Protocol(format!(
            "{}: test subject {s:?} was used to estimate the operator",
            op.relation_id
        )));
    }
    Ok(())
}

/// Scores an operator against prepared test prompts.
pub fn score(params: &Parameters, op: &RelationalOperator, prepared: &[Scored]) -> Result<Faithfulness> {
    let subjects: Vec<&str> = prepared.iter().map(|p| p.pair.subject.as_str()).collect();
    check_disjoint(op, &subjects)?;
    let predictions = prepared
        .par_iter()
        .map(|p| {
            let s = p.trace.state(op.source_layer, p.subject_position);
            let o = op.apply(s.as_slice().expect("contiguous"))?;
            decode_argmax(params, o.as_slice().expect("contiguous"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let matched = predictions
        .iter()
        .zip(prepared)
        .filter(|(t, p)| **t == p.model_top)
        .count();
    let gold_matched = predictions
        .iter()
        .zip(prepared)
        .filter(|(t, p)| p.gold.contains(t))
        .count();
    let n = prepared.len();
    Ok(Faithfulness {
        matched,
        gold_matched,
        n_test: n,
        faithfulness: matched as f64 / n as f64,
        gold_accuracy: gold_matched as f64 / n as f64,
        predictions,
    })
}

/// Fraction of `test_pairs` on which the operator's decoded top token equals
/// the model's, with prompts built from `icl`.
pub fn faithfulness(
    params: &Parameters,
    vocab: &Vocab,
    op: &RelationalOperator,
    category: &RelationCategory,
    test_pairs: &[RelationPair],
    icl: &[RelationPair],
) -> Result<Faithfulness> {
    let subjects: Vec<&str> = test_pairs.iter().map(|p| p.subject.as_str()).collect();
    check_disjoint(op, &subjects)?;
    let prepared = prepare(params, vocab, category, test_pairs, icl)?;
    score(params, op, &prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kinds: Vec<OperatorKind>,
    pub layers: Vec<usize>,
    pub n_runs: usize,
    pub n_train: usize,
    pub beta: f64,
    /// Run `r` uses split seed `seed + r`.
    pub seed: u64,
    /// Minimum shared prefix for a stemmed prediction.
    pub min_stem: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kinds: OperatorKind::ALL.to_vec(),
            layers: vec![1, 2, 3],
            n_runs: 4,
            n_train: crate::lre::DEFAULT_SAMPLES,
            beta: crate::lre::DEFAULT_BETA,
            seed: 0,
            min_stem: 3,
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub relation_id: String,
    pub group: Group,
    pub kind: OperatorKind,
    pub layer: usize,
    pub run_seed: u64,
    pub faithfulness: f64,
    pub gold_accuracy: f64,
    pub n_test: usize,
    #[serde(skip)]
    pub matched: usize,
    #[serde(skip)]
    pub suffix_counts: SuffixCounts,
}

pub const RESULT_HEADER: &str = "relation_id,group,kind,layer,run_seed,faithfulness,gold_accuracy,n_test";

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.relation_id,
            self.group,
            self.kind,
            self.layer,
            self.run_seed,
            self.faithfulness,
            self.gold_accuracy,
            self.n_test
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULT_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Parses a results table written by [`results_csv`].
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: "results".into(),
                line: 1,
                reason: format!("header must be {RESULT_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: "results".into(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let group: Group = serde_json::from_value(serde_json::Value::String(f[1].into()))
            .map_err(|_| err(format!("unknown group {:?}", f[1])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad integer {s:?}")));
        let n_test = int(f[7])? as usize;
        let faithfulness = num(f[5])?;
        rows.push(ResultRow {
            relation_id: f[0].to_string(),
            group,
            kind: f[2].parse().map_err(|_| err(format!("unknown kind {:?}", f[2])))?,
            layer: int(f[3])? as usize,
            run_seed: int(f[4])?,
            faithfulness,
            gold_accuracy: num(f[6])?,
            n_test,
            matched: (faithfulness * n_test as f64).round() as usize,
            suffix_counts: SuffixCounts::default(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixCounts {
    pub correct: usize,
    pub stemmed: usize,
    pub incorrect: usize,
}

impl SuffixCounts {
    pub fn total(&self) -> usize {
        self.correct + self.stemmed + self.incorrect
    }

    fn add(&mut self, c: SuffixClass) {
        match c {
            SuffixClass::Correct => self.correct += 1,
            SuffixClass::Stemmed => self.stemmed += 1,
            SuffixClass::Incorrect => self.incorrect += 1,
        }
    }

    fn merge(&mut self, other: &SuffixCounts) {
        self.correct += other.correct;
        self.stemmed += other.stemmed;
        self.incorrect += other.incorrect;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBest {
    pub run_seed: u64,
    pub layer: usize,
    pub faithfulness: f64,
    pub matched: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relation_id: String,
    pub group: Group,
    pub kind: OperatorKind,
    /// Mean over runs of each run's best-layer faithfulness.
    pub faithfulness: f64,
    pub run_seeds: Vec<u64>,
    pub runs: Vec<RunBest>,
    /// Mean faithfulness over runs, per layer.
    pub per_layer: Vec<(usize, f64)>,
    pub unique_start_tokens: usize,
    /// Classification of the operator's predictions at each run's best layer.
    pub suffix_counts: SuffixCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<EvalReport>,
}

/// Estimates and scores every requested operator kind at every layer, for
/// `n_runs` resampled train/test splits.
///
/// Per run, the training split serves as the examples of every test prompt;
/// each training pair's own estimation prompt leaves it out. Pairs the
/// model does not complete correctly are dropped from both sides.
pub fn sweep(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    config: &SweepConfig,
) -> Result<SweepResult> {
    let layers = params.config().n_layers;
    if config.n_runs == 0 {
        return Err(Error::config("eval.n_runs", "must be positive"));
    }
    if config.layers.is_empty() || config.kinds.is_empty() {
        return Err(Error::config("eval.layers", "needs at least one layer and one kind"));
    }
    if let Some(l) = config.layers.iter().find(|&&l| l >= layers) {
        return Err(Error::config("eval.layers", format!("layer {l} outside 0..{layers}")));
    }
    let mut rows = Vec::new();
    for r in 0..config.n_runs {
        let seed = config.seed + r as u64;
        let (train, test) = split_pairs(category, config.n_train, seed)?;
        let known_train = filter_known(params, vocab, category, &train, &train)?;
        let known_test = filter_known(params, vocab, category, &test, &train)?;
        if known_train.is_empty() || known_test.is_empty() {
            return Err(Error::Evaluation(format!(
                "{} run {seed}: {} known training and {} known test pairs",
                category.id,
                known_train.len(),
                known_test.len()
            )));
        }
        if known_train.len() < train.len() {
            log::warn!(
                "{} run {seed}: {} of {} training pairs are not completed correctly",
                category.id,
                train.len() - known_train.len(),
                train.len()
            );
        }
        let prepared = prepare(params, vocab, category, &known_test, &train)?;
        for &layer in &config.layers {
            let est = estimate_split(params, vocab, category, &train, &known_train, layer)?;
            for &kind in &config.kinds {
                let op = est.operator(kind, config.beta)?;
                let f = score(params, &op, &prepared)?;
                let mut counts = SuffixCounts::default();
                for (t, p) in f.predictions.iter().zip(&prepared) {
                    let word = vocab.word(*t).unwrap_or_default();
                    counts.add(classify_suffix(word, &p.pair.subject, p.pair.object(), vocab, config.min_stem));
                }
                rows.push(ResultRow {
                    relation_id: category.id.clone(),
                    group: category.group,
                    kind,
                    layer,
                    run_seed: seed,
                    faithfulness: f.faithfulness,
                    gold_accuracy: f.gold_accuracy,
                    n_test: f.n_test,
                    matched: f.matched,
                    suffix_counts: counts,
                });
            }
        }
    }
    let unique = unique_start_tokens(category, vocab);
    let reports = summarize(&rows, unique);
    Ok(SweepResult { rows, reports })
}

/// Estimation where prompts draw examples from the whole training split but
/// only `samples` contribute Jacobians.
pub fn estimate_split(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    train: &[RelationPair],
    samples: &[RelationPair],
    layer: usize,
) -> Result<crate::lre::Estimate> {
    if samples.len() == train.len() {
        return estimate_relation(params, vocab, category, train, layer);
    }
    use crate::diff::{JacobianMethod, SubjectObjectMap};
    use crate::lre::{Estimate, Sample};
    let maps = samples
        .par_iter()
        .map(|pair| {
            let prompt = build_prompt(vocab, category, &pair.subject, &examples_for(train, &pair.subject))?;
            SubjectObjectMap::new(params, &prompt.tokens, prompt.subject_position, layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let s: Vec<Sample<'_>> = samples
        .iter()
        .zip(&maps)
        .map(|(p, m)| Sample {
            id: p.subject.clone(),
            map: m,
            s: m.base_state().clone(),
        })
        .collect();
    Estimate::from_samples(&category.id, layer, &s, JacobianMethod::ForwardMode)
}

/// Folds result rows into one report per (relation, kind): per-layer means
/// and the mean over runs of each run's best layer.
pub fn summarize(rows: &[ResultRow], unique_start_tokens: usize) -> Vec<EvalReport> {
    let keys: BTreeSet<(String, OperatorKind)> = rows
        .iter()
        .map(|r| (r.relation_id.clone(), r.kind))
        .collect();
    let mut out = Vec::new();
    for (rel, kind) in keys {
        let sel: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.relation_id == rel && r.kind == kind)
            .collect();
        let seeds: Vec<u64> = sel
            .iter()
            .map(|r| r.run_seed)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let layers: BTreeSet<usize> = sel.iter().map(|r| r.layer).collect();
        let per_layer = layers
            .iter()
            .map(|&l| {
                let v: Vec<f64> = sel.iter().filter(|r| r.layer == l).map(|r| r.faithfulness).collect();
                (l, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let mut runs = Vec::new();
        let mut counts = SuffixCounts::default();
        for &seed in &seeds {
            // first layer wins ties
            let best = sel
                .iter()
                .filter(|r| r.run_seed == seed)
                .fold(None::<&&ResultRow>, |best, r| match best {
                    Some(b) if b.faithfulness >= r.faithfulness => Some(b),
                    _ => Some(r),
                })
                .expect("every seed has rows");
            counts.merge(&best.suffix_counts);
            runs.push(RunBest {
                run_seed: seed,
                layer: best.layer,
                faithfulness: best.faithfulness,
                matched: best.matched,
                n_test: best.n_test,
            });
        }
        let mean = runs.iter().map(|r| r.faithfulness).sum::<f64>() / runs.len() as f64;
        out.push(EvalReport {
            relation_id: rel,
            group: sel[0].group,
            kind,
            faithfulness: mean,
            run_seeds: seeds,
            runs,
            per_layer,
            unique_start_tokens,
            suffix_counts: counts,
        });
    }
    out
}

/// Number of distinct first tokens among the pairs' first objects.
pub fn unique_start_tokens(category: &RelationCategory, tokenizer: &dyn Tokenizer) -> usize {
    category
        .pairs
        .iter()
        .filter_map(|p| tokenizer.first_token(p.object()))
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuffixClass {
    Correct,
    Stemmed,
    Incorrect,
}

/// Correct when `prediction` is the object's first token; stemmed when it
/// is a prefix of both subject and object of at least `min_stem` chars.
pub fn classify_suffix(
    prediction: &str,
    subject: &str,
    object: &str,
    tokenizer: &dyn Tokenizer,
    min_stem: usize,
) -> SuffixClass {
    if tokenizer.first_token(object).as_deref() == Some(prediction) {
        return SuffixClass::Correct;
    }
    if prediction.chars().count() >= min_stem
        && object.starts_with(prediction)
        && subject.starts_with(prediction)
    {
        return SuffixClass::Stemmed;
    }
    SuffixClass::Incorrect
}

/// Whitespace splitting, with no vocabulary.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}
