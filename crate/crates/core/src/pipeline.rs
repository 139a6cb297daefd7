//! The experiment pipeline behind the command-line tool.
//!
//! Each stage rebuilds the dataset from the configuration, reads what
//! earlier stages wrote under `output_dir`, and writes its own files through
//! a temporary name. Reruns with the same configuration give byte-identical
//! outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DataSource, RunConfig};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{self, estimate_split, prepare, results_csv, EvalReport, ResultRow, SweepConfig};
use crate::lre::OperatorKind;
use crate::model::{checkpoint, Parameters};
use crate::projection::{self, BetaRow, LabeledPoint};
use crate::relations::{
    filter_known, generate_synthetic, parse_bats_dir, render_line, serialize_category, split_pairs, PieceTokenizer,
    RelationCategory, RelationPair, Tokenizer, Vocab, LINE_SEPARATOR,
};
use crate::trainer::{lm_accuracy, train, LossCurve};

/// Relations, their corpus and vocabulary, as built from a configuration.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Vec<String>,
    pub vocab: Vocab,
    pub categories: Vec<RelationCategory>,
    /// Per category, subjects kept out of the prompt frame of the corpus.
    pub held_out: Vec<Vec<String>>,
    pub pieces: Option<PieceTokenizer>,
}

impl Dataset {
    pub fn tokenizer(&self) -> &dyn Tokenizer {
        match &self.pieces {
            Some(p) => p,
            None => &self.vocab,
        }
    }

    /// Longest corpus sentence or prompt with `n_icl` examples, in tokens.
    pub fn needed_len(&self, n_icl: usize) -> usize {
        let corpus = self.corpus.iter().map(|s| s.split_whitespace().count()).max().unwrap_or(0);
        let prompts = self
            .categories
            .iter()
            .map(|c| {
                let line = c
                    .pairs
                    .iter()
                    .map(|p| render_line(&c.template, p).split_whitespace().count())
                    .max()
                    .unwrap_or(0);
                n_icl * (line + 1) + line
            })
            .max()
            .unwrap_or(0);
        corpus.max(prompts)
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let data = generate_synthetic(&cfg.data.synthetic, cfg.seed)?;
            Ok(Dataset {
                held_out: data.relations.iter().map(|r| r.held_out.clone()).collect(),
                categories: data.categories(),
                corpus: data.corpus,
                vocab: data.vocab,
                pieces: None,
            })
        }
        DataSource::Bats => {
            let b = &cfg.data.bats;
            let categories = parse_bats_dir(&b.dir)?;
            if categories.is_empty() {
                return Err(Error::Input(format!("{}: no relation files", b.dir.display())));
            }
            let pieces = match &b.pieces {
                Some(p) => Some(PieceTokenizer::from_text(
                    &std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                )),
                None => None,
            };
            let mut words = vec![LINE_SEPARATOR.to_string()];
            for c in &categories {
                words.extend(
                    c.template
                        .split_whitespace()
                        .filter(|w| *w != "{subject}" && *w != "{object}")
                        .map(str::to_string),
                );
                for p in &c.pairs {
                    words.extend(p.subject.split_whitespace().map(str::to_string));
                    for o in &p.objects {
                        words.extend(o.split_whitespace().map(str::to_string));
                    }
                }
            }
            Ok(Dataset {
                corpus: lines_corpus(&categories, b.n_sentences, b.max_lines, cfg.seed),
                vocab: Vocab::from_words(words)?,
                held_out: vec![Vec::new(); categories.len()],
                categories,
                pieces,
            })
        }
    }
}

/// Sentences of one to `max_lines` distinct completed lines of a randomly
/// chosen category.
pub fn lines_corpus(categories: &[RelationCategory], n_sentences: usize, max_lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = format!(" {LINE_SEPARATOR} ");
    (0..n_sentences)
        .map(|_| {
            let c = &categories[rng.gen_range(0..categories.len())];
            let k = rng.gen_range(1..=max_lines.min(c.pairs.len()));
            sample(&mut rng, c.pairs.len(), k)
                .iter()
                .map(|i| render_line(&c.template, &c.pairs[i]))
                .collect::<Vec<_>>()
                .join(&sep)
        })
        .collect()
}

/// File locations under an output directory.
#[derive(Debug, Clone)]
pub struct Paths(pub PathBuf);

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        self.0.join("corpus.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.0.join("vocab.txt")
    }
    pub fn relations(&self) -> PathBuf {
        self.0.join("relations")
    }
    pub fn held_out(&self) -> PathBuf {
        self.0.join("held_out.tsv")
    }
    pub fn model(&self) -> PathBuf {
        self.0.join("model.lrel")
    }
    pub fn loss(&self) -> PathBuf {
        self.0.join("loss.csv")
    }
    pub fn accuracy(&self) -> PathBuf {
        self.0.join("accuracy.csv")
    }
    pub fn operators(&self) -> PathBuf {
        self.0.join("operators")
    }
    pub fn operator(&self, relation: &str, layer: usize, kind: OperatorKind) -> PathBuf {
        self.operators().join(relation).join(format!("L{layer}-{kind}.lrel"))
    }
    pub fn results(&self) -> PathBuf {
        self.0.join("results.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.0.join("summary.json")
    }
    pub fn projection(&self) -> PathBuf {
        self.0.join("projection")
    }
    pub fn beta_sweep(&self) -> PathBuf {
        self.projection().join("beta_sweep.csv")
    }
    pub fn cosine(&self) -> PathBuf {
        self.projection().join("cosine.csv")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.0.join("report.csv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.0.join("report.md")
    }
}

/// Files a stage wrote, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Written(pub Vec<PathBuf>);

impl Written {
    fn put(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.0.push(path);
        Ok(())
    }
}

fn check_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    write_atomic(&probe, b"")?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    check_writable(&paths.0)?;
    let data = load_dataset(cfg)?;
    let mut w = Written::default();
    let mut corpus = data.corpus.join("\n");
    corpus.push('\n');
    w.put(paths.corpus(), corpus.as_bytes())?;
    w.put(paths.vocab(), data.vocab.to_text().as_bytes())?;
    let mut held = String::from("relation_id\tsubject\n");
    for (c, h) in data.categories.iter().zip(&data.held_out) {
        w.put(paths.relations().join(format!("{}.txt", c.id)), serialize_category(c).as_bytes())?;
        for s in h {
            let _ = writeln!(held, "{}\t{s}", c.id);
        }
    }
    w.put(paths.held_out(), held.as_bytes())?;
    Ok(w)
}

fn model_config(cfg: &RunConfig, data: &Dataset) -> Result<crate::model::ModelConfig> {
    cfg.model
        .model_config(data.vocab.len(), data.needed_len(cfg.lre.n_samples), cfg.seed)
}

/// Held-out completion accuracy per category, with the first `n_icl` seen
/// pairs as examples. Categories without held-out subjects are skipped.
pub fn held_out_accuracy(params: &Parameters, data: &Dataset, n_icl: usize) -> Result<Vec<(String, f64, usize)>> {
    let mut out = Vec::new();
    for (c, held) in data.categories.iter().zip(&data.held_out) {
        let (held, seen): (Vec<RelationPair>, Vec<RelationPair>) =
            c.pairs.iter().cloned().partition(|p| held.contains(&p.subject));
        if held.is_empty() {
            continue;
        }
        let icl = &seen[..n_icl.min(seen.len())];
        out.push((c.id.clone(), lm_accuracy(params, &data.vocab, c, &held, icl)?, held.len()));
    }
    Ok(out)
}

/// Initializes the configured model and trains it on the dataset's corpus.
pub fn train_params(cfg: &RunConfig, data: &Dataset) -> Result<(Parameters, LossCurve)> {
    let config = model_config(cfg, data)?;
    let corpus = data
        .corpus
        .iter()
        .map(|s| data.vocab.encode(s))
        .collect::<Result<Vec<_>>>()?;
    train(Parameters::build(&config)?, &corpus, &cfg.train)
}

pub fn train_model(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    check_writable(&paths.0)?;
    let data = load_dataset(cfg)?;
    let (params, curve) = train_params(cfg, &data)?;
    let mut w = Written::default();
    w.put(paths.model(), &checkpoint::to_container(&params).to_bytes())?;
    w.put(paths.loss(), curve.to_csv().as_bytes())?;
    let mut acc = String::from("relation_id,held_out_accuracy,n_held_out\n");
    for (id, a, n) in held_out_accuracy(&params, &data, cfg.lre.n_samples)? {
        let _ = writeln!(acc, "{id},{a:.6},{n}");
    }
    w.put(paths.accuracy(), acc.as_bytes())?;
    Ok(w)
}

/// Loads the trained model and checks it against the configuration.
pub fn load_model(cfg: &RunConfig, data: &Dataset) -> Result<Parameters> {
    let path = Paths(cfg.output_dir.clone()).model();
    if !path.exists() {
        return Err(Error::Input(format!("{}: no checkpoint; run `train` first", path.display())));
    }
    let params = checkpoint::load(&path)?;
    if params.config() != &model_config(cfg, data)? {
        return Err(Error::Format(format!(
            "{}: checkpoint was trained under a different model or data configuration",
            path.display()
        )));
    }
    Ok(params)
}

/// Categories with enough pairs for a split, warning about the rest.
fn usable(data: &Dataset, n_train: usize) -> Vec<&RelationCategory> {
    data.categories
        .iter()
        .filter(|c| {
            let ok = c.pairs.len() > n_train;
            if !ok {
                log::warn!("{}: {} pairs, too few for {n_train} samples; skipped", c.id, c.pairs.len());
            }
            ok
        })
        .collect()
}

pub fn estimate_operators(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    let data = load_dataset(cfg)?;
    let params = load_model(cfg, &data)?;
    let per_relation = usable(&data, cfg.lre.n_samples)
        .par_iter()
        .map(|c| {
            let (train, _) = split_pairs(c, cfg.lre.n_samples, cfg.seed)?;
            let known = filter_known(&params, &data.vocab, c, &train, &train)?;
            if known.is_empty() {
                log::warn!("{}: the model completes no training pair; skipped", c.id);
                return Ok(Vec::new());
            }
            let mut ops = Vec::new();
            for &layer in &cfg.lre.layers {
                let est = estimate_split(&params, &data.vocab, c, &train, &known, layer)?;
                for &kind in &cfg.lre.kinds {
                    ops.push((paths.operator(&c.id, layer, kind), est.operator(kind, cfg.lre.beta)?));
                }
            }
            Ok(ops)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = Written::default();
    for (path, op) in per_relation.into_iter().flatten() {
        w.put(path, &op.to_bytes())?;
    }
    Ok(w)
}

pub fn sweep_config(cfg: &RunConfig) -> SweepConfig {
    SweepConfig {
        kinds: cfg.lre.kinds.clone(),
        layers: cfg.eval.layers(),
        n_runs: cfg.eval.n_runs,
        n_train: cfg.lre.n_samples,
        beta: cfg.lre.beta,
        seed: cfg.seed,
        min_stem: cfg.eval.min_stem,
    }
}

/// Sweeps every usable relation. Relations the model cannot complete are
/// reported and skipped.
pub fn sweep_all(cfg: &RunConfig, params: &Parameters, data: &Dataset) -> Result<(Vec<ResultRow>, Vec<EvalReport>)> {
    let sc = sweep_config(cfg);
    let results = usable(data, sc.n_train)
        .par_iter()
        .map(|c| match eval::sweep(params, &data.vocab, c, &sc) {
            Ok(mut r) => {
                let unique = eval::unique_start_tokens(c, data.tokenizer());
                for rep in &mut r.reports {
                    rep.unique_start_tokens = unique;
                }
                Ok(Some(r))
            }
            Err(Error::Evaluation(m)) => {
                log::warn!("{m}; skipped");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut rows, mut reports) = (Vec::new(), Vec::new());
    for r in results.into_iter().flatten() {
        rows.extend(r.rows);
        reports.extend(r.reports);
    }
    Ok((rows, reports))
}

pub fn run_sweep(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    let data = load_dataset(cfg)?;
    let params = load_model(cfg, &data)?;
    let (rows, reports) = sweep_all(cfg, &params, &data)?;
    let mut w = Written::default();
    w.put(paths.results(), results_csv(&rows).as_bytes())?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
    w.put(paths.summary(), format!("{json}\n").as_bytes())?;
    Ok(w)
}

pub const BETA_SWEEP_HEADER: &str =
    "relation_id,basis_seed,beta,projected_distance,centroid_distance,full_distance,faithfulness";

/// Projection output for one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationProjection {
    pub relation_id: String,
    /// `(basis seed, rows)` per configured seed.
    pub sweeps: Vec<(u64, Vec<BetaRow>)>,
    pub cosine: f64,
    pub random_q99: f64,
    /// Scatter points per `β`, on the first seed's basis.
    pub scatters: Vec<(f64, Vec<LabeledPoint>)>,
}

pub fn project_relation(
    cfg: &RunConfig,
    params: &Parameters,
    data: &Dataset,
    category: &RelationCategory,
) -> Result<RelationProjection> {
    let layer = cfg.projection_layer();
    let (train, test) = split_pairs(category, cfg.lre.n_samples, cfg.seed)?;
    let known = filter_known(params, &data.vocab, category, &train, &train)?;
    let known_test = filter_known(params, &data.vocab, category, &test, &train)?;
    if known.is_empty() || known_test.is_empty() {
        return Err(Error::Evaluation(format!(
            "{}: {} known training and {} known test pairs",
            category.id,
            known.len(),
            known_test.len()
        )));
    }
    let est = estimate_split(params, &data.vocab, category, &train, &known, layer)?;
    let affine = est.operator(OperatorKind::Affine, 1.0)?;
    let translation = est.operator(OperatorKind::Translation, 1.0)?;
    let prepared = prepare(params, &data.vocab, category, &known_test, &train)?;
    let states = projection::pair_states(&prepared, layer);
    let b = affine.b.as_ref().expect("affine operators have an offset");
    let mut sweeps = Vec::new();
    let mut scatters = Vec::new();
    for (i, &seed) in cfg.projection.seeds.iter().enumerate() {
        let basis = projection::gs_basis(b, seed)?;
        sweeps.push((seed, projection::beta_sweep(params, &affine, &states, &cfg.projection.betas, &basis)?));
        if i == 0 {
            for &beta in &cfg.projection.betas {
                let op = affine.with_beta(beta)?;
                scatters.push((beta, projection::scatter_points(&op, &states, &basis)?));
            }
        }
    }
    Ok(RelationProjection {
        relation_id: category.id.clone(),
        sweeps,
        cosine: projection::bias_concept_cosine(&affine, &translation)?,
        random_q99: projection::random_cosine_quantile(b, 1000, 0.99, cfg.seed)?,
        scatters,
    })
}

pub fn run_projection(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    let data = load_dataset(cfg)?;
    let params = load_model(cfg, &data)?;
    let results = usable(&data, cfg.lre.n_samples)
        .par_iter()
        .map(|c| match project_relation(cfg, &params, &data, c) {
            Err(Error::Evaluation(m)) => {
                log::warn!("{m}; skipped");
                Ok(None)
            }
            other => other.map(Some),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = Written::default();
    let mut sweep = format!("{BETA_SWEEP_HEADER}\n");
    let mut cos = String::from("relation_id,cosine,random_q99\n");
    for r in results.into_iter().flatten() {
        for (seed, rows) in &r.sweeps {
            for row in rows {
                let _ = writeln!(
                    sweep,
                    "{},{seed},{},{:.9},{:.9},{:.9},{:.6}",
                    r.relation_id,
                    row.beta,
                    row.projected_distance,
                    row.centroid_distance,
                    row.full_distance,
                    row.faithfulness
                );
            }
        }
        let _ = writeln!(cos, "{},{:.6},{:.6}", r.relation_id, r.cosine, r.random_q99);
        for (beta, points) in &r.scatters {
            let stem = paths.projection().join(format!("{}_beta{beta}", r.relation_id));
            let title = format!("{} beta={beta}", r.relation_id);
            w.put(stem.with_extension("svg"), projection::svg_scatter(&title, points).as_bytes())?;
            w.put(stem.with_extension("csv"), projection::points_csv(points).as_bytes())?;
        }
    }
    w.put(paths.beta_sweep(), sweep.as_bytes())?;
    w.put(paths.cosine(), cos.as_bytes())?;
    Ok(w)
}

/// Mean projected distance over basis seeds, per relation and `β`, from a
/// beta-sweep table.
pub fn beta_means(text: &str) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut lines = text.lines();
    if lines.next() != Some(BETA_SWEEP_HEADER) {
        return Err(Error::Parse {
            path: "beta_sweep".into(),
            line: 1,
            reason: format!("header must be {BETA_SWEEP_HEADER:?}"),
        });
    }
    let mut acc: BTreeMap<String, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |reason: &str| Error::Parse {
            path: "beta_sweep".into(),
            line: i + 2,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err("expected 7 fields"));
        }
        let beta: f64 = f[2].parse().map_err(|_| err("bad beta"))?;
        let dist: f64 = f[3].parse().map_err(|_| err("bad distance"))?;
        let v = acc.entry(f[0].to_string()).or_default();
        match v.iter_mut().find(|(b, _, _)| *b == beta) {
            Some(e) => {
                e.1 += dist;
                e.2 += 1;
            }
            None => v.push((beta, dist, 1)),
        }
    }
    Ok(acc
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|(b, s, n)| (b, s / n as f64)).collect()))
        .collect())
}

/// Summary tables folded from the results table and, when present, the
/// beta-sweep table. No model is run.
pub fn report_text(results: &str, beta_sweep: Option<&str>) -> Result<(String, String)> {
    let rows = eval::parse_results_csv(results)?;
    let reports = eval::summarize(&rows, 0);
    let mut csv = String::from("group,relation_id,kind,faithfulness,n_runs\n");
    let mut by_group: BTreeMap<_, BTreeMap<&str, Vec<&EvalReport>>> = BTreeMap::new();
    for r in &reports {
        by_group
            .entry(r.group)
            .or_default()
            .entry(r.relation_id.as_str())
            .or_default()
            .push(r);
    }
    let kinds: Vec<OperatorKind> = OperatorKind::ALL
        .into_iter()
        .filter(|k| reports.iter().any(|r| r.kind == *k))
        .collect();
    let mut md = String::from("# Faithfulness\n\nBest-layer faithfulness, mean over runs.\n");
    for (group, rels) in &by_group {
        let _ = write!(md, "\n## {group}\n\n| relation |");
        for k in &kinds {
            let _ = write!(md, " {k} |");
        }
        md.push_str("\n|---|");
        md.push_str(&"---:|".repeat(kinds.len()));
        md.push('\n');
        for (rel, reps) in rels {
            let _ = write!(md, "| {rel} |");
            for k in &kinds {
                match reps.iter().find(|r| r.kind == *k) {
                    Some(r) => {
                        let _ = write!(md, " {:.3} |", r.faithfulness);
                        let _ = writeln!(csv, "{group},{rel},{k},{:.6},{}", r.faithfulness, r.runs.len());
                    }
                    None => md.push_str(" |"),
                }
            }
            md.push('\n');
        }
    }
    if let Some(text) = beta_sweep {
        md.push_str("\n# Projected distance by beta\n\nMean over basis seeds.\n\n| relation | beta | distance |\n|---|---:|---:|\n");
        for (rel, v) in beta_means(text)? {
            for (beta, d) in v {
                let _ = writeln!(md, "| {rel} | {beta} | {d:.4} |");
            }
        }
    }
    Ok((csv, md))
}

pub fn report(cfg: &RunConfig) -> Result<Written> {
    let paths = Paths(cfg.output_dir.clone());
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let results = read(&paths.results())?;
    let beta = paths.beta_sweep();
    let beta = if beta.exists() { Some(read(&beta)?) } else { None };
    let (csv, md) = report_text(&results, beta.as_deref())?;
    let mut w = Written::default();
    w.put(paths.report_csv(), csv.as_bytes())?;
    w.put(paths.report_md(), md.as_bytes())?;
    Ok(w)
}
