//! Experiment configuration: one TOML file, optionally adjusted with dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lre::{OperatorKind, DEFAULT_BETA, DEFAULT_SAMPLES};
use crate::model::{ModelConfig, Wiring};
use crate::projection::DEFAULT_BETAS;
use crate::relations::SyntheticSpec;
use crate::trainer::TrainConfig;

/// Model shape. The vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `4 * d_model`.
    pub d_mlp: Option<usize>,
    /// Defaults to the longest corpus sentence or prompt.
    pub max_seq_len: Option<usize>,
    pub wiring: Wiring,
    pub final_layer_norm: bool,
    pub decoder_bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: None,
            max_seq_len: None,
            wiring: Wiring::Parallel,
            final_layer_norm: true,
            decoder_bias: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, needed_len: usize, seed: u64) -> Result<ModelConfig> {
        let mut c = ModelConfig::with_heads(self.d_model, self.n_layers, self.n_heads, vocab_size, 2)
            .map_err(|e| prefix("model", e))?;
        c.d_mlp = self.d_mlp.unwrap_or(4 * self.d_model);
        c.max_seq_len = self.max_seq_len.unwrap_or(needed_len.max(2));
        if c.max_seq_len < needed_len {
            return Err(Error::config(
                "model.max_seq_len",
                format!("{} is shorter than the longest sequence ({needed_len})", c.max_seq_len),
            ));
        }
        c.wiring = self.wiring;
        c.final_layer_norm = self.final_layer_norm;
        c.decoder_bias = self.decoder_bias;
        c.seed = seed;
        c.validate().map_err(|e| prefix("model", e))?;
        Ok(c)
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } if !field.starts_with(section) => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Bats,
}

/// Relations read from a BATS-layout directory. The corpus is built from
/// the relation lines themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatsSection {
    pub dir: PathBuf,
    /// Piece list used for start-token statistics.
    pub pieces: Option<PathBuf>,
    pub n_sentences: usize,
    pub max_lines: usize,
}

impl Default for BatsSection {
    fn default() -> Self {
        BatsSection {
            dir: PathBuf::new(),
            pieces: None,
            n_sentences: 4000,
            max_lines: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub bats: BatsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LreSection {
    /// Layers `estimate` writes operators for.
    pub layers: Vec<usize>,
    pub beta: f64,
    pub n_samples: usize,
    pub kinds: Vec<OperatorKind>,
}

impl Default for LreSection {
    fn default() -> Self {
        LreSection {
            layers: vec![1],
            beta: DEFAULT_BETA,
            n_samples: DEFAULT_SAMPLES,
            kinds: OperatorKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_runs: usize,
    /// Inclusive range of source layers swept.
    pub layer_range: [usize; 2],
    pub min_stem: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_runs: 4,
            layer_range: [1, 1],
            min_stem: 3,
        }
    }
}

impl EvalSection {
    pub fn layers(&self) -> Vec<usize> {
        (self.layer_range[0]..=self.layer_range[1]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub betas: Vec<f64>,
    /// Seeds of the random second basis vector.
    pub seeds: Vec<u64>,
    /// Defaults to the first `lre.layers` entry.
    pub layer: Option<usize>,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection {
            betas: DEFAULT_BETAS.to_vec(),
            seeds: (0..5).collect(),
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, model initialization and train/test splits.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lre: LreSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub projection: ProjectionSection,
}

impl RunConfig {
    /// Parses TOML text, applies `overrides` and validates. Relative data
    /// paths are resolved against `base`; `output_dir` is left as given.
    pub fn from_toml(text: &str, origin: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            reason: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            let field = if field == "." { "config".to_string() } else { field };
            Error::config(field, e.into_inner().message().to_string())
        })?;
        let b = &mut cfg.data.bats;
        for p in std::iter::once(&mut b.dir).chain(b.pieces.as_mut()) {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must be set"));
        }
        // width and heads only; vocabulary and length come from the data
        self.model.model_config(2, 2, self.seed)?;
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Bats => {
                if self.data.bats.dir.as_os_str().is_empty() {
                    return Err(Error::config("data.bats.dir", "must be set for a bats source"));
                }
                if self.data.bats.n_sentences == 0 || self.data.bats.max_lines == 0 {
                    return Err(Error::config("data.bats", "n_sentences and max_lines must be positive"));
                }
            }
        }
        self.train.validate()?;
        let l = self.model.n_layers;
        if self.lre.layers.is_empty() || self.lre.layers.iter().any(|&x| x >= l) {
            return Err(Error::config("lre.layers", format!("need at least one layer, all in 0..{l}")));
        }
        if !(self.lre.beta > 0.0 && self.lre.beta.is_finite()) {
            return Err(Error::config("lre.beta", "must be positive"));
        }
        if self.lre.n_samples == 0 {
            return Err(Error::config("lre.n_samples", "must be positive"));
        }
        if self.lre.kinds.is_empty() {
            return Err(Error::config("lre.kinds", "needs at least one kind"));
        }
        if self.eval.n_runs == 0 {
            return Err(Error::config("eval.n_runs", "must be positive"));
        }
        let [lo, hi] = self.eval.layer_range;
        if lo > hi || hi >= l {
            return Err(Error::config("eval.layer_range", format!("[{lo}, {hi}] is not a range inside 0..{l}")));
        }
        let p = &self.projection;
        if p.betas.is_empty() || p.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::config("projection.betas", "need at least one positive beta"));
        }
        if p.seeds.is_empty() {
            return Err(Error::config("projection.seeds", "need at least one seed"));
        }
        if p.layer.is_some_and(|x| x >= l) {
            return Err(Error::config("projection.layer", format!("must lie in 0..{l}")));
        }
        Ok(())
    }

    pub fn projection_layer(&self) -> usize {
        self.projection.layer.unwrap_or(self.lre.layers[0])
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Sets `a.b.c = value`, creating tables on the way. The value is read as
/// TOML when it parses and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("{assignment:?} is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("override", format!("bad key {key:?}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("{p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
