//! Parameter storage for the toy decoder.
//!
//! All tensors live in one flat list whose order is fixed by
//! [`param_specs`]. Vectors (gains, offsets, biases) are stored as `1 x n`
//! matrices so every tensor shares one type. The same order is used by the
//! checkpoint container and by the optimizer state.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Tensors per transformer block.
pub const BLOCK_TENSORS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Gaussian(f64),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// The documented tensor order:
///
/// 1. `token_embedding` (vocab x d), `position_embedding` (max_seq_len x d)
/// 2. per block `l`: `ln1.gain`, `ln1.offset`, `attn.wq`, `attn.wk`,
///    `attn.wv`, `attn.wo`, `ln2.gain`, `ln2.offset`, `mlp.w_in`,
///    `mlp.b_in`, `mlp.w_out`, `mlp.b_out`
/// 3. `final_norm.gain`, `final_norm.offset` when `final_layer_norm`
/// 4. `decoder` (d x vocab), then `decoder_offset` when `decoder_bias`
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let v = config.vocab_size;
    let dm = config.d_mlp;
    let proj = 1.0 / (d as f64).sqrt();
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut specs = vec![
        ParamSpec::new("token_embedding", v, d, Init::Gaussian(1.0)),
        ParamSpec::new("position_embedding", config.max_seq_len, d, Init::Gaussian(0.5)),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            ParamSpec::new(p("ln1.gain"), 1, d, Init::Ones),
            ParamSpec::new(p("ln1.offset"), 1, d, Init::Zeros),
            ParamSpec::new(p("attn.wq"), d, d, Init::Gaussian(proj)),
            ParamSpec::new(p("attn.wk"), d, d, Init::Gaussian(proj)),
            ParamSpec::new(p("attn.wv"), d, d, Init::Gaussian(proj)),
            ParamSpec::new(p("attn.wo"), d, d, Init::Gaussian(proj * out_scale)),
            ParamSpec::new(p("ln2.gain"), 1, d, Init::Ones),
            ParamSpec::new(p("ln2.offset"), 1, d, Init::Zeros),
            ParamSpec::new(p("mlp.w_in"), d, dm, Init::Gaussian(proj)),
            ParamSpec::new(p("mlp.b_in"), 1, dm, Init::Zeros),
            ParamSpec::new(
                p("mlp.w_out"),
                dm,
                d,
                Init::Gaussian(out_scale / (dm as f64).sqrt()),
            ),
            ParamSpec::new(p("mlp.b_out"), 1, d, Init::Zeros),
        ]);
    }
    if config.final_layer_norm {
        specs.push(ParamSpec::new("final_norm.gain", 1, d, Init::Ones));
        specs.push(ParamSpec::new("final_norm.offset", 1, d, Init::Zeros));
    }
    specs.push(ParamSpec::new("decoder", d, v, Init::Gaussian(proj)));
    if config.decoder_bias {
        specs.push(ParamSpec::new("decoder_offset", 1, v, Init::Zeros));
    }
    specs
}

/// Indices into [`Parameters::tensors`] for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIndex {
    pub ln1_gain: usize,
    pub ln1_offset: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_offset: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub blocks: Vec<BlockIndex>,
    pub final_norm: Option<(usize, usize)>,
    pub decoder: usize,
    pub decoder_offset: Option<usize>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let blocks = (0..config.n_layers)
            .map(|l| {
                let b = 2 + l * BLOCK_TENSORS;
                BlockIndex {
                    ln1_gain: b,
                    ln1_offset: b + 1,
                    wq: b + 2,
                    wk: b + 3,
                    wv: b + 4,
                    wo: b + 5,
                    ln2_gain: b + 6,
                    ln2_offset: b + 7,
                    w_in: b + 8,
                    b_in: b + 9,
                    w_out: b + 10,
                    b_out: b + 11,
                }
            })
            .collect();
        let mut next = 2 + config.n_layers * BLOCK_TENSORS;
        let final_norm = config.final_layer_norm.then(|| {
            next += 2;
            (next - 2, next - 1)
        });
        let decoder = next;
        let decoder_offset = config.decoder_bias.then_some(decoder + 1);
        Layout {
            token_embedding: 0,
            position_embedding: 1,
            blocks,
            final_norm,
            decoder,
            decoder_offset,
        }
    }
}

/// Learned weights of the toy decoder. Immutable once built, except through
/// the trainer which owns a private copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Array2<f64>>,
}

impl Parameters {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = param_specs(config)
            .iter()
            .map(|spec| match spec.init {
                Init::Ones => Array2::ones((spec.rows, spec.cols)),
                Init::Zeros => Array2::zeros((spec.rows, spec.cols)),
                Init::Gaussian(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Array2::from_shape_simple_fn((spec.rows, spec.cols), || normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(Parameters {
            config: config.clone(),
            layout: Layout::new(config),
            tensors,
        })
    }

    /// Wraps existing tensors, checking count, shapes and finiteness.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.dim() != (spec.rows, spec.cols) {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected ({}, {})",
                    spec.name,
                    t.dim(),
                    spec.rows,
                    spec.cols
                )));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("tensor {} has non-finite entries", spec.name)));
            }
        }
        Ok(Parameters {
            config: config.clone(),
            layout: Layout::new(config),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Array2<f64> {
        &self.tensors[index]
    }

    /// Looks a tensor up by its name in [`param_specs`].
    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        let idx = param_specs(&self.config).iter().position(|s| s.name == name)?;
        Some(&self.tensors[idx])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        let idx = param_specs(&self.config).iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[idx])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Little-endian bytes of every tensor in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_scalars() * 8);
        for t in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(seed: u64) -> ModelConfig {
        let mut c = ModelConfig::with_heads(32, 4, 4, 64, 16).unwrap();
        c.seed = seed;
        c
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = Parameters::build(&cfg(7)).unwrap();
        let b = Parameters::build(&cfg(7)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Parameters::build(&cfg(8)).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn shape_audit() {
        let mut c = cfg(1);
        c.decoder_bias = true;
        let p = Parameters::build(&c).unwrap();
        let lay = p.layout();
        assert_eq!(p.tensor(lay.token_embedding).dim(), (64, 32));
        assert_eq!(p.tensor(lay.position_embedding).dim(), (16, 32));
        assert_eq!(lay.blocks.len(), 4);
        for b in &lay.blocks {
            assert_eq!(p.tensor(b.wq).dim(), (32, 32));
            assert_eq!(p.tensor(b.wo).dim(), (32, 32));
            assert_eq!(p.tensor(b.w_in).dim(), (32, 128));
            assert_eq!(p.tensor(b.w_out).dim(), (128, 32));
            assert_eq!(p.tensor(b.ln1_gain), &Array2::<f64>::ones((1, 32)));
            assert_eq!(p.tensor(b.ln2_offset), &Array2::<f64>::zeros((1, 32)));
        }
        let (g, o) = lay.final_norm.unwrap();
        assert_eq!(p.tensor(g).dim(), (1, 32));
        assert_eq!(p.tensor(o).dim(), (1, 32));
        assert_eq!(p.tensor(lay.decoder).dim(), (32, 64));
        assert_eq!(p.tensor(lay.decoder_offset.unwrap()).dim(), (1, 64));
        assert_eq!(p.tensors().len(), param_specs(&c).len());
        assert!(p.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn from_tensors_rejects_bad_shape() {
        let p = Parameters::build(&cfg(1)).unwrap();
        let mut t = p.tensors().to_vec();
        t[3] = Array2::zeros((2, 2));
        assert!(matches!(
            Parameters::from_tensors(&cfg(1), t),
            Err(Error::Format(_))
        ));
    }
}
