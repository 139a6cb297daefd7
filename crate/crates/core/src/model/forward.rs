//! The decoder forward pass, written once over [`Ops`].

use ndarray::{Array1, Array2, Axis};

use super::config::{ModelConfig, Wiring};
use super::params::Parameters;
use crate::diff::dual::DualOps;
use crate::diff::ops::Ops;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BlockWeights<T> {
    pub ln1_gain: T,
    pub ln1_offset: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_offset: T,
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

/// Interpreter-specific handles to every parameter tensor.
#[derive(Debug, Clone)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: Option<(T, T)>,
    pub decoder: T,
    pub decoder_offset: Option<T>,
}

impl Parameters {
    pub fn weights<'p, O: Ops<'p>>(&'p self, ops: &mut O) -> Weights<O::T> {
        let lay = self.layout();
        let mut p = |i: usize| ops.param(self.tensor(i), i);
        let token_embedding = p(lay.token_embedding);
        let position_embedding = p(lay.position_embedding);
        let blocks = lay
            .blocks
            .iter()
            .map(|b| BlockWeights {
                ln1_gain: p(b.ln1_gain),
                ln1_offset: p(b.ln1_offset),
                wq: p(b.wq),
                wk: p(b.wk),
                wv: p(b.wv),
                wo: p(b.wo),
                ln2_gain: p(b.ln2_gain),
                ln2_offset: p(b.ln2_offset),
                w_in: p(b.w_in),
                b_in: p(b.b_in),
                w_out: p(b.w_out),
                b_out: p(b.b_out),
            })
            .collect();
        let final_norm = lay.final_norm.map(|(g, o)| (p(g), p(o)));
        let decoder = p(lay.decoder);
        let decoder_offset = lay.decoder_offset.map(&mut p);
        Weights {
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            decoder,
            decoder_offset,
        }
    }
}

pub fn layer_norm<'p, O: Ops<'p>>(ops: &mut O, x: &O::T, gain: &O::T, offset: &O::T) -> O::T {
    let n = ops.normalize_rows(x);
    let g = ops.mul_row(&n, gain);
    ops.add_row(&g, offset)
}

/// Token plus learned position embeddings for `tokens` placed at absolute
/// positions `start..start + tokens.len()`.
pub fn embed<'p, O: Ops<'p>>(ops: &mut O, w: &Weights<O::T>, tokens: &[usize], start: usize) -> O::T {
    let tok = ops.gather_rows(&w.token_embedding, tokens);
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let pos = ops.gather_rows(&w.position_embedding, &positions);
    ops.add(&tok, &pos)
}

/// Keys and values a block computes from its input rows.
pub fn keys_values<'p, O: Ops<'p>>(ops: &mut O, w: &BlockWeights<O::T>, x: &O::T) -> (O::T, O::T) {
    let h = layer_norm(ops, x, &w.ln1_gain, &w.ln1_offset);
    (ops.matmul(&h, &w.wk), ops.matmul(&h, &w.wv))
}

#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    pub attn: T,
    pub mlp: T,
    pub out: T,
}

/// One transformer block over rows at absolute positions
/// `offset..offset + rows`. `prefix` holds the (constant) keys and values
/// of positions `0..offset`, which these rows may attend to.
pub fn block<'p, O: Ops<'p>>(
    ops: &mut O,
    cfg: &ModelConfig,
    w: &BlockWeights<O::T>,
    x: &O::T,
    prefix: Option<&(O::T, O::T)>,
    offset: usize,
) -> BlockOutput<O::T> {
    let h = layer_norm(ops, x, &w.ln1_gain, &w.ln1_offset);
    let q = ops.matmul(&h, &w.wq);
    let mut k = ops.matmul(&h, &w.wk);
    let mut v = ops.matmul(&h, &w.wv);
    if let Some((pk, pv)) = prefix {
        k = ops.concat_rows(pk, &k);
        v = ops.concat_rows(pv, &v);
    }
    let inv_sqrt = 1.0 / (cfg.d_head as f64).sqrt();
    let heads: Vec<O::T> = (0..cfg.n_heads)
        .map(|hd| {
            let (a, b) = (hd * cfg.d_head, (hd + 1) * cfg.d_head);
            let qh = ops.slice_cols(&q, a, b);
            let kh = ops.slice_cols(&k, a, b);
            let vh = ops.slice_cols(&v, a, b);
            let scores = ops.matmul_t(&qh, &kh);
            let scores = ops.scale(&scores, inv_sqrt);
            let probs = ops.causal_softmax(&scores, offset);
            ops.matmul(&probs, &vh)
        })
        .collect();
    let merged = ops.concat_cols(&heads);
    let attn = ops.matmul(&merged, &w.wo);

    let mlp_input = match cfg.wiring {
        Wiring::Parallel => x.clone(),
        Wiring::Sequential => ops.add(x, &attn),
    };
    let h2 = layer_norm(ops, &mlp_input, &w.ln2_gain, &w.ln2_offset);
    let pre = ops.matmul(&h2, &w.w_in);
    let pre = ops.add_row(&pre, &w.b_in);
    let act = ops.gelu(&pre);
    let mlp = ops.matmul(&act, &w.w_out);
    let mlp = ops.add_row(&mlp, &w.b_out);

    let with_attn = ops.add(x, &attn);
    let out = ops.add(&with_attn, &mlp);
    BlockOutput { attn, mlp, out }
}

/// Final norm (when configured) followed by the decoder head, per row.
pub fn decode_rows<'p, O: Ops<'p>>(ops: &mut O, w: &Weights<O::T>, x: &O::T) -> O::T {
    let h = match &w.final_norm {
        Some((g, o)) => layer_norm(ops, x, g, o),
        None => x.clone(),
    };
    let logits = ops.matmul(&h, &w.decoder);
    match &w.decoder_offset {
        Some(b) => ops.add_row(&logits, b),
        None => logits,
    }
}

/// Logits for every position of `tokens`.
pub fn sequence_logits<'p, O: Ops<'p>>(
    ops: &mut O,
    cfg: &ModelConfig,
    w: &Weights<O::T>,
    tokens: &[usize],
) -> O::T {
    let mut x = embed(ops, w, tokens, 0);
    for bw in &w.blocks {
        x = block(ops, cfg, bw, &x, None, 0).out;
    }
    decode_rows(ops, w, &x)
}

/// Every residual state of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: Vec<usize>,
    /// `x[l]` is the `n x d` residual stream after `l` blocks; `x[0]` holds
    /// the embeddings.
    pub x: Vec<Array2<f64>>,
    /// `a[l - 1]` is block `l`'s attention output.
    pub a: Vec<Array2<f64>>,
    /// `m[l - 1]` is block `l`'s MLP output.
    pub m: Vec<Array2<f64>>,
    /// Decoder logits at the last position.
    pub logits: Array1<f64>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.a.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Residual state after `layer` blocks at `position`.
    pub fn state(&self, layer: usize, position: usize) -> Array1<f64> {
        self.x[layer].row(position).to_owned()
    }

    /// The final residual state at the last position, which the decoder
    /// reads to predict the next token.
    pub fn final_state(&self) -> Array1<f64> {
        let last = self.x.len() - 1;
        self.state(last, self.tokens.len() - 1)
    }

    /// Little-endian bytes of every stored tensor, for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.x.iter().chain(&self.a).chain(&self.m) {
            out.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        out.extend(self.logits.iter().flat_map(|v| v.to_le_bytes()));
        out
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} at position {i} is outside the vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn forward_trace(params: &Parameters, tokens: &[usize]) -> Result<ActivationTrace> {
    let cfg = params.config();
    check_tokens(cfg, tokens)?;
    let mut ops = DualOps;
    let w = params.weights(&mut ops);
    let mut x = embed(&mut ops, &w, tokens, 0);
    let mut xs = vec![x.v.to_owned()];
    let mut attns = Vec::with_capacity(cfg.n_layers);
    let mut mlps = Vec::with_capacity(cfg.n_layers);
    for bw in &w.blocks {
        let out = block(&mut ops, cfg, bw, &x, None, 0);
        attns.push(out.attn.v.into_owned());
        mlps.push(out.mlp.v.into_owned());
        xs.push(out.out.v.to_owned());
        x = out.out;
    }
    let last = ops.slice_rows(&x, tokens.len() - 1, tokens.len());
    let logits = decode_rows(&mut ops, &w, &last);
    let logits = logits.v.index_axis(Axis(0), 0).to_owned();
    Ok(ActivationTrace {
        tokens: tokens.to_vec(),
        x: xs,
        a: attns,
        m: mlps,
        logits,
    })
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_next(params: &Parameters, tokens: &[usize]) -> Result<usize> {
    let trace = forward_trace(params, tokens)?;
    Ok(argmax(trace.logits.as_slice().expect("contiguous")))
}

/// Decoder logits for a single residual state.
pub fn decode_logits(params: &Parameters, state: &[f64]) -> Result<Array1<f64>> {
    let d = params.config().d_model;
    if state.len() != d {
        return Err(Error::Input(format!(
            "state has length {}, expected d_model {d}",
            state.len()
        )));
    }
    if let Some(i) = state.iter().position(|x| !x.is_finite()) {
        return Err(Error::Input(format!("state component {i} is not finite")));
    }
    let mut ops = DualOps;
    let w = params.weights(&mut ops);
    let x = ops.constant(Array2::from_shape_vec((1, d), state.to_vec()).expect("shape"));
    let logits = decode_rows(&mut ops, &w, &x);
    Ok(logits.v.index_axis(Axis(0), 0).to_owned())
}

/// Argmax token of the decoder applied to `state`.
pub fn decode_argmax(params: &Parameters, state: &[f64]) -> Result<usize> {
    let logits = decode_logits(params, state)?;
    Ok(argmax(logits.as_slice().expect("contiguous")))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Next-token distribution for a residual state: final norm, decoder head,
/// softmax.
pub fn decode_distribution(params: &Parameters, state: &[f64]) -> Result<Vec<f64>> {
    let logits = decode_logits(params, state)?;
    Ok(softmax(logits.as_slice().expect("contiguous")))
}
