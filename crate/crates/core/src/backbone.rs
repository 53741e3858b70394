//! Toy decoder-only transformer.
//!
//! Blocks are pre-norm with attention and MLP sub-residuals applied inside the
//! block. From the outside each layer is one additive update to the residual
//! stream, `h[i+1] = h[i] + m[i]`, and [`layer_forward_on`] returns that `m`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{Activation, Gradients, NumericsError, Tape, Tensor, Var};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },
    #[error("layer {index} out of range for {layers} layers")]
    Layer { index: usize, layers: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("config sidecar io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub ff_mult: usize,
}

impl BackboneConfig {
    /// Zero layers is accepted; it degenerates to embed-then-head.
    pub fn validate(&self) -> Result<(), BackboneError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BackboneError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(BackboneError::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub w_ff2: Tensor,
}

const LAYER_NAMES: [&str; 10] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_ff1", "w_ff2",
];

impl LayerWeights {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.ff_width();
        Self {
            ln1_gain: Tensor::vector(vec![1.0; d]),
            ln1_bias: Tensor::zeros(&[d]),
            w_q: rng::xavier_uniform(rng, d, d),
            w_k: rng::xavier_uniform(rng, d, d),
            w_v: rng::xavier_uniform(rng, d, d),
            w_o: rng::xavier_uniform(rng, d, d),
            ln2_gain: Tensor::vector(vec![1.0; d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_ff1: rng::xavier_uniform(rng, d, ff),
            w_ff2: rng::xavier_uniform(rng, ff, d),
        }
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.w_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.w_ff2,
        ]
    }
}

/// All backbone parameters. Once frozen, no tensor requires grad.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    /// prediction head `[d × V]`
    pub head: Tensor,
    frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    vars: [Var; 10],
}

impl LayerVars {
    fn get(&self, name: &str) -> Var {
        let i = LAYER_NAMES.iter().position(|n| *n == name).expect("known layer tensor");
        self.vars[i]
    }
}

/// Tape handles for one bound copy of the backbone.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub head: Var,
    config: BackboneConfig,
}

impl BackboneVars {
    /// Parameter handles in the order of [`BackboneWeights::tensors_mut`].
    pub fn params(&self) -> Vec<Var> {
        BackboneWeights::vars_in_order(self)
    }

    /// Rebuilds handles from a list in [`BackboneVars::params`] order.
    pub fn from_params(config: BackboneConfig, params: &[Var]) -> Result<Self, NumericsError> {
        let per = LAYER_NAMES.len();
        let want = 5 + per * config.n_layers;
        if params.len() != want {
            return Err(NumericsError::Contract(format!(
                "expected {want} backbone handles, got {}",
                params.len()
            )));
        }
        let layers = params[2..2 + per * config.n_layers]
            .chunks_exact(per)
            .map(|c| LayerVars {
                vars: c.try_into().expect("chunk of layer width"),
            })
            .collect();
        let tail = &params[want - 3..];
        Ok(Self {
            tok_emb: params[0],
            pos_emb: params[1],
            layers,
            lnf_gain: tail[0],
            lnf_bias: tail[1],
            head: tail[2],
            config,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    config: BackboneConfig,
    frozen: bool,
}

impl BackboneWeights {
    /// Fresh trainable weights.
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self, BackboneError> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::init(&config, rng))
            .collect();
        let mut w = Self {
            config,
            tok_emb: rng::normal(rng, &[config.vocab, d], 0.1),
            pos_emb: rng::normal(rng, &[config.max_seq, d], 0.1),
            layers,
            lnf_gain: Tensor::vector(vec![1.0; d]),
            lnf_bias: Tensor::zeros(&[d]),
            head: rng::xavier_uniform(rng, d, config.vocab),
            frozen: false,
        };
        w.set_trainable(true);
        Ok(w)
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self, BackboneError> {
        let mut w = Self::init(config, &mut rng::seeded(0))?;
        for t in w.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(w)
    }

    fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Marks every tensor trainable and clears the frozen flag.
    pub fn unfreeze(&mut self) {
        self.set_trainable(true);
        self.frozen = false;
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Same order as [`BackboneWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in self.layers.iter_mut() {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            tok_emb: tape.leaf(&self.tok_emb),
            pos_emb: tape.leaf(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    vars: l.tensors().map(|t| tape.leaf(t)),
                })
                .collect(),
            lnf_gain: tape.leaf(&self.lnf_gain),
            lnf_bias: tape.leaf(&self.lnf_bias),
            head: tape.leaf(&self.head),
            config: self.config,
        }
    }

    fn vars_in_order(v: &BackboneVars) -> Vec<Var> {
        let mut out = vec![v.tok_emb, v.pos_emb];
        for l in &v.layers {
            out.extend(l.vars);
        }
        out.extend([v.lnf_gain, v.lnf_bias, v.head]);
        out
    }

    pub fn absorb_grads(&mut self, grads: &Gradients, vars: &BackboneVars) -> Result<(), NumericsError> {
        let order = Self::vars_in_order(vars);
        for (t, v) in self.tensors_mut().into_iter().zip(order) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Serialized weights in the shared checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode("backbone", &self.named())
    }

    pub fn sha256(&self) -> String {
        checkpoint::sha256_hex(&self.to_bytes())
    }

    /// Writes the checkpoint to `path` and the config sidecar next to it (`.json`).
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        std::fs::write(path, self.to_bytes())?;
        let side = Sidecar {
            config: self.config,
            frozen: self.frozen,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let side: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let (header, named) = checkpoint::read(path)?;
        if header.kind != "backbone" {
            return Err(BackboneError::Config(format!(
                "checkpoint holds {}, not a backbone",
                header.kind
            )));
        }
        let mut w = Self::zeros(side.config)?;
        let expected: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        if named.len() != expected.len() {
            return Err(BackboneError::Config("tensor count does not match config".into()));
        }
        for ((slot, name), (got_name, t)) in w.tensors_mut().into_iter().zip(&expected).zip(named) {
            if *name != got_name || slot.shape() != t.shape() {
                return Err(BackboneError::Config(format!(
                    "tensor {got_name} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_requires_grad(true);
        }
        if side.frozen {
            w.freeze();
        }
        Ok(w)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn embed_on(tape: &mut Tape, w: &BackboneVars, tokens: &[usize]) -> Result<Var, BackboneError> {
    let cfg = w.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        return Err(BackboneError::Length {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(BackboneError::Token {
            id,
            vocab: cfg.vocab,
        });
    }
    let tok = tape.gather_rows(w.tok_emb, tokens)?;
    let pos = tape.slice_rows(w.pos_emb, 0, tokens.len())?;
    Ok(tape.add(tok, pos)?)
}

/// Block delta `m = block_i(h) - h` for a `[seq × d]` residual stream, as the
/// sum of the attention and MLP sub-deltas.
pub fn layer_forward_on(tape: &mut Tape, w: &BackboneVars, i: usize, h: Var) -> Result<Var, BackboneError> {
    let cfg = w.config;
    let l = w.layers.get(i).ok_or(BackboneError::Layer {
        index: i,
        layers: cfg.n_layers,
    })?;
    let x = tape.layer_norm(h, l.get("ln1_gain"), l.get("ln1_bias"))?;
    let q = tape.matmul(x, l.get("w_q"))?;
    let k = tape.matmul(x, l.get("w_k"))?;
    let v = tape.matmul(x, l.get("w_v"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.affine(scores, scale, 0.0)?;
        let probs = tape.causal_softmax(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let joined = tape.concat(&heads)?;
    let attn = tape.matmul(joined, l.get("w_o"))?;
    let mid = tape.add(h, attn)?;
    let y = tape.layer_norm(mid, l.get("ln2_gain"), l.get("ln2_bias"))?;
    let hidden = tape.matmul(y, l.get("w_ff1"))?;
    let hidden = tape.activation(Activation::Gelu, hidden)?;
    let mlp = tape.matmul(hidden, l.get("w_ff2"))?;
    Ok(tape.add(attn, mlp)?)
}

/// Final layer norm then the linear head. Works on `[d]` or `[seq × d]`.
pub fn predict_head_on(tape: &mut Tape, w: &BackboneVars, h: Var) -> Result<Var, BackboneError> {
    let d = w.config.d_model;
    if tape.value(h).cols() != d || tape.value(h).rank() == 0 {
        return Err(NumericsError::Shape {
            op: "predict_head",
            lhs: tape.value(h).shape().to_vec(),
            rhs: vec![d],
        }
        .into());
    }
    let x = tape.layer_norm(h, w.lnf_gain, w.lnf_bias)?;
    Ok(tape.matmul(x, w.head)?)
}

/// Residual stream of one forward pass: `h[0]` is the embedded input, `h[N]` the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub h: Vec<Tensor>,
}

/// Plain residual decoding on a tape; returns logits and every `h[i]` handle.
pub fn vanilla_forward_on(
    tape: &mut Tape,
    w: &BackboneVars,
    tokens: &[usize],
) -> Result<(Var, Vec<Var>), BackboneError> {
    let mut h = embed_on(tape, w, tokens)?;
    let mut stack = vec![h];
    for i in 0..w.config.n_layers {
        let m = layer_forward_on(tape, w, i, h)?;
        h = tape.add(h, m)?;
        stack.push(h);
    }
    let logits = predict_head_on(tape, w, h)?;
    Ok((logits, stack))
}

pub fn vanilla_forward(tokens: &[usize], w: &BackboneWeights) -> Result<(Tensor, HiddenStack), BackboneError> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape);
    let (logits, stack) = vanilla_forward_on(&mut tape, &vars, tokens)?;
    let h = stack.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((tape.value(logits).clone(), HiddenStack { h }))
}

pub fn embed(tokens: &[usize], w: &BackboneWeights) -> Result<Tensor, BackboneError> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape);
    let e = embed_on(&mut tape, &vars, tokens)?;
    Ok(tape.value(e).clone())
}

pub fn layer_forward(i: usize, h: &Tensor, w: &BackboneWeights) -> Result<Tensor, BackboneError> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape);
    let hv = tape.constant(h.clone());
    let m = layer_forward_on(&mut tape, &vars, i, hv)?;
    Ok(tape.value(m).clone())
}

pub fn predict_head(h_last: &Tensor, w: &BackboneWeights) -> Result<Tensor, BackboneError> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape);
    let hv = tape.constant(h_last.clone());
    let out = predict_head_on(&mut tape, &vars, hv)?;
    Ok(tape.value(out).clone())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Greedy continuation: appends `steps` argmax tokens, recomputing the full forward each step.
pub fn greedy_continue(tokens: &[usize], steps: usize, w: &BackboneWeights) -> Result<Vec<usize>, BackboneError> {
    let mut seq = tokens.to_vec();
    for _ in 0..steps {
        let (logits, _) = vanilla_forward(&seq, w)?;
        let last = logits.row(logits.rows() - 1);
        seq.push(argmax(last));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_layers: usize) -> BackboneConfig {
        BackboneConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            vocab: 11,
            max_seq: 6,
            ff_mult: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2).validate().is_ok());
        let mut c = cfg(2);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = cfg(2);
        c.vocab = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_cases() {
        let w = BackboneWeights::zeros(cfg(1)).unwrap();
        assert!(embed(&[1, 2, 3], &w).unwrap().data().iter().all(|&x| x == 0.0));

        let w = BackboneWeights::init(cfg(1), &mut rng::seeded(1)).unwrap();
        let e = embed(&[4], &w).unwrap();
        let expect: Vec<f64> = w.tok_emb.row(4).iter().zip(w.pos_emb.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(e.row(0), expect.as_slice());

        let a = embed(&[3, 7], &w).unwrap();
        let b = embed(&[7, 3], &w).unwrap();
        let sub = |row: &[f64], p: usize| -> Vec<f64> {
            row.iter().zip(w.pos_emb.row(p)).map(|(x, y)| x - y).collect()
        };
        for (x, y) in sub(a.row(0), 0).iter().zip(sub(b.row(1), 1)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_ne!(a.row(0), b.row(0));

        assert!(matches!(embed(&[11], &w), Err(BackboneError::Token { .. })));
        assert!(matches!(embed(&[0; 7], &w), Err(BackboneError::Length { .. })));
    }

    #[test]
    fn zero_block_has_zero_delta() {
        let w = BackboneWeights::zeros(cfg(2)).unwrap();
        let h = rng::normal(&mut rng::seeded(2), &[4, 8], 1.0);
        let m = layer_forward(1, &h, &w).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
        assert!(matches!(layer_forward(2, &h, &w), Err(BackboneError::Layer { .. })));
    }

    #[test]
    fn layer_is_causal() {
        let w = BackboneWeights::init(cfg(1), &mut rng::seeded(3)).unwrap();
        let h = rng::normal(&mut rng::seeded(4), &[4, 8], 1.0);
        let mut h2 = h.clone();
        for x in &mut h2.data_mut()[3 * 8..] {
            *x += 0.7;
        }
        let a = layer_forward(0, &h, &w).unwrap();
        let b = layer_forward(0, &h2, &w).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn head_zero_and_linearity() {
        let mut w = BackboneWeights::init(cfg(1), &mut rng::seeded(5)).unwrap();
        let h = rng::normal(&mut rng::seeded(6), &[8], 1.0);
        let base = predict_head(&h, &w).unwrap();
        w.head.data_mut().iter_mut().for_each(|x| *x *= 3.0);
        let scaled = predict_head(&h, &w).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        w.head.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let zero = predict_head(&h, &w).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let p = softmax(zero.data());
        assert!(p.iter().all(|&x| (x - 1.0 / 11.0).abs() < 1e-15));
        assert!(predict_head(&Tensor::zeros(&[5]), &w).is_err());
    }

    #[test]
    fn zero_layers_is_head_of_embedding() {
        let w = BackboneWeights::init(cfg(0), &mut rng::seeded(7)).unwrap();
        let toks = [1, 5, 2];
        let (logits, stack) = vanilla_forward(&toks, &w).unwrap();
        assert_eq!(stack.h.len(), 1);
        let direct = predict_head(&embed(&toks, &w).unwrap(), &w).unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn save_load_preserves_bytes_and_flag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.bin");
        let mut w = BackboneWeights::init(cfg(2), &mut rng::seeded(8)).unwrap();
        w.freeze();
        w.save(&p).unwrap();
        let back = BackboneWeights::load(&p).unwrap();
        assert!(back.is_frozen());
        assert!(back.tensors().iter().all(|t| !t.requires_grad()));
        assert_eq!(back.to_bytes(), w.to_bytes());
    }
}
