//! Depth recurrence: one shared cell threaded through every layer.
//!
//! For each position, the recurrent state starts at zero and is updated once
//! per layer from that layer's block delta:
//!
//! ```text
//! m[i]   = block_i(h[i]) - h[i]
//! v[i+1] = cell(m[i], v[i])
//! h[i+1] = h[i] + v[i+1]
//! ```
//!
//! Deltas are read from the modified chain, not from a separate vanilla pass.
//! State never crosses positions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneError, BackboneVars, BackboneWeights};
use crate::cells::{self, Ablation, DgDpuParams, DgDpuVars, GruParams, GruVars, StepVars};
use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{Gradients, NumericsError, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum RecurrenceError {
    #[error("cell width {cell} does not match backbone width {backbone}")]
    Config { cell: usize, backbone: usize },
    #[error("expected 1 or {layers} bound cells, got {got}")]
    Schedule { layers: usize, got: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cell checkpoint holds `{0}`, which is not a trainable cell")]
    Kind(String),
}

/// Which cell a depth-recurrent forward uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellVariant {
    Dgdpu,
    Gru,
    ConstraintOnly,
    CorrectionOnly,
    /// correction gate pinned to 1, so every layer passes its delta through untouched
    ForcedVanilla,
}

impl CellVariant {
    pub const TRAINABLE: [CellVariant; 4] = [
        CellVariant::Dgdpu,
        CellVariant::Gru,
        CellVariant::ConstraintOnly,
        CellVariant::CorrectionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellVariant::Dgdpu => "dgdpu",
            CellVariant::Gru => "gru",
            CellVariant::ConstraintOnly => "constraint_only",
            CellVariant::CorrectionOnly => "correction_only",
            CellVariant::ForcedVanilla => "forced_vanilla",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::ForcedVanilla]
            .into_iter()
            .chain(Self::TRAINABLE)
            .find(|v| v.name() == name)
    }
}

/// How the dual-gated weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CellInit {
    Xavier,
    /// Xavier, with the correction gate biased open (see [`DgDpuParams::near_vanilla`]).
    NearVanilla { input_rms: f64, target_logit: f64 },
}

/// A cell variant together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CellMode {
    ForcedVanilla,
    Dgdpu(DgDpuParams),
    Gru(GruParams),
    Ablated(Ablation, DgDpuParams),
}

/// [`CellMode`] bound to a tape.
#[derive(Debug, Clone, Copy)]
pub enum BoundCell {
    ForcedVanilla,
    Dgdpu(DgDpuVars),
    Gru(GruVars),
    Ablated(Ablation, DgDpuVars),
}

impl BoundCell {
    /// Parameter handles in the order of [`CellMode::tensors_mut`].
    pub fn params(&self) -> Vec<Var> {
        match self {
            BoundCell::ForcedVanilla => vec![],
            BoundCell::Dgdpu(w) | BoundCell::Ablated(_, w) => w.params().to_vec(),
            BoundCell::Gru(w) => w.params().to_vec(),
        }
    }

    pub fn step(&self, tape: &mut Tape, m: Var, v: Var) -> Result<StepVars, NumericsError> {
        match self {
            BoundCell::ForcedVanilla => Ok(StepVars {
                v_next: m,
                g_a: None,
                g_e: None,
                c_tilde: None,
            }),
            BoundCell::Dgdpu(w) => cells::dgdpu_step_on(tape, m, v, w),
            BoundCell::Gru(w) => Ok(StepVars {
                v_next: cells::gru_step_on(tape, m, v, w)?,
                g_a: None,
                g_e: None,
                c_tilde: None,
            }),
            BoundCell::Ablated(kind, w) => cells::ablated_step_on(tape, *kind, m, v, w),
        }
    }
}

impl CellMode {
    pub fn init(variant: CellVariant, d: usize, init: CellInit, rng: &mut Rng) -> Self {
        let dg = |rng: &mut Rng| match init {
            CellInit::Xavier => DgDpuParams::xavier(d, rng),
            CellInit::NearVanilla {
                input_rms,
                target_logit,
            } => DgDpuParams::near_vanilla(d, rng, input_rms, target_logit),
        };
        match variant {
            CellVariant::ForcedVanilla => CellMode::ForcedVanilla,
            CellVariant::Dgdpu => CellMode::Dgdpu(dg(rng)),
            CellVariant::Gru => CellMode::Gru(GruParams::xavier(d, rng)),
            CellVariant::ConstraintOnly => CellMode::Ablated(Ablation::ConstraintOnly, dg(rng)),
            CellVariant::CorrectionOnly => CellMode::Ablated(Ablation::CorrectionOnly, dg(rng)),
        }
    }

    pub fn variant(&self) -> CellVariant {
        match self {
            CellMode::ForcedVanilla => CellVariant::ForcedVanilla,
            CellMode::Dgdpu(_) => CellVariant::Dgdpu,
            CellMode::Gru(_) => CellVariant::Gru,
            CellMode::Ablated(Ablation::ConstraintOnly, _) => CellVariant::ConstraintOnly,
            CellMode::Ablated(Ablation::CorrectionOnly, _) => CellVariant::CorrectionOnly,
        }
    }

    pub fn d_model(&self) -> Option<usize> {
        match self {
            CellMode::ForcedVanilla => None,
            CellMode::Dgdpu(p) | CellMode::Ablated(_, p) => Some(p.d_model()),
            CellMode::Gru(p) => Some(p.d_model()),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundCell {
        match self {
            CellMode::ForcedVanilla => BoundCell::ForcedVanilla,
            CellMode::Dgdpu(p) => BoundCell::Dgdpu(p.bind(tape)),
            CellMode::Gru(p) => BoundCell::Gru(p.bind(tape)),
            CellMode::Ablated(k, p) => BoundCell::Ablated(*k, p.bind(tape)),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            CellMode::ForcedVanilla => vec![],
            CellMode::Dgdpu(p) | CellMode::Ablated(_, p) => p.named(),
            CellMode::Gru(p) => p.named(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            CellMode::ForcedVanilla => vec![],
            CellMode::Dgdpu(p) | CellMode::Ablated(_, p) => p.tensors_mut(),
            CellMode::Gru(p) => p.tensors_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn absorb_grads(&mut self, grads: &Gradients, bound: &BoundCell) -> Result<(), NumericsError> {
        match (self, bound) {
            (CellMode::Dgdpu(p), BoundCell::Dgdpu(v)) => p.absorb_grads(grads, v),
            (CellMode::Ablated(_, p), BoundCell::Ablated(_, v)) => p.absorb_grads(grads, v),
            (CellMode::Gru(p), BoundCell::Gru(v)) => p.absorb_grads(grads, v),
            (CellMode::ForcedVanilla, BoundCell::ForcedVanilla) => Ok(()),
            _ => Err(NumericsError::Contract("bound cell does not match its mode".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named: Vec<(String, &Tensor)> =
            self.named().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        checkpoint::encode(self.variant().name(), &named)
    }

    pub fn save(&self, path: &Path) -> Result<(), RecurrenceError> {
        std::fs::write(path, self.to_bytes()).map_err(CheckpointError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecurrenceError> {
        let (header, named) = checkpoint::read(path)?;
        let variant = CellVariant::from_name(&header.kind)
            .ok_or_else(|| RecurrenceError::Kind(header.kind.clone()))?;
        Ok(match variant {
            CellVariant::ForcedVanilla => CellMode::ForcedVanilla,
            CellVariant::Dgdpu => CellMode::Dgdpu(DgDpuParams::from_named(named)?),
            CellVariant::Gru => CellMode::Gru(GruParams::from_named(named)?),
            CellVariant::ConstraintOnly => {
                CellMode::Ablated(Ablation::ConstraintOnly, DgDpuParams::from_named(named)?)
            }
            CellVariant::CorrectionOnly => {
                CellMode::Ablated(Ablation::CorrectionOnly, DgDpuParams::from_named(named)?)
            }
        })
    }
}

/// Tape handles from one depth-recurrent forward.
#[derive(Debug, Clone)]
pub struct RecurrentVars {
    pub logits: Var,
    /// `h[0..=N]`
    pub hidden: Vec<Var>,
    /// block deltas `m[0..N]`
    pub deltas: Vec<Var>,
    /// one cell application per layer
    pub steps: Vec<StepVars>,
}

/// Depth-recurrent forward on a tape.
///
/// `cells` holds either one bound cell shared by every layer, or one per layer
/// (used to isolate a single layer's contribution in tests).
pub fn depth_forward_on(
    tape: &mut Tape,
    bb: &BackboneVars,
    cells: &[BoundCell],
    tokens: &[usize],
) -> Result<RecurrentVars, RecurrenceError> {
    let n = bb.config().n_layers;
    if cells.len() != 1 && cells.len() != n {
        return Err(RecurrenceError::Schedule {
            layers: n,
            got: cells.len(),
        });
    }
    let mut h = backbone::embed_on(tape, bb, tokens)?;
    let d = bb.config().d_model;
    let mut v = tape.constant(Tensor::zeros(&[tokens.len(), d]));
    let mut out = RecurrentVars {
        logits: h,
        hidden: vec![h],
        deltas: Vec::with_capacity(n),
        steps: Vec::with_capacity(n),
    };
    for i in 0..n {
        let cell = if cells.len() == 1 { &cells[0] } else { &cells[i] };
        let m = backbone::layer_forward_on(tape, bb, i, h)?;
        let step = cell.step(tape, m, v)?;
        v = step.v_next;
        h = tape.add(h, v)?;
        out.hidden.push(h);
        out.deltas.push(m);
        out.steps.push(step);
    }
    out.logits = backbone::predict_head_on(tape, bb, h)?;
    Ok(out)
}

fn check_widths(backbone: &BackboneWeights, mode: &CellMode) -> Result<(), RecurrenceError> {
    if let Some(d) = mode.d_model() {
        if d != backbone.config.d_model {
            return Err(RecurrenceError::Config {
                cell: d,
                backbone: backbone.config.d_model,
            });
        }
    }
    Ok(())
}

/// One row of a depth trace: what happened at `layer` for `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub position: usize,
    pub layer: usize,
    pub g_a_mean: Option<f64>,
    pub g_a_min: Option<f64>,
    pub g_a_max: Option<f64>,
    pub g_e: Option<f64>,
    /// lens probability of the position's final output token, read from `h[layer+1]`
    pub lens_prob: f64,
    pub lens_top_token: usize,
}

/// Per-position, per-layer gates and logit-lens readouts of one forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrace {
    pub n_layers: usize,
    pub records: Vec<LayerRecord>,
    /// `h[0..=N]`, each `[seq × d]`
    pub hidden: Vec<Tensor>,
    /// final argmax token per position
    pub output_tokens: Vec<usize>,
}

impl DepthTrace {
    pub fn at(&self, position: usize, layer: usize) -> &LayerRecord {
        &self.records[position * self.n_layers + layer]
    }
}

pub fn depth_forward(
    tokens: &[usize],
    backbone: &BackboneWeights,
    mode: &CellMode,
) -> Result<(Tensor, DepthTrace), RecurrenceError> {
    check_widths(backbone, mode)?;
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape);
    let cell = mode.bind(&mut tape);
    let fwd = depth_forward_on(&mut tape, &bb, &[cell], tokens)?;
    let logits = tape.value(fwd.logits).clone();
    let hidden: Vec<Tensor> = fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect();
    let output_tokens: Vec<usize> = (0..logits.rows()).map(|r| backbone::argmax(logits.row(r))).collect();
    let n = backbone.config.n_layers;
    let mut lens = Vec::with_capacity(n);
    for h in &hidden[1..] {
        lens.push(backbone::predict_head(h, backbone)?);
    }
    let pinned = matches!(mode, CellMode::ForcedVanilla);
    let mut records = Vec::with_capacity(tokens.len() * n);
    for (t, &out_tok) in output_tokens.iter().enumerate() {
        for (i, step) in fwd.steps.iter().enumerate() {
            let (g_a_mean, g_a_min, g_a_max) = match step.g_a {
                Some(g) => {
                    let row = tape.value(g).row(t);
                    let mean = row.iter().sum::<f64>() / row.len() as f64;
                    let mn = row.iter().copied().fold(f64::INFINITY, f64::min);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (Some(mean), Some(mn), Some(mx))
                }
                None => (None, None, None),
            };
            let g_e = match step.g_e {
                Some(g) => Some(tape.value(g).data()[t]),
                None if pinned => Some(1.0),
                None => None,
            };
            let probs = backbone::softmax(lens[i].row(t));
            records.push(LayerRecord {
                position: t,
                layer: i,
                g_a_mean,
                g_a_min,
                g_a_max,
                g_e,
                lens_prob: probs[out_tok],
                lens_top_token: backbone::argmax(&probs),
            });
        }
    }
    Ok((
        logits,
        DepthTrace {
            n_layers: n,
            records,
            hidden,
            output_tokens,
        },
    ))
}

/// Logits of a depth-recurrent forward without building a trace.
pub fn depth_logits(tokens: &[usize], backbone: &BackboneWeights, mode: &CellMode) -> Result<Tensor, RecurrenceError> {
    check_widths(backbone, mode)?;
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape);
    let cell = mode.bind(&mut tape);
    let fwd = depth_forward_on(&mut tape, &bb, &[cell], tokens)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Lens distribution at every layer for one position: `softmax(head(h[i+1]))`, `i = 0..N`.
pub fn lens_distributions(
    hidden: &[Tensor],
    position: usize,
    backbone: &BackboneWeights,
) -> Result<Vec<Vec<f64>>, RecurrenceError> {
    hidden[1..]
        .iter()
        .map(|h| {
            let logits = backbone::predict_head(&Tensor::vector(h.row(position).to_vec()), backbone)?;
            Ok(backbone::softmax(logits.data()))
        })
        .collect()
}

/// Probability of `token` at each layer for one position.
pub fn logit_lens_trace(
    hidden: &[Tensor],
    position: usize,
    token: usize,
    backbone: &BackboneWeights,
) -> Result<Vec<f64>, RecurrenceError> {
    let vocab = backbone.config.vocab;
    if token >= vocab {
        return Err(RecurrenceError::Token { token, vocab });
    }
    Ok(lens_distributions(hidden, position, backbone)?
        .into_iter()
        .map(|p| p[token])
        .collect())
}

/// Column order of the exported trace CSV.
pub const TRACE_COLUMNS: [&str; 9] = [
    "prompt_id",
    "position",
    "layer",
    "g_a_mean",
    "g_a_min",
    "g_a_max",
    "g_e",
    "lens_prob",
    "lens_top_token",
];

/// Appends trace rows for `prompt_id`. Absent gates are written as empty fields.
pub fn write_trace_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    prompt_id: &str,
    trace: &DepthTrace,
) -> Result<(), csv::Error> {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.12}")).unwrap_or_default();
    for r in &trace.records {
        w.write_record([
            prompt_id.to_string(),
            r.position.to_string(),
            r.layer.to_string(),
            opt(r.g_a_mean),
            opt(r.g_a_min),
            opt(r.g_a_max),
            opt(r.g_e),
            format!("{:.12}", r.lens_prob),
            r.lens_top_token.to_string(),
        ])?;
    }
    Ok(())
}
