//! Seeded gradient checks over the cells and the full depth recurrence.
//!
//! Analytic gradients come from the tape; numeric ones from central
//! differences of the double-double reference forward.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneVars, BackboneWeights};
use crate::cells::{self, DgDpuParams, DgDpuVars, GruParams, GruVars};
use crate::numerics::{Dd, GradCheck, NumericsError, Real, Tape, Tensor, Var};
use crate::recurrence::{BoundCell, RecurrenceError};
use crate::reference::{self as reference, grad_check_reference, Arr, Backbone, CellRef};
use crate::rng::{self, Rng};
use crate::training::{self, LossMask, TrainSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub d: usize,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(analytic, numeric)` at the largest relative error
    pub worst: Option<(f64, f64)>,
}

impl CheckResult {
    fn new(name: &str, d: usize) -> Self {
        Self {
            name: name.into(),
            d,
            instances: 0,
            coordinates: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
        }
    }

    fn absorb(&mut self, g: GradCheck) {
        self.instances += 1;
        self.coordinates += g.coordinates;
        if self.worst.is_none() || g.max_rel_error > self.max_rel_error {
            self.max_rel_error = g.max_rel_error;
            self.worst = g.worst.map(|(_, _, a, n)| (a, n));
        }
        self.max_abs_error = self.max_abs_error.max(g.max_abs_error);
    }
}

/// `sum(w ⊙ x)` for a fixed random `w`, so no coordinate's gradient cancels by symmetry.
fn probe(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let w = tape.constant(w.clone());
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// Reference counterpart of [`probe`].
fn probe_ref(y: &[Dd], w: &Tensor) -> Dd {
    y.iter().zip(w.data()).fold(Dd::zero(), |s, (&a, &b)| s + a * Dd::new(b))
}

fn dg_vars(v: &[Var]) -> DgDpuVars {
    DgDpuVars {
        w_a: v[0],
        w_e1: v[1],
        w_e2: v[2],
    }
}

fn gru_vars(v: &[Var]) -> GruVars {
    GruVars {
        w_z: v[0],
        w_r: v[1],
        w_h: v[2],
        u_z: v[3],
        u_r: v[4],
        u_h: v[5],
        b_z: v[6],
        b_r: v[7],
        b_h: v[8],
    }
}

fn dg_tensors(p: &DgDpuParams) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

fn random_gru(d: usize, rng: &mut Rng) -> GruParams {
    let mut p = GruParams::xavier(d, rng);
    for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
        *b = rng::uniform(rng, &[d], 0.5);
    }
    p
}

/// Checks constraint gate, correction gate, full dual-gated step and GRU step
/// on `instances` random draws per width. Inputs and parameters are both checked.
pub fn cell_gradient_checks(
    seed: u64,
    instances: usize,
    dims: &[usize],
    step: f64,
) -> Result<Vec<CheckResult>, NumericsError> {
    let mut out = Vec::new();
    for &d in dims {
        let mut rng = rng::derive(seed, 0x6C00 + d as u64);
        let mut ca = CheckResult::new("constraint_gate", d);
        let mut ce = CheckResult::new("correction_gate", d);
        let mut st = CheckResult::new("dgdpu_step", d);
        let mut gr = CheckResult::new("gru_step", d);
        for _ in 0..instances {
            let m = rng::uniform(&mut rng, &[d], 1.0);
            let v = rng::uniform(&mut rng, &[d], 1.0);
            let c = rng::uniform(&mut rng, &[d], 1.0);
            let w1 = rng::uniform(&mut rng, &[d], 1.0);
            let w2 = rng::uniform(&mut rng, &[d], 1.0);
            let w3 = rng::uniform(&mut rng, &[1], 1.0);
            let p = DgDpuParams::xavier(d, &mut rng);
            let mut args = vec![m.clone(), v.clone()];
            args.extend(dg_tensors(&p));

            ca.absorb(grad_check_reference(
                |t, x| {
                    let (g_a, c) = cells::constraint_gate_on(t, x[0], x[1], &dg_vars(&x[2..]))?;
                    let a = probe(t, c, &w1)?;
                    let b = probe(t, g_a, &w2)?;
                    t.add(a, b)
                },
                |x| {
                    let (g_a, c) = reference::constraint_gate(&x[0].data, &x[1].data, &x[2]);
                    probe_ref(&c, &w1) + probe_ref(&g_a, &w2)
                },
                &args,
                step,
            )?);

            let mut ce_args = vec![m.clone(), v.clone(), c];
            ce_args.extend(dg_tensors(&p));
            ce.absorb(grad_check_reference(
                |t, x| {
                    let (g_e, v_next) = cells::correction_gate_on(t, x[0], x[1], x[2], &dg_vars(&x[3..]))?;
                    let a = probe(t, v_next, &w1)?;
                    let b = probe(t, g_e, &w3)?;
                    t.add(a, b)
                },
                |x| {
                    let (m, v, c) = (&x[0].data, &x[1].data, &x[2].data);
                    let g_e = reference::correction_scalar(m, v, &x[4], &x[5]);
                    let v_next: Vec<Dd> = c.iter().zip(m).map(|(&ci, &mi)| ci + g_e * (mi - ci)).collect();
                    probe_ref(&v_next, &w1) + probe_ref(&[g_e], &w3)
                },
                &ce_args,
                step,
            )?);

            st.absorb(grad_check_reference(
                |t, x| {
                    let s = cells::dgdpu_step_on(t, x[0], x[1], &dg_vars(&x[2..]))?;
                    probe(t, s.v_next, &w1)
                },
                |x| probe_ref(&reference::dgdpu_step(&x[0].data, &x[1].data, &x[2..]).0, &w1),
                &args,
                step,
            )?);

            let g = random_gru(d, &mut rng);
            let mut g_args = vec![m, v];
            g_args.extend(g.named().into_iter().map(|(_, t)| t.clone()));
            gr.absorb(grad_check_reference(
                |t, x| {
                    let v_next = cells::gru_step_on(t, x[0], x[1], &gru_vars(&x[2..]))?;
                    probe(t, v_next, &w1)
                },
                |x| probe_ref(&reference::gru_step(&x[0].data, &x[1].data, &x[2..]), &w1),
                &g_args,
                step,
            )?);
        }
        out.extend([ca, ce, st, gr]);
    }
    Ok(out)
}

/// Small backbone used by the recurrence check.
pub fn check_backbone_config(n_layers: usize, d: usize, seq: usize) -> BackboneConfig {
    BackboneConfig {
        n_layers,
        d_model: d,
        n_heads: if d % 2 == 0 { 2 } else { 1 },
        vocab: 11,
        max_seq: seq,
        ff_mult: 2,
    }
}

/// Next-token loss through the whole depth recurrence with a dual-gated cell,
/// checked against every backbone and cell parameter. `seq` counts input tokens.
pub fn recurrence_gradient_check(
    seed: u64,
    instances: usize,
    n_layers: usize,
    d: usize,
    seq: usize,
    step: f64,
) -> Result<CheckResult, RecurrenceError> {
    let cfg = check_backbone_config(n_layers, d, seq);
    let mut rng = rng::derive(seed, 0x2EC0 + d as u64);
    let mut res = CheckResult::new("recurrence", d);
    for _ in 0..instances {
        let bb = BackboneWeights::init(cfg, &mut rng)?;
        let cell = DgDpuParams::xavier(d, &mut rng);
        let tokens: Vec<usize> = (0..=seq)
            .map(|_| rand::Rng::random_range(&mut rng, 0..cfg.vocab))
            .collect();
        let sequence = TrainSequence {
            tokens,
            answer_start: seq,
        };
        let mut params: Vec<Tensor> = bb.tensors().into_iter().cloned().collect();
        let n_bb = params.len();
        params.extend(dg_tensors(&cell));
        let inputs = sequence.inputs();
        let targets = sequence.targets(LossMask::AllTokens);
        let g = grad_check_reference(
            |t, x| {
                let bv = BackboneVars::from_params(cfg, &x[..n_bb])?;
                let cell = BoundCell::Dgdpu(dg_vars(&x[n_bb..]));
                training::recurrent_loss_on(t, &bv, &[cell], &sequence, LossMask::AllTokens).map_err(|e| match e {
                    RecurrenceError::Numerics(n) => n,
                    other => NumericsError::Contract(other.to_string()),
                })
            },
            |x: &[Arr<Dd>]| {
                let bb = Backbone {
                    config: cfg,
                    params: &x[..n_bb],
                };
                let logits = reference::recurrent_logits(&bb, &[CellRef::Dgdpu(&x[n_bb..])], inputs);
                reference::cross_entropy(&logits, &targets)
            },
            &params,
            step,
        )?;
        res.absorb(g);
    }
    Ok(res)
}
