//! Two-input-one-output recurrent cells over depth.
//!
//! Each cell maps the current block delta `m` and the previous recurrent state
//! `v` to the next recurrent state. Inputs are either single vectors `[d]` or
//! matrices `[rows × d]` whose rows are independent positions.
//!
//! Matrices act on row vectors: `x · W`, so a `[a × b]` weight maps width `a`
//! to width `b`.

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Learnable weights of the dual-gated unit. There are no bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DgDpuParams {
    /// `[d × d]`, drives the per-coordinate constraint gate
    pub w_a: Tensor,
    /// `[2d × d]`, first projection of `[m, v]` in the correction gate
    pub w_e1: Tensor,
    /// `[d × 1]`, collapses the correction projection to one scalar
    pub w_e2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DgDpuVars {
    pub w_a: Var,
    pub w_e1: Var,
    pub w_e2: Var,
}

impl DgDpuVars {
    /// Handles in the order of [`DgDpuParams::tensors_mut`].
    pub fn params(&self) -> [Var; 3] {
        [self.w_a, self.w_e1, self.w_e2]
    }
}

impl DgDpuParams {
    pub fn new(w_a: Tensor, w_e1: Tensor, w_e2: Tensor) -> Result<Self, NumericsError> {
        let d = w_a.shape().first().copied().unwrap_or(0);
        let expect = [
            ("w_a", &w_a, vec![d, d]),
            ("w_e1", &w_e1, vec![2 * d, d]),
            ("w_e2", &w_e2, vec![d, 1]),
        ];
        for (_, t, shape) in &expect {
            if t.shape() != shape.as_slice() {
                return Err(NumericsError::Shape {
                    op: "dgdpu_params",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        Ok(Self {
            w_a: w_a.with_requires_grad(true),
            w_e1: w_e1.with_requires_grad(true),
            w_e2: w_e2.with_requires_grad(true),
        })
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(
            Tensor::zeros(&[d, d]),
            Tensor::zeros(&[2 * d, d]),
            Tensor::zeros(&[d, 1]),
        )
        .expect("consistent shapes")
    }

    pub fn xavier(d: usize, rng: &mut Rng) -> Self {
        Self::new(
            rng::xavier_uniform(rng, d, d),
            rng::xavier_uniform(rng, 2 * d, d),
            rng::xavier_uniform(rng, d, 1),
        )
        .expect("consistent shapes")
    }

    /// Xavier init with `w_e2` replaced by a positive constant so the
    /// correction gate starts near `sigmoid(target_logit)` for inputs whose
    /// entries have root-mean-square `input_rms`.
    pub fn near_vanilla(d: usize, rng: &mut Rng, input_rms: f64, target_logit: f64) -> Self {
        let mut p = Self::xavier(d, rng);
        // pre-activations of w_e1 are ~N(0, s^2) with s^2 = 2d * rms^2 * Var(w), Var(w) = 2/(3d)
        let s = input_rms * (4.0f64 / 3.0).sqrt();
        let mean_relu = s / (2.0 * std::f64::consts::PI).sqrt();
        let c = if mean_relu > 0.0 {
            target_logit / (d as f64 * mean_relu)
        } else {
            0.0
        };
        p.w_e2.data_mut().iter_mut().for_each(|w| *w = c);
        p
    }

    pub fn d_model(&self) -> usize {
        self.w_a.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.w_a.len() + self.w_e1.len() + self.w_e2.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> DgDpuVars {
        DgDpuVars {
            w_a: tape.leaf(&self.w_a),
            w_e1: tape.leaf(&self.w_e1),
            w_e2: tape.leaf(&self.w_e2),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_a", &self.w_a), ("w_e1", &self.w_e1), ("w_e2", &self.w_e2)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_a, &mut self.w_e1, &mut self.w_e2]
    }

    pub(crate) fn from_named(mut named: Vec<(String, Tensor)>) -> Result<Self, NumericsError> {
        let mut take = |name: &str| {
            named
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| named.swap_remove(i).1)
                .ok_or_else(|| NumericsError::Contract(format!("missing tensor {name}")))
        };
        let (w_a, w_e1, w_e2) = (take("w_a")?, take("w_e1")?, take("w_e2")?);
        Self::new(w_a, w_e1, w_e2)
    }

    pub fn absorb_grads(&mut self, grads: &crate::numerics::Gradients, vars: &DgDpuVars) -> Result<(), NumericsError> {
        for (t, v) in [(&mut self.w_a, vars.w_a), (&mut self.w_e1, vars.w_e1), (&mut self.w_e2, vars.w_e2)] {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Canonical GRU weights with input `m` and state `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruVars {
    /// Handles in the order of [`GruParams::tensors_mut`].
    pub fn params(&self) -> [Var; 9] {
        [self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h]
    }
}

impl GruParams {
    pub fn zeros(d: usize) -> Self {
        let m = || Tensor::zeros(&[d, d]).with_requires_grad(true);
        let b = || Tensor::zeros(&[d]).with_requires_grad(true);
        Self {
            w_z: m(),
            w_r: m(),
            w_h: m(),
            u_z: m(),
            u_r: m(),
            u_h: m(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Xavier-uniform matrices, zero biases.
    pub fn xavier(d: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d);
        for t in p.tensors_mut().into_iter().take(6) {
            *t = rng::xavier_uniform(rng, d, d).with_requires_grad(true);
        }
        p
    }

    pub fn d_model(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let ts = [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ];
        GRU_NAMES.iter().copied().zip(ts).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub(crate) fn from_named(named: Vec<(String, Tensor)>) -> Result<Self, NumericsError> {
        let first = named
            .iter()
            .find(|(n, _)| n == "w_z")
            .ok_or_else(|| NumericsError::Contract("missing tensor w_z".into()))?;
        let d = first.1.shape().first().copied().unwrap_or(0);
        let mut p = Self::zeros(d);
        for (name, slot) in GRU_NAMES.iter().zip(p.tensors_mut()) {
            let t = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| NumericsError::Contract(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(NumericsError::Shape {
                    op: "gru_params",
                    lhs: t.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            *slot = t.with_requires_grad(true);
        }
        Ok(p)
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            w_z: tape.leaf(&self.w_z),
            w_r: tape.leaf(&self.w_r),
            w_h: tape.leaf(&self.w_h),
            u_z: tape.leaf(&self.u_z),
            u_r: tape.leaf(&self.u_r),
            u_h: tape.leaf(&self.u_h),
            b_z: tape.leaf(&self.b_z),
            b_r: tape.leaf(&self.b_r),
            b_h: tape.leaf(&self.b_h),
        }
    }

    fn vars_in_order(v: &GruVars) -> [Var; 9] {
        v.params()
    }

    pub fn absorb_grads(&mut self, grads: &crate::numerics::Gradients, vars: &GruVars) -> Result<(), NumericsError> {
        for (t, v) in self.tensors_mut().into_iter().zip(Self::vars_in_order(vars)) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Single-gate variants of the dual-gated unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    ConstraintOnly,
    CorrectionOnly,
}

/// Tape handles produced by one cell application.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub v_next: Var,
    pub g_a: Option<Var>,
    pub g_e: Option<Var>,
    pub c_tilde: Option<Var>,
}

/// Per-coordinate gate `g_a = sigmoid((m - v) · W_a)` and the blended state
/// `c = g_a ⊙ v + (1 - g_a) ⊙ m`, evaluated as `m + g_a ⊙ (v - m)`.
pub fn constraint_gate_on(
    tape: &mut Tape,
    m: Var,
    v: Var,
    w: &DgDpuVars,
) -> Result<(Var, Var), NumericsError> {
    let delta = tape.sub(m, v)?;
    let pre = tape.matmul(delta, w.w_a)?;
    let g_a = tape.sigmoid(pre)?;
    let back = tape.affine(delta, -1.0, 0.0)?;
    let shift = tape.mul(g_a, back)?;
    let c = tape.add(m, shift)?;
    Ok((g_a, c))
}

/// Scalar gate `g_e = sigmoid(ReLU([m, v] · W_e1) · W_e2)` per row.
pub fn correction_scalar_on(
    tape: &mut Tape,
    m: Var,
    v: Var,
    w: &DgDpuVars,
) -> Result<Var, NumericsError> {
    let joined = tape.concat(&[m, v])?;
    let hidden = tape.matmul(joined, w.w_e1)?;
    let hidden = tape.relu(hidden)?;
    let pre = tape.matmul(hidden, w.w_e2)?;
    tape.sigmoid(pre)
}

/// `base + g ⊗ (m - base)`: the scalar blend `g·m + (1-g)·base`, exact when `m == base`.
fn scalar_blend(tape: &mut Tape, g: Var, m: Var, base: Var) -> Result<Var, NumericsError> {
    let diff = tape.sub(m, base)?;
    let scaled = tape.scale_rows(diff, g)?;
    tape.add(base, scaled)
}

pub fn correction_gate_on(
    tape: &mut Tape,
    m: Var,
    v: Var,
    c_tilde: Var,
    w: &DgDpuVars,
) -> Result<(Var, Var), NumericsError> {
    let g_e = correction_scalar_on(tape, m, v, w)?;
    let v_next = scalar_blend(tape, g_e, m, c_tilde)?;
    Ok((g_e, v_next))
}

pub fn dgdpu_step_on(tape: &mut Tape, m: Var, v: Var, w: &DgDpuVars) -> Result<StepVars, NumericsError> {
    let (g_a, c) = constraint_gate_on(tape, m, v, w)?;
    let (g_e, v_next) = correction_gate_on(tape, m, v, c, w)?;
    Ok(StepVars {
        v_next,
        g_a: Some(g_a),
        g_e: Some(g_e),
        c_tilde: Some(c),
    })
}

/// Constraint-only keeps `c` as the next state; correction-only blends `m` with `v` directly.
pub fn ablated_step_on(
    tape: &mut Tape,
    kind: Ablation,
    m: Var,
    v: Var,
    w: &DgDpuVars,
) -> Result<StepVars, NumericsError> {
    match kind {
        Ablation::ConstraintOnly => {
            let (g_a, c) = constraint_gate_on(tape, m, v, w)?;
            Ok(StepVars {
                v_next: c,
                g_a: Some(g_a),
                g_e: None,
                c_tilde: Some(c),
            })
        }
        Ablation::CorrectionOnly => {
            let g_e = correction_scalar_on(tape, m, v, w)?;
            let v_next = scalar_blend(tape, g_e, m, v)?;
            Ok(StepVars {
                v_next,
                g_a: None,
                g_e: Some(g_e),
                c_tilde: None,
            })
        }
    }
}

fn gate_pre(tape: &mut Tape, m: Var, v: Var, w: Var, u: Var, b: Var) -> Result<Var, NumericsError> {
    let wm = tape.matmul(m, w)?;
    let uv = tape.matmul(v, u)?;
    let s = tape.add(wm, uv)?;
    add_bias(tape, s, b)
}

fn add_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var, NumericsError> {
    if tape.value(x).rank() == 1 {
        tape.add(x, b)
    } else {
        tape.add_row(x, b)
    }
}

pub fn gru_step_on(tape: &mut Tape, m: Var, v: Var, w: &GruVars) -> Result<Var, NumericsError> {
    let z = gate_pre(tape, m, v, w.w_z, w.u_z, w.b_z)?;
    let z = tape.sigmoid(z)?;
    let r = gate_pre(tape, m, v, w.w_r, w.u_r, w.b_r)?;
    let r = tape.sigmoid(r)?;
    let rv = tape.mul(r, v)?;
    let cand = gate_pre(tape, m, rv, w.w_h, w.u_h, w.b_h)?;
    let cand = tape.tanh(cand)?;
    // (1 - z) ⊙ v + z ⊙ cand  ==  v + z ⊙ (cand - v)
    let diff = tape.sub(cand, v)?;
    let step = tape.mul(z, diff)?;
    tape.add(v, step)
}

/// Values recorded from one dual-gated application.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTrace {
    pub g_a: Tensor,
    pub g_e: f64,
    pub c_tilde: Tensor,
}

fn check_vec(op: &'static str, t: &Tensor, d: usize) -> Result<(), NumericsError> {
    if t.shape() != [d] {
        return Err(NumericsError::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

fn const_inputs(tape: &mut Tape, inputs: &[&Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.constant((*t).clone())).collect()
}

/// Vector form of [`constraint_gate_on`]: returns `(g_a, c_tilde)`.
pub fn constraint_gate(m: &Tensor, v: &Tensor, p: &DgDpuParams) -> Result<(Tensor, Tensor), NumericsError> {
    let d = p.d_model();
    check_vec("constraint_gate", m, d)?;
    check_vec("constraint_gate", v, d)?;
    let mut tape = Tape::new();
    let w = p.bind(&mut tape);
    let x = const_inputs(&mut tape, &[m, v]);
    let (g_a, c) = constraint_gate_on(&mut tape, x[0], x[1], &w)?;
    Ok((tape.value(g_a).clone(), tape.value(c).clone()))
}

/// Vector form of [`correction_gate_on`]: returns `(g_e, v_next)`.
pub fn correction_gate(
    m: &Tensor,
    v: &Tensor,
    c_tilde: &Tensor,
    p: &DgDpuParams,
) -> Result<(f64, Tensor), NumericsError> {
    let d = p.d_model();
    for t in [m, v, c_tilde] {
        check_vec("correction_gate", t, d)?;
    }
    let mut tape = Tape::new();
    let w = p.bind(&mut tape);
    let x = const_inputs(&mut tape, &[m, v, c_tilde]);
    let (g_e, v_next) = correction_gate_on(&mut tape, x[0], x[1], x[2], &w)?;
    Ok((tape.value(g_e).item()?, tape.value(v_next).clone()))
}

pub fn dgdpu_step(m: &Tensor, v: &Tensor, p: &DgDpuParams) -> Result<(Tensor, CellTrace), NumericsError> {
    let d = p.d_model();
    check_vec("dgdpu_step", m, d)?;
    check_vec("dgdpu_step", v, d)?;
    let mut tape = Tape::new();
    let w = p.bind(&mut tape);
    let x = const_inputs(&mut tape, &[m, v]);
    let s = dgdpu_step_on(&mut tape, x[0], x[1], &w)?;
    Ok(read_step(&tape, &s))
}

pub fn ablated_step(
    kind: Ablation,
    m: &Tensor,
    v: &Tensor,
    p: &DgDpuParams,
) -> Result<(Tensor, CellTrace), NumericsError> {
    let d = p.d_model();
    check_vec("ablated_step", m, d)?;
    check_vec("ablated_step", v, d)?;
    let mut tape = Tape::new();
    let w = p.bind(&mut tape);
    let x = const_inputs(&mut tape, &[m, v]);
    let s = ablated_step_on(&mut tape, kind, x[0], x[1], &w)?;
    Ok(read_step(&tape, &s))
}

/// Collects a vector-form step. Missing gates are reported at their degenerate
/// values: `g_a = 1` when the constraint gate is absent (c_tilde = v), and
/// `g_e = 0` when the correction gate is absent.
fn read_step(tape: &Tape, s: &StepVars) -> (Tensor, CellTrace) {
    let v_next = tape.value(s.v_next).clone();
    let d = v_next.len();
    let trace = CellTrace {
        g_a: s
            .g_a
            .map(|g| tape.value(g).clone())
            .unwrap_or_else(|| Tensor::vector(vec![1.0; d])),
        g_e: s.g_e.map(|g| tape.value(g).data()[0]).unwrap_or(0.0),
        c_tilde: s
            .c_tilde
            .map(|c| tape.value(c).clone())
            .unwrap_or_else(|| v_next.clone()),
    };
    (v_next, trace)
}

pub fn gru_step(m: &Tensor, v: &Tensor, p: &GruParams) -> Result<Tensor, NumericsError> {
    let d = p.d_model();
    check_vec("gru_step", m, d)?;
    check_vec("gru_step", v, d)?;
    let mut tape = Tape::new();
    let w = p.bind(&mut tape);
    let x = const_inputs(&mut tape, &[m, v]);
    let out = gru_step_on(&mut tape, x[0], x[1], &w)?;
    Ok(tape.value(out).clone())
}
