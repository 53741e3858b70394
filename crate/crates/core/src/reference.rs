//! Scalar forward pass written directly over [`Real`], with no tape.
//!
//! Follows the backbone, the cells and the depth recurrence operation by
//! operation. Instantiated with [`Dd`] it is the finite-difference oracle for
//! the tape's gradients: rounding in a double-double loss is around 1e-31, so
//! central differences stay accurate even for coordinates whose gradient is
//! many orders of magnitude below the loss.

use rayon::prelude::*;

use crate::backbone::BackboneConfig;
use crate::numerics::{Dd, GradCheck, NumericsError, Real, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Finite-difference step for [`grad_check_reference`]. Truncation error
/// scales as `step²`, rounding as `1e-31 / step`.
pub const REFERENCE_STEP: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Dense array of reals; rank 0, 1 and 2 only.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Arr<R> {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| R::from_f64(x)).collect(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn row(&self, r: usize) -> &[R] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

type Rows<R> = Vec<Vec<R>>;

/// `x · w` for a row `x` of length `k` and `w` of shape `[k × n]`.
fn vec_mat<R: Real>(x: &[R], w: &Arr<R>) -> Vec<R> {
    let n = w.cols();
    let mut out = vec![R::zero(); n];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wk) in out.iter_mut().zip(w.row(k)) {
            *o = *o + xk * wk;
        }
    }
    out
}

fn rows_mat<R: Real>(x: &Rows<R>, w: &Arr<R>) -> Rows<R> {
    x.iter().map(|r| vec_mat(r, w)).collect()
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn relu<R: Real>(x: R) -> R {
    if x > R::zero() {
        x
    } else {
        R::zero()
    }
}

fn gelu<R: Real>(x: R) -> R {
    let u = R::from_f64(GELU_C) * (x + R::from_f64(0.044715) * x * x * x);
    R::from_f64(0.5) * x * (R::one() + u.tanh())
}

fn layer_norm<R: Real>(x: &[R], gain: &Arr<R>, bias: &Arr<R>) -> Vec<R> {
    let n = R::from_f64(x.len() as f64);
    let mean = x.iter().fold(R::zero(), |s, &u| s + u) / n;
    let var = x.iter().fold(R::zero(), |s, &u| s + (u - mean) * (u - mean)) / n;
    let inv = R::one() / (var + R::from_f64(LAYER_NORM_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, &u)| (u - mean) * inv * gain.data[j] + bias.data[j])
        .collect()
}

/// `(g_a, c_tilde)` for one row.
pub fn constraint_gate<R: Real>(m: &[R], v: &[R], w_a: &Arr<R>) -> (Vec<R>, Vec<R>) {
    let delta: Vec<R> = m.iter().zip(v).map(|(&a, &b)| a - b).collect();
    let g_a: Vec<R> = vec_mat(&delta, w_a).into_iter().map(sigmoid).collect();
    let c = m
        .iter()
        .zip(&g_a)
        .zip(&delta)
        .map(|((&mi, &g), &dl)| mi + g * (-dl))
        .collect();
    (g_a, c)
}

pub fn correction_scalar<R: Real>(m: &[R], v: &[R], w_e1: &Arr<R>, w_e2: &Arr<R>) -> R {
    let joined: Vec<R> = m.iter().chain(v).copied().collect();
    let hidden: Vec<R> = vec_mat(&joined, w_e1).into_iter().map(relu).collect();
    sigmoid(vec_mat(&hidden, w_e2)[0])
}

fn blend<R: Real>(g: R, m: &[R], base: &[R]) -> Vec<R> {
    base.iter().zip(m).map(|(&b, &x)| b + g * (x - b)).collect()
}

/// Dual-gated step on one row: `(v_next, g_a, g_e, c_tilde)`. `w` is `[W_a, W_e1, W_e2]`.
pub fn dgdpu_step<R: Real>(m: &[R], v: &[R], w: &[Arr<R>]) -> (Vec<R>, Vec<R>, R, Vec<R>) {
    let (g_a, c) = constraint_gate(m, v, &w[0]);
    let g_e = correction_scalar(m, v, &w[1], &w[2]);
    (blend(g_e, m, &c), g_a, g_e, c)
}

/// `w` in the order `W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h`.
pub fn gru_step<R: Real>(m: &[R], v: &[R], w: &[Arr<R>]) -> Vec<R> {
    let pre = |x: &[R], y: &[R], i: usize| -> Vec<R> {
        let s = add(&vec_mat(x, &w[i]), &vec_mat(y, &w[i + 3]));
        add(&s, &w[i + 6].data)
    };
    let z: Vec<R> = pre(m, v, 0).into_iter().map(sigmoid).collect();
    let r: Vec<R> = pre(m, v, 1).into_iter().map(sigmoid).collect();
    let rv: Vec<R> = r.iter().zip(v).map(|(&a, &b)| a * b).collect();
    let cand: Vec<R> = pre(m, &rv, 2).into_iter().map(Real::tanh).collect();
    v.iter()
        .zip(&z)
        .zip(&cand)
        .map(|((&vi, &zi), &ci)| vi + zi * (ci - vi))
        .collect()
}

/// Cell applied between layers, borrowing its parameters.
#[derive(Debug, Clone, Copy)]
pub enum CellRef<'a, R> {
    Vanilla,
    Dgdpu(&'a [Arr<R>]),
    Gru(&'a [Arr<R>]),
    ConstraintOnly(&'a [Arr<R>]),
    CorrectionOnly(&'a [Arr<R>]),
}

impl<R: Real> CellRef<'_, R> {
    pub fn step(&self, m: &[R], v: &[R]) -> Vec<R> {
        match self {
            CellRef::Vanilla => m.to_vec(),
            CellRef::Dgdpu(w) => dgdpu_step(m, v, w).0,
            CellRef::Gru(w) => gru_step(m, v, w),
            CellRef::ConstraintOnly(w) => constraint_gate(m, v, &w[0]).1,
            CellRef::CorrectionOnly(w) => blend(correction_scalar(m, v, &w[1], &w[2]), m, v),
        }
    }
}

/// Backbone tensors in the order of `BackboneWeights::named`.
pub struct Backbone<'a, R> {
    pub config: BackboneConfig,
    pub params: &'a [Arr<R>],
}

impl<R: Real> Backbone<'_, R> {
    fn layer(&self, i: usize, k: usize) -> &Arr<R> {
        &self.params[2 + 10 * i + k]
    }

    fn tail(&self, k: usize) -> &Arr<R> {
        &self.params[self.params.len() - 3 + k]
    }

    pub fn embed(&self, tokens: &[usize]) -> Rows<R> {
        tokens
            .iter()
            .enumerate()
            .map(|(t, &id)| add(self.params[0].row(id), self.params[1].row(t)))
            .collect()
    }

    /// `block_i(h) - h`, the attention delta plus the MLP delta.
    pub fn layer_delta(&self, i: usize, h: &Rows<R>) -> Rows<R> {
        let cfg = self.config;
        let x: Rows<R> = h.iter().map(|r| layer_norm(r, self.layer(i, 0), self.layer(i, 1))).collect();
        let q = rows_mat(&x, self.layer(i, 2));
        let k = rows_mat(&x, self.layer(i, 3));
        let v = rows_mat(&x, self.layer(i, 4));
        let dh = cfg.head_dim();
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let seq = h.len();
        let mut joined = vec![vec![R::zero(); cfg.d_model]; seq];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..seq {
                let scores: Vec<R> = (0..=t)
                    .map(|s| cols.clone().fold(R::zero(), |a, j| a + q[t][j] * k[s][j]) * scale)
                    .collect();
                let mx = scores.iter().copied().fold(scores[0], |a, b| if b > a { b } else { a });
                let e: Vec<R> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let z = e.iter().fold(R::zero(), |a, &b| a + b);
                for (s, &es) in e.iter().enumerate() {
                    let p = es / z;
                    for j in cols.clone() {
                        joined[t][j] = joined[t][j] + p * v[s][j];
                    }
                }
            }
        }
        let attn = rows_mat(&joined, self.layer(i, 5));
        let mid: Rows<R> = h.iter().zip(&attn).map(|(a, b)| add(a, b)).collect();
        let y: Rows<R> = mid.iter().map(|r| layer_norm(r, self.layer(i, 6), self.layer(i, 7))).collect();
        let hidden: Rows<R> = rows_mat(&y, self.layer(i, 8))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let mlp = rows_mat(&hidden, self.layer(i, 9));
        attn.iter().zip(&mlp).map(|(a, b)| add(a, b)).collect()
    }

    pub fn logits(&self, h: &Rows<R>) -> Rows<R> {
        h.iter()
            .map(|r| vec_mat(&layer_norm(r, self.tail(0), self.tail(1)), self.tail(2)))
            .collect()
    }
}

/// Mean next-token cross-entropy over rows with a target.
pub fn cross_entropy<R: Real>(logits: &Rows<R>, targets: &[Option<usize>]) -> R {
    let mut total = R::zero();
    let mut count = 0usize;
    for (row, target) in logits.iter().zip(targets) {
        if let Some(k) = *target {
            let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
            let z = row.iter().fold(R::zero(), |a, &u| a + (u - mx).exp());
            total = total + z.ln() - (row[k] - mx);
            count += 1;
        }
    }
    total / R::from_f64(count as f64)
}

/// Depth-recurrent forward from `v = 0`: at each layer `v = cell(m, v)`, `h += v`.
/// One cell is shared by every layer, or one is given per layer.
pub fn recurrent_logits<R: Real>(bb: &Backbone<'_, R>, cells: &[CellRef<'_, R>], tokens: &[usize]) -> Rows<R> {
    let mut h = bb.embed(tokens);
    let mut v = vec![vec![R::zero(); bb.config.d_model]; tokens.len()];
    for i in 0..bb.config.n_layers {
        let cell = if cells.len() == 1 { &cells[0] } else { &cells[i] };
        let m = bb.layer_delta(i, &h);
        v = m.iter().zip(&v).map(|(mr, vr)| cell.step(mr, vr)).collect();
        h = h.iter().zip(&v).map(|(a, b)| add(a, b)).collect();
    }
    bb.logits(&h)
}

/// Central differences of `reference` (double-double) against the tape gradients of `f`.
///
/// Both must compute the same function of `params`. The tape value and the
/// reference value at `params` must agree to 1e-9 relative, otherwise this
/// returns a contract error rather than comparing gradients of different functions.
pub fn grad_check_reference<F, G>(f: F, reference: G, params: &[Tensor], step: f64) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    G: Fn(&[Arr<Dd>]) -> Dd + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;

    let base: Vec<Arr<Dd>> = params.iter().map(Arr::from_tensor).collect();
    let ref_value = reference(&base).to_f64();
    if !ref_value.is_finite() || (ref_value - value).abs() > 1e-9 * (1.0 + value.abs()) {
        return Err(NumericsError::Contract(format!(
            "reference value {ref_value} differs from tape value {value}"
        )));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ci| (pi, ci)))
        .collect();
    let h = Dd::new(step);
    let numeric: Vec<f64> = coords
        .par_iter()
        .map_init(
            || base.clone(),
            |work, &(pi, ci)| {
                let orig = work[pi].data[ci];
                work[pi].data[ci] = orig + h;
                let up = reference(work);
                work[pi].data[ci] = orig - h;
                let down = reference(work);
                work[pi].data[ci] = orig;
                ((up - down) / (h + h)).to_f64()
            },
        )
        .collect();
    if numeric.iter().any(|n| !n.is_finite()) {
        return Err(NumericsError::NonFinite {
            op: "grad_check_reference",
        });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (&(pi, ci), &n) in coords.iter().zip(&numeric) {
        let a = grads.get(vars[pi]).expect("parameter leaves require grad")[ci];
        let abs = (a - n).abs();
        let rel = abs / (a.abs() + n.abs()).max(1e-8);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((pi, ci, a, n));
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.coordinates += 1;
    }
    Ok(report)
}
