use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a fixed list of tensors.
///
/// The parameter list passed to [`Optimizer::step`] must keep the same order
/// and shapes across calls; Adam moments are stored positionally.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the tensors' gradient buffers, then clears them.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NumericsError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NumericsError::Contract(
                "optimizer parameter list changed between steps".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.data_mut();
            for i in 0..data.len() {
                match self.kind {
                    OptimizerKind::Sgd => data[i] -= self.lr * g[i],
                    OptimizerKind::Adam => {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite { op: "optimizer" });
            }
            p.zero_grad();
        }
        Ok(())
    }
}
