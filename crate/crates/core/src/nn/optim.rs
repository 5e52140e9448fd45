use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum OptimizerRule {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        beta1: f64,
        beta2: f64,
        eps: f64,
        amsgrad: bool,
    },
}

impl OptimizerRule {
    pub fn sgd(lr: f32) -> Self {
        Self::Sgd { lr }
    }

    /// Adam with β = (0.9, 0.999), eps 1e-8 and AMSGrad.
    pub fn adam(lr: f32) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    vmax: Vec<f64>,
}

/// Parameter-wise first-order optimizer.
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: OptimizerRule,
    moments: Vec<Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new(rule: OptimizerRule) -> Self {
        Self {
            rule,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn rule(&self) -> OptimizerRule {
        self.rule
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads` (index-aligned).
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(invalid(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if !self.moments.is_empty()
            && (self.moments.len() != params.len()
                || self.moments.iter().zip(params.iter()).any(|(m, p)| m.m.len() != p.len()))
        {
            return Err(invalid("optimizer state was built for a different parameter set"));
        }
        self.step += 1;
        match self.rule {
            OptimizerRule::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerRule::Adam {
                lr,
                beta1,
                beta2,
                eps,
                amsgrad,
            } => {
                if self.moments.is_empty() {
                    self.moments = params
                        .iter()
                        .map(|p| Moments {
                            m: vec![0.0; p.len()],
                            v: vec![0.0; p.len()],
                            vmax: vec![0.0; p.len()],
                        })
                        .collect();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let lr = lr as f64;
                for ((p, g), st) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
                    for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d as f64;
                        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * d;
                        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * d * d;
                        let v = if amsgrad {
                            st.vmax[i] = st.vmax[i].max(st.v[i]);
                            st.vmax[i]
                        } else {
                            st.v[i]
                        };
                        let denom = v.sqrt() / bc2.sqrt() + eps;
                        *x = (*x as f64 - lr / bc1 * st.m[i] / denom) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
