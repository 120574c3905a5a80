use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Serializable optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Optimizer> {
        self.validate()?;
        Ok(Optimizer {
            config: self.clone(),
            state: BTreeMap::new(),
        })
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First-order optimizer with per-parameter moment buffers (adam only).
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of parameters that carry state buffers.
    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    pub fn state_shape_matches(&self, store: &ParamStore) -> bool {
        self.state
            .iter()
            .all(|(id, s)| store.contains(*id) && store.get(*id).requires_grad && s.m.len() == store.value(*id).len())
    }

    /// Updates every trainable parameter in place.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        let ids = store.trainable_ids();
        if ids.is_empty() {
            return Err(Error::NoTrainable);
        }
        for id in &ids {
            let Some(g) = grads.get(id) else {
                return Err(Error::MissingGradient(store.get(*id).name.clone()));
            };
            if g.shape() != store.value(*id).shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: store.value(*id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let cfg = &self.config;
        for id in ids {
            let g = grads[&id].data();
            let p = store.value_mut(id).data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= cfg.learning_rate * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.state.entry(id).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
                    for i in 0..g.len() {
                        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
                        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
        // drop state for parameters that were removed or frozen since
        self.state
            .retain(|id, _| store.contains(*id) && store.get(*id).requires_grad);
        Ok(())
    }
}
