use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every entry of a [`ParamStore`], in store
/// order. Buffers get accumulators too; they are simply never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value().shape().to_vec()))
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_matches(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer state holds {} entries, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.value().shape() || v.shape() != p.value().shape() {
                return Err(Error::shape(
                    "optimizer state",
                    p.value().shape(),
                    m.shape(),
                ));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.check_matches(store)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in store.trainable_ids() {
        let i = id.index();
        let (value, grad) = store.get_mut(id).value_and_grad_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
