use super::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`, decay only on weight matrices.
/// Nothing is modified when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "adamw: {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!(
            "adamw: learning rate {lr} is negative"
        )));
    }
    for ((id, p), g) in store.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adamw gradient", p.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient for parameter {} (#{})",
                p.name,
                id.index()
            )));
        }
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let bc1 = T::lit(1.0 - b1.powi(state.step as i32));
    let bc2 = T::lit(1.0 - b2.powi(state.step as i32));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let wd = if store.param(id).kind.decays() {
            T::lit(cfg.weight_decay)
        } else {
            T::zero()
        };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *theta -= lr * (mhat / (vhat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}
