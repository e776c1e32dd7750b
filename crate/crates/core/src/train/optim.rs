use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam step from the accumulated `grad` of every parameter:
/// `theta -= lr * (wd * theta + m_hat / (sqrt(v_hat) + eps))`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!("optimizer state for {} tensors, store has {}", state.m.len(), store.len())));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, wd, eps) = (T::of(cfg.lr), T::of(cfg.weight_decay), T::of(cfg.adam_eps));
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!("optimizer state {:?} for parameter {:?}", m.shape(), p.value.shape())));
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, th) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * g[i];
            vd[i] = b2 * vd[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            *th = *th - lr * (wd * *th + m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
