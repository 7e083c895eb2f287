//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub skipped: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, skipped: 0 }
    }
}

/// One AdamW update. Returns `false` and leaves everything untouched when a
/// gradient is non-finite. Householder parameters are never decayed.
pub fn optimizer_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> bool {
    assert_eq!(grads.len(), store.len(), "one gradient per parameter");
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("non-finite gradient for '{}', step skipped ({} so far)", store.get(crate::params::ParamId(bad)).name, state.skipped);
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        assert_eq!(p.value.shape(), grads[i].shape(), "gradient shape for '{}'", p.name);
        let decay = if p.kind.decays() { lr * cfg.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = g.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
            let wf = w.as_f64();
            *w = T::of(wf - decay * wf - update);
        }
    }
    true
}

/// Learning rate at global step `epoch·steps_per_epoch + step`: linear ramp
/// from 0 over the warmup epochs, then cosine decay reaching 0 at the last
/// step.
pub fn lr_at(epoch: usize, step: usize, base_lr: f64, epochs: usize, warmup_epochs: usize, steps_per_epoch: usize) -> f64 {
    let spe = steps_per_epoch.max(1);
    let total = epochs * spe;
    let warm = warmup_epochs.min(epochs) * spe;
    let s = epoch * spe + step;
    if s < warm {
        return base_lr * s as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return base_lr;
    }
    let p = ((s - warm) as f64 / span as f64).min(1.0);
    base_lr * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn one(v: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_fn(&[1], |_| v), kind);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one(0.0, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        assert!(optimizer_step(&mut s, &[Tensor::from_fn(&[1], |_| 1.0)], &mut st, &cfg, 5e-3));
        let w = s.iter().next().unwrap().1.value.data()[0];
        assert!((w + 5e-3).abs() < 1e-10, "{w}");
    }

    #[test]
    fn zero_grad_no_decay_is_still() {
        let mut s = one(0.7, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        optimizer_step(&mut s, &[Tensor::zeros(&[1])], &mut st, &cfg, 0.1);
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamConfig { weight_decay: 0.1, ..Default::default() };
        let mut s = one(1.0, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        optimizer_step(&mut s, &[Tensor::zeros(&[1])], &mut st, &cfg, 0.1);
        assert!((s.iter().next().unwrap().1.value.data()[0] - 0.99).abs() < 1e-15);
        let mut h = one(1.0, ParamKind::Householder);
        let mut st = AdamState::new(&h);
        optimizer_step(&mut h, &[Tensor::zeros(&[1])], &mut st, &cfg, 0.1);
        assert_eq!(h.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_skips() {
        let mut s = one(1.0, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        assert!(!optimizer_step(&mut s, &[Tensor::from_fn(&[1], |_| f64::NAN)], &mut st, &AdamConfig::default(), 0.1));
        assert_eq!((st.skipped, st.step), (1, 0));
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let (lr, epochs, warm, spe) = (5e-3, 20, 5, 10);
        assert_eq!(lr_at(0, 0, lr, epochs, warm, spe), 0.0);
        assert!((lr_at(5, 0, lr, epochs, warm, spe) - lr).abs() < 1e-15);
        assert!(lr_at(19, 9, lr, epochs, warm, spe).abs() <= 1e-9 * lr);
        let before = lr_at(4, 9, lr, epochs, warm, spe);
        assert!((lr - before).abs() <= lr / spe as f64 + 1e-15);
    }
}
