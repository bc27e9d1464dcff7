//! Adam with bias correction, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::NetworkParams;

/// Optimizer hyper-parameters plus per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// Round parameters and moments to `f32` after every update, so that a
    /// state saved in a 32-bit checkpoint resumes exactly.
    pub round_to_f32: bool,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            round_to_f32: false,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

fn round(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Updates every parameter from its stored gradient.
pub fn adam_step(params: &mut NetworkParams, state: &mut AdamState) -> Result<()> {
    adam_step_filtered(params, state, |_| true)
}

/// Updates the parameters accepted by `select`; the rest stay untouched.
pub fn adam_step_filtered(
    params: &mut NetworkParams,
    state: &mut AdamState,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", state.lr)));
    }
    for (name, p) in params.iter() {
        if select(name) && p.grad().is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (name, p) in params.iter_mut() {
        if !select(name) {
            continue;
        }
        let n = p.numel();
        let g = p.take_grad().expect("checked above");
        let m = state.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::shape("adam_step", format!("moment size mismatch for `{name}`")));
        }
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        }
        if state.round_to_f32 {
            round(m);
            round(v);
        }
        let data = p.data_mut();
        for i in 0..n {
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= state.lr * mh / (vh.sqrt() + state.epsilon);
        }
        if state.round_to_f32 {
            round(data);
        }
    }
    Ok(())
}

/// Scales all stored gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(params: &mut NetworkParams, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(mut g) = p.take_grad() {
                g.iter_mut().for_each(|x| *x *= k);
                p.set_grad(g).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(x: f64) -> NetworkParams {
        let mut p = NetworkParams::new();
        p.insert("x", Tensor::scalar(x)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = single(1.5);
        let mut s = AdamState::new(0.1);
        p.get_mut("x").unwrap().set_grad(vec![0.0]).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = single(0.0);
            let mut s = AdamState::new(1e-3);
            p.get_mut("x").unwrap().set_grad(vec![g]).unwrap();
            adam_step(&mut p, &mut s).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = single(0.0);
        let mut s = AdamState::new(1e-3);
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::MissingGradient(_))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = single(1.0);
        let mut s = AdamState::new(0.05);
        let mut reached = None;
        for k in 0..500 {
            let x = p.get("x").unwrap().data()[0];
            if x.abs() < 1e-3 {
                reached = Some(k);
                break;
            }
            p.get_mut("x").unwrap().set_grad(vec![2.0 * x]).unwrap();
            adam_step(&mut p, &mut s).unwrap();
        }
        assert!(reached.is_some(), "x = {}", p.get("x").unwrap().data()[0]);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut p = NetworkParams::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.get_mut("a").unwrap().set_grad(vec![3.0, 4.0]).unwrap();
        p.get_mut("b").unwrap().set_grad(vec![12.0]).unwrap();
        let n = clip_global_norm(&mut p, 5.0);
        assert_eq!(n, 13.0);
        let a = p.get("a").unwrap().grad().unwrap();
        assert!((a[0] - 15.0 / 13.0).abs() < 1e-15);
    }
}
