use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters. Weight decay is decoupled from the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Moment buffers and step counter for one ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let first_moment: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
        }
    }
}

/// One Adam update over `params`, in the same order the state was built with.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if p.numel() != state.first_moment[i].len() {
            return Err(Error::dim("adam_step", p.shape(), &[state.first_moment[i].len()]));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lr, b1, b2, eps, wd) = (
        state.learning_rate,
        state.beta1,
        state.beta2,
        state.epsilon,
        state.weight_decay,
    );
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut w = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap().with_grad();
        w.set_grad(vec![0.0; 3]).unwrap();
        let before = w.data().to_vec();
        let mut st = AdamState::new([&w], cfg(1e-3, 0.0));
        adam_step(&mut [&mut w], &mut st).unwrap();
        assert_eq!(w.data(), &before[..]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap().with_grad();
        w.set_grad(vec![2.5, -0.3, 40.0]).unwrap();
        let mut st = AdamState::new([&w], cfg(1e-2, 0.0));
        adam_step(&mut [&mut w], &mut st).unwrap();
        for (x, s) in w.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-2).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut w = Tensor::vector(vec![0.0]).unwrap().with_grad();
        let mut st = AdamState::new([&w], cfg(0.1, 0.0));
        for _ in 0..100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            w.set_grad(vec![g]).unwrap();
            adam_step(&mut [&mut w], &mut st).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.1, "w = {}", w.data()[0]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut w = Tensor::vector(vec![1.0]).unwrap().with_grad();
        let mut st = AdamState::new([&w], cfg(0.1, 0.0));
        assert!(matches!(adam_step(&mut [&mut w], &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_given_inputs() {
        let run = || {
            let mut w = Tensor::vector(vec![0.3, -0.7]).unwrap().with_grad();
            let mut st = AdamState::new([&w], cfg(1e-3, 5e-4));
            for k in 0..5 {
                w.set_grad(vec![0.1 * k as f64, -0.2]).unwrap();
                adam_step(&mut [&mut w], &mut st).unwrap();
            }
            (w.data().to_vec(), st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
