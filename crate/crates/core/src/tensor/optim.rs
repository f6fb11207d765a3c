use super::Tensor;
use crate::error::{Error, Result};

/// Adam moment buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-3;

    /// Fresh state with zeroed moments shaped after `params`.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update over every parameter. Gradients are
/// consumed (reset to `None`) by the step.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::contract(format!("parameter {i} has no gradient")));
        }
        if state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::shape(format!(
                "optimizer moments for parameter {i} do not match shape {:?}",
                p.shape()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]).unwrap()];
        let before = params[0].data().to_vec();
        let mut state = AdamState::new(&params, 1e-3);
        for _ in 0..5 {
            params[0].set_grad(vec![0.0; 3]).unwrap();
            adam_step(&mut params, &mut state).unwrap();
        }
        assert_eq!(params[0].data(), before.as_slice());
        assert_eq!(state.t, 5);
    }

    #[test]
    fn first_step_from_fresh_state() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params, 1e-3);
        params[0].set_grad(vec![2.0]).unwrap();
        adam_step(&mut params, &mut state).unwrap();
        // m_hat = 2, v_hat = 4, step = 1e-3 * 2 / (2 + 1e-8)
        let expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((params[0].data()[0] - 0.999000000005).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params, 1e-3);
        assert!(matches!(
            adam_step(&mut params, &mut state),
            Err(Error::Contract(_))
        ));
        assert_eq!(state.t, 0);
    }
}
