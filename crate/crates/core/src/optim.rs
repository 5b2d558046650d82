//! Adam optimizer, learning-rate decay and dropout mask sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::rng::SplitRng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over all parameters. `names` is consulted
/// only for diagnostics when a gradient is not finite.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::Contract(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr <= 0.0 {
        return Err(CoreError::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("<unnamed>");
            return Err(CoreError::Numeric(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for e in 0..params[i].len() {
            let g = grads[i].data()[e];
            let me = state.beta1 * m.data()[e] + (1.0 - state.beta1) * g;
            let ve = state.beta2 * v.data()[e] + (1.0 - state.beta2) * g * g;
            m.data_mut()[e] = me;
            v.data_mut()[e] = ve;
            let m_hat = me / bc1;
            let v_hat = ve / bc2;
            params[i].data_mut()[e] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// lr = lr0 / (1 + decay * iterations).
pub fn decayed_lr(lr0: f64, decay: f64, iterations: u64) -> f64 {
    lr0 / (1.0 + decay * iterations as f64)
}

/// Inverted-dropout mask: entries are 0 or 1/(1-rate), expected mean 1.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut SplitRng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        if rng.uniform() < rate {
            0.0
        } else {
            keep
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr_regardless_of_grad_scale() {
        // At t=1 the bias-corrected update is lr * g / (|g| + eps) ~ lr * sign(g).
        let mut params = vec![Matrix::filled(1, 1, 1.0)];
        let grads = vec![Matrix::filled(1, 1, 0.1)];
        let names = vec!["w".to_string()];
        let mut state = AdamState::new(&[(1, 1)]);
        adam_step(&mut params, &grads, &names, &mut state, 0.002).unwrap();
        let delta = params[0].at(0, 0) - 1.0;
        assert!((delta + 0.002).abs() < 1e-6, "delta was {delta}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Matrix::from_fn(2, 2, |r, c| (r + c) as f64)];
        let before = params[0].clone();
        let grads = vec![Matrix::zeros(2, 2)];
        let names = vec!["w".to_string()];
        let mut state = AdamState::new(&[(2, 2)]);
        adam_step(&mut params, &grads, &names, &mut state, 0.002).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = vec![Matrix::zeros(1, 1)];
        let mut bad = Matrix::zeros(1, 1);
        bad.data_mut()[0] = f64::NAN;
        let names = vec!["lstm.encoder.wx".to_string()];
        let mut state = AdamState::new(&[(1, 1)]);
        let err = adam_step(&mut params, &[bad], &names, &mut state, 0.002).unwrap_err();
        assert!(format!("{err}").contains("lstm.encoder.wx"));
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let run = || {
            let mut rng = SplitRng::new(11);
            let mut params = vec![Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64 * 0.1)];
            let names = vec!["w".to_string()];
            let mut state = AdamState::new(&[(3, 3)]);
            for step in 0..20u64 {
                let grads = vec![Matrix::from_fn(3, 3, |_, _| rng.uniform() - 0.5)];
                let lr = decayed_lr(0.002, 0.002, step);
                adam_step(&mut params, &grads, &names, &mut state, lr).unwrap();
            }
            params[0].data().to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn decayed_lr_formula() {
        assert_eq!(decayed_lr(0.002, 0.002, 0), 0.002);
        assert!((decayed_lr(0.002, 0.002, 1) - 0.002 / 1.002).abs() < 1e-15);
        for k in 0..10 {
            assert_eq!(decayed_lr(0.5, 0.0, k), 0.5);
        }
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let lr = decayed_lr(0.01, 0.1, k);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn dropout_mask_contract() {
        let mut rng = SplitRng::new(5);
        let zero = dropout_mask(4, 4, 0.0, &mut rng).unwrap();
        assert!(zero.data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask(2, 2, 1.0, &mut rng).is_err());
        assert!(dropout_mask(2, 2, -0.1, &mut rng).is_err());

        let mask = dropout_mask(10, 10, 0.2, &mut rng).unwrap();
        let scale = 1.0 / 0.8;
        assert!(mask.data().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn dropout_mask_mean_near_one() {
        let mut rng = SplitRng::new(9);
        let mask = dropout_mask(100, 1000, 0.2, &mut rng).unwrap();
        let mean = mask.sum() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean was {mean}");
    }
}
