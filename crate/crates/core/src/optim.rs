//! Adam with L2 regularization and patience-based early stopping.

use crate::error::{contract, Error, Result};
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        AdamState {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Classic coupled L2: `grad += lambda * param` for `W⁰` and `W¹`. The
/// hop coefficients are left alone.
pub fn l2_augment(grads: &mut ModelParams, params: &ModelParams, lambda: f64) {
    grads.w0.axpy(lambda, &params.w0);
    grads.w1.axpy(lambda, &params.w1);
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    let grad_groups = grads.groups();
    if grad_groups.len() != state.m.len()
        || grad_groups.iter().zip(&state.m).any(|(g, m)| g.len() != m.len())
    {
        return Err(contract("gradient shapes do not match optimizer state"));
    }
    if let Some(bad) = grad_groups.iter().flat_map(|g| g.iter()).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {bad}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = state.lr;
    for (((p, g), m), v) in params
        .groups_mut()
        .into_iter()
        .zip(grad_groups)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

/// Halts training after `patience` consecutive epochs without a strict
/// improvement in validation accuracy.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best_val: f64,
    best_epoch: Option<usize>,
    epochs_since_best: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_val: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_since_best: 0,
            epoch: 0,
        }
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    /// 1-based epoch of the best validation accuracy seen so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn epochs_since_best(&self) -> usize {
        self.epochs_since_best
    }

    /// Record this epoch's validation accuracy; `true` means stop now.
    pub fn should_stop(&mut self, val_acc: f64) -> bool {
        self.epoch += 1;
        if val_acc > self.best_val {
            self.best_val = val_acc;
            self.best_epoch = Some(self.epoch);
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.epochs_since_best >= self.patience
    }

    /// Whether the last recorded epoch set a new best.
    pub fn improved(&self) -> bool {
        self.best_epoch == Some(self.epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::DenseMatrix;

    fn scalar_params(w: f64) -> ModelParams {
        ModelParams {
            w0: DenseMatrix::from_rows(&[vec![w]]),
            w1: DenseMatrix::from_rows(&[vec![0.0]]),
            gamma: None,
        }
    }

    fn with_grad(g: f64) -> ModelParams {
        scalar_params(g)
    }

    /// Independent scalar recomputation of the Adam recurrence.
    fn scalar_adam(mut p: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powf(t));
            let vh = v / (1.0 - 0.999f64.powf(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(1.5);
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &with_grad(0.0), &mut st).unwrap();
        assert_eq!(p.w0.get(0, 0), 1.5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &with_grad(1.0), &mut st).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = -0.01 / (1.0 + 1e-8);
        assert!((p.w0.get(0, 0) - expect).abs() < 1e-16);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let mut p = scalar_params(0.3);
        let mut st = AdamState::new(&p, 0.01);
        for _ in 0..2 {
            adam_step(&mut p, &with_grad(0.7), &mut st).unwrap();
        }
        assert!((p.w0.get(0, 0) - scalar_adam(0.3, &[0.7, 0.7], 0.01)).abs() < 1e-12);
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn gradient_sequence_matches_oracle() {
        let seq = [0.5, -1.2, 3.0, 0.0, 1e-3, -0.4, 2.2];
        let mut p = scalar_params(-0.8);
        let mut st = AdamState::new(&p, 0.05);
        for &g in &seq {
            adam_step(&mut p, &with_grad(g), &mut st).unwrap();
        }
        assert!((p.w0.get(0, 0) - scalar_adam(-0.8, &seq, 0.05)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p, 0.01);
        let err = adam_step(&mut p, &with_grad(f64::NAN), &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn l2_cases() {
        let params = ModelParams {
            w0: DenseMatrix::from_rows(&[vec![2.0]]),
            w1: DenseMatrix::from_rows(&[vec![-4.0]]),
            gamma: Some([vec![3.0], vec![5.0]]),
        };
        let mut g = params.zeros_like();
        l2_augment(&mut g, &params, 0.0);
        assert_eq!(g, params.zeros_like());
        l2_augment(&mut g, &params, 5e-4);
        assert!((g.w0.get(0, 0) - 1e-3).abs() < 1e-18);
        assert!((g.w1.get(0, 0) + 2e-3).abs() < 1e-18);
        assert_eq!(g.gamma, Some([vec![0.0], vec![0.0]]));
    }

    #[test]
    fn stopper_monotone_never_stops() {
        let mut s = EarlyStopper::new(20);
        for e in 0..200 {
            assert!(!s.should_stop(e as f64 / 200.0));
        }
    }

    #[test]
    fn stopper_constant_stops_at_21st() {
        let mut s = EarlyStopper::new(20);
        for e in 1..=20 {
            assert!(!s.should_stop(0.5), "stopped early at {e}");
        }
        assert!(s.should_stop(0.5));
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn stopper_resets_on_improvement() {
        let mut s = EarlyStopper::new(20);
        let mut acc = 0.1;
        for e in 1..=200 {
            if e % 19 == 0 {
                acc += 0.001;
            }
            assert!(!s.should_stop(acc), "stopped at {e}");
            assert!(s.epochs_since_best() <= 20);
        }
    }

    #[test]
    fn stopper_ties_are_not_improvements() {
        let mut s = EarlyStopper::new(2);
        assert!(!s.should_stop(0.4));
        assert!(s.improved());
        assert!(!s.should_stop(0.4));
        assert!(!s.improved());
        assert!(s.should_stop(0.3));
    }
}
