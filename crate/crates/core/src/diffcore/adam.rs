use super::{Real, Tensor};
use crate::error::{MartError, Result};

/// Adam optimizer state with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub learning_rate: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate: T::of(learning_rate),
            weight_decay: T::of(weight_decay),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(3e-4, 1e-6)
    }
}

/// One Adam update over aligned parameter and gradient lists.
///
/// Weight decay is decoupled: `p -= lr·wd·p` happens before the moment update.
/// Moment buffers are allocated on the first call and must keep matching the
/// parameter shapes afterwards.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(MartError::dim(format!(
            "adam: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(MartError::dim(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.first_moment.is_empty() && state.step == 0 {
        state.first_moment = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    let aligned = state.first_moment.len() == params.len()
        && state
            .first_moment
            .iter()
            .zip(params.iter())
            .all(|(m, p)| m.len() == p.len());
    if !aligned {
        return Err(MartError::dim("adam: moment buffers do not match parameters"));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let (lr, wd, b1, b2, eps) = (
        state.learning_rate,
        state.weight_decay,
        state.beta1,
        state.beta2,
        state.epsilon,
    );
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= lr * wd * *w;
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0, 3.0]);
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::new(3e-4, 0.0);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first moment and second moment are both exactly 1,
        // so the update is lr / (1 + eps).
        let mut p = Tensor::scalar(0.5f64);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(3e-4, 0.0);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        let expected = 0.5 - 3e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increments_once_per_call() {
        let mut p = Tensor::scalar(0.0f32);
        let g = Tensor::scalar(0.1);
        let mut st = AdamState::default();
        for k in 1..=3 {
            adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
            assert_eq!(st.step, k);
        }
    }

    #[test]
    fn decay_shrinks_before_moment_update() {
        let mut p = Tensor::scalar(2.0f64);
        let g = Tensor::scalar(0.0);
        let mut st = AdamState::new(0.1, 0.5);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0f32; 3]);
        let g = Tensor::vector(vec![0.0f32; 2]);
        let err = adam_step(&mut [&mut p], &[&g], &mut AdamState::default()).unwrap_err();
        assert!(matches!(err, MartError::Dimension(_)));
    }
}
