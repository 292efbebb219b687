use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if !ok {
            return Err(TensorError::config("adam", format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
/// Moments are kept in `f64` so the update itself adds no rounding beyond
/// the final store into the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter tensor in place.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!("{} parameter tensors", params.len()),
            format!("{} gradients, {} moment buffers", grads.len(), state.m.len()),
        ));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!("tensor {i} with {} values", p.len()),
                format!("gradient of {} and moments of {}", g.len(), m.len()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            let gj = f64::from(g[j]);
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let step = hp.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            p[j] = (f64::from(p[j]) - step) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = vec![0.5f32, -1.25, 3.0];
        let before = w.clone();
        let mut st = AdamState::new([3]);
        for _ in 0..5 {
            adam_step(&mut [&mut w], &[vec![0.0; 3]], &mut st, &AdamParams::default()).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_closed_form() {
        let hp = AdamParams {
            lr: 0.1,
            ..AdamParams::default()
        };
        let mut w = vec![0.0f32];
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut w], &[vec![1.0]], &mut st, &hp).unwrap();
        let expected = -(0.1 / (1.0 + 1e-8)) as f32;
        assert_eq!(w[0], expected);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut w = vec![0.3f32, -0.7];
            let mut st = AdamState::new([2]);
            for k in 0..50 {
                let g = vec![w[0] * 2.0 + k as f32 * 0.01, (w[1] - 1.0).sin()];
                adam_step(&mut [&mut w], &[g], &mut st, &AdamParams::default()).unwrap();
            }
            w
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut w = vec![0.0f32; 2];
        let mut st = AdamState::new([2]);
        assert!(adam_step(&mut [&mut w], &[vec![0.0; 3]], &mut st, &AdamParams::default()).is_err());
        assert!(adam_step(&mut [&mut w], &[], &mut st, &AdamParams::default()).is_err());
        assert_eq!(st.t, 0);
    }
}
