use crate::numcore::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, allocated only for tensors that
/// require gradients when the state is created.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new(tensors: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            moments: tensors
                .iter()
                .map(|t| t.requires_grad().then(|| (vec![0.0; t.len()], vec![0.0; t.len()])))
                .collect(),
        }
    }

    /// Number of scalars with optimizer state.
    pub fn tracked(&self) -> usize {
        self.moments.iter().flatten().map(|(m, _)| m.len()).sum()
    }
}

/// One bias-corrected Adam update. Tensors without state, or without a
/// gradient this step, are left untouched.
pub fn adam_step(tensors: &mut [Tensor], grads: &[Option<&[f64]>], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((tensor, grad), moments) in tensors.iter_mut().zip(grads).zip(&mut state.moments) {
        let (Some((m, v)), Some(g)) = (moments.as_mut(), grad) else {
            continue;
        };
        for (((w, &g), m), v) in tensor.data_mut().iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}
