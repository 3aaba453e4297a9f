pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter array.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with the standard bias-corrected moments.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = (params[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.5f32, -0.5];
        let mut st = AdamState::new(2);
        st.m = vec![0.3, -0.2];
        st.v = vec![0.1, 0.1];
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.0);
        assert_eq!(p, vec![1.5, -0.5]);
        // moments decay toward zero
        assert!((st.m[0] - 0.27).abs() < 1e-12);
        assert!((st.v[0] - 0.0999).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0f32];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[3.7], &mut st, 0.01);
        // bias-corrected first step is -lr * g/|g| up to eps terms
        assert!((p[0] + 0.01).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(w) = w^2, grad = 2w, starting from w = 1
        let mut w = vec![1.0f32];
        let mut st = AdamState::new(1);
        let mut prev = w[0].abs();
        for _ in 0..10 {
            let g = [2.0 * w[0]];
            adam_step(&mut w, &g, &mut st, 0.05);
            assert!(w[0].abs() < prev, "|w| must decrease, got {}", w[0]);
            prev = w[0].abs();
        }
    }
}
