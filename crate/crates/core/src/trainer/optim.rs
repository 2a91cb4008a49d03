use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moments and the step counter of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: AdamParams) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HP: AdamParams = AdamParams {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, HP).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, HP).unwrap();
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-18);
        assert!((p[0] + 0.000999999990).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = vec![0.3];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, HP).unwrap();
        adam_step(&mut p, &[1.0], &mut s, HP).unwrap();
        assert!((p[0] - x).abs() <= 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut [0.0], &[f64::NAN], &mut s, HP).is_err());
        assert!(adam_step(&mut [0.0, 1.0], &[0.0], &mut s, HP).is_err());
    }
}
