use super::{HeadGrads, HeadParams, TrainConfig};

/// First/second moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam update followed by decoupled weight decay
    /// `theta -= lr * wd * theta`.
    ///
    /// `params` may be split across several slices; together they must
    /// cover exactly the accumulator length.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter and gradient groups differ in length");
            for (i, (theta, &grad)) in p.iter_mut().zip(g.iter()).enumerate() {
                let k = offset + i;
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                *theta -= lr * cfg.weight_decay * *theta;
            }
            offset += p.len();
        }
        assert_eq!(offset, self.m.len(), "parameter groups do not cover the optimizer state");
    }
}

/// Applies one optimizer step to the head in place.
pub fn adam_step(state: &mut AdamState, params: &mut HeadParams, grads: &HeadGrads, lr: f64, cfg: &TrainConfig) {
    let mut slices = params.slices_mut();
    state.step(&mut slices, &grads.slices(), lr, cfg);
}
