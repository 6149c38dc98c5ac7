//! Adam optimizer over named parameter slots.

/// Adam with bias correction. Each parameter tensor registers as a slot;
/// callers must pass slots in a stable order with stable sizes.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Starts a new optimization step (advances the bias-correction clock).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to `params` given `grad`, using per-slot
    /// first/second moment state.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        while self.slots.len() <= slot {
            self.slots.push((Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.slots[slot];
        if m.is_empty() {
            m.resize(params.len(), 0.0);
            v.resize(params.len(), 0.0);
        }
        assert_eq!(m.len(), params.len(), "slot size changed");

        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
