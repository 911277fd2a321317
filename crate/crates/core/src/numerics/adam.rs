use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are zeroed
/// afterwards.
pub fn adam_step(params: &mut ParamStore, cfg: &AdamConfig) {
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let values = p.value.data_mut();
        let grads = p.gradient.data_mut();
        let ms = p.adam_m.data_mut();
        let vs = p.adam_v.data_mut();
        for (((w, g), m), v) in values.iter_mut().zip(grads.iter_mut()).zip(ms).zip(vs) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
    }
}
