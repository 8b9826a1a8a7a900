use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update using each parameter's `grad` field.
/// Parameters without a gradient are treated as having zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TensorError> {
    if !(cfg.lr >= 0.0) {
        return Err(TensorError::Contract("learning rate must be non-negative"));
    }
    if state.m.len() != params.len() {
        return Err(TensorError::Shape { op: "adam_step", lhs: vec![params.len()], rhs: vec![state.m.len()] });
    }
    for p in params.iter() {
        if let Some(g) = &p.grad {
            if g.len() != p.len() {
                return Err(TensorError::Shape { op: "adam_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGrad { name: p.name().to_string() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = p.grad.take();
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            if cfg.lr > 0.0 {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        p.grad = grad;
    }
    Ok(())
}
