use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_step() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: default_step(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }
}

/// First and second moment accumulators for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected ADAM update of `param` in place; `step` is 1-based.
pub fn update(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), moments.m.len());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: name.to_string(), step });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((x, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= cfg.step_size * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}
