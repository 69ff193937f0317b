use log::warn;

use crate::error::{Error, Result};

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Result of one optimizer call.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was changed.
    Skipped {
        tensor: usize,
        index: usize,
    },
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every tensor in `params`. A missing gradient counts as
    /// zero. Any non-finite gradient entry skips the whole step.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters and {} gradients for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.as_ref().is_some_and(|g| g.len() != p.len()) {
                return Err(Error::shape(
                    "adam_step",
                    format!("tensor {i} does not match its moments"),
                ));
            }
            if let Some(index) = g
                .as_ref()
                .and_then(|g| g.iter().position(|v| !v.is_finite()))
            {
                return Ok(StepOutcome::Skipped { tensor: i, index });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total`.
/// Steps past `total` are clamped with a warning.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    let s = if step > total {
        warn!("learning-rate step {step} is past the schedule end {total}; clamping");
        total
    } else {
        step
    };
    let frac = if total == 0 {
        1.0
    } else {
        s as f64 / total as f64
    };
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
