use super::{AutodiffError, Result, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether the L1/L2 penalties of its optimizer group apply.
    pub regularized: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, regularized: bool) -> Self {
        Self {
            name: name.into(),
            value,
            regularized,
        }
    }
}

/// Adam with bias correction for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l1_factor: f64,
    pub l2_factor: f64,
    pub step_count: u64,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, l1_factor: f64, l2_factor: f64, params: &[Param]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l1_factor,
            l2_factor,
            step_count: 0,
            first_moments: zeros.clone(),
            second_moments: zeros,
        }
    }

    /// One update. Regularized parameters see `g + l2·θ + l1·sign(θ)`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moments.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moments.len()
                ),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moments
                .iter_mut()
                .zip(self.second_moments.iter_mut()),
        ) {
            let reg = p.regularized;
            for (((theta, gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let mut grad = *gi;
                if reg {
                    grad += self.l2_factor * *theta + self.l1_factor * sign(*theta);
                }
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
