use crate::compute::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction and a constant learning rate.
///
/// Moment tensors are kept aligned with the parameter list by index; the
/// step counter advances by exactly one per [`AdamState::step`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed update count.
    pub t: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(param_shapes: &[Vec<usize>], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One optimization step. `grads` is aligned with `params`; a `None`
    /// slot means the parameter had zero gradient this step. `names` is used
    /// only for diagnostics.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "adam_step",
                expected: format!("{} parameter slots", self.first_moment.len()),
                got: format!("{} params / {} grads", params.len(), grads.len()),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape != params[i].shape {
                    return Err(Error::ShapeMismatch {
                        context: "adam_step",
                        expected: format!("{:?} for {}", params[i].shape, names[i]),
                        got: format!("{:?}", g.shape),
                    });
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of parameter '{}'", names[i]),
                    });
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let zero = [0.0];
        for i in 0..params.len() {
            let g_data: &[f64] = grads[i].as_ref().map_or(&zero[..0], |g| &g.data);
            let m = &mut self.first_moment[i].data;
            let v = &mut self.second_moment[i].data;
            let p = &mut params[i].data;
            for j in 0..p.len() {
                let g = if g_data.is_empty() { 0.0 } else { g_data[j] };
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
