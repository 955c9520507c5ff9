//! Parameter update rules.

use super::{Tensor, TensorError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

/// SGD or bias-corrected Adam over an ordered parameter list.
///
/// Moment buffers are indexed by parameter position, so the same state must
/// always be fed the same parameter ordering.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptKind,
    pub lr: f32,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: Iterator<Item = (&'a str, &'a mut Tensor<f32>)>,
    {
        self.step += 1;
        let t = self.step as i32;
        let lr = f64::from(self.lr);
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);

        for (idx, (name, p)) in params.enumerate() {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
            match self.kind {
                OptKind::Sgd => {
                    for (v, g) in p.data.iter_mut().zip(grad) {
                        *v = (f64::from(*v) - lr * f64::from(*g)) as f32;
                    }
                }
                OptKind::Adam => {
                    while self.m.len() <= idx {
                        self.m.push(Vec::new());
                        self.v.push(Vec::new());
                    }
                    if self.m[idx].len() != p.data.len() {
                        self.m[idx] = vec![0f64; p.data.len()];
                        self.v[idx] = vec![0f64; p.data.len()];
                    }
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for i in 0..p.data.len() {
                        let g = f64::from(grad[i]);
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        p.data[i] =
                            (f64::from(p.data[i]) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(values: &[f32], grads: &[f32]) -> Tensor<f32> {
        let mut t = Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap();
        t.requires_grad = true;
        t.grad = Some(grads.to_vec());
        t
    }

    #[test]
    fn sgd_step() {
        let mut p = param(&[1.0], &[2.0]);
        let mut opt = OptimizerState::new(OptKind::Sgd, 0.1);
        opt.step([("p", &mut p)].into_iter()).unwrap();
        assert!((p.data[0] - 0.8).abs() < 1e-7);
        assert_eq!(p.grad.as_ref().unwrap(), &vec![0.0]);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // After one step, m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps).
        let g = 0.73f32;
        let lr = 1e-4f32;
        let mut p = param(&[0.5], &[g]);
        let mut opt = OptimizerState::new(OptKind::Adam, lr);
        opt.step([("p", &mut p)].into_iter()).unwrap();
        let want = 0.5
            - f64::from(lr) * f64::from(g) / (f64::from(g).abs() + ADAM_EPS);
        assert!((f64::from(p.data[0]) - want).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptKind::Sgd, OptKind::Adam] {
            let mut p = param(&[0.25, -1.5], &[0.0, 0.0]);
            let mut opt = OptimizerState::new(kind, 0.01);
            opt.step([("p", &mut p)].into_iter()).unwrap();
            assert_eq!(p.data, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let mut opt = OptimizerState::new(OptKind::Sgd, 0.01);
        let err = opt.step([("enc0.conv1.w", &mut p)].into_iter());
        assert!(matches!(err, Err(TensorError::MissingGradient(name)) if name == "enc0.conv1.w"));
    }
}
