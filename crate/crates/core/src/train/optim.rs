use crate::params::Parameterized;
use crate::tensor::Tensor;

/// Adam with bias correction. For every parameter θ with gradient g at
/// step t (counting from 1):
///
/// ```text
/// m ← β₁·m + (1 − β₁)·g
/// v ← β₂·v + (1 − β₂)·g²
/// θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
/// ```
///
/// Parameters that received no gradient are treated as having g = 0.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients currently held by `model`.
    pub fn grad_norm(models: &mut [&mut dyn Parameterized]) -> f64 {
        let mut sq = 0.0;
        for model in models.iter_mut() {
            model.visit_params(&mut |_, t| {
                if let Some(g) = t.grad() {
                    sq += g.iter().map(|v| v * v).sum::<f64>();
                }
            });
        }
        sq.sqrt()
    }

    /// Applies one update to every parameter of `models`, in visiting order,
    /// replacing each with a fresh leaf. Returns the pre-update gradient norm.
    pub fn step(&mut self, models: &mut [&mut dyn Parameterized]) -> f64 {
        let norm = Self::grad_norm(models);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut index = 0;
        for model in models.iter_mut() {
            model.visit_params(&mut |_, param| {
                if self.first.len() == index {
                    self.first.push(vec![0.0; param.numel()]);
                    self.second.push(vec![0.0; param.numel()]);
                }
                let (m, v) = (&mut self.first[index], &mut self.second[index]);
                assert_eq!(m.len(), param.numel(), "parameter {index} changed size between steps");
                let grad = param.grad();
                let mut data = param.to_vec();
                for i in 0..data.len() {
                    let g = grad.as_ref().map_or(0.0, |g| g[i]);
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
                *param = Tensor::param(data, param.shape(), param.dtype()).expect("same shape");
                index += 1;
            });
        }
        norm
    }
}
