use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// AdamW with decoupled weight decay (PyTorch defaults for betas and eps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update at learning-rate multiplier `lr_scale`. Parameters whose
    /// gradient is `None` are treated as having zero gradient.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr_scale: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = grads[i].as_ref();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                *w -= lr * self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm over a set of gradients.
pub fn grad_norm<'a>(grads: impl IntoIterator<Item = &'a Option<Tensor>>) -> f64 {
    grads
        .into_iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(groups: &mut [&mut Vec<Option<Tensor>>], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .map(|g| grad_norm(g.iter()).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / (norm + 1e-6);
        for g in groups.iter_mut() {
            for t in g.iter_mut().flatten() {
                t.scale_assign(s);
            }
        }
    }
    norm
}

/// Linear warmup multiplier: ramps from `1/warmup` to 1 over `warmup` steps.
pub fn warmup_scale(step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -1.0])];
        let g = vec![Some(Tensor::from_vec(1, 2, vec![0.5, -3.0]))];
        let mut opt = AdamW::new(0.1, 0.0, &[2]);
        opt.update(&mut p, &g, 1.0);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut opt = AdamW::new(0.1, 0.5, &[1]);
        opt.update(&mut p, &[None], 1.0);
        assert!((p[0].item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut a = vec![Some(Tensor::from_vec(1, 2, vec![3.0, 0.0]))];
        let mut b = vec![Some(Tensor::from_vec(1, 1, vec![4.0])), None];
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(before, 5.0);
        let after = grad_norm(a.iter().chain(b.iter()));
        assert!((after - 1.0).abs() < 1e-6);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert_eq!(warmup_scale(0, 4), 0.25);
        assert_eq!(warmup_scale(3, 4), 1.0);
        assert_eq!(warmup_scale(10, 4), 1.0);
        assert_eq!(warmup_scale(0, 0), 1.0);
    }
}
