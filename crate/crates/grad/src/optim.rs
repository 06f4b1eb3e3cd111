use crate::tensor::Tensor;

/// Adam with bias correction. One instance owns the moments of one ordered
/// list of parameters; callers must always pass parameters in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of `step` calls so far.
    pub t: u64,
    /// First and second moments, created lazily on first gradient.
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f32, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: vec![None; n_params],
        }
    }

    /// Applies one update. Parameters whose gradient is `None` are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), self.moments.len(), "Adam parameter count changed");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = self.lr / bc1;
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(grad) = grad else { continue };
            let (m, v) = slot.get_or_insert_with(|| {
                (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape()))
            });
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sum_sq)
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(factor);
        }
    }
    norm
}
