use super::param::ParamStore;
use super::tensor::Tensor;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on `params`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            for (_, p) in params.iter() {
                self.m.push(Tensor::zeros(p.value.shape()));
                self.v.push(Tensor::zeros(p.value.shape()));
            }
        }
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let sq: f64 = params
                    .iter()
                    .filter_map(|(_, p)| p.grad.as_ref())
                    .flat_map(|g| g.data().iter())
                    .map(|x| x * x)
                    .sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.as_ref() else { continue };
            if self.lr == 0.0 {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for e in 0..w.len() {
                let ge = g.data()[e] * scale;
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * ge;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * ge * ge;
                let mh = m[e] / bc1;
                let vh = v[e] / bc2;
                w[e] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[e]);
            }
        }
    }
}
