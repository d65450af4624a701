use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Coupled L2 penalty: `g <- g + weight_decay * theta` before the moments.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, weight_decay: 0.0005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step
/// and must keep matching the parameter list afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor that requires grad, using its
    /// accumulated gradient (missing gradient = zero).
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "Adam state does not match the parameter list");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            assert_eq!(m.len(), p.numel(), "Adam moment shape mismatch");
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; p.numel()],
            };
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let th = theta.as_f64();
                let g = grad[i] + c.weight_decay * th;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *theta = T::of(th - c.lr * mh / (vh.sqrt() + c.eps));
            }
        }
    }
}
