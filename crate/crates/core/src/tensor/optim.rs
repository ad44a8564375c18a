use super::{Result, Tensor, TensorError};

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(TensorError::Contract(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::Contract(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if p.numel() != g.len() || v.len() != g.len() {
                return Err(TensorError::Contract("gradient size mismatch".into()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
