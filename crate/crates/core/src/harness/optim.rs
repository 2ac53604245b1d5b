use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter list changed between steps".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {i} shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data().to_vec();
            for j in 0..data.len() {
                let gj = g.data()[j] + self.weight_decay * data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            **p = Tensor::new(g.shape().to_vec(), data)
                .map_err(|e| Error::Numerics(format!("parameter {i} after update: {e}")))?;
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): linear warmup to `base`, then a
/// factor 0.1 at each milestone reached.
pub fn learning_rate(epoch: usize, base: f64, warmup: usize, milestones: &[usize]) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let decays = milestones.iter().filter(|&&m| epoch >= m).count();
    base * 0.1f64.powi(decays as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let lr = |e| learning_rate(e, 1.0, 2, &[10, 17]);
        assert_eq!(lr(0), 0.5);
        assert_eq!(lr(1), 1.0);
        assert_eq!(lr(9), 1.0);
        assert!((lr(10) - 0.1).abs() < 1e-15);
        assert!((lr(16) - 0.1).abs() < 1e-15);
        assert!((lr(17) - 0.01).abs() < 1e-15);
        assert!((learning_rate(3, 0.2, 10, &[30, 50]) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.3, -4.0]).unwrap();
        let mut opt = Adam::new(0.0);
        opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -1.5]).unwrap();
        let mut opt = Adam::new(0.0);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 0.5)).unwrap();
            opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
