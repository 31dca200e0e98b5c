//! Adam with bias correction; no weight decay, no schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, vars: &[Var]) -> Result<Self> {
        let zeros = vars
            .iter()
            .map(|v| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(lr: f64, t: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            t,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, vars: &[Var], grads: &GradStore) -> Result<()> {
        if vars.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                vars.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let first_correction = 1.0 - self.beta1.powi(t);
        let second_correction = 1.0 - self.beta2.powi(t);
        for ((var, m), v) in vars.iter().zip(&mut self.first).zip(&mut self.second) {
            let grad = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            // Detached so the moments never hold on to a step's autograd graph.
            *m = ((&*m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?.detach();
            *v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&*m / first_correction)?;
            let v_hat = (&*v / second_correction)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let x = Var::new(&[1.0f64, -2.0, 0.5][..], &Device::Cpu).unwrap();
        let mut opt = Adam::new(0.1, &[x.clone()]).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&[x.clone()], &loss.backward().unwrap()).unwrap();
        // m_hat / sqrt(v_hat) = sign(g) on the first step.
        let got = x.as_tensor().to_vec1::<f64>().unwrap();
        let want = [0.9, -1.9, 0.4];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let x = Var::new(&[1.0f64, -2.0][..], &Device::Cpu).unwrap();
        let before = x.as_tensor().to_vec1::<f64>().unwrap();
        let mut opt = Adam::new(0.0, &[x.clone()]).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&[x.clone()], &loss.backward().unwrap()).unwrap();
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f64, -4.0][..], &Device::Cpu).unwrap();
        let mut opt = Adam::new(0.05, &[x.clone()]).unwrap();
        for _ in 0..2000 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&[x.clone()], &loss.backward().unwrap()).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }
}
