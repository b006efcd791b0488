//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Optimiser with per-slot state. A slot is a stable parameter position, so
/// steps that touch only a subset of parameters leave the others' moments
/// untouched.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update to the parameter in `slot`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr = T::lit(lr);
                for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.state.len() <= slot {
                    self.state.resize_with(slot + 1, || None);
                }
                let st = self.state[slot].get_or_insert_with(|| Moments {
                    m: vec![T::zero(); grad.numel()],
                    v: vec![T::zero(); grad.numel()],
                    t: 0,
                });
                if st.m.len() != grad.numel() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("slot {slot} changed size"),
                    ));
                }
                st.t += 1;
                let bc1 = T::lit(1.0 - beta1.powi(st.t as i32));
                let bc2 = T::lit(1.0 - beta2.powi(st.t as i32));
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let (one, lr, eps, wd) = (T::one(), T::lit(lr), T::lit(eps), T::lit(weight_decay));
                for (((p, &g0), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(st.m.iter_mut())
                    .zip(st.v.iter_mut())
                {
                    let g = g0 + wd * *p;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Updates every parameter; slots are the positions in `params`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if let Some(missing) = grads.iter().position(Option::is_none) {
            return Err(Error::MissingGrad(format!("slot {missing}")));
        }
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(slot, p, g.expect("checked above"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_grad_leaves_fresh_params_unchanged() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 });
        let mut p = scalar(1.0);
        opt.step(&mut [&mut p], &[Some(&scalar(2.0))]).unwrap();
        assert!((p.item().unwrap() - 0.8).abs() < 1e-12);
    }

    fn minimise_quadratic(config: OptimizerConfig, steps: usize) -> f64 {
        // f(x) = (x - 3)^2, minimum at 3.
        let mut opt = Optimizer::new(config);
        let mut x = scalar(0.0);
        for _ in 0..steps {
            let g = scalar(2.0 * (x.item().unwrap() - 3.0));
            opt.step(&mut [&mut x], &[Some(&g)]).unwrap();
        }
        x.item().unwrap()
    }

    #[test]
    fn gradient_descent_converges_in_50_steps() {
        let x = minimise_quadratic(OptimizerConfig::Sgd { lr: 0.1 }, 50);
        assert!((x - 3.0).abs() < 1e-2, "{x}");
    }

    #[test]
    fn adam_converges() {
        let config = OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let x = minimise_quadratic(config, 500);
        assert!((x - 3.0).abs() < 1e-2, "{x}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut p = scalar(1.0);
        assert!(matches!(
            opt.step(&mut [&mut p], &[None]),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn identical_state_gives_identical_updates() {
        let mut a = Optimizer::new(OptimizerConfig::default());
        let mut pa = scalar(0.3);
        for i in 0..5 {
            a.update(0, &mut pa, &scalar(i as f64 - 2.0)).unwrap();
        }
        let mut b = a.clone();
        let g = scalar(0.7);
        let mut pa2 = pa.clone();
        a.update(0, &mut pa2, &g).unwrap();
        let mut pb = pa.clone();
        b.update(0, &mut pb, &g).unwrap();
        assert_eq!(pa2.data()[0].to_bits(), pb.data()[0].to_bits());
    }
}
