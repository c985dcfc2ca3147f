use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum { lr: f64, momentum: f64, weight_decay: f64 },
    Adam { lr: f64, betas: [f64; 2], eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { lr, momentum, weight_decay } => {
                lr.is_finite() && lr >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0
            }
            OptimizerConfig::Adam { lr, betas, eps } => {
                lr.is_finite()
                    && lr >= 0.0
                    && betas.iter().all(|b| (0.0..1.0).contains(b))
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate for `step` out of `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Optimizer state; moments are kept in f64 regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: usize,
}

impl Optimizer {
    pub fn new<T: Real>(config: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            first: zeros(),
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update with learning rate `lr`. `grads[i]` belongs to
    /// parameter `i` of `store`; `None` means no gradient this step.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: vec![grads.len()],
                rhs: vec![store.len()],
            });
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let param = store.tensor_mut(id);
            if g.shape() != param.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: g.shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            let m = &mut self.first[id];
            match self.config {
                OptimizerConfig::SgdMomentum { momentum, weight_decay, .. } => {
                    for ((p, g), v) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let pv = p.as_f64();
                        let gv = g.as_f64() + weight_decay * pv;
                        *v = momentum * *v + gv;
                        *p = T::from_f64_lossy(pv - lr * *v);
                    }
                }
                OptimizerConfig::Adam { betas: [b1, b2], eps, .. } => {
                    let s = &mut self.second[id];
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (((p, g), m), s) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let gv = g.as_f64();
                        *m = b1 * *m + (1.0 - b1) * gv;
                        *s = b2 * *s + (1.0 - b2) * gv * gv;
                        let update = lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                        *p = T::from_f64_lossy(p.as_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    fn grad(values: &[f64]) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::new(vec![values.len()], values.to_vec()).unwrap())]
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr · sign(g) (up to eps).
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
        opt.step(&mut s, &grad(&[0.5, -3.0]), 0.1).unwrap();
        let p = s.tensor(0).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        let cfg = OptimizerConfig::SgdMomentum {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut s = store(&[0.0]);
        let mut opt = Optimizer::new(cfg, &s).unwrap();
        opt.step(&mut s, &grad(&[1.0]), 0.1).unwrap();
        opt.step(&mut s, &grad(&[1.0]), 0.1).unwrap();
        // v1 = 1, p1 = -0.1; v2 = 1.5, p2 = -0.25
        assert!((s.tensor(0).data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        for cfg in [
            OptimizerConfig::default(),
            OptimizerConfig::SgdMomentum {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 0.1,
            },
        ] {
            let mut s = store(&[0.3, -0.7]);
            let before = s.clone();
            let mut opt = Optimizer::new(cfg, &s).unwrap();
            for _ in 0..5 {
                opt.step(&mut s, &grad(&[2.0, 1.0]), 0.0).unwrap();
            }
            assert_eq!(s, before);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.rate(0.1, 0, 10), 0.1);
        assert!((LrSchedule::Cosine.rate(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(LrSchedule::Cosine.rate(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 7, 10), 0.1);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = OptimizerConfig::Adam {
            lr: -1.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
        };
        assert!(matches!(Optimizer::new(bad, &store(&[1.0])), Err(Error::Config(_))));
        let mut s = store(&[1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s).unwrap();
        assert!(opt.step(&mut s, &[], 0.1).is_err());
    }
}
