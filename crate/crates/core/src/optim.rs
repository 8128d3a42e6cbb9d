//! Nesterov-accelerated Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl NadamState {
    pub fn new<'a>(config: NadamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m,
            v,
        }
    }

    /// One update:
    ///
    /// ```text
    /// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
    /// m̂ = m / (1−β1^(t+1))       ĝ = g / (1−β1^t)       v̂ = v / (1−β2^t)
    /// θ ← θ − lr·(β1·m̂ + (1−β1)·ĝ) / (√v̂ + ε)
    /// ```
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.shape() != self.m[i].shape() {
                return Err(Error::dim("nadam_step", p.shape(), &[g.len()]));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("nadam_step: gradient of tensor {i} at index {j}"),
                });
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let m_corr = 1.0 - b1.powi(t + 1);
        let g_corr = 1.0 - b1.powi(t);
        let v_corr = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / m_corr;
                let g_hat = gi / g_corr;
                let v_hat = *vi / v_corr;
                *theta -= self.lr * (b1 * m_hat + (1.0 - b1) * g_hat) / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Checkpoint tensors under `opt.m.<name>`, `opt.v.<name>`, `opt.t`, `opt.lr`.
    pub fn to_named(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * names.len() + 2);
        for (name, m) in names.iter().zip(&self.m) {
            out.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.v) {
            out.push((format!("opt.v.{name}"), v.clone()));
        }
        out.push(("opt.t".into(), Tensor::scalar(self.t as f64)));
        out.push(("opt.lr".into(), Tensor::scalar(self.lr)));
        out
    }

    pub fn from_named(
        config: NadamConfig,
        names: &[String],
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let fetch = |key: String| {
            lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
        };
        let m = names
            .iter()
            .map(|n| fetch(format!("opt.m.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let v = names
            .iter()
            .map(|n| fetch(format!("opt.v.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let t = fetch("opt.t".into())?.item() as u64;
        let lr = fetch("opt.lr".into())?.item();
        Ok(Self {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t,
            m,
            v,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub min_lr: f64,
    /// Minimum absolute decrease that counts as an improvement.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 5,
            min_lr: 1e-7,
            threshold: 1e-6,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for more than `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub best: f64,
    pub wait: u32,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must lie in (0, 1), got {}",
                config.factor
            )));
        }
        Ok(Self {
            config,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.config.threshold {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait > self.config.patience {
            self.wait = 0;
            return (lr * self.config.factor).max(self.config.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(state: &mut NadamState, theta: &mut Tensor, g: f64) {
        state.step(&mut [theta], &[vec![g]]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = theta.clone();
        let mut s = NadamState::new(NadamConfig::default(), [&theta]);
        for _ in 0..5 {
            s.step(&mut [&mut theta], &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn single_step_golden_value() {
        // hand-rolled: m = 0.1, v = 0.001, m̂ = 0.1/0.19, ĝ = 1/0.1, v̂ = 1
        let (b1, lr, eps) = (0.9f64, 2e-4, 1e-8);
        let m_hat = (1.0 - b1) / (1.0 - b1 * b1);
        let g_hat = 1.0 / (1.0 - b1);
        let expected = lr * (b1 * m_hat + (1.0 - b1) * g_hat) / (1.0 + eps);
        assert!((expected - lr * (b1 / (1.0 + b1) + 1.0) / (1.0 + eps)).abs() < 1e-18);

        let mut theta = Tensor::scalar(0.0);
        let mut s = NadamState::new(NadamConfig::default(), [&theta]);
        scalar_step(&mut s, &mut theta, 1.0);
        assert!((-theta.item() - expected).abs() < 1e-18, "{}", theta.item());
        assert!((-theta.item() - 2.9473684e-4).abs() < 1e-11);
    }

    #[test]
    fn update_is_linear_in_lr() {
        let grads = [0.3, -1.2, 2.0, 0.7];
        let run = |lr: f64| {
            let mut theta = Tensor::scalar(0.0);
            let mut s = NadamState::new(NadamConfig { lr, ..Default::default() }, [&theta]);
            let mut deltas = Vec::new();
            for g in grads {
                let before = theta.item();
                scalar_step(&mut s, &mut theta, g);
                deltas.push(theta.item() - before);
            }
            deltas
        };
        let (a, b) = (run(1e-3), run(4e-3));
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 4.0 * x).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn beta1_zero_degenerates_to_rmsprop_direction() {
        let cfg = NadamConfig { beta1: 0.0, lr: 1e-2, ..Default::default() };
        let mut theta = Tensor::scalar(1.0);
        let mut s = NadamState::new(cfg, [&theta]);
        let mut v = 0.0;
        for (t, g) in [0.5f64, -0.25, 1.5].into_iter().enumerate() {
            let before = theta.item();
            scalar_step(&mut s, &mut theta, g);
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
            let want = -cfg.lr * g / (v_hat.sqrt() + cfg.eps);
            assert!((theta.item() - before - want).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_descends() {
        // f(θ) = θ²; Adam-family steps move at most ≈ lr per iteration, so a
        // unit distance needs lr·steps well above 1.
        let run = |lr: f64, steps: usize| {
            let mut theta = Tensor::scalar(1.0);
            let mut s = NadamState::new(NadamConfig { lr, ..Default::default() }, [&theta]);
            for _ in 0..steps {
                let g = 2.0 * theta.item();
                scalar_step(&mut s, &mut theta, g);
            }
            theta.item()
        };
        let slow = run(2e-4, 2000);
        assert!(slow < 1.0 && slow > 0.5, "{slow}");
        assert!(run(2e-3, 2000).abs() < 0.1);
    }

    #[test]
    #[ignore = "unattainable: 2000 steps of at most ~lr each cannot cover a unit distance"]
    fn quadratic_reaches_tenth_at_small_lr() {
        let mut theta = Tensor::scalar(1.0);
        let mut s = NadamState::new(NadamConfig::default(), [&theta]);
        for _ in 0..2000 {
            let g = 2.0 * theta.item();
            scalar_step(&mut s, &mut theta, g);
        }
        assert!(theta.item().abs() < 0.1, "{}", theta.item());
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut theta = Tensor::scalar(1.0);
        let mut s = NadamState::new(NadamConfig::default(), [&theta]);
        let err = s.step(&mut [&mut theta], &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(theta.item(), 1.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn plateau_examples() {
        let cfg = PlateauConfig { patience: 2, ..Default::default() };
        let mut s = PlateauScheduler::new(cfg).unwrap();
        let mut lr = 1e-3;
        for loss in [5.0, 4.0, 3.0, 2.0, 1.0] {
            lr = s.observe(loss, lr);
        }
        assert_eq!(lr, 1e-3);

        let mut s = PlateauScheduler::new(cfg).unwrap();
        let mut lr = 1e-3;
        lr = s.observe(1.0, lr);
        let mut trace = Vec::new();
        for _ in 0..3 {
            lr = s.observe(1.0, lr);
            trace.push(lr);
        }
        assert_eq!(trace, vec![1e-3, 1e-3, 1e-3 * 0.1]);
        assert!(s.wait <= cfg.patience);

        let mut s = PlateauScheduler::new(PlateauConfig { patience: 0, min_lr: 1e-5, ..cfg }).unwrap();
        let mut lr = 1e-5;
        s.observe(1.0, lr);
        for _ in 0..4 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-5);

        assert!(PlateauScheduler::new(PlateauConfig { factor: 1.0, ..cfg }).is_err());
    }
}
