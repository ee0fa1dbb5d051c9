//! Adam with cosine learning-rate decay to zero.

use crate::error::{CeaError, Result};
use crate::tensor::Tensor;

use super::config::OptimConfig;

pub struct Adam {
    cfg: OptimConfig,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, params: &[(String, Tensor)]) -> Adam {
        Adam {
            cfg: cfg.clone(),
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Cosine decay from lr to 0 over the configured step budget.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.cfg.steps.max(1) as f64;
        let frac = (step as f64 / total).min(1.0);
        0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// One update from the gradients currently accumulated on the parameters.
    /// Clears gradients afterwards.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(CeaError::Config(
                "optimizer was initialized for a different parameter set".into(),
            ));
        }
        let lr = self.lr_at(self.t);
        self.t += 1;
        let t = self.t as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else {
                // Parameter unreached this step (e.g. an unused head); moments decay.
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m *= b1;
                    *v *= b2;
                }
                continue;
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CeaError::Numeric(format!(
                    "non-finite gradient on parameter {name}"
                )));
            }
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (1.0 - b1) * g[j];
                *v = b2 * *v + (1.0 - b2) * g[j] * g[j];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(data);
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> Vec<(String, Tensor)> {
        vec![("x".to_string(), Tensor::param(&[2], vec![3.0, -2.0]))]
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let cfg = OptimConfig {
            lr: 0.1,
            steps: 300,
            batch_size: 1,
            ..OptimConfig::default()
        };
        let params = quadratic_params();
        let mut opt = Adam::new(&cfg, &params);
        for _ in 0..300 {
            let x = &params[0].1;
            let loss = x.mul(x).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        for v in params[0].1.to_vec() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig {
            lr: 1.0,
            steps: 100,
            ..OptimConfig::default()
        };
        let opt = Adam::new(&cfg, &[]);
        assert!((opt.lr_at(0) - 1.0).abs() < 1e-12);
        assert!((opt.lr_at(50) - 0.5).abs() < 1e-12);
        assert!(opt.lr_at(100) < 1e-12);
        assert!(opt.lr_at(200) < 1e-12); // clamped past the horizon
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let params = vec![("w".to_string(), Tensor::param(&[1], vec![1.0]))];
        let mut opt = Adam::new(&OptimConfig::default(), &params);
        let x = &params[0].1;
        // 0/0 through the graph: scale by inf.
        let loss = x.scale(f64::INFINITY).mul(&x.scale(0.0)).unwrap().sum_all();
        let _ = loss.backward();
        let err = opt.step(&params).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }
}
