//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one pair of moment buffers per trainable tensor, in the
/// order the tensors are presented to [`AdamWState::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update to every tensor in `params` using its stored
    /// gradient (absent gradient counts as zero). Gradients are validated
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        let sizes = self.validate(params.iter().map(|(n, t)| (n.as_str(), &**t)))?;
        self.begin(&sizes)?;
        for (k, (_, t)) in params.iter_mut().enumerate() {
            self.update(k, t);
        }
        Ok(())
    }

    /// Same as [`AdamWState::step`] over every trainable tensor of `model`,
    /// in visiting order. Frozen tensors are skipped entirely.
    pub fn step_params<P: Parameterized + ?Sized>(&mut self, model: &mut P) -> Result<()> {
        let mut check: Result<()> = Ok(());
        let mut sizes = Vec::new();
        model.visit("", &mut |name, t| {
            if t.requires_grad() && check.is_ok() {
                check = Self::check_finite(name, t);
                sizes.push(t.numel());
            }
        });
        check?;
        self.begin(&sizes)?;
        let mut k = 0;
        model.visit_mut("", &mut |_, t| {
            if t.requires_grad() {
                self.update(k, t);
                k += 1;
            }
        });
        Ok(())
    }

    fn check_finite(name: &str, t: &Tensor) -> Result<()> {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("gradient of parameter `{name}`"),
                });
            }
        }
        Ok(())
    }

    fn validate<'a>(&self, params: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<usize>> {
        let mut sizes = Vec::new();
        for (name, t) in params {
            Self::check_finite(name, t)?;
            sizes.push(t.numel());
        }
        Ok(sizes)
    }

    fn begin(&mut self, sizes: &[usize]) -> Result<()> {
        if self.first_moment.is_empty() && self.step_count == 0 {
            self.first_moment = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != sizes.len()
            || sizes.iter().zip(&self.first_moment).any(|(&n, m)| n != m.len())
        {
            return Err(Error::Shape("optimizer state does not match the parameter set".into()));
        }
        self.step_count += 1;
        Ok(())
    }

    fn update(&mut self, k: usize, p: &mut Tensor) {
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let decay = 1.0 - lr * weight_decay;
        let grad = p.grad().map(<[f64]>::to_vec);
        let (m, v) = (&mut self.first_moment[k], &mut self.second_moment[k]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap().into_param()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = scalar_param(1.5);
        p.accumulate_grad(&[0.0]).unwrap();
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut [("p".into(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_param(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut opt = AdamWState::new(cfg);
        opt.step(&mut [("p".into(), &mut p)]).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_scales_parameter() {
        let mut p = scalar_param(2.0);
        let mut opt = AdamWState::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut [("p".into(), &mut p)]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_param(0.0);
        p.accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = AdamWState::new(AdamWConfig::default());
        let err = opt.step(&mut [("head.w".into(), &mut p)]).unwrap_err();
        assert!(err.to_string().contains("head.w"));
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn decreases_convex_quadratic_monotonically_after_burn_in() {
        // f(x) = Σ a_i (x_i - c_i)^2
        let a = [1.0, 3.0, 0.5, 10.0];
        let c = [0.3, -1.2, 2.0, 0.7];
        for lr in [1e-2, 3e-3, 1e-3] {
            let mut x = Tensor::zeros(&[4]).into_param();
            let mut opt = AdamWState::new(AdamWConfig {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            });
            let f = |x: &Tensor| -> f64 {
                x.data().iter().zip(a.iter().zip(&c)).map(|(v, (a, c))| a * (v - c) * (v - c)).sum()
            };
            let mut prev = f64::INFINITY;
            for step in 0..200 {
                let g: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(a.iter().zip(&c))
                    .map(|(v, (a, c))| 2.0 * a * (v - c))
                    .collect();
                x.zero_grad();
                x.accumulate_grad(&g).unwrap();
                opt.step(&mut [("x".into(), &mut x)]).unwrap();
                let now = f(&x);
                if step >= 10 {
                    assert!(now <= prev, "lr={lr} step={step}: {now} > {prev}");
                }
                prev = now;
            }
        }
    }
}
