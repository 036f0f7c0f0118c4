use super::params::Params;
use super::TrainConfig;
use crate::error::{Error, Result};

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if step == 0 || total_steps == 0 {
        return cfg.lr_max;
    }
    if step >= total_steps {
        return cfg.lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &Params) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// Parameters are left untouched if any gradient entry is non-finite.
pub fn adam_step(params: &mut Params, grads: &Params, opt: &mut OptimState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(opt.m.tensors.iter_mut())
        .zip(opt.v.tensors.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            p[i] = p[i] * shrink - delta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn scalar_params(v: f64) -> Params {
        let mut p = Params::zeros(&ModelConfig::micro(1, 4, 8, 10, 1, 2));
        p.tensors.iter_mut().flatten().for_each(|x| *x = v);
        p
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 1e-4);
        assert_eq!(lr_at(1000, 1000, &cfg), 1e-5);
        assert!((lr_at(500, 1000, &cfg) - 5.5e-5).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=1000).map(|s| lr_at(s, 1000, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_params(0.7);
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = OptimState::new(&p);
        adam_step(&mut p, &g, &mut opt, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; corrected both to 1, so delta = lr / (1 + eps)
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_params(1.0);
        let mut g = p.zeros_like();
        g.tensors.iter_mut().flatten().for_each(|x| *x = 1.0);
        let mut opt = OptimState::new(&p);
        adam_step(&mut p, &g, &mut opt, 0.1, &cfg).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        for v in p.tensors.iter().flatten() {
            assert!((v - expected).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn decay_only_scales_exactly() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = scalar_params(3.0);
        let g = p.zeros_like();
        let mut opt = OptimState::new(&p);
        adam_step(&mut p, &g, &mut opt, 1e-4, &cfg).unwrap();
        for v in p.tensors.iter().flatten() {
            assert_eq!(*v, 3.0 * (1.0 - 1e-5));
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.get_mut("head.weight")[3] = f64::NAN;
        let mut opt = OptimState::new(&p);
        let err = adam_step(&mut p, &g, &mut opt, 1e-3, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "head.weight"));
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }
}
