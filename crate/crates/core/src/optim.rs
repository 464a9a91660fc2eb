//! Adam optimizer and cosine-annealing learning-rate schedule.

use indexmap::IndexMap;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients<T = f32> = IndexMap<String, Tensor<T>>;

/// Pull the gradient of every bound parameter off `tape` after `backward`.
pub fn collect_grads<T: Scalar>(tape: &Tape<T>, vars: &Binding) -> Result<Gradients<T>> {
    vars.iter()
        .map(|(name, v)| Ok((name.to_string(), tape.grad(v)?.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParameterStore<f32>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn update(&mut self, params: &mut ParameterStore<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        for (name, _) in params.iter() {
            if !grads.contains_key(name) {
                return Err(Error::InvalidArgument(format!(
                    "missing gradient for parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for `{name}`")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for `{name}`")))?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient/state shape mismatch for `{name}`")));
            }
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                // moments are stored in f32 but updated in f64
                let g64 = gv as f64;
                let m64 = beta1 * *mv as f64 + (1.0 - beta1) * g64;
                let v64 = beta2 * *vv as f64 + (1.0 - beta2) * g64 * g64;
                *mv = m64 as f32;
                *vv = v64 as f32;
                *pv = (*pv as f64 - lr * (m64 / bc1) / ((v64 / bc2).sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub eta_min: f64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            eta_min: 0.0,
            total_steps: 1,
        }
    }
}

/// `eta_min + (lr_max - eta_min) * (1 + cos(pi * t / T)) / 2`; `t > T` clamps to `eta_min`.
pub fn cosine_lr(t: u64, cfg: &ScheduleConfig) -> f64 {
    if cfg.total_steps == 0 || t >= cfg.total_steps {
        return cfg.eta_min;
    }
    let frac = t as f64 / cfg.total_steps as f64;
    // written as a decay from lr_max so that t = 0 returns it exactly
    cfg.lr_max - 0.5 * (cfg.lr_max - cfg.eta_min) * (1.0 - (std::f64::consts::PI * frac).cos())
}
