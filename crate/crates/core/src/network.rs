//! Full encoder / MPE skip / transposed-convolution decoder network.
//!
//! Encoder taps sit at strides 4, 8, 16 and 32. Decoding starts from the
//! stride-32 map; at strides 16, 8 and 4 the upsampled decoder feature is
//! fused with the MPE-processed encoder tap and refined by a 3x3 conv,
//! batch norm and GELU. Two stride-2 transposed convs and a 1x1 conv then
//! produce single-channel logits at input resolution.

use indexmap::IndexMap;

use crate::autograd::{BatchNormConfig, BatchNormStats, Mode, Tape, Var};
use crate::blocks::{self, ConvNeXtBlockParams, MkcnnParams, MpeParams, PeConfig};
use crate::config::{Fusion, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Scalar, Tensor};

/// Total downsampling factor of the encoder.
pub const NETWORK_STRIDE: usize = 32;

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    vars: &'a Binding,
    norms: &'a mut IndexMap<String, BatchNormStats<T>>,
    mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn v(&self, name: &str) -> Result<Var> {
        self.vars.get(name)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.v(&format!("{prefix}.gamma"))?;
        let beta = self.v(&format!("{prefix}.beta"))?;
        let stats = self
            .norms
            .get_mut(prefix)
            .ok_or_else(|| Error::Config(format!("missing running stats `{prefix}`")))?;
        self.tape
            .batch_norm(x, gamma, beta, stats, self.mode, BatchNormConfig::default())
    }

    fn block_params(&self, prefix: &str) -> Result<ConvNeXtBlockParams> {
        let v = |s: &str| self.v(&format!("{prefix}.{s}"));
        Ok(ConvNeXtBlockParams {
            dw_weight: v("dw.weight")?,
            norm_gamma: v("norm.gamma")?,
            norm_beta: v("norm.beta")?,
            expand_weight: v("expand.weight")?,
            expand_bias: v("expand.bias")?,
            project_weight: v("project.weight")?,
            project_bias: v("project.bias")?,
            layer_scale: v("layer_scale")?,
        })
    }

    fn encoder(&mut self, cfg: &ModelConfig, x: Var) -> Result<[Var; 4]> {
        let mut h = blocks::stem(
            self.tape,
            x,
            self.v("stem.weight")?,
            self.v("stem.norm.gamma")?,
            self.v("stem.norm.beta")?,
        )?;
        let mut taps = Vec::with_capacity(4);
        for s in 0..4 {
            if s > 0 {
                let p = format!("stages.{s}.down");
                h = blocks::downsample(
                    self.tape,
                    h,
                    self.v(&format!("{p}.norm.gamma"))?,
                    self.v(&format!("{p}.norm.beta"))?,
                    self.v(&format!("{p}.weight"))?,
                    self.v(&format!("{p}.bias"))?,
                )?;
            }
            for j in 0..cfg.stage_depths[s] {
                let p = self.block_params(&format!("stages.{s}.blocks.{j}"))?;
                h = blocks::convnext_block(self.tape, h, &p)?;
            }
            taps.push(h);
        }
        Ok([taps[0], taps[1], taps[2], taps[3]])
    }

    fn skip(&mut self, cfg: &ModelConfig, level: usize, tap: Var) -> Result<Var> {
        if !cfg.use_mpe {
            return Ok(tap);
        }
        let p = format!("skips.{level}");
        let branches = cfg
            .mkcnn_kernels
            .iter()
            .map(|&k| Ok((k, self.v(&format!("{p}.mkcnn.k{k}.weight"))?)))
            .collect::<Result<Vec<_>>>()?;
        let params = MpeParams {
            mkcnn: MkcnnParams { branches },
            bn_gamma: self.v(&format!("{p}.bn.gamma"))?,
            bn_beta: self.v(&format!("{p}.bn.beta"))?,
        };
        let stats = self
            .norms
            .get_mut(&format!("{p}.bn"))
            .ok_or_else(|| Error::Config(format!("missing running stats `{p}.bn`")))?;
        blocks::mpe_block(
            self.tape,
            tap,
            &params,
            stats,
            self.mode,
            BatchNormConfig::default(),
            &PeConfig { base: cfg.pe_base },
        )
    }

    fn decoder_level(&mut self, cfg: &ModelConfig, level: usize, below: Var, skip: Var) -> Result<Var> {
        let p = format!("decoder.{level}");
        let up = self.tape.conv_transpose2d(
            below,
            self.v(&format!("{p}.up.weight"))?,
            Some(self.v(&format!("{p}.up.bias"))?),
            2,
            0,
        )?;
        let fused = match cfg.fusion {
            Fusion::Add => self.tape.add(skip, up)?,
            Fusion::Concat => {
                let cat = self.tape.concat_channels(skip, up)?;
                self.tape.conv2d(
                    cat,
                    self.v(&format!("{p}.fuse.weight"))?,
                    Some(self.v(&format!("{p}.fuse.bias"))?),
                    1,
                    0,
                )?
            }
        };
        let h = self
            .tape
            .conv2d(fused, self.v(&format!("{p}.refine.weight"))?, None, 1, 1)?;
        let h = self.batch_norm(h, &format!("{p}.refine.bn"))?;
        self.tape.gelu(h)
    }

    fn head(&mut self, x: Var) -> Result<Var> {
        let h = self
            .tape
            .conv_transpose2d(x, self.v("head.up1.weight")?, Some(self.v("head.up1.bias")?), 2, 0)?;
        let h = self.tape.gelu(h)?;
        let h = self
            .tape
            .conv_transpose2d(h, self.v("head.up2.weight")?, Some(self.v("head.up2.bias")?), 2, 0)?;
        self.tape
            .conv2d(h, self.v("head.out.weight")?, Some(self.v("head.out.bias")?), 1, 0)
    }
}

/// Check an input shape `[b, 3, h, w]` against the network's constraints.
pub fn check_input_shape(shape: &[usize]) -> Result<()> {
    match shape {
        &[_, 3, h, w] if h % NETWORK_STRIDE == 0 && w % NETWORK_STRIDE == 0 && h > 0 && w > 0 => Ok(()),
        &[_, 3, h, w] => Err(Error::Shape(format!(
            "input spatial size {h}x{w} must be divisible by {NETWORK_STRIDE}"
        ))),
        s => Err(Error::Shape(format!("expected input shape [b, 3, h, w], got {s:?}"))),
    }
}

/// Record a forward pass on `tape` and return the `[b, 1, h, w]` logits.
///
/// `vars` must come from binding a store laid out for `cfg`; `norms` are
/// that store's running statistics (updated in train mode).
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &Binding,
    norms: &mut IndexMap<String, BatchNormStats<T>>,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    check_input_shape(tape.value(x)?.shape())?;
    let mut ctx = Ctx {
        tape,
        vars,
        norms,
        mode,
    };
    let [t0, t1, t2, t3] = ctx.encoder(cfg, x)?;
    let mut d = t3;
    for (level, tap) in [(2, t2), (1, t1), (0, t0)] {
        let skip = ctx.skip(cfg, level, tap)?;
        d = ctx.decoder_level(cfg, level, d, skip)?;
    }
    ctx.head(d)
}

/// A config together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::build(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Bind parameters, run forward and return `(logits, binding)`.
    pub fn forward_on(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Binding)> {
        let vars = self.params.bind(tape)?;
        let mut norms = std::mem::take(self.params.norms_mut());
        let out = forward(tape, &self.config, &vars, &mut norms, x, mode);
        *self.params.norms_mut() = norms;
        Ok((out?, vars))
    }

    /// Train-mode logits; folds batch statistics into the running stats.
    pub fn logits_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (y, _) = self.forward_on(&mut tape, xv, Mode::Train)?;
        Ok(tape.value(y)?.clone())
    }

    /// Eval-mode logits. Does not modify the model.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let vars = self.params.bind(&mut tape)?;
        let mut norms = self.params.norms().clone();
        let y = forward(&mut tape, &self.config, &vars, &mut norms, xv, Mode::Eval)?;
        Ok(tape.value(y)?.clone())
    }

    /// Binary mask: `sigmoid(logits) >= threshold`.
    pub fn predict_mask(&self, x: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        threshold_logits(&logits, threshold)
    }
}

/// `1` where `sigmoid(logit) >= threshold`, else `0`. Ties count as foreground.
pub fn threshold_logits<T: Scalar>(logits: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(logits.map(|v| {
        if crate::kernels::sigmoid(v.as_f64()) >= threshold {
            T::one()
        } else {
            T::zero()
        }
    }))
}
