//! Composite network blocks: ConvNeXt encoder pieces, the multi-kernel
//! convolution sum, 2-D sinusoidal positional embedding and the
//! multi-kernel positional embedding (MPE) skip block.

use crate::autograd::{BatchNormConfig, BatchNormStats, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Epsilon of the channel layer norms in the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Kernel of the ConvNeXt depthwise convolution.
pub const DEPTHWISE_KERNEL: usize = 7;

/// Hidden width multiplier of the ConvNeXt inverted bottleneck.
pub const EXPANSION: usize = 4;

/// Handles to the parameters of one ConvNeXt block.
#[derive(Debug, Clone, Copy)]
pub struct ConvNeXtBlockParams {
    /// `[c, 1, 7, 7]`
    pub dw_weight: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    /// `[4c, c, 1, 1]`
    pub expand_weight: Var,
    pub expand_bias: Var,
    /// `[c, 4c, 1, 1]`
    pub project_weight: Var,
    pub project_bias: Var,
    /// `[c]`
    pub layer_scale: Var,
}

/// `x + layer_scale * project(gelu(expand(layer_norm(depthwise7x7(x)))))`.
pub fn convnext_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvNeXtBlockParams) -> Result<Var> {
    let h = tape.depthwise_conv2d(x, p.dw_weight, None, DEPTHWISE_KERNEL / 2)?;
    let h = tape.layer_norm_channels(h, p.norm_gamma, p.norm_beta, LAYER_NORM_EPS)?;
    let h = tape.conv2d(h, p.expand_weight, Some(p.expand_bias), 1, 0)?;
    let h = tape.gelu(h)?;
    let h = tape.conv2d(h, p.project_weight, Some(p.project_bias), 1, 0)?;
    let h = tape.channel_scale(h, p.layer_scale)?;
    tape.add(x, h)
}

fn require_divisible<T: Scalar>(tape: &Tape<T>, x: Var, factor: usize, what: &str) -> Result<()> {
    let (_, _, h, w) = tape.value(x)?.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{what}: spatial size {h}x{w} must be divisible by {factor}"
        )));
    }
    Ok(())
}

/// 4x4 stride-4 patchify convolution followed by a channel layer norm.
pub fn stem<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, gamma: Var, beta: Var) -> Result<Var> {
    require_divisible(tape, x, 4, "stem")?;
    let h = tape.conv2d(x, weight, None, 4, 0)?;
    tape.layer_norm_channels(h, gamma, beta, LAYER_NORM_EPS)
}

/// Channel layer norm followed by a 2x2 stride-2 convolution.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, weight: Var, bias: Var) -> Result<Var> {
    require_divisible(tape, x, 2, "downsample")?;
    let h = tape.layer_norm_channels(x, gamma, beta, LAYER_NORM_EPS)?;
    tape.conv2d(h, weight, Some(bias), 2, 0)
}

/// Parallel same-padded convolutions of different odd kernel sizes.
#[derive(Debug, Clone, Default)]
pub struct MkcnnParams {
    /// `(kernel size, weight [co, ci, k, k])`, in kernel-set order.
    pub branches: Vec<(usize, Var)>,
}

/// Sum of `conv2d(x, w_k, padding = k / 2)` over every branch.
pub fn mkcnn<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &MkcnnParams) -> Result<Var> {
    let mut acc: Option<Var> = None;
    if p.branches.is_empty() {
        return Err(Error::InvalidArgument("mkcnn: kernel set is empty".into()));
    }
    for &(k, w) in &p.branches {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "mkcnn: kernel size {k} is even; same padding needs odd kernels"
            )));
        }
        let y = tape.conv2d(x, w, None, 1, k / 2)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc.expect("non-empty kernel set"))
}

/// Frequency base of the sinusoidal embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeConfig {
    pub base: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self { base: 10_000.0 }
    }
}

/// Deterministic `[1, c, h, w]` sinusoidal position mask.
///
/// Channels `[0, c/2)` encode the row index and `[c/2, c)` the column
/// index. Inside each half of width `d = c/2`, channel `j` uses frequency
/// `base^(2*(j/2)/d)`: sine for even `j`, cosine for odd `j`.
pub fn positional_embedding_2d<T: Scalar>(c: usize, h: usize, w: usize, cfg: &PeConfig) -> Result<Tensor<T>> {
    if c == 0 || !c.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs channels divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let plane = h * w;
    let mut data = vec![T::zero(); c * plane];
    for ch in 0..c {
        let j = ch % half;
        let i = (j / 2) as f64;
        let freq = cfg.base.powf(2.0 * i / half as f64);
        let rows = ch < half;
        for y in 0..h {
            for x in 0..w {
                let pos = if rows { y } else { x } as f64;
                let angle = pos / freq;
                let v = if j.is_multiple_of(2) { angle.sin() } else { angle.cos() };
                data[ch * plane + y * w + x] = T::of(v);
            }
        }
    }
    Tensor::new(&[1, c, h, w], data)
}

/// Handles to the parameters of one MPE skip block.
#[derive(Debug, Clone)]
pub struct MpeParams {
    pub mkcnn: MkcnnParams,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

/// `batch_norm(mkcnn(x)) + positional_embedding_2d(co, h, w)`.
#[allow(clippy::too_many_arguments)]
pub fn mpe_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &MpeParams,
    stats: &mut BatchNormStats<T>,
    mode: Mode,
    bn: BatchNormConfig,
    pe: &PeConfig,
) -> Result<Var> {
    let y = mkcnn(tape, x, &p.mkcnn)?;
    let y = tape.batch_norm(y, p.bn_gamma, p.bn_beta, stats, mode, bn)?;
    let (b, c, h, w) = tape.value(y)?.dims4()?;
    let mask = positional_embedding_2d::<T>(c, h, w, pe)?.repeat_batch(b)?;
    let mask = tape.constant(mask)?;
    tape.add(y, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_origin_and_first_frequency() {
        let pe = positional_embedding_2d::<f64>(4, 3, 3, &PeConfig::default()).unwrap();
        let at = |c: usize, y: usize, x: usize| pe.data()[c * 9 + y * 3 + x];
        // row half: channels 0 (sin) and 1 (cos); column half: 2 and 3
        assert_eq!(at(0, 0, 2), 0.0);
        assert_eq!(at(1, 0, 2), 1.0);
        assert_eq!(at(2, 2, 0), 0.0);
        assert_eq!(at(3, 2, 0), 1.0);
        assert!((at(0, 1, 0) - 0.841_471).abs() < 1e-6);
        assert!((at(2, 0, 1) - 0.841_471).abs() < 1e-6);
    }

    #[test]
    fn pe_rejects_bad_channel_count() {
        assert!(positional_embedding_2d::<f32>(6, 2, 2, &PeConfig::default()).is_err());
        assert!(positional_embedding_2d::<f32>(0, 2, 2, &PeConfig::default()).is_err());
    }

    #[test]
    fn mkcnn_rejects_even_and_empty_kernel_sets() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(mkcnn(&mut tape, x, &MkcnnParams::default()).is_err());
        let even = MkcnnParams { branches: vec![(2, w)] };
        assert!(mkcnn(&mut tape, x, &even).is_err());
    }

    #[test]
    fn stem_shapes_and_divisibility() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let w = tape.constant(Tensor::zeros(&[8, 3, 4, 4])).unwrap();
        let g = tape.constant(Tensor::ones(&[8])).unwrap();
        let b = tape.constant(Tensor::zeros(&[8])).unwrap();
        let y = stem(&mut tape, x, w, g, b).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 8, 16, 16]);
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        let odd = tape.constant(Tensor::zeros(&[1, 3, 30, 30])).unwrap();
        let err = stem(&mut tape, odd, w, g, b).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"));
    }
}
