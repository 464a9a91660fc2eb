//! Reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Ops are
//! recorded in execution order, which is a topological order by
//! construction, and [`Tape::backward`] walks them in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, NormCache};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Whether normalization layers use batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode batches folded into the running averages.
    pub tracked: u64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            tracked: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormStats<U> {
        BatchNormStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
            tracked: self.tracked,
        }
    }
}

/// Batch-norm hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormConfig {
    /// Weight kept on the previous running value at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        padding: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: NormCache<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: NormCache<T>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ChannelScale {
        x: usize,
        scale: usize,
    },
    ConcatChannels(usize, usize),
    Sum(usize),
    Jaccard {
        pred: usize,
        target: Tensor<T>,
        alpha: T,
        per_image: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a differentiable computation and replays it backwards.
///
/// Single-threaded: one tape has one logical owner.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autograd(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        let i = self.index(v)?;
        Ok(&self.nodes[i])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn any_grad(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Cross-correlation (no kernel flip) of `x [b,ci,h,w]` with `w [co,ci,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let out = kernels::conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            stride,
            padding,
        )?;
        let mut deps = vec![xi, wi];
        deps.extend(bi);
        let rg = self.any_grad(&deps);
        self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                padding,
            },
            rg,
            "conv2d",
        )
    }

    /// Per-channel convolution with a `[c,1,k,k]` kernel, stride 1, same padding.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let out = kernels::depthwise_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            padding,
        )?;
        let mut deps = vec![xi, wi];
        deps.extend(bi);
        let rg = self.any_grad(&deps);
        self.push(
            out,
            Op::DepthwiseConv2d {
                x: xi,
                w: wi,
                b: bi,
                padding,
            },
            rg,
            "depthwise_conv2d",
        )
    }

    /// Scatter-add transposed convolution with weight `[ci,co,kh,kw]`.
    ///
    /// Output extent is `(h-1)*stride + k - 2*padding`, i.e. exactly
    /// `h*stride` when `k == stride` and `padding == 0`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let out = kernels::conv_transpose2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            stride,
            padding,
        )?;
        let mut deps = vec![xi, wi];
        deps.extend(bi);
        let rg = self.any_grad(&deps);
        self.push(
            out,
            Op::ConvTranspose2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                padding,
            },
            rg,
            "conv_transpose2d",
        )
    }

    /// Batch normalization over `(b, h, w)` per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode reads `stats` and fails if they were never set.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let xv = &self.nodes[xi].value;
        let (b, c, h, w) = xv.dims4()?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running stats have {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if b * h * w < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batch_norm: train mode needs at least 2 values per channel, got {}",
                        b * h * w
                    )));
                }
                let (mean, var) = kernels::channel_moments(xv)?;
                let m = T::of(cfg.momentum);
                let one_m = T::of(1.0 - cfg.momentum);
                for ch in 0..c {
                    stats.mean[ch] = m * stats.mean[ch] + one_m * T::of(mean[ch]);
                    stats.var[ch] = m * stats.var[ch] + one_m * T::of(var[ch]);
                }
                stats.tracked += 1;
                (
                    mean.iter().map(|&v| T::of(v)).collect::<Vec<_>>(),
                    var.iter()
                        .map(|&v| T::of(1.0 / (v + cfg.eps).sqrt()))
                        .collect::<Vec<_>>(),
                )
            }
            Mode::Eval => {
                if stats.tracked == 0 {
                    return Err(Error::InvalidArgument(
                        "batch_norm: eval mode before any train step and no loaded statistics".into(),
                    ));
                }
                (
                    stats.mean.clone(),
                    stats
                        .var
                        .iter()
                        .map(|v| T::of(1.0 / (v.as_f64() + cfg.eps).sqrt()))
                        .collect(),
                )
            }
        };
        let (out, cache) =
            kernels::channel_affine_normalize(xv, &mean, &inv_std, &self.nodes[gi].value, &self.nodes[bi].value)?;
        let rg = self.any_grad(&[xi, gi, bi]);
        self.push(
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
                batch_stats: mode == Mode::Train,
            },
            rg,
            "batch_norm",
        )
    }

    /// Layer normalization across channels at each spatial location.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let (out, cache) =
            kernels::layer_norm_forward(&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value, eps)?;
        let rg = self.any_grad(&[xi, gi, bi]);
        self.push(
            out,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            rg,
            "layer_norm_channels",
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.map(kernels::gelu);
        let rg = self.any_grad(&[xi]);
        self.push(out, Op::Gelu(xi), rg, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.map(kernels::sigmoid);
        let rg = self.any_grad(&[xi]);
        self.push(out, Op::Sigmoid(xi), rg, "sigmoid")
    }

    fn zip(&self, a: usize, b: usize, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        ensure_same_shape(av, bv, op)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let out = self.zip(ai, bi, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[ai, bi]);
        self.push(out, Op::Add(ai, bi), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let out = self.zip(ai, bi, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[ai, bi]);
        self.push(out, Op::Mul(ai, bi), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.map(|v| v * s);
        let rg = self.any_grad(&[xi]);
        self.push(out, Op::Scale(xi, s), rg, "scale")
    }

    /// Multiply channel `c` of `x [b,c,h,w]` by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xi, si) = (self.index(x)?, self.index(scale)?);
        let (xv, sv) = (&self.nodes[xi].value, &self.nodes[si].value);
        let (_, c, h, w) = xv.dims4()?;
        if sv.shape() != [c] {
            return Err(Error::Shape(format!(
                "channel_scale: scale shape {:?} does not match {c} channels",
                sv.shape()
            )));
        }
        let plane = h * w;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[(i / plane) % c])
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.any_grad(&[xi, si]);
        self.push(out, Op::ChannelScale { x: xi, scale: si }, rg, "channel_scale")
    }

    /// Concatenate along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (ba, ca, ha, wa) = av.dims4()?;
        let (bb, cb, hb, wb) = bv.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..ba {
            data.extend_from_slice(&av.data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&bv.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.any_grad(&[ai, bi]);
        self.push(out, Op::ConcatChannels(ai, bi), rg, "concat_channels")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        let rg = self.any_grad(&[xi]);
        self.push(out, Op::Sum(xi), rg, "sum")
    }

    /// Smoothed Jaccard loss `alpha * (1 - (alpha + I) / (alpha + U))` of
    /// probabilities `pred` against a binary `target`.
    ///
    /// `I = sum(y * p)`, `U = sum(y + p - y * p)`. With `per_image` the loss
    /// is computed per leading-axis slice and averaged; otherwise the sums
    /// run over the whole batch.
    pub fn jaccard_loss(&mut self, pred: Var, target: &Tensor<T>, alpha: T, per_image: bool) -> Result<Var> {
        let pi = self.index(pred)?;
        let pv = &self.nodes[pi].value;
        ensure_same_shape(pv, target, "jaccard_loss")?;
        let groups = jaccard_groups(pv, per_image);
        let mut total = T::zero();
        for (p, y) in pv.data().chunks(groups).zip(target.data().chunks(groups)) {
            let (n, d) = jaccard_terms(p, y, alpha);
            total = total + alpha * (T::one() - n / d);
        }
        let count = T::of((pv.len() / groups.max(1)).max(1) as f64);
        let out = Tensor::scalar(total / count);
        let rg = self.any_grad(&[pi]);
        self.push(
            out,
            Op::Jaccard {
                pred: pi,
                target: target.clone(),
                alpha,
                per_image,
            },
            rg,
            "jaccard_loss",
        )
    }

    /// Gradients of `loss` with respect to every node that requires one.
    ///
    /// Gradients from any earlier call are discarded first; nothing
    /// accumulates across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), T::one()));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.backward_node(i, &g)? {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.index(v)?;
        self.grads
            .get(i)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::Autograd(format!("no gradient recorded for variable {i}")))
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(x), val(w), stride, padding, g, needs(x))?;
                out.extend(dx.map(|d| (x, d)));
                out.push((w, dw));
                out.extend(b.map(|b| (b, db)));
            }
            &Op::DepthwiseConv2d { x, w, b, padding } => {
                let (dx, dw, db) = kernels::depthwise_backward(val(x), val(w), padding, g)?;
                out.push((x, dx));
                out.push((w, dw));
                out.extend(b.map(|b| (b, db)));
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(val(x), val(w), stride, padding, g, needs(x))?;
                out.extend(dx.map(|d| (x, d)));
                out.push((w, dw));
                out.extend(b.map(|b| (b, db)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(cache, val(*gamma), g, *batch_stats)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, val(*gamma), g)?;
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            &Op::Gelu(x) => {
                let d = val(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * kernels::gelu_grad(v));
                out.push((x, Tensor::new(g.shape(), d.collect())?));
            }
            &Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let d = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (T::one() - s));
                out.push((x, Tensor::new(g.shape(), d.collect())?));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                let da = val(b).data().iter().zip(g.data()).map(|(&v, &gv)| v * gv);
                let db = val(a).data().iter().zip(g.data()).map(|(&v, &gv)| v * gv);
                out.push((a, Tensor::new(g.shape(), da.collect())?));
                out.push((b, Tensor::new(g.shape(), db.collect())?));
            }
            &Op::Scale(x, s) => out.push((x, g.map(|v| v * s))),
            &Op::ChannelScale { x, scale } => {
                let (xv, sv) = (val(x), val(scale));
                let (_, c, h, w) = xv.dims4()?;
                let plane = h * w;
                let mut dscale = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for (idx, (&xval, &gv)) in xv.data().iter().zip(g.data()).enumerate() {
                    let ch = (idx / plane) % c;
                    dscale[ch] = dscale[ch] + xval * gv;
                    dx[idx] = gv * sv.data()[ch];
                }
                out.push((x, Tensor::new(xv.shape(), dx)?));
                out.push((scale, Tensor::new(&[c], dscale)?));
            }
            &Op::ConcatChannels(a, b) => {
                let (ba, ca, h, w) = val(a).dims4()?;
                let cb = val(b).dims4()?.1;
                let plane = h * w;
                let mut da = Vec::with_capacity(val(a).len());
                let mut db = Vec::with_capacity(val(b).len());
                for n in 0..ba {
                    let base = n * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                out.push((a, Tensor::new(val(a).shape(), da)?));
                out.push((b, Tensor::new(val(b).shape(), db)?));
            }
            &Op::Sum(x) => out.push((x, Tensor::full(val(x).shape(), g.item()?))),
            Op::Jaccard {
                pred,
                target,
                alpha,
                per_image,
            } => {
                let pv = val(*pred);
                let groups = jaccard_groups(pv, *per_image);
                let count = T::of((pv.len() / groups.max(1)).max(1) as f64);
                let scale = g.item()? / count;
                let mut d = Vec::with_capacity(pv.len());
                for (p, y) in pv.data().chunks(groups).zip(target.data().chunks(groups)) {
                    let (n, den) = jaccard_terms(p, y, *alpha);
                    // d/dp of -alpha*N/D with dN/dp = y, dD/dp = 1 - y
                    for &yv in y {
                        let dn = yv;
                        let dd = T::one() - yv;
                        d.push(-*alpha * (dn * den - n * dd) / (den * den) * scale);
                    }
                }
                out.push((*pred, Tensor::new(pv.shape(), d)?));
            }
        }
        Ok(out)
    }
}

fn jaccard_groups<T: Scalar>(pred: &Tensor<T>, per_image: bool) -> usize {
    match (per_image, pred.shape().first()) {
        (true, Some(&b)) if b > 0 => pred.len() / b,
        _ => pred.len().max(1),
    }
}

/// `(alpha + I, alpha + U)` for one group of predictions.
fn jaccard_terms<T: Scalar>(p: &[T], y: &[T], alpha: T) -> (T, T) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&pv, &yv) in p.iter().zip(y) {
        let prod = (pv * yv).as_f64();
        inter += prod;
        union += (yv + pv).as_f64() - prod;
    }
    (alpha + T::of(inter), alpha + T::of(union))
}
