//! Named learnable tensors and batch-norm running statistics.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchNormStats, Tape, Var};
use crate::blocks::{DEPTHWISE_KERNEL, EXPANSION};
use crate::config::{Fusion, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Standard deviation of the logit layer weights.
pub const LOGIT_INIT_STD: f64 = 1.0;
/// Variance gain of fan-in scaled layers followed by a GELU.
pub const HE_GAIN: f64 = 2.0;
/// Initial value of the ConvNeXt layer-scale vectors.
pub const LAYER_SCALE_INIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter and batch-norm layer a config needs, in canonical order.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    /// `(prefix, channels)` of each batch-norm layer.
    pub norms: Vec<(String, usize)>,
}

impl Layout {
    pub fn of(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut l = Layout::default();
        let c = cfg.stage_widths;
        let weight = |l: &mut Layout, name: String, shape: Vec<usize>| {
            l.params.push(ParamSpec {
                name,
                shape,
                init: Init::TruncNormal(INIT_STD),
            })
        };
        // The head has no normalization, so its upsampling convs are
        // fan-in scaled to carry signal through to the logits.
        let scaled = |l: &mut Layout, name: String, shape: Vec<usize>, fan_in: usize, gain: f64| {
            l.params.push(ParamSpec {
                name,
                shape,
                init: Init::TruncNormal((gain / fan_in as f64).sqrt()),
            })
        };
        let constant = |l: &mut Layout, name: String, n: usize, v: f64| {
            l.params.push(ParamSpec {
                name,
                shape: vec![n],
                init: Init::Const(v),
            })
        };
        let norm = |l: &mut Layout, prefix: &str, n: usize| {
            constant(l, format!("{prefix}.gamma"), n, 1.0);
            constant(l, format!("{prefix}.beta"), n, 0.0);
        };

        weight(&mut l, "stem.weight".into(), vec![c[0], 3, 4, 4]);
        norm(&mut l, "stem.norm", c[0]);
        for s in 0..4 {
            if s > 0 {
                let p = format!("stages.{s}.down");
                norm(&mut l, &format!("{p}.norm"), c[s - 1]);
                weight(&mut l, format!("{p}.weight"), vec![c[s], c[s - 1], 2, 2]);
                constant(&mut l, format!("{p}.bias"), c[s], 0.0);
            }
            for j in 0..cfg.stage_depths[s] {
                let p = format!("stages.{s}.blocks.{j}");
                let (w, hidden) = (c[s], EXPANSION * c[s]);
                weight(
                    &mut l,
                    format!("{p}.dw.weight"),
                    vec![w, 1, DEPTHWISE_KERNEL, DEPTHWISE_KERNEL],
                );
                norm(&mut l, &format!("{p}.norm"), w);
                weight(&mut l, format!("{p}.expand.weight"), vec![hidden, w, 1, 1]);
                constant(&mut l, format!("{p}.expand.bias"), hidden, 0.0);
                weight(&mut l, format!("{p}.project.weight"), vec![w, hidden, 1, 1]);
                constant(&mut l, format!("{p}.project.bias"), w, 0.0);
                constant(&mut l, format!("{p}.layer_scale"), w, LAYER_SCALE_INIT);
            }
        }
        if cfg.use_mpe {
            for (lvl, &w) in c.iter().enumerate().take(3) {
                let p = format!("skips.{lvl}");
                for &k in &cfg.mkcnn_kernels {
                    weight(&mut l, format!("{p}.mkcnn.k{k}.weight"), vec![w, w, k, k]);
                }
                norm(&mut l, &format!("{p}.bn"), w);
                l.norms.push((format!("{p}.bn"), w));
            }
        }
        for lvl in (0..3).rev() {
            let p = format!("decoder.{lvl}");
            weight(&mut l, format!("{p}.up.weight"), vec![c[lvl + 1], c[lvl], 2, 2]);
            constant(&mut l, format!("{p}.up.bias"), c[lvl], 0.0);
            if cfg.fusion == Fusion::Concat {
                weight(&mut l, format!("{p}.fuse.weight"), vec![c[lvl], 2 * c[lvl], 1, 1]);
                constant(&mut l, format!("{p}.fuse.bias"), c[lvl], 0.0);
            }
            weight(&mut l, format!("{p}.refine.weight"), vec![c[lvl], c[lvl], 3, 3]);
            norm(&mut l, &format!("{p}.refine.bn"), c[lvl]);
            l.norms.push((format!("{p}.refine.bn"), c[lvl]));
        }
        let hc = cfg.head_channels;
        scaled(&mut l, "head.up1.weight".into(), vec![c[0], hc, 2, 2], c[0], HE_GAIN);
        constant(&mut l, "head.up1.bias".into(), hc, 0.0);
        scaled(&mut l, "head.up2.weight".into(), vec![hc, hc, 2, 2], hc, HE_GAIN);
        constant(&mut l, "head.up2.bias".into(), hc, 0.0);
        l.params.push(ParamSpec {
            name: "head.out.weight".into(),
            shape: vec![1, hc, 1, 1],
            init: Init::TruncNormal(LOGIT_INIT_STD),
        });
        constant(&mut l, "head.out.bias".into(), 1, 0.0);
        Ok(l)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    /// Parameter counts per top-level module (`stem`, `stages.1`, `skips.0`, ...).
    pub fn module_counts(&self) -> IndexMap<String, usize> {
        let mut out = IndexMap::new();
        for p in &self.params {
            let mut parts = p.name.split('.');
            let first = parts.next().unwrap_or_default();
            let key = match parts.next() {
                Some(second) if second.chars().all(|c| c.is_ascii_digit()) => format!("{first}.{second}"),
                _ => first.to_string(),
            };
            *out.entry(key).or_insert(0) += p.numel();
        }
        out
    }
}

/// Ordered map from dotted parameter names to tensors, plus running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T: Scalar = f32> {
    params: IndexMap<String, Tensor<T>>,
    norms: IndexMap<String, BatchNormStats<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    /// Seeded initialization; same `(cfg, seed)` gives bit-identical stores.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::of(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut params = IndexMap::new();
        for spec in &layout.params {
            let t = match spec.init {
                Init::Const(v) => Tensor::full(&spec.shape, T::of(v)),
                Init::TruncNormal(std) => Tensor::from_fn(&spec.shape, |_| loop {
                    let z: f64 = std_normal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                }),
            };
            params.insert(spec.name.clone(), t);
        }
        let norms = layout
            .norms
            .iter()
            .map(|(name, c)| (name.clone(), BatchNormStats::new(*c)))
            .collect();
        Ok(Self { params, norms })
    }

    pub fn from_parts(params: IndexMap<String, Tensor<T>>, norms: IndexMap<String, BatchNormStats<T>>) -> Self {
        Self { params, norms }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn norms(&self) -> &IndexMap<String, BatchNormStats<T>> {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut IndexMap<String, BatchNormStats<T>> {
        &mut self.norms
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self.norms.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Binding> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.param(t.clone())?);
        }
        Ok(Binding { vars })
    }

    /// Check that the store holds exactly the tensors `cfg` needs.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = Layout::of(cfg)?;
        if layout.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "store has {} parameters, config needs {}",
                self.params.len(),
                layout.params.len()
            )));
        }
        for spec in &layout.params {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        for (name, c) in &layout.norms {
            match self.norms.get(name) {
                Some(s) if s.mean.len() == *c => {}
                _ => return Err(Error::Config(format!("missing or mis-sized running stats `{name}`"))),
            }
        }
        Ok(())
    }
}

/// Tape variables for each parameter of a bound [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::preset(Preset::Toy);
        let a = ParameterStore::<f32>::build(&cfg, 3).unwrap();
        let b = ParameterStore::<f32>::build(&cfg, 3).unwrap();
        let c = ParameterStore::<f32>::build(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rules() {
        let cfg = ModelConfig::preset(Preset::Toy);
        let s = ParameterStore::<f32>::build(&cfg, 0).unwrap();
        assert!(s
            .get("stages.0.blocks.0.layer_scale")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1e-6));
        assert!(s.get("stem.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(s.get("head.out.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let w = s.get("stem.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
        let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01);
        s.check_layout(&cfg).unwrap();
    }

    #[test]
    fn preset_counts_are_ordered() {
        let count = |p| Layout::of(&ModelConfig::preset(p)).unwrap().param_count();
        let (toy, tiny, small, base) = (
            count(Preset::Toy),
            count(Preset::Tiny),
            count(Preset::Small),
            count(Preset::Base),
        );
        assert!(toy < tiny && tiny < small && small < base);
    }
}
