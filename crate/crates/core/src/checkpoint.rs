//! Binary checkpoint format.
//!
//! ```text
//! "PEFN"  u32 version
//! u32 len + UTF-8 `key = value` header (model config + training counters)
//! u32 tensor count
//! per tensor: u16 len + UTF-8 name, u8 rank, u32 extents, f32 data
//! ```
//!
//! All integers and floats are little-endian. Tensors are model parameters,
//! batch-norm running statistics (`<norm>.running_mean`, `.running_var`,
//! `.num_batches`) and, when present, Adam moments (`adam.m.<name>`,
//! `adam.v.<name>`).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::autograd::BatchNormStats;
use crate::config::{kv_get, parse_kv, render_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::optim::{AdamConfig, OptimState};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PEFN";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const NUM_BATCHES: &str = ".num_batches";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optim: Option<OptimState>,
    /// Completed training epochs.
    pub epoch: u64,
    pub best_val_dice: f64,
    /// Training resolution; inference resizes inputs to it.
    pub img_size: usize,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, img_size: usize) -> Self {
        Self {
            model,
            optim: None,
            epoch: 0,
            best_val_dice: f64::NEG_INFINITY,
            img_size,
        }
    }

    pub fn step(&self) -> u64 {
        self.optim.as_ref().map_or(0, |o| o.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.model.config.to_kv();
        header.push(("img_size", self.img_size.to_string()));
        header.push(("step", self.step().to_string()));
        header.push(("epoch", self.epoch.to_string()));
        // Debug formatting of f64 round-trips exactly
        header.push(("best_val_dice", format!("{:?}", self.best_val_dice)));
        header.push(("has_optimizer", self.optim.is_some().to_string()));
        if let Some(o) = &self.optim {
            header.push(("adam_beta1", format!("{:?}", o.config.beta1)));
            header.push(("adam_beta2", format!("{:?}", o.config.beta2)));
            header.push(("adam_eps", format!("{:?}", o.config.eps)));
        }
        let header = render_kv(header);

        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (name, s) in self.model.params.norms() {
            let c = s.mean.len();
            tensors.push((format!("{name}{RUNNING_MEAN}"), Tensor::new(&[c], s.mean.clone())?));
            tensors.push((format!("{name}{RUNNING_VAR}"), Tensor::new(&[c], s.var.clone())?));
            if s.tracked > 1 << 24 {
                return Err(Error::Checkpoint(format!(
                    "batch counter of `{name}` exceeds f32 precision"
                )));
            }
            tensors.push((
                format!("{name}{NUM_BATCHES}"),
                Tensor::new(&[1], vec![s.tracked as f32])?,
            ));
        }
        if let Some(o) = &self.optim {
            for (name, t) in &o.m {
                tensors.push((format!("{ADAM_M}{name}"), t.clone()));
            }
            for (name, t) in &o.v {
                tensors.push((format!("{ADAM_V}{name}"), t.clone()));
            }
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&u32::try_from(header.len()).map_err(too_big)?.to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&u32::try_from(tensors.len()).map_err(too_big)?.to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&u16::try_from(name.len()).map_err(too_big)?.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a PEFN checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let hlen = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let kv = parse_kv(header)?;
        let config = ModelConfig::from_kv(&kv)?;
        let req = |k: &str| Error::Checkpoint(format!("header is missing `{k}`"));
        let img_size: usize = kv_get(&kv, "img_size")?.ok_or_else(|| req("img_size"))?;
        let step: u64 = kv_get(&kv, "step")?.ok_or_else(|| req("step"))?;
        let epoch: u64 = kv_get(&kv, "epoch")?.ok_or_else(|| req("epoch"))?;
        let best_val_dice: f64 = kv_get(&kv, "best_val_dice")?.ok_or_else(|| req("best_val_dice"))?;
        let has_optimizer: bool = kv_get(&kv, "has_optimizer")?.ok_or_else(|| req("has_optimizer"))?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors: IndexMap<String, Tensor<f32>> = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes at offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }

        let mut take = |name: &str| {
            tensors
                .shift_remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let layout = crate::params::Layout::of(&config)?;
        let mut params = IndexMap::new();
        for spec in &layout.params {
            params.insert(spec.name.clone(), take(&spec.name)?);
        }
        let mut norms = IndexMap::new();
        for (name, _) in &layout.norms {
            let tracked = take(&format!("{name}{NUM_BATCHES}"))?.data()[0] as u64;
            norms.insert(
                name.clone(),
                BatchNormStats {
                    mean: take(&format!("{name}{RUNNING_MEAN}"))?.into_data(),
                    var: take(&format!("{name}{RUNNING_VAR}"))?.into_data(),
                    tracked,
                },
            );
        }
        let optim = if has_optimizer {
            let f = |k: &str| -> Result<f64> { kv_get(&kv, k)?.ok_or_else(|| req(k)) };
            let adam = AdamConfig {
                beta1: f("adam_beta1")?,
                beta2: f("adam_beta2")?,
                eps: f("adam_eps")?,
            };
            let mut m = IndexMap::new();
            let mut v = IndexMap::new();
            for spec in &layout.params {
                m.insert(spec.name.clone(), take(&format!("{ADAM_M}{}", spec.name))?);
                v.insert(spec.name.clone(), take(&format!("{ADAM_V}{}", spec.name))?);
            }
            Some(OptimState {
                config: adam,
                m,
                v,
                step,
            })
        } else {
            None
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let model = Model::from_parts(config, ParameterStore::from_parts(params, norms))?;
        if let Some(o) = &optim {
            for (name, p) in model.params.iter() {
                if o.m[name].shape() != p.shape() || o.v[name].shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment shape mismatch for `{name}`"
                    )));
                }
            }
        }
        Ok(Self {
            model,
            optim,
            epoch,
            best_val_dice,
            img_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn too_big<E>(_: E) -> Error {
    Error::Checkpoint("field too large for the checkpoint format".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated checkpoint: need {n} bytes of {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn tiny_ckpt() -> Checkpoint {
        let mut cfg = ModelConfig::preset(Preset::Toy);
        cfg.stage_widths = [8, 16, 32, 64];
        cfg.head_channels = 4;
        let mut model = Model::build(cfg, 3).unwrap();
        model.logits_train(&Tensor::full(&[2, 3, 32, 32], 0.1)).unwrap();
        let mut ck = Checkpoint::new(model, 32);
        let mut o = OptimState::new(&ck.model.params, AdamConfig::default());
        o.step = 5;
        for t in o.m.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.25);
        }
        ck.optim = Some(o);
        ck.epoch = 2;
        ck.best_val_dice = 0.1 + 0.2;
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = tiny_ckpt();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"PEFN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny_ckpt().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated") && err.contains("offset"), "{err}");
    }
}
