//! Model hyperparameters and the flat `key = value` text format used by
//! config files and checkpoint headers.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.insert(key.replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

pub fn render_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    }
    s
}

/// Parse a typed value out of a kv map, naming the key on failure.
pub fn kv_get<T: FromStr>(map: &IndexMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value for `{key}`: {v:?}")))
        })
        .transpose()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid integer list {s:?}")))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// How skip features meet upsampled decoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// `y_out = y_encoder + y_decoder`
    Add,
    /// Channel concatenation followed by a 1x1 conv back to the decoder width.
    Concat,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            _ => Err(Error::Config(format!("unknown fusion {s:?} (add|concat)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Add => "add",
            Self::Concat => "concat",
        })
    }
}

/// Named architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Tiny,
    Small,
    Base,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Toy, Self::Tiny, Self::Small, Self::Base];
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            _ => Err(Error::Config(format!("unknown preset {s:?} (toy|tiny|small|base)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Base => "base",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub mkcnn_kernels: Vec<usize>,
    pub fusion: Fusion,
    pub pe_base: f64,
    pub head_channels: usize,
    /// When false the skips are plain identity paths (ablation baseline).
    pub use_mpe: bool,
}

/// Width of the upsampling head shared by all presets.
pub const DEFAULT_HEAD_CHANNELS: usize = 64;

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (depths, widths) = match p {
            Preset::Toy => ([1, 1, 1, 1], [16, 32, 64, 128]),
            Preset::Tiny => ([3, 3, 9, 3], [96, 192, 384, 768]),
            Preset::Small => ([3, 3, 27, 3], [96, 192, 384, 768]),
            Preset::Base => ([3, 3, 27, 3], [128, 256, 512, 1024]),
        };
        Self {
            stage_depths: depths,
            stage_widths: widths,
            mkcnn_kernels: vec![1, 3, 5, 7],
            fusion: Fusion::Add,
            pe_base: 10_000.0,
            head_channels: DEFAULT_HEAD_CHANNELS,
            use_mpe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &w in &self.stage_widths {
            if w == 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} is not a positive multiple of 4 (positional embedding needs c % 4 == 0)"
                )));
            }
        }
        if self.mkcnn_kernels.is_empty() {
            return Err(Error::Config("mkcnn kernel set is empty".into()));
        }
        if let Some(k) = self.mkcnn_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::Config(format!("mkcnn kernel {k} must be odd")));
        }
        let mut sorted = self.mkcnn_kernels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.mkcnn_kernels.len() {
            return Err(Error::Config("mkcnn kernel sizes must be distinct".into()));
        }
        if !(self.pe_base.is_finite() && self.pe_base > 0.0) {
            return Err(Error::Config(format!("pe_base must be positive, got {}", self.pe_base)));
        }
        if self.head_channels == 0 {
            return Err(Error::Config("head_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage_depths", join(&self.stage_depths)),
            ("stage_widths", join(&self.stage_widths)),
            ("mkcnn_kernels", join(&self.mkcnn_kernels)),
            ("fusion", self.fusion.to_string()),
            ("pe_base", self.pe_base.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("use_mpe", self.use_mpe.to_string()),
        ]
    }

    /// Read a config from a kv map; every model key must be present.
    pub fn from_kv(map: &IndexMap<String, String>) -> Result<Self> {
        let need = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing model key `{k}`")))
        };
        let four = |k: &str| -> Result<[usize; 4]> {
            let v = parse_usize_list(need(k)?)?;
            v.try_into()
                .map_err(|_| Error::Config(format!("`{k}` needs exactly 4 values")))
        };
        let cfg = Self {
            stage_depths: four("stage_depths")?,
            stage_widths: four("stage_widths")?,
            mkcnn_kernels: parse_usize_list(need("mkcnn_kernels")?)?,
            fusion: need("fusion")?.parse()?,
            pe_base: kv_get(map, "pe_base")?.ok_or_else(|| Error::Config("missing `pe_base`".into()))?,
            head_channels: kv_get(map, "head_channels")?
                .ok_or_else(|| Error::Config("missing `head_channels`".into()))?,
            use_mpe: kv_get(map, "use_mpe")?.ok_or_else(|| Error::Config("missing `use_mpe`".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_and_comments() {
        let map = parse_kv("# header\nseed = 7  # trailing\n\nmkcnn-kernels = 1,3\n").unwrap();
        assert_eq!(map["seed"], "7");
        assert_eq!(map["mkcnn_kernels"], "1,3");
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn model_config_round_trips() {
        for p in Preset::ALL {
            let cfg = ModelConfig::preset(p);
            cfg.validate().unwrap();
            let text = render_kv(cfg.to_kv());
            assert_eq!(ModelConfig::from_kv(&parse_kv(&text).unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn width_not_divisible_by_four_is_rejected() {
        let mut cfg = ModelConfig::preset(Preset::Toy);
        cfg.stage_widths[1] = 30;
        assert!(cfg.validate().unwrap_err().to_string().contains("multiple of 4"));
    }
}
