//! Settings resolution: flags override the `--config` file, which overrides
//! built-in defaults. The resolved settings are written next to outputs.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use pefnet::config::{parse_kv, parse_usize_list, render_kv};
use pefnet::data::{AugmentationPolicy, SplitSpec};
use pefnet::metrics::LossConfig;
use pefnet::train::TrainConfig;
use pefnet::{Error, Fusion, ModelConfig, Preset, Result};

/// Keys accepted in a config file.
pub const KEYS: &[&str] = &[
    "data",
    "synth",
    "img_size",
    "preset",
    "mkcnn_kernels",
    "fusion",
    "no_mpe",
    "alpha",
    "lr",
    "eta_min",
    "epochs",
    "batch",
    "seed",
    "out",
    "ckpt",
    "threshold",
    "split",
    "no_augment",
];

/// Layered key/value lookup.
#[derive(Debug, Default)]
pub struct Layers {
    flags: IndexMap<String, String>,
    file: IndexMap<String, String>,
}

impl Layers {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                let kv = parse_kv(&text)?;
                if let Some(bad) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
                    return Err(Error::Config(format!("unknown config key `{bad}`")));
                }
                kv
            }
            None => IndexMap::new(),
        };
        Ok(Self {
            flags: IndexMap::new(),
            file,
        })
    }

    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.flags.insert(key.to_string(), v.to_string());
        }
    }

    pub fn switch(&mut self, key: &str, on: bool) {
        if on {
            self.flags.insert(key.to_string(), "true".into());
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.flags.get(key).or_else(|| self.file.get(key)).map(String::as_str)
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value for `{key}`: {v:?}"))),
            None => Ok(default),
        }
    }

    pub fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value for `{key}`: {v:?}")))
            })
            .transpose()
    }
}

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Synth(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub source: Source,
    pub img_size: usize,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse_split(s: &str, seed: u64) -> Result<SplitSpec> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("invalid split {s:?}; expected train,val,test")))?;
    match parts[..] {
        [train, val, test] => Ok(SplitSpec { train, val, test, seed }),
        _ => Err(Error::Config(format!("split needs three fractions, got {s:?}"))),
    }
}

impl RunConfig {
    pub fn resolve(l: &Layers) -> Result<Self> {
        let seed: u64 = l.get("seed", 0)?;
        let source = match (l.opt::<PathBuf>("data")?, l.opt::<usize>("synth")?) {
            (Some(_), Some(_)) => return Err(Error::Config("give either --data or --synth, not both".into())),
            (Some(d), None) => Source::Dir(d),
            (None, Some(n)) => Source::Synth(n),
            (None, None) => return Err(Error::Config("a dataset is required: --data DIR or --synth N".into())),
        };
        let preset: Preset = l.get("preset", Preset::Toy)?;
        let mut model = ModelConfig::preset(preset);
        if let Some(k) = l.opt::<String>("mkcnn_kernels")? {
            model.mkcnn_kernels = parse_usize_list(&k)?;
        }
        model.fusion = l.get("fusion", Fusion::Add)?;
        model.use_mpe = !l.get("no_mpe", false)?;
        model.validate()?;

        let img_size: usize = l.get("img_size", 64)?;
        if img_size == 0 || !img_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "--img-size {img_size} is not divisible by 32 (the network stride)"
            )));
        }
        let augment = if l.get("no_augment", false)? {
            AugmentationPolicy {
                seed,
                ..AugmentationPolicy::none()
            }
        } else {
            AugmentationPolicy {
                seed,
                ..AugmentationPolicy::default()
            }
        };
        let train = TrainConfig {
            epochs: l.get("epochs", 40)?,
            batch_size: l.get("batch", 4)?,
            lr_max: l.get("lr", 1e-4)?,
            eta_min: l.get("eta_min", 0.0)?,
            loss: LossConfig {
                alpha: l.get("alpha", 1.0)?,
                ..LossConfig::default()
            },
            augment,
            seed,
            threshold: l.get("threshold", 0.5)?,
            ..TrainConfig::default()
        };
        train.validate()?;
        let split = parse_split(&l.get("split", "0.6,0.2,0.2".to_string())?, seed)?;
        Ok(Self {
            source,
            img_size,
            preset,
            model,
            train,
            split,
            seed,
            out: l.get("out", PathBuf::from("runs/latest"))?,
        })
    }

    /// Every resolved setting, in config-file syntax.
    pub fn render(&self) -> String {
        let mut kv: Vec<(&str, String)> = match &self.source {
            Source::Dir(d) => vec![("data", d.display().to_string())],
            Source::Synth(n) => vec![("synth", n.to_string())],
        };
        kv.extend([
            ("img_size", self.img_size.to_string()),
            ("preset", self.preset.to_string()),
            ("mkcnn_kernels", join(&self.model.mkcnn_kernels)),
            ("fusion", self.model.fusion.to_string()),
            ("no_mpe", (!self.model.use_mpe).to_string()),
            ("alpha", self.train.loss.alpha.to_string()),
            ("lr", self.train.lr_max.to_string()),
            ("eta_min", self.train.eta_min.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch", self.train.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("threshold", self.train.threshold.to_string()),
            (
                "split",
                format!("{},{},{}", self.split.train, self.split.val, self.split.test),
            ),
            ("no_augment", self.train.augment.is_identity().to_string()),
        ]);
        let mut s = String::from("# resolved run configuration\n");
        s.push_str(&render_kv(kv));
        // model shape implied by the preset, as comments so the file
        // can be passed back through --config
        for (k, v) in self.model.to_kv() {
            if matches!(k, "stage_depths" | "stage_widths" | "head_channels" | "pe_base") {
                s.push_str(&format!("# {k} = {v}\n"));
            }
        }
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        std::fs::write(&path, "synth = 8\nepochs = 3  # short\nlr = 0.01\n").unwrap();
        let mut l = Layers::new(Some(&path)).unwrap();
        l.flag("lr", Some(0.5));
        let rc = RunConfig::resolve(&l).unwrap();
        assert_eq!(rc.train.epochs, 3);
        assert_eq!(rc.train.lr_max, 0.5);
        assert_eq!(rc.source, Source::Synth(8));

        // the rendered file resolves back to the same settings
        let rendered = dir.path().join("config.txt");
        std::fs::write(&rendered, rc.render()).unwrap();
        let again = RunConfig::resolve(&Layers::new(Some(&rendered)).unwrap()).unwrap();
        assert_eq!(again.render(), rc.render());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(Layers::new(Some(&path)).is_err());
        let mut l = Layers::default();
        l.flag("synth", Some(4));
        l.flag("img_size", Some(33));
        assert!(RunConfig::resolve(&l)
            .unwrap_err()
            .to_string()
            .contains("divisible by 32"));
    }
}
