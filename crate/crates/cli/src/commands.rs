use std::fs;
use std::time::Instant;

use pefnet::checkpoint::Checkpoint;
use pefnet::config::parse_usize_list;
use pefnet::data::{load_dataset, predict_png, save_dataset, split, synth_dataset, SegmentationSample};
use pefnet::gradcheck;
use pefnet::metrics::EvalReport;
use pefnet::params::Layout;
use pefnet::train::{self, OutputDir, TrainState, LAST_CHECKPOINT};
use pefnet::{Error, Fusion, Model, ModelConfig, Preset};

use crate::settings::{Layers, RunConfig, Source};
use crate::{EvalArgs, GradcheckArgs, PredictArgs, RunFlags, SummaryArgs, SynthArgs, TrainArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Image(_) => EXIT_DATA,
            Error::Numerical(_) | Error::NonFinite { .. } => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

fn layers(f: &RunFlags) -> pefnet::Result<Layers> {
    let mut l = Layers::new(f.config.as_deref())?;
    l.flag("data", f.data.as_ref().map(|p| p.display()));
    l.flag("synth", f.synth);
    l.flag("img_size", f.img_size);
    l.flag("preset", f.preset.as_ref());
    l.flag("mkcnn_kernels", f.mkcnn_kernels.as_ref());
    l.flag("fusion", f.fusion.as_ref());
    l.switch("no_mpe", f.no_mpe);
    l.flag("alpha", f.alpha);
    l.flag("lr", f.lr);
    l.flag("eta_min", f.eta_min);
    l.flag("epochs", f.epochs);
    l.flag("batch", f.batch);
    l.flag("seed", f.seed);
    l.flag("out", f.out.as_ref().map(|p| p.display()));
    l.flag("threshold", f.threshold);
    l.flag("split", f.split.as_ref());
    l.switch("no_augment", f.no_augment);
    Ok(l)
}

fn load_source(source: &Source, size: usize, seed: u64) -> pefnet::Result<Vec<SegmentationSample>> {
    let samples = match source {
        Source::Dir(d) => load_dataset(d, size)?,
        Source::Synth(n) => synth_dataset(*n, size, seed)?,
    };
    if samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    Ok(samples)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let rc = RunConfig::resolve(&layers(&a.run)?)?;
    let mut tc = rc.train.clone();
    tc.max_epochs_this_run = a.max_epochs_this_run;
    let samples = load_source(&rc.source, rc.img_size, rc.seed)?;
    let (train_set, val_set, test_set) = split(&samples, &rc.split)?;
    if train_set.is_empty() {
        return Err(Error::Data("the split leaves no training samples".into()).into());
    }

    fs::create_dir_all(&rc.out)?;
    fs::write(rc.out.join("config.txt"), rc.render())?;
    let out = OutputDir {
        root: rc.out.clone(),
        img_size: rc.img_size,
    };
    let mut state = if a.resume {
        let ck = Checkpoint::load(&rc.out.join(LAST_CHECKPOINT))?;
        if ck.model.config != rc.model || ck.img_size != rc.img_size {
            return Err(usage("checkpoint was trained with a different model or image size"));
        }
        train::truncate_metrics(&out.metrics(), ck.epoch)?;
        eprintln!("resuming after epoch {} (step {})", ck.epoch, ck.step());
        TrainState::from_checkpoint(ck)
    } else {
        if out.metrics().exists() {
            fs::remove_file(out.metrics())?;
        }
        TrainState::new(Model::build(rc.model.clone(), rc.seed)?, tc.adam)
    };

    eprintln!(
        "training {} samples ({} val, {} test), {} epochs of {} steps",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        tc.epochs,
        tc.steps_per_epoch(train_set.len())
    );
    let start = Instant::now();
    train::train(&mut state, &train_set, &val_set, &tc, Some(&out), |log| {
        eprintln!(
            "epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.5}  val IoU {:.4}  Dice {:.4}  [{:.0}s]",
            log.epoch,
            log.step,
            log.lr,
            log.train_loss,
            log.val_iou,
            log.val_dice,
            start.elapsed().as_secs_f64()
        );
    })?;

    if !test_set.is_empty() && state.epoch as usize == tc.epochs {
        let report = train::evaluate(&state.model, &test_set, tc.threshold, tc.batch_size)?;
        fs::write(rc.out.join("test_eval.csv"), report.to_csv())?;
        println!("test {}", report.summary_line());
    }
    println!(
        "best val Dice {:.4}; outputs in {}",
        state.best_val_dice,
        rc.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ck = match (&a.ckpt, a.self_test) {
        (Some(p), _) => Some(Checkpoint::load(p)?),
        (None, true) => None,
        (None, false) => return Err(usage("--ckpt is required (or --self-test)")),
    };
    let size = a.img_size.or(ck.as_ref().map(|c| c.img_size)).unwrap_or(64);
    let source = match (&a.data, a.synth) {
        (Some(d), None) => Source::Dir(d.clone()),
        (None, Some(n)) => Source::Synth(n),
        _ => return Err(usage("give exactly one of --data DIR or --synth N")),
    };
    let samples = load_source(&source, size, a.seed)?;
    let report = match &ck {
        Some(ck) => train::evaluate(&ck.model, &samples, a.threshold, 4)?,
        None => {
            let mut r = EvalReport::default();
            for s in &samples {
                r.push(s.id.clone(), &s.mask, &s.mask)?;
            }
            r
        }
    };
    let csv = report.to_csv();
    if let Some(path) = &a.out {
        fs::write(path, &csv)?;
    }
    print!("{csv}");
    println!("{}", report.summary_line());
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.ckpt)?;
    predict_png(&ck.model, ck.img_size, &a.image, &a.out, a.threshold)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let samples = a.samples.unwrap_or(if a.quick { 200 } else { 1000 });
    let start = Instant::now();
    let results = gradcheck::full_suite(a.seed, samples)?;
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        failed += usize::from(!r.passed());
    }
    println!(
        "{} checks, {} failed, {:.2}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} gradient checks failed"),
        });
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let samples = synth_dataset(a.n, a.size, a.seed)?;
    save_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn model_config(preset: Preset, a: &SummaryArgs) -> pefnet::Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(preset);
    if let Some(k) = &a.mkcnn_kernels {
        cfg.mkcnn_kernels = parse_usize_list(k)?;
    }
    if let Some(f) = &a.fusion {
        cfg.fusion = f.parse::<Fusion>()?;
    }
    cfg.use_mpe = !a.no_mpe;
    Ok(cfg)
}

pub fn summary(a: SummaryArgs) -> CmdResult {
    match &a.preset {
        Some(p) => {
            let preset: Preset = p.parse()?;
            let layout = Layout::of(&model_config(preset, &a)?)?;
            println!("{:<12} {:>12}", "module", "parameters");
            for (module, n) in layout.module_counts() {
                println!("{module:<12} {n:>12}");
            }
            println!("{:<12} {:>12}", "total", layout.param_count());
        }
        None => {
            println!("{:<8} {:>14}", "preset", "parameters");
            for preset in Preset::ALL {
                let n = Layout::of(&model_config(preset, &a)?)?.param_count();
                println!("{:<8} {:>14}", preset.to_string(), n);
            }
        }
    }
    Ok(())
}
