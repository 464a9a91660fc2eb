//! Python bindings. Tensors cross the boundary as flat lists in row-major
//! order together with their shape.

use std::path::PathBuf;

use pefnet::blocks::PeConfig;
use pefnet::checkpoint::Checkpoint;
use pefnet::data::{collate, synth_dataset, SegmentationSample};
use pefnet::metrics::LossConfig;
use pefnet::optim::{AdamConfig, ScheduleConfig};
use pefnet::params::Layout;
use pefnet::train::{self, TrainState};
use pefnet::{Error, Fusion, Model, ModelConfig, Preset, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

/// `(id, image, mask)` with flat image and mask data.
type FlatSample = (String, Vec<f32>, Vec<f32>);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::Data(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn flat<T: pefnet::Scalar>(shape: &[usize], data: Vec<T>) -> PyResult<Tensor<T>> {
    Tensor::new(shape, data).map_err(py_err)
}

fn model_config(preset: &str, mkcnn_kernels: Option<Vec<usize>>, fusion: &str, use_mpe: bool) -> PyResult<ModelConfig> {
    let preset: Preset = preset.parse().map_err(py_err)?;
    let mut cfg = ModelConfig::preset(preset);
    if let Some(k) = mkcnn_kernels {
        cfg.mkcnn_kernels = k;
    }
    cfg.fusion = fusion.parse::<Fusion>().map_err(py_err)?;
    cfg.use_mpe = use_mpe;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// IoU of two binary masks given as flat lists.
#[pyfunction]
fn iou(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    let n = x.len();
    pefnet::metrics::iou(&flat(&[n], x)?, &flat(&[y.len()], y)?).map_err(py_err)
}

/// Dice coefficient of two binary masks given as flat lists.
#[pyfunction]
fn dice(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    let n = x.len();
    pefnet::metrics::dice(&flat(&[n], x)?, &flat(&[y.len()], y)?).map_err(py_err)
}

/// Smoothed Jaccard loss of probabilities `pred` against a binary `target`.
#[pyfunction]
#[pyo3(signature = (target, pred, alpha = 1.0))]
fn jaccard_loss(target: Vec<f64>, pred: Vec<f64>, alpha: f64) -> PyResult<f64> {
    let cfg = LossConfig {
        alpha,
        per_image: false,
    };
    let n = target.len();
    pefnet::metrics::jaccard_loss_value(&flat(&[n], target)?, &flat(&[pred.len()], pred)?, &cfg).map_err(py_err)
}

/// Sinusoidal position mask of shape `(c, h, w)`, flattened.
#[pyfunction]
#[pyo3(signature = (c, h, w, base = 10_000.0))]
fn positional_embedding_2d(c: usize, h: usize, w: usize, base: f64) -> PyResult<Vec<f64>> {
    let t = pefnet::blocks::positional_embedding_2d::<f64>(c, h, w, &PeConfig { base }).map_err(py_err)?;
    Ok(t.into_data())
}

/// Learning rate at step `t` of a single cosine cycle of `total_steps`.
#[pyfunction]
#[pyo3(signature = (t, total_steps, lr_max = 1e-4, eta_min = 0.0))]
fn cosine_lr(t: u64, total_steps: u64, lr_max: f64, eta_min: f64) -> f64 {
    pefnet::optim::cosine_lr(
        t,
        &ScheduleConfig {
            lr_max,
            eta_min,
            total_steps,
        },
    )
}

/// Parameter count of a model configuration.
#[pyfunction]
#[pyo3(signature = (preset = "toy", mkcnn_kernels = None, fusion = "add", use_mpe = true))]
fn param_count(preset: &str, mkcnn_kernels: Option<Vec<usize>>, fusion: &str, use_mpe: bool) -> PyResult<usize> {
    let cfg = model_config(preset, mkcnn_kernels, fusion, use_mpe)?;
    Ok(Layout::of(&cfg).map_err(py_err)?.param_count())
}

/// Synthetic samples as `(id, image, mask)` with image `(3, size, size)`
/// in [-1, 1] and mask `(1, size, size)` in {0, 1}.
#[pyfunction]
#[pyo3(signature = (n, size = 64, seed = 0))]
fn synth(n: usize, size: usize, seed: u64) -> PyResult<Vec<FlatSample>> {
    let samples = synth_dataset(n, size, seed).map_err(py_err)?;
    Ok(samples
        .into_iter()
        .map(|s| (s.id, s.image.into_data(), s.mask.into_data()))
        .collect())
}

/// A segmentation network together with its optimizer state.
#[pyclass(module = "pefnet_py")]
struct PefNet {
    state: TrainState,
    img_size: usize,
}

impl PefNet {
    fn batch(&self, images: Vec<f32>, n: usize) -> PyResult<Tensor<f32>> {
        flat(&[n, 3, self.img_size, self.img_size], images)
    }
}

#[pymethods]
impl PefNet {
    #[new]
    #[pyo3(signature = (preset = "toy", seed = 0, img_size = 64, mkcnn_kernels = None, fusion = "add", use_mpe = true))]
    fn new(
        preset: &str,
        seed: u64,
        img_size: usize,
        mkcnn_kernels: Option<Vec<usize>>,
        fusion: &str,
        use_mpe: bool,
    ) -> PyResult<Self> {
        let cfg = model_config(preset, mkcnn_kernels, fusion, use_mpe)?;
        let model = Model::build(cfg, seed).map_err(py_err)?;
        Ok(Self {
            state: TrainState::new(model, AdamConfig::default()),
            img_size,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let img_size = ck.img_size;
        Ok(Self {
            state: TrainState::from_checkpoint(ck),
            img_size,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.to_checkpoint(self.img_size).save(&path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.state.model.params.param_count()
    }

    #[getter]
    fn img_size(&self) -> usize {
        self.img_size
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step()
    }

    /// One Adam step on `n` images `(n, 3, S, S)` and masks `(n, 1, S, S)`;
    /// returns the loss before the update.
    #[pyo3(signature = (images, masks, n, lr = 1e-4, alpha = 1.0))]
    fn train_step(&mut self, images: Vec<f32>, masks: Vec<f32>, n: usize, lr: f64, alpha: f64) -> PyResult<f64> {
        let x = self.batch(images, n)?;
        let y = flat(&[n, 1, self.img_size, self.img_size], masks)?;
        let cfg = LossConfig {
            alpha,
            per_image: false,
        };
        train::train_step(&mut self.state, &x, &y, lr, &cfg).map_err(py_err)
    }

    /// Eval-mode logits for `n` images, flattened `(n, 1, S, S)`. Needs at
    /// least one training step so batch-norm statistics exist.
    fn logits(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<f32>> {
        let x = self.batch(images, n)?;
        Ok(self.state.model.logits(&x).map_err(py_err)?.into_data())
    }

    /// Binary masks for `n` images, flattened `(n, 1, S, S)`.
    #[pyo3(signature = (images, n, threshold = 0.5))]
    fn predict(&self, images: Vec<f32>, n: usize, threshold: f64) -> PyResult<Vec<f32>> {
        let x = self.batch(images, n)?;
        Ok(self
            .state
            .model
            .predict_mask(&x, threshold)
            .map_err(py_err)?
            .into_data())
    }

    /// Predict one PNG on disk and write its 0/255 mask.
    #[pyo3(signature = (input, output, threshold = 0.5))]
    fn predict_png(&self, input: PathBuf, output: PathBuf, threshold: f64) -> PyResult<()> {
        pefnet::data::predict_png(&self.state.model, self.img_size, &input, &output, threshold).map_err(py_err)
    }

    /// Mean `(iou, dice)` of thresholded predictions over a flat batch.
    #[pyo3(signature = (images, masks, n, threshold = 0.5))]
    fn evaluate(&self, images: Vec<f32>, masks: Vec<f32>, n: usize, threshold: f64) -> PyResult<(f64, f64)> {
        let s = self.img_size;
        let x = self.batch(images, n)?;
        let y = flat(&[n, 1, s, s], masks)?;
        let samples = (0..n)
            .map(|i| {
                let image = x.batch_item(i)?.reshape(&[3, s, s])?;
                let mask = y.batch_item(i)?.reshape(&[1, s, s])?;
                SegmentationSample::new(i.to_string(), image, mask)
            })
            .collect::<pefnet::Result<Vec<_>>>()
            .map_err(py_err)?;
        let report = train::evaluate(&self.state.model, &samples, threshold, 4).map_err(py_err)?;
        Ok((report.mean_iou(), report.mean_dice()))
    }

    fn __repr__(&self) -> String {
        let c = &self.state.model.config;
        format!(
            "PefNet(widths={:?}, depths={:?}, params={}, img_size={}, step={})",
            c.stage_widths,
            c.stage_depths,
            self.param_count(),
            self.img_size,
            self.state.step()
        )
    }
}

/// Collate helper kept for callers that build batches from `synth` output.
#[pyfunction]
fn stack(samples: Vec<FlatSample>, size: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let owned = samples
        .into_iter()
        .map(|(id, img, mask)| {
            SegmentationSample::new(
                id,
                Tensor::new(&[3, size, size], img)?,
                Tensor::new(&[1, size, size], mask)?,
            )
        })
        .collect::<pefnet::Result<Vec<_>>>()
        .map_err(py_err)?;
    let (x, y) = collate(&owned.iter().collect::<Vec<_>>()).map_err(py_err)?;
    Ok((x.into_data(), y.into_data()))
}

#[pymodule]
fn pefnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PefNet>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(positional_embedding_2d, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(stack, m)?)?;
    Ok(())
}
