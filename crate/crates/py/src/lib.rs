//! Python bindings for the semdet pipeline.
//!
//! Exposes dataset generation, training, transfer, evaluation, and
//! single-image inference. Heavy calls release the GIL so a driving
//! process can keep logging or serving while a run is in flight.
//!
//! Usage from Python:
//!
//!     import semdet_py as sd
//!     sd.synth("data/aei", family="aei", preset="desk", seed=0)
//!     run = sd.train("data/aei", "runs/aei", epochs=200, eval_every=10)
//!     det = sd.Detector(run["best_checkpoint"], "data/aei")
//!     boxes = det.detect("data/aei/val/img_00003.pgm")

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use semdet::codec::{decode_detections, CodecConfig};
use semdet::evaluator::{evaluate, EvalConfig};
use semdet::harness::{infer_split, train, transfer, Normalizer, TrainConfig, TrainOutcome};
use semdet::netcore::{DetectorModel, ModelConfig};
use semdet::synthgen::{
    generate_dataset, load_dataset_info, Family, Split, SplitCounts, SynthConfig,
};
use semdet::GrayImage;

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_family(name: &str) -> PyResult<Family> {
    match name {
        "adi" => Ok(Family::Adi),
        "aei" => Ok(Family::Aei),
        _ => Err(PyValueError::new_err(format!(
            "unknown family {name:?}, expected \"adi\" or \"aei\""
        ))),
    }
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!(
            "unknown split {name:?}, expected \"train\", \"val\" or \"test\""
        ))),
    }
}

/// One predicted box in pixel coordinates.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Detection {
    class_id: usize,
    class_name: String,
    x: f32,
    y: f32,
    w: f32,
    h: f32,
    score: f32,
}

#[pymethods]
impl Detection {
    fn __repr__(&self) -> String {
        format!(
            "Detection({} @ ({:.1}, {:.1}) {:.1}x{:.1}, score {:.3})",
            self.class_name, self.x, self.y, self.w, self.h, self.score
        )
    }
}

/// A trained detector bound to the dataset it should normalize against.
///
/// The checkpoint stores weights and architecture; pixel normalization
/// statistics and class names come from the dataset root, exactly as in
/// the CLI eval/infer commands.
#[pyclass]
struct Detector {
    model: DetectorModel<f32>,
    codec: CodecConfig,
    norm: Normalizer,
    conf_thr: f32,
    classes: Vec<String>,
    epoch: u64,
    dataset_id: String,
}

#[pymethods]
impl Detector {
    #[new]
    #[pyo3(signature = (checkpoint, data, conf_thr=0.33, top_k=100))]
    fn new(checkpoint: PathBuf, data: PathBuf, conf_thr: f32, top_k: usize) -> PyResult<Self> {
        let (model, meta) = DetectorModel::<f32>::from_checkpoint(&checkpoint).map_err(runtime_err)?;
        let info = load_dataset_info(&data).map_err(runtime_err)?;
        let codec = CodecConfig {
            num_classes: model.config.num_classes,
            stride: model.config.stride_out(),
            top_k,
            peak_threshold: 0.0,
            ..CodecConfig::default()
        };
        Ok(Self {
            model,
            codec,
            norm: Normalizer::from_info(&info),
            conf_thr,
            classes: info.classes,
            epoch: meta.epoch,
            dataset_id: meta.dataset_id,
        })
    }

    /// Run the detector on one PGM image and return scored boxes at or
    /// above the confidence threshold, strongest first.
    fn detect(&self, py: Python<'_>, image: PathBuf) -> PyResult<Vec<Detection>> {
        py.detach(|| {
            let img = GrayImage::load_pgm(&image).map_err(runtime_err)?;
            let maps = self
                .model
                .forward(&self.norm.normalize(&img))
                .map_err(runtime_err)?
                .into_head_maps();
            let mut dets: Vec<Detection> = decode_detections(&maps, &self.codec)
                .into_iter()
                .filter(|d| d.score >= self.conf_thr)
                .map(|d| Detection {
                    class_id: d.class_id,
                    class_name: self
                        .classes
                        .get(d.class_id)
                        .cloned()
                        .unwrap_or_else(|| format!("class_{}", d.class_id)),
                    x: d.bbox.x,
                    y: d.bbox.y,
                    w: d.bbox.w,
                    h: d.bbox.h,
                    score: d.score,
                })
                .collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            Ok(dets)
        })
    }

    /// Score the detector on a whole split and return mAP plus per-class AP.
    #[pyo3(signature = (data, split="val"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        split: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let split = parse_split(split)?;
        let report = py.detach(|| {
            let (manifest, dets) =
                infer_split(&self.model, &data, split, &self.codec).map_err(runtime_err)?;
            let pairs: Vec<_> = dets
                .into_iter()
                .zip(&manifest.entries)
                .map(|(d, e)| (d, e.boxes.clone()))
                .collect();
            let cfg = EvalConfig {
                confidence_threshold: self.conf_thr,
                num_classes: self.codec.num_classes,
                ..EvalConfig::default()
            };
            Ok::<_, PyErr>(evaluate(&pairs, &cfg))
        })?;
        let out = PyDict::new(py);
        out.set_item("map_50", report.map_50)?;
        out.set_item("map_50_95", report.map_50_95)?;
        let per_class = PyDict::new(py);
        for (c, name) in self.classes.iter().enumerate() {
            let mean: f64 = report.per_class_ap.iter().map(|row| row[c]).sum::<f64>()
                / report.per_class_ap.len() as f64;
            per_class.set_item(name, if report.class_has_gt[c] { Some(mean) } else { None })?;
        }
        out.set_item("per_class_ap_50_95", per_class)?;
        Ok(out)
    }

    #[getter]
    fn in_size(&self) -> usize {
        self.model.config.in_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    #[getter]
    fn stride(&self) -> usize {
        self.codec.stride
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.epoch
    }

    #[getter]
    fn dataset_id(&self) -> String {
        self.dataset_id.clone()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.classes.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Detector({} classes, {}px, epoch {}, trained on {})",
            self.num_classes(),
            self.in_size(),
            self.epoch,
            self.dataset_id
        )
    }
}

/// Generate a synthetic dataset. `preset` is "desk", "full" or "easy";
/// `counts` overrides the preset's (train, val, test) image counts.
#[pyfunction]
#[pyo3(signature = (out, family="aei", preset="desk", seed=0, counts=None))]
fn synth(
    py: Python<'_>,
    out: PathBuf,
    family: &str,
    preset: &str,
    seed: u64,
    counts: Option<(usize, usize, usize)>,
) -> PyResult<usize> {
    let family = parse_family(family)?;
    let (cfg, mut split_counts) = match preset {
        "desk" => (family_default(family, seed), SynthConfig::desk_counts(family)),
        "full" => (family_default(family, seed), SynthConfig::full_counts(family)),
        "easy" => (SynthConfig::easy_sanity(seed), SynthConfig::easy_sanity_counts()),
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown preset {preset:?}, expected \"desk\", \"full\" or \"easy\""
            )))
        }
    };
    if let Some((train, val, test)) = counts {
        split_counts = SplitCounts { train, val, test };
    }
    py.detach(|| {
        let manifests = generate_dataset(&cfg, &out, split_counts).map_err(runtime_err)?;
        Ok(manifests.iter().map(|m| m.entries.len()).sum())
    })
}

fn family_default(family: Family, seed: u64) -> SynthConfig {
    match family {
        Family::Aei => SynthConfig::aei_default(seed),
        Family::Adi => SynthConfig::adi_default(seed),
    }
}

fn run_to_dict<'py>(py: Python<'py>, out: &TrainOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("best_epoch", out.log.best.epoch)?;
    d.set_item("best_map_50_95", out.log.best.map_50_95)?;
    d.set_item("epochs", out.log.epochs)?;
    d.set_item("eval_points", out.log.points.len())?;
    d.set_item("best_checkpoint", out.best_checkpoint.clone())?;
    d.set_item("dataset_id", out.dataset_id.clone())?;
    Ok(d)
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    data: PathBuf,
    out: PathBuf,
    init: Option<PathBuf>,
    epochs: Option<u64>,
    eval_every: Option<u64>,
    seed: u64,
    lr: f64,
    batch_size: usize,
    flip: bool,
    conf_thr: f32,
    down_channels: Option<Vec<usize>>,
    up_channels: Option<Vec<usize>>,
    head_channels: Option<usize>,
) -> TrainConfig {
    let base = if init.is_some() {
        TrainConfig::desk_transfer(&data, &out)
    } else {
        TrainConfig::desk(&data, &out)
    };
    let mut model = ModelConfig::default();
    if let Some(dc) = down_channels {
        model.down_channels = dc;
    }
    if let Some(uc) = up_channels {
        model.up_channels = uc;
    }
    if let Some(hc) = head_channels {
        model.head_channels = hc;
    }
    TrainConfig {
        epochs: epochs.unwrap_or(base.epochs),
        eval_every: eval_every.unwrap_or(base.eval_every),
        init_checkpoint: init,
        lr,
        batch_size,
        seed,
        flip_augment: flip,
        model,
        eval: EvalConfig {
            confidence_threshold: conf_thr,
            ..EvalConfig::default()
        },
        ..base
    }
}

/// Train a detector from scratch, or fine-tune when `init` is given.
/// Defaults follow the desk-scale protocol (200 epochs, eval every 10
/// fresh; 100 epochs, eval every 4 when fine-tuning).
#[pyfunction]
#[pyo3(signature = (data, out, init=None, epochs=None, eval_every=None, seed=0, lr=1e-3,
                    batch_size=8, flip=true, conf_thr=0.33,
                    down_channels=None, up_channels=None, head_channels=None))]
#[allow(clippy::too_many_arguments)]
fn train_detector<'py>(
    py: Python<'py>,
    data: PathBuf,
    out: PathBuf,
    init: Option<PathBuf>,
    epochs: Option<u64>,
    eval_every: Option<u64>,
    seed: u64,
    lr: f64,
    batch_size: usize,
    flip: bool,
    conf_thr: f32,
    down_channels: Option<Vec<usize>>,
    up_channels: Option<Vec<usize>>,
    head_channels: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let init_for_run = init.clone();
    let cfg = build_config(
        data, out, init, epochs, eval_every, seed, lr, batch_size, flip, conf_thr,
        down_channels, up_channels, head_channels,
    );
    let outcome = py
        .detach(|| match &init_for_run {
            Some(source) => transfer(source, &cfg),
            None => train(&cfg),
        })
        .map_err(runtime_err)?;
    run_to_dict(py, &outcome)
}

#[pymodule]
fn semdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Detector>()?;
    m.add_class::<Detection>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_detector, m)?)?;
    Ok(())
}
