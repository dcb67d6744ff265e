//! Python bindings: the loss, schedule, metrics, prompt generation, scene
//! synthesis, and a small end-to-end pipeline class.

// the #[pyfunction] expansion inserts redundant PyErr conversions
#![allow(clippy::useless_conversion)]

use llm_mde_core::apg;
use llm_mde_core::dataset::{self, DepthMap, RgbImage, SceneSample, Split};
use llm_mde_core::error::Error;
use llm_mde_core::experiment;
use llm_mde_core::metrics;
use llm_mde_core::model::{trainable_param_count, DepthModel, ModelConfig};
use llm_mde_core::training::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn depth_map(vals: Vec<f64>, height: usize, width: usize) -> PyResult<DepthMap> {
    let valid = vals.iter().map(|v| *v > 0.0).collect();
    DepthMap::new(height, width, vals, valid).map_err(py_err)
}

/// Scale-invariant squared log loss over two flat depth maps; zeros and
/// negatives are treated as missing pixels.
#[pyfunction]
#[pyo3(signature = (pred, gt, height=1, width=0))]
fn ssi_loss(pred: Vec<f64>, gt: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    let width = if width == 0 { pred.len() / height } else { width };
    training::ssi_loss(
        &depth_map(pred, height, width)?,
        &depth_map(gt, height, width)?,
    )
    .map_err(py_err)
}

/// Analytic gradient of `ssi_loss` with respect to the prediction.
#[pyfunction]
#[pyo3(signature = (pred, gt, height=1, width=0))]
fn ssi_loss_grad(pred: Vec<f64>, gt: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    let width = if width == 0 { pred.len() / height } else { width };
    training::ssi_loss_grad(
        &depth_map(pred, height, width)?,
        &depth_map(gt, height, width)?,
    )
    .map_err(py_err)
}

/// Cosine-annealed learning rate at `step` of `total_steps`.
#[pyfunction]
fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    training::cosine_lr(step, total_steps, lr0, lr_min)
}

/// Depth evaluation metrics as a dict (rmse, abs_rel, sq_rel, log_rmse,
/// delta1..3, n_valid).
#[pyfunction]
#[pyo3(signature = (pred, gt, height=1, width=0))]
fn compute_metrics(
    pred: Vec<f64>,
    gt: Vec<f64>,
    height: usize,
    width: usize,
) -> PyResult<BTreeMap<String, f64>> {
    let width = if width == 0 { pred.len() / height } else { width };
    let r = metrics::compute_metrics(
        &depth_map(pred, height, width)?,
        &depth_map(gt, height, width)?,
    )
    .map_err(py_err)?;
    let mut out = BTreeMap::new();
    out.insert("rmse".into(), r.rmse);
    out.insert("abs_rel".into(), r.abs_rel);
    out.insert("sq_rel".into(), r.sq_rel);
    out.insert("log_rmse".into(), r.log_rmse);
    out.insert("delta1".into(), r.delta1);
    out.insert("delta2".into(), r.delta2);
    out.insert("delta3".into(), r.delta3);
    out.insert("n_valid".into(), r.n_valid as f64);
    Ok(out)
}

/// Distance class for a median luminance in [0, 1].
#[pyfunction]
fn classify_median(median: f64) -> String {
    apg::classify_image(&apg::PixelStats {
        min: 0.0,
        max: 1.0,
        median,
        mean: median,
    })
    .to_string()
}

fn image_from_flat(image: Vec<f64>, height: usize, width: usize) -> PyResult<RgbImage> {
    RgbImage::new(height, width, image).map_err(py_err)
}

/// The four prompt texts plus token ids for a flat HWC image in [0, 1].
/// `mode` is one of "apg", "fixed", "none".
#[pyfunction]
#[pyo3(signature = (image, height, width, dataset_name="synthetic", mode="apg"))]
fn build_prompts(
    image: Vec<f64>,
    height: usize,
    width: usize,
    dataset_name: &str,
    mode: &str,
) -> PyResult<(String, String, String, String, Vec<usize>)> {
    let img = image_from_flat(image, height, width)?;
    let n = height * width;
    let sample = SceneSample {
        depth: DepthMap::dense(height, width, vec![1.0; n]).map_err(py_err)?,
        image: img,
        scene_label: String::new(),
    };
    let tokenizer = apg::Tokenizer::new(&[dataset_name]);
    let mode = apg::PromptMode::parse(mode).map_err(py_err)?;
    let b = apg::build_prompt_bundle(&sample, dataset_name, &tokenizer, mode);
    Ok((
        b.dataset_text,
        b.task_text,
        b.pixel_text,
        b.class_text,
        b.token_ids,
    ))
}

/// Procedural scene: (flat HWC image, flat depth map), deterministic in
/// (seed, resolution, label).
#[pyfunction]
#[pyo3(signature = (seed, resolution, scene_label="bedroom"))]
fn generate_synthetic_scene(
    seed: u64,
    resolution: usize,
    scene_label: &str,
) -> (Vec<f64>, Vec<f64>) {
    let s = dataset::generate_synthetic_scene(seed, resolution, scene_label);
    (s.image.data().to_vec(), s.depth.depth().to_vec())
}

/// Writes a depth map as an 8-bit grayscale PNG (min-max normalized).
#[pyfunction]
fn render_depth_png(depth: Vec<f64>, height: usize, width: usize, path: PathBuf) -> PyResult<()> {
    let dm = depth_map(depth, height, width)?;
    experiment::render_depth_image(&dm, &path).map_err(py_err)
}

/// End-to-end depth pipeline over a small, CPU-friendly model.
#[pyclass]
struct Pipeline {
    model: DepthModel,
}

#[pymethods]
impl Pipeline {
    /// `preset` is "tiny" (fast unit-scale) or "desk" (the documented
    /// desk-scale widths).
    #[new]
    #[pyo3(signature = (preset="tiny", seed=0, prompt_mode="apg", lora_scheme="both"))]
    fn new(preset: &str, seed: u64, prompt_mode: &str, lora_scheme: &str) -> PyResult<Self> {
        let mut cfg = match preset {
            "desk" => ModelConfig::desk(),
            "tiny" => {
                let mut cfg = ModelConfig::desk();
                cfg.backbone.vision_width = 16;
                cfg.backbone.text_width = 16;
                cfg.backbone.vocab = 256;
                cfg.backbone.heads = 2;
                cfg.backbone.resolution = 32;
                cfg.backbone.vision_layers = 1;
                cfg.backbone.text_layers = 1;
                cfg.backbone.dropout = 0.0;
                cfg.v_prime = 8;
                cfg.head_channels = [4, 4, 4, 2];
                cfg.lora_rank_vision = 2;
                cfg.lora_alpha_vision = 4.0;
                cfg.lora_rank_text = 2;
                cfg.lora_alpha_text = 2.0;
                cfg
            }
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        cfg.prompt_mode = apg::PromptMode::parse(prompt_mode).map_err(py_err)?;
        cfg.lora_scheme = llm_mde_core::lora::LoraScheme::parse(lora_scheme).map_err(py_err)?;
        Ok(Pipeline {
            model: DepthModel::new(cfg, seed).map_err(py_err)?,
        })
    }

    /// Square input resolution expected by `predict`.
    #[getter]
    fn resolution(&self) -> usize {
        self.model.config.backbone.resolution
    }

    /// (trainable, total) parameter counts.
    fn param_counts(&self) -> (usize, usize) {
        trainable_param_count(&self.model)
    }

    /// Predicts a flat metric depth map from a flat HWC image in [0, 1].
    fn predict(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = image_from_flat(image, height, width)?;
        let n = height * width;
        let sample = SceneSample {
            depth: DepthMap::dense(height, width, vec![1.0; n]).map_err(py_err)?,
            image: img,
            scene_label: String::new(),
        };
        Ok(self.model.predict(&sample).map_err(py_err)?.depth().to_vec())
    }

    /// Overfits a few procedural scenes; returns (train_loss, val_loss)
    /// per epoch.
    #[pyo3(signature = (count=4, epochs=10, batch_size=4, lr0=1e-2, seed=0))]
    fn fit_synthetic(
        &mut self,
        count: usize,
        epochs: usize,
        batch_size: usize,
        lr0: f64,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64)>> {
        if count < 2 {
            return Err(PyValueError::new_err("need at least 2 scenes"));
        }
        let resolution = self.model.config.backbone.resolution;
        let pool: Vec<SceneSample> = (0..count)
            .map(|i| dataset::generate_synthetic_scene(seed + i as u64, resolution, "bedroom"))
            .collect();
        let split = Split {
            train: (0..count - 1).collect(),
            val: vec![count - 1],
            test: vec![],
        };
        let mut cfg = TrainConfig::desk();
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr0 = lr0;
        cfg.lr_min = lr0 / 100.0;
        cfg.patience = epochs + 1;
        let history =
            training::fit(&mut self.model, &pool, &split, &cfg, seed).map_err(py_err)?;
        Ok(history
            .rows
            .iter()
            .map(|r| (r.train_loss, r.val_loss))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Pipeline {
            model: DepthModel::load(&path).map_err(py_err)?,
        })
    }
}

#[pymodule]
fn llm_mde(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ssi_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ssi_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(classify_median, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_scene, m)?)?;
    m.add_function(wrap_pyfunction!(render_depth_png, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
