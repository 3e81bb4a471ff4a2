//! Python bindings: dataset synthesis, the training pipeline, caption
//! generation, the caption metrics, and the meaning-head losses.
//!
//! Build as an importable module with
//! `cargo build -p vidcap-py` and rename `libvidcap_py.so` to
//! `vidcap_py.so` (see python/smoke_test.py, which automates this).

use std::path::{Path, PathBuf};

use ndarray::Array1;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vidcap_core::checkpoint::{load_checkpoint, save_checkpoint};
use vidcap_core::data;
use vidcap_core::error::Error;
use vidcap_core::evaluation;
use vidcap_core::meaning;
use vidcap_core::training;

fn to_py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<data::Split> {
    match split {
        "train" => Ok(data::Split::Train),
        "val" => Ok(data::Split::Val),
        "test" => Ok(data::Split::Test),
        other => Err(PyValueError::new_err(format!(
            "unknown split `{other}` (expected train/val/test)"
        ))),
    }
}

/// Lowercase, strip punctuation, split on whitespace.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    data::tokenize(text)
}

/// Label of the highest-objectness detection, ties broken by index;
/// detections are (label, objectness) pairs.
#[pyfunction]
fn dominant_object(detections: Vec<(String, f64)>) -> Option<String> {
    let dets: Vec<data::Detection> = detections
        .into_iter()
        .map(|(label, objectness)| data::Detection { label, objectness, bbox: [0.0; 4] })
        .collect();
    data::dominant_object(&dets).map(str::to_string)
}

/// Frame indices kept when capping a video at `max_frames`.
#[pyfunction]
fn subsample_indices(n_frames: usize, max_frames: usize) -> Vec<usize> {
    data::subsample_indices(n_frames, max_frames)
}

/// Write a synthetic dataset; returns the number of videos.
#[pyfunction]
#[pyo3(signature = (out_dir, videos=10, events=5, seed=0, d_vis=16, val_fraction=0.0, test_fraction=0.0))]
#[allow(clippy::too_many_arguments)]
fn synth_dataset(
    out_dir: &str,
    videos: usize,
    events: usize,
    seed: u64,
    d_vis: usize,
    val_fraction: f64,
    test_fraction: f64,
) -> PyResult<usize> {
    let spec = data::SynthSpec {
        n_videos: videos,
        vocab_events: events,
        seed,
        d_vis,
        val_fraction,
        test_fraction,
        ..Default::default()
    };
    let manifest =
        data::generate_synthetic_dataset(Path::new(out_dir), &spec).map_err(to_py_err)?;
    Ok(manifest.entries.len())
}

/// Run the training pipeline (word phase, meaning-head pretraining, mixed
/// phase) and save the checkpoint. `config_json` is the same JSON the CLI
/// accepts; missing keys take defaults. Returns (epoch, step).
#[pyfunction]
#[pyo3(signature = (config_json, data_dir, out_checkpoint, phase="all"))]
fn train_pipeline(
    config_json: &str,
    data_dir: &str,
    out_checkpoint: &str,
    phase: &str,
) -> PyResult<(u64, u64)> {
    let config: training::TrainingConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    config.validate().map_err(to_py_err)?;
    let manifest = data::load_manifest(Path::new(data_dir)).map_err(to_py_err)?;
    let ckpt = match phase {
        "word" => training::train_word_phase(&config, &manifest).map_err(to_py_err)?,
        "all" => {
            let word = training::train_word_phase(&config, &manifest).map_err(to_py_err)?;
            let pre = training::pretrain_meaning(&config, &manifest, &word).map_err(to_py_err)?;
            training::train_mixed_phase(&config, &manifest, &pre).map_err(to_py_err)?
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown phase `{other}` (expected word/all)"
            )))
        }
    };
    save_checkpoint(&PathBuf::from(out_checkpoint), &ckpt).map_err(to_py_err)?;
    Ok((ckpt.epoch, ckpt.step))
}

/// Greedy captions for a split: list of (video_id, caption).
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, split="test"))]
fn generate(checkpoint: &str, data_dir: &str, split: &str) -> PyResult<Vec<(String, String)>> {
    let ckpt = load_checkpoint(Path::new(checkpoint), None).map_err(to_py_err)?;
    let manifest = data::load_manifest(Path::new(data_dir)).map_err(to_py_err)?;
    let captions = evaluation::generate_captions(&ckpt, &manifest, parse_split(split)?)
        .map_err(to_py_err)?;
    Ok(captions.into_iter().map(|c| (c.video_id, c.caption)).collect())
}

/// Score a checkpoint on a split; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, split="test", label="model"))]
fn evaluate(checkpoint: &str, data_dir: &str, split: &str, label: &str) -> PyResult<String> {
    let ckpt = load_checkpoint(Path::new(checkpoint), None).map_err(to_py_err)?;
    let manifest = data::load_manifest(Path::new(data_dir)).map_err(to_py_err)?;
    let report = evaluation::evaluate_model(&ckpt, &manifest, parse_split(split)?, label)
        .map_err(to_py_err)?;
    Ok(report.to_json())
}

/// Corpus BLEU-4 (strict by default; add-one smoothing optional).
#[pyfunction]
#[pyo3(signature = (candidates, references, smoothing=false))]
fn bleu4(
    candidates: Vec<Vec<String>>,
    references: Vec<Vec<Vec<String>>>,
    smoothing: bool,
) -> PyResult<f64> {
    evaluation::bleu4_opts(&candidates, &references, smoothing).map_err(to_py_err)
}

#[pyfunction]
fn cider(candidates: Vec<Vec<String>>, references: Vec<Vec<Vec<String>>>) -> PyResult<f64> {
    evaluation::cider(&candidates, &references).map_err(to_py_err)
}

#[pyfunction]
fn meteor_lite(candidates: Vec<Vec<String>>, references: Vec<Vec<Vec<String>>>) -> PyResult<f64> {
    evaluation::meteor_lite(&candidates, &references).map_err(to_py_err)
}

/// 1 - exp(-L1(v1, v2)): the similar-pair loss.
#[pyfunction]
fn loss_sim(v1: Vec<f64>, v2: Vec<f64>) -> PyResult<f64> {
    if v1.len() != v2.len() {
        return Err(PyValueError::new_err("loss_sim: length mismatch"));
    }
    Ok(meaning::loss_sim(&Array1::from_vec(v1), &Array1::from_vec(v2)))
}

/// exp(-L1(v3, v4)): the dissimilar-pair loss.
#[pyfunction]
fn loss_dis(v3: Vec<f64>, v4: Vec<f64>) -> PyResult<f64> {
    if v3.len() != v4.len() {
        return Err(PyValueError::new_err("loss_dis: length mismatch"));
    }
    Ok(meaning::loss_dis(&Array1::from_vec(v3), &Array1::from_vec(v4)))
}

/// Mean hinge over negatives of max(0, L1(a,p) - L1(a,n) + margin).
#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, margin=1.0))]
fn triplet_loss(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    margin: f64,
) -> PyResult<f64> {
    let negs: Vec<Array1<f64>> = negatives.into_iter().map(Array1::from_vec).collect();
    meaning::triplet_loss(&Array1::from_vec(anchor), &Array1::from_vec(positive), &negs, margin)
        .map_err(to_py_err)
}

#[pymodule]
fn vidcap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(dominant_object, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(meteor_lite, m)?)?;
    m.add_function(wrap_pyfunction!(loss_sim, m)?)?;
    m.add_function(wrap_pyfunction!(loss_dis, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    Ok(())
}
