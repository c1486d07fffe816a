//! Python bindings: model construction and inference, checkpoints, metrics,
//! preprocessing helpers, synthetic data and single training runs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tinyunet::data::load_dataset;
use tinyunet::data::preprocess::{erode_fov as erode, weight_map as weights, FOV_EROSION, WEIGHT_ALPHA};
use tinyunet::data::synth::{write_synthetic, SyntheticConfig};
use tinyunet::experiment::{preset, run_one, Settings};
use tinyunet::metrics::{self, ScoredPixels};
use tinyunet::model::{checkpoint, count_params as count, UNet as Net, UNetConfig, Variant};
use tinyunet::{Error, Shape, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Metric(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(levels: usize, filters: usize, convs: usize, variant: &str, relu: bool) -> tinyunet::Result<UNetConfig> {
    let cfg =
        UNetConfig::new(levels, filters).with_convs(convs).with_variant(variant.parse::<Variant>()?).with_relu(relu);
    cfg.validate()?;
    Ok(cfg)
}

fn check_len(name: &str, len: usize, width: usize, height: usize) -> PyResult<()> {
    if len != width * height {
        return Err(PyValueError::new_err(format!("{name} has {len} values, expected {width}x{height}")));
    }
    Ok(())
}

fn scored(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<ScoredPixels> {
    ScoredPixels::new(scores, labels).map_err(err)
}

/// Exact trainable parameter count of a configuration.
#[pyfunction]
#[pyo3(signature = (levels=3, filters=16, convs=2, variant="plain", relu=true))]
fn count_params(levels: usize, filters: usize, convs: usize, variant: &str, relu: bool) -> PyResult<usize> {
    Ok(count(&config(levels, filters, convs, variant, relu).map_err(err)?))
}

/// A U-Net in single precision.
#[pyclass(module = "tinyunet")]
struct UNet {
    net: Net<f32>,
}

#[pymethods]
impl UNet {
    #[new]
    #[pyo3(signature = (levels=3, filters=16, convs=2, variant="plain", relu=true, seed=0))]
    fn new(levels: usize, filters: usize, convs: usize, variant: &str, relu: bool, seed: u64) -> PyResult<Self> {
        let cfg = config(levels, filters, convs, variant, relu).map_err(err)?;
        Ok(UNet { net: Net::build(cfg, seed).map_err(err)? })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.net.config().levels
    }

    #[getter]
    fn filters(&self) -> usize {
        self.net.config().base_filters
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.net.config().variant.as_str()
    }

    /// Parameter names in checkpoint order.
    fn param_names(&self) -> Vec<String> {
        self.net.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Vessel probability of every pixel of one row-major image.
    fn predict(&mut self, py: Python<'_>, image: Vec<f32>, width: usize, height: usize) -> PyResult<Vec<f32>> {
        check_len("image", image.len(), width, height)?;
        let x = Tensor::from_vec(Shape::new(1, 1, height, width), image).map_err(err)?;
        let net = &mut self.net;
        let probs = py.detach(|| net.infer_padded(x)).map_err(err)?;
        Ok(probs.plane(0, 1).to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.net, &BTreeMap::new()).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, _) = checkpoint::load::<f32>(&path).map_err(err)?;
        Ok(UNet { net })
    }

    fn __repr__(&self) -> String {
        let c = self.net.config();
        format!(
            "UNet(levels={}, filters={}, variant='{}', params={})",
            c.levels,
            c.base_filters,
            c.variant.as_str(),
            self.net.num_params()
        )
    }
}

/// Rank-based ROC AUC with midrank ties.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scored(scores, labels)?).map_err(err)
}

/// Specificity, sensitivity, F1 and accuracy at `score >= threshold`.
#[pyfunction]
fn metrics_at<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::metrics_at(&scored(scores, labels)?, threshold);
    let d = PyDict::new(py);
    d.set_item("specificity", m.specificity)?;
    d.set_item("sensitivity", m.sensitivity)?;
    d.set_item("f1", m.f1)?;
    d.set_item("accuracy", m.accuracy)?;
    Ok(d)
}

/// F1-maximizing threshold on the 1001-point grid.
#[pyfunction]
fn select_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::select_threshold(&scored(scores, labels)?))
}

#[pyfunction]
#[pyo3(signature = (mask, width, height, radius=FOV_EROSION))]
fn erode_fov(mask: Vec<bool>, width: usize, height: usize, radius: f64) -> PyResult<Vec<bool>> {
    check_len("mask", mask.len(), width, height)?;
    Ok(erode(&mask, width, height, radius))
}

/// Thin-vessel weights `1 / (alpha · d)`; 1 on background.
#[pyfunction]
#[pyo3(signature = (label, width, height, alpha=WEIGHT_ALPHA))]
fn weight_map(label: Vec<bool>, width: usize, height: usize, alpha: f64) -> PyResult<Vec<f32>> {
    check_len("label", label.len(), width, height)?;
    Ok(weights(&label, width, height, alpha))
}

/// Write a synthetic dataset (images/, labels/, masks/, manifest.txt).
#[pyfunction]
#[pyo3(signature = (out, count=16, test=8, size=128, seed=1))]
fn synth(py: Python<'_>, out: PathBuf, count: usize, test: usize, size: usize, seed: u64) -> PyResult<()> {
    let cfg = SyntheticConfig { count, width: size, height: size, seed, ..SyntheticConfig::default() };
    std::fs::create_dir_all(&out).map_err(|e| err(Error::io(&out, e)))?;
    py.detach(|| write_synthetic(&out, &cfg, test)).map_err(err)
}

/// Train and evaluate one preset with one seed. Keyword arguments override
/// settings (`lr0`, `patch`, `max_epochs`, ...). Returns the run's test
/// metrics, or None when training diverged.
#[pyfunction]
#[pyo3(signature = (preset_name, data, out, seed=1, **settings))]
fn train<'py>(
    py: Python<'py>,
    preset_name: &str,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
    settings: Option<&Bound<'py, PyDict>>,
) -> PyResult<Option<Bound<'py, PyDict>>> {
    let p = preset(preset_name).map_err(err)?;
    let mut s = Settings::default();
    if let Some(kw) = settings {
        for (k, v) in kw.iter() {
            s.set(&k.extract::<String>()?, &v.str()?.to_cow()?).map_err(err)?;
        }
    }
    s.validate().map_err(err)?;
    let outcome = py
        .detach(|| {
            let ds = load_dataset(&data, &s.prep)?;
            run_one(&p, seed, &ds, &s, &out)
        })
        .map_err(err)?;
    let Some(m) = outcome.metrics else { return Ok(None) };
    let d = PyDict::new(py);
    d.set_item("auc", m.auc)?;
    d.set_item("specificity", m.specificity)?;
    d.set_item("sensitivity", m.sensitivity)?;
    d.set_item("f1", m.f1)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("threshold", m.threshold)?;
    d.set_item("epochs", outcome.history.records.len())?;
    d.set_item("params", outcome.params)?;
    Ok(Some(d))
}

#[pymodule]
#[pyo3(name = "tinyunet")]
fn tinyunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<UNet>()?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_at, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(erode_fov, m)?)?;
    m.add_function(wrap_pyfunction!(weight_map, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
