//! Python bindings: datasets, networks, null-model banks, detectors, attacks and ROC analysis.
//!
//! Images cross the boundary as flat lists of floats in channel-major order;
//! their shape comes from the dataset or the network input.

use std::path::PathBuf;

use ada_core::attacks::{self, AttackConfig, AttackKind};
use ada_core::datasets::{self, Image, LabeledDataset};
use ada_core::detectors::{self, DetectorKind};
use ada_core::dnn::{self, LayerId, NetworkSpec, TrainConfig};
use ada_core::evaluation::{self, RateTarget};
use ada_core::null_models::{self, FitOptions, TapFamily};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

#[pyclass(name = "Dataset", module = "ada_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from flat pixel lists in `[0, 1]`.
    #[staticmethod]
    #[pyo3(signature = (pixels, labels, shape, num_classes))]
    fn from_lists(pixels: Vec<Vec<f64>>, labels: Vec<usize>, shape: (usize, usize, usize), num_classes: usize) -> PyResult<Self> {
        let (c, h, w) = shape;
        let images = pixels
            .into_iter()
            .map(|p| Image::new(c, h, w, p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(Self {
            inner: LabeledDataset::new(images, labels, num_classes).map_err(err)?,
        })
    }

    /// Reads IDX image and label files (optionally gzipped).
    #[staticmethod]
    #[pyo3(signature = (images, labels, num_classes = 10))]
    fn load_idx(images: PathBuf, labels: PathBuf, num_classes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: datasets::load_idx_files(&images, &labels, num_classes).map_err(io_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn shape(&self) -> Option<(usize, usize, usize)> {
        self.inner.image_shape()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images()
            .get(index)
            .map(|im| im.pixels().to_vec())
            .ok_or_else(|| err(format!("index {index} out of range")))
    }

    fn take(&self, n: usize) -> Self {
        Self { inner: self.inner.take(n) }
    }
}

#[pyclass(name = "Network", module = "ada_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNetwork {
    inner: dnn::Network,
}

impl PyNetwork {
    fn image(&self, pixels: Vec<f64>) -> PyResult<Image> {
        let s = self.inner.spec().input;
        Image::new(s.channels, s.height, s.width, pixels).map_err(err)
    }
}

#[pymethods]
impl PyNetwork {
    /// A freshly initialized network of a named architecture (`lenet5` or `cifar-small`).
    #[new]
    #[pyo3(signature = (architecture, num_classes = 10, seed = 0))]
    fn new(architecture: &str, num_classes: usize, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::by_name(architecture, num_classes).ok_or_else(|| err(format!("unknown architecture {architecture:?}")))?;
        Ok(Self {
            inner: dnn::Network::new(spec, seed),
        })
    }

    /// Builds a network from a JSON spec string.
    #[staticmethod]
    #[pyo3(signature = (spec_json, seed = 0))]
    fn from_spec_json(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec: NetworkSpec = serde_json::from_str(spec_json).map_err(err)?;
        let spec = NetworkSpec::new(spec.input, spec.layers, spec.num_classes).map_err(err)?;
        Ok(Self {
            inner: dnn::Network::new(spec, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: dnn::Network::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(io_err)
    }

    /// Returns a trained copy; the receiver is unchanged.
    #[pyo3(signature = (data, epochs = 15, batch_size = 64, learning_rate = 0.1, seed = 0))]
    fn train(&self, py: Python<'_>, data: &PyDataset, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        let net = py.detach(|| self.inner.train(&data.inner, &cfg)).map_err(err)?.0;
        Ok(Self { inner: net })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn layer_names(&self) -> Vec<String> {
        let spec = self.inner.spec();
        (0..spec.layers.len()).map(|i| spec.layer_name(LayerId(i))).collect()
    }

    fn default_taps(&self) -> Vec<usize> {
        self.inner.spec().default_taps().into_iter().map(|l| l.0).collect()
    }

    fn penultimate(&self) -> Option<usize> {
        self.inner.spec().penultimate().map(|l| l.0)
    }

    fn predict(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.predict(&self.image(pixels)?).map_err(err)?.probs().to_vec())
    }

    fn decide(&self, pixels: Vec<f64>) -> PyResult<usize> {
        self.inner.decide(&self.image(pixels)?).map_err(err)
    }

    fn accuracy(&self, py: Python<'_>, data: &PyDataset) -> PyResult<f64> {
        py.detach(|| self.inner.accuracy(&data.inner)).map_err(err)
    }
}

#[pyclass(name = "NullModelBank", module = "ada_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyBank {
    inner: null_models::NullModelBank,
}

#[pymethods]
impl PyBank {
    /// Fits per-class densities at each tap. `taps` pairs a layer index with a
    /// family name (`kernel`, `gmm-full`, `gmm-diag`, `lognormal-full`,
    /// `lognormal-diag`); `None` uses the network's default taps.
    #[staticmethod]
    #[pyo3(signature = (network, data, taps = None, k_range = None, seed = 0))]
    fn fit(
        py: Python<'_>,
        network: &PyNetwork,
        data: &PyDataset,
        taps: Option<Vec<(usize, String)>>,
        k_range: Option<Vec<usize>>,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = network.inner.spec();
        let taps: Vec<TapFamily> = match taps {
            Some(t) => t
                .into_iter()
                .map(|(l, f)| Ok(TapFamily { layer: LayerId(l), family: f.parse().map_err(err)? }))
                .collect::<PyResult<_>>()?,
            None => spec
                .default_taps()
                .into_iter()
                .map(|layer| TapFamily {
                    layer,
                    family: null_models::default_family(spec, layer),
                })
                .collect(),
        };
        let mut opts = FitOptions { seed, ..FitOptions::default() };
        if let Some(k) = k_range {
            opts.k_range = k;
        }
        let bank = py
            .detach(|| null_models::fit_null_bank(&network.inner, &data.inner, &taps, &opts))
            .map_err(err)?;
        Ok(Self { inner: bank })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: null_models::NullModelBank::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(io_err)
    }

    fn layers(&self) -> Vec<usize> {
        self.inner.layers().into_iter().map(|l| l.0).collect()
    }
}

#[pyclass(name = "Detector", module = "ada_py", skip_from_py_object)]
pub struct PyDetector {
    inner: detectors::Detector,
}

#[pymethods]
impl PyDetector {
    /// `kind` is a detector name such as `ada`, `ada-maxkl`, `aw-ada-maxkl` or
    /// `region-count`. AW-ADA needs `confusion_data` to estimate class confusion.
    #[new]
    #[pyo3(signature = (kind, layers = Vec::new(), bank = None, network = None, confusion_data = None))]
    fn new(
        kind: &str,
        layers: Vec<usize>,
        bank: Option<&PyBank>,
        network: Option<&PyNetwork>,
        confusion_data: Option<&PyDataset>,
    ) -> PyResult<Self> {
        let kind: DetectorKind = kind.parse().map_err(err)?;
        let mut det = detectors::Detector::new(kind, layers.into_iter().map(LayerId).collect());
        if let Some(b) = bank {
            det = det.with_bank(b.inner.clone());
        }
        if kind.needs_confusion() {
            let (Some(n), Some(d)) = (network, confusion_data) else {
                return Err(err(format!("{kind} needs network and confusion_data")));
            };
            det = det.with_confusion(detectors::estimate_confusion(&n.inner, &d.inner, detectors::DEFAULT_ETA).map_err(err)?);
        }
        if kind == DetectorKind::WhiteCount {
            let Some(d) = confusion_data else {
                return Err(err("white-count needs training images as confusion_data"));
            };
            det = det.with_white_count(detectors::WhiteCountModel::fit(&d.inner, detectors::DEFAULT_BINARIZE));
        }
        Ok(Self { inner: det })
    }

    /// Detection statistic of one image (larger means more anomalous).
    fn score(&self, network: &PyNetwork, pixels: Vec<f64>) -> PyResult<f64> {
        let x = network.image(pixels)?;
        Ok(self.inner.score(&network.inner, &x).map_err(err)?.value)
    }

    fn score_dataset(&self, py: Python<'_>, network: &PyNetwork, data: &PyDataset) -> PyResult<Vec<f64>> {
        py.detach(|| self.inner.score_all(&network.inner, data.inner.images()))
            .map(|v| v.into_iter().map(|s| s.value).collect())
            .map_err(err)
    }
}

/// Crafts targeted attacks (`fgsm`, `jsma` or `cw`) on correctly classified images.
/// Returns `(source_index, success, perturbed pixels, l2 distortion)` tuples.
#[pyfunction]
#[pyo3(signature = (network, data, kind, strength, max_attempts = 100, seed = 0, max_iters = None))]
#[allow(clippy::too_many_arguments)]
fn craft(
    py: Python<'_>,
    network: &PyNetwork,
    data: &PyDataset,
    kind: &str,
    strength: f64,
    max_attempts: usize,
    seed: u64,
    max_iters: Option<usize>,
) -> PyResult<Vec<(usize, bool, Vec<f64>, f64)>> {
    let kind: AttackKind = kind.parse().map_err(err)?;
    let mut cfg = AttackConfig::new(kind, strength);
    cfg.seed = seed;
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    let recs = py
        .detach(|| attacks::craft_attacks(&network.inner, &data.inner, &cfg, max_attempts))
        .map_err(err)?;
    Ok(recs
        .into_iter()
        .map(|(i, r)| (i, r.success, r.perturbed.pixels().to_vec(), r.l2_distortion))
        .collect())
}

/// Exact ROC AUC with half credit for ties.
#[pyfunction]
fn roc_auc(attack: Vec<f64>, clean: Vec<f64>) -> PyResult<f64> {
    Ok(evaluation::roc_auc(&attack, &clean).map_err(err)?.auc)
}

/// `(threshold, fpr, tpr)` at a target FPR or TPR (give exactly one).
#[pyfunction]
#[pyo3(signature = (attack, clean, fpr = None, tpr = None))]
fn threshold_at(attack: Vec<f64>, clean: Vec<f64>, fpr: Option<f64>, tpr: Option<f64>) -> PyResult<(f64, f64, f64)> {
    let target = match (fpr, tpr) {
        (Some(q), None) => RateTarget::Fpr(q),
        (None, Some(q)) => RateTarget::Tpr(q),
        _ => return Err(err("give exactly one of fpr and tpr")),
    };
    let op = evaluation::threshold_at(&attack, &clean, target).map_err(err)?;
    Ok((op.threshold, op.fpr, op.tpr))
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    detectors::kl_divergence(&p, &q).map_err(err)
}

#[pymodule]
fn ada_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyBank>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(craft, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_at, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    Ok(())
}
