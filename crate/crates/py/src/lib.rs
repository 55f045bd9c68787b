//! Python bindings for the archoscope core.

use std::collections::BTreeMap;

use archoscope::arch::{self, fixtures, mac_complexity, propagate_shapes, TensorShape};
use archoscope::emulator::{emulate_inference, layer_nodes, render_trace, CostModel, EventClass, RenderParams};
use archoscope::extraction::{self, ExtractionConfig, ExtractionReport};
use archoscope::signal;
use archoscope::trace;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    text.map_or_else(|| Ok(T::default()), |t| serde_json::from_str(t).map_err(value_err))
}

/// A network architecture: input shape plus an ordered layer list.
#[pyclass(name = "Architecture", module = "archoscope_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyArchitecture {
    inner: arch::Architecture,
}

#[pymethods]
impl PyArchitecture {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: arch::Architecture::from_json(text).map_err(value_err)? })
    }

    /// One of `mnist_mlp`, `mnist_cnn`, `cifar10_cnn`, `sp_mlp`.
    #[staticmethod]
    fn fixture(name: &str) -> PyResult<Self> {
        fixtures::by_name(name).map(|inner| Self { inner }).ok_or_else(|| {
            PyValueError::new_err(format!("unknown fixture {name:?}; expected one of {:?}", fixtures::NAMES))
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        (self.inner.input.h, self.inner.input.c)
    }

    fn __len__(&self) -> usize {
        self.inner.layers.len()
    }

    fn layer_types(&self) -> Vec<&'static str> {
        self.inner.layers.iter().map(|l| l.type_name()).collect()
    }

    /// Output `(h, c)` of every layer.
    fn output_shapes(&self) -> PyResult<Vec<(usize, usize)>> {
        Ok(propagate_shapes(&self.inner).map_err(value_err)?.iter().map(|s| (s.h, s.c)).collect())
    }

    /// Per layer `(count, is_mac)`.
    fn mac_complexity(&self) -> PyResult<Vec<(u64, bool)>> {
        let shapes = self.inner.input_shapes().map_err(value_err)?;
        self.inner
            .layers
            .iter()
            .zip(shapes)
            .map(|(l, s)| mac_complexity(l, s).map(|m| (m.count, m.is_mac)).map_err(value_err))
            .collect()
    }

    /// Per layer, the number of emulated events of each class.
    #[pyo3(signature = (cost_model_json=None))]
    fn event_counts(&self, cost_model_json: Option<&str>) -> PyResult<Vec<BTreeMap<String, usize>>> {
        let cost: CostModel = parse_json(cost_model_json)?;
        let root = emulate_inference(&self.inner, &cost).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(layer_nodes(&root)
            .map(|layer| {
                EventClass::ALL
                    .iter()
                    .map(|&c| (format!("{c:?}"), layer.count_class(c)))
                    .filter(|&(_, n)| n > 0)
                    .collect()
            })
            .collect())
    }

    /// Field-level differences on the recoverable hyper-parameters.
    fn diff(&self, other: &PyArchitecture) -> Vec<String> {
        arch::diff(&self.inner, &other.inner).iter().map(|d| d.to_string()).collect()
    }

    fn __eq__(&self, other: &PyArchitecture) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Architecture(input={:?}, layers={:?})", self.input_shape(), self.layer_types())
    }
}

/// A sampled trace.
#[pyclass(name = "Trace", module = "archoscope_py", frozen)]
pub struct PyTrace {
    inner: trace::Trace,
}

#[pymethods]
impl PyTrace {
    #[new]
    fn new(sample_rate: f64, samples: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: trace::Trace::new(sample_rate, samples).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: trace::Trace::from_bytes(data).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let data = std::fs::read(path).map_err(value_err)?;
        Self::from_bytes(&data)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf).map_err(value_err)?;
        Ok(PyBytes::new(py, &buf))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(value_err)?;
        self.inner.write_to(std::io::BufWriter::new(f)).map_err(value_err)
    }

    #[getter]
    fn sample_rate(&self) -> f64 {
        self.inner.sample_rate
    }

    #[getter]
    fn samples(&self) -> Vec<f32> {
        self.inner.samples.clone()
    }

    #[getter]
    fn has_annotation(&self) -> bool {
        self.inner.annotation.is_some()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Outcome of blind extraction.
#[pyclass(name = "Report", module = "archoscope_py", frozen)]
pub struct PyReport {
    inner: ExtractionReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn resolved(&self) -> bool {
        self.inner.resolved
    }

    #[getter]
    fn recovered(&self) -> Option<PyArchitecture> {
        self.inner.recovered.clone().map(|inner| PyArchitecture { inner })
    }

    #[getter]
    fn best_guess(&self) -> Option<PyArchitecture> {
        self.inner.best_guess.clone().map(|inner| PyArchitecture { inner })
    }

    /// Per layer `(kind, confidence)`.
    fn layers(&self) -> Vec<(String, f64)> {
        self.inner.hypotheses.iter().map(|h| (h.kind.to_string(), h.confidence)).collect()
    }

    #[getter]
    fn snr(&self) -> Option<f64> {
        self.inner.noise.map(|n| n.snr)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(value_err)
    }
}

/// Emulates and renders `arch`. Parameter blocks are optional JSON strings.
#[pyfunction]
#[pyo3(signature = (arch, seed=None, noise=None, average=None, annotate=false, cost_model_json=None, render_json=None))]
fn synth(
    arch: &PyArchitecture,
    seed: Option<u64>,
    noise: Option<f64>,
    average: Option<u32>,
    annotate: bool,
    cost_model_json: Option<&str>,
    render_json: Option<&str>,
) -> PyResult<PyTrace> {
    let cost: CostModel = parse_json(cost_model_json)?;
    let mut render: RenderParams = parse_json(render_json)?;
    render.rng_seed = seed.unwrap_or(render.rng_seed);
    render.noise_sigma = noise.unwrap_or(render.noise_sigma);
    render.n_average = average.unwrap_or(render.n_average);
    let err = |e: String| PyRuntimeError::new_err(e);
    let root = emulate_inference(&arch.inner, &cost).map_err(|e| err(e.to_string()))?;
    let mut t = render_trace(&root, &render).map_err(|e| err(e.to_string()))?;
    if annotate {
        t.annotation = Some(root);
    }
    Ok(PyTrace { inner: t })
}

#[pyfunction]
#[pyo3(signature = (trace, input_h, input_c, thresholds_json=None))]
fn extract(trace: &PyTrace, input_h: usize, input_c: usize, thresholds_json: Option<&str>) -> PyResult<PyReport> {
    let config: ExtractionConfig = parse_json(thresholds_json)?;
    let inner = extraction::extract_architecture(&trace.inner, TensorShape::new(input_h, input_c), &config);
    Ok(PyReport { inner })
}

/// Layer segments as `(start, end)` sample indices.
#[pyfunction]
#[pyo3(signature = (trace, thresholds_json=None))]
fn split_layers(trace: &PyTrace, thresholds_json: Option<&str>) -> PyResult<Vec<(usize, usize)>> {
    let config: ExtractionConfig = parse_json(thresholds_json)?;
    let segs = extraction::split_layers(&trace.inner, &config).map_err(value_err)?;
    Ok(segs.iter().map(|s| (s.start, s.end)).collect())
}

/// `(stride, padding)`; raises `ValueError` when absent or ambiguous.
#[pyfunction]
fn solve_stride_padding(h_in: usize, h_out: usize, z: usize) -> PyResult<(usize, usize)> {
    extraction::solve_stride_padding(h_in, h_out, z).map_err(value_err)
}

/// Magnitude spectrogram as a list of frames, plus bin frequencies in Hz.
#[pyfunction]
#[pyo3(signature = (trace, window=256, hop=128))]
fn spectrogram(trace: &PyTrace, window: usize, hop: usize) -> PyResult<(Vec<Vec<f32>>, Vec<f64>)> {
    let s = signal::spectrogram(&trace.inner, window, hop).map_err(value_err)?;
    let frames = (0..s.n_frames).map(|i| s.frame(i).to_vec()).collect();
    let freqs = (0..s.n_bins).map(|b| s.bin_frequency(b)).collect();
    Ok((frames, freqs))
}

#[pymodule]
fn archoscope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(split_layers, m)?)?;
    m.add_function(wrap_pyfunction!(solve_stride_padding, m)?)?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add("FIXTURES", fixtures::NAMES.to_vec())?;
    Ok(())
}
