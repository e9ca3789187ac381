//! Python module `bruno_py`.
//!
//! Configuration goes in as plain dicts with the same keys as the TOML/JSON
//! files of the command-line tool; results come back as dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use bruno_core::bruno::{evaluate, train, TrainConfig, TrainError};
use bruno_core::harness::bench::{run_bench, BenchConfig};
use bruno_core::harness::verify::run_verify;
use bruno_core::netdata::{self, Architecture, DatasetSpec, NetworkSpec, Split};
use bruno_core::neurons::{felif_integrate, simulate_constant_current, FeLifParams};
use bruno_core::quant::{self, QuantSpec, Rounding};
use bruno_core::tape::Tape;

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = obj else {
        return Ok(T::default());
    };
    let py = d.py();
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// FeLIF neuron with physical parameters (SI units).
#[pyclass(name = "FeLif", from_py_object)]
#[derive(Clone)]
struct PyFeLif {
    params: FeLifParams,
}

#[pymethods]
impl PyFeLif {
    #[new]
    #[pyo3(signature = (params=None))]
    fn new(params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let params: FeLifParams = from_py(params)?;
        params.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyFeLif { params })
    }

    fn params(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.params)
    }

    /// One Euler step without threshold handling; returns (v, p).
    fn integrate(&self, v: f64, p: f64, i_syn: f64, dt: f64) -> (f64, f64) {
        felif_integrate(v, p, i_syn, dt, &self.params)
    }

    /// Constant-current response; dict with `v`, `p`, `spikes`, `dt_sample`.
    #[pyo3(signature = (i_syn, dt, steps, every=1))]
    fn simulate(&self, py: Python<'_>, i_syn: f64, dt: f64, steps: usize, every: usize) -> PyResult<Py<PyAny>> {
        let tr = simulate_constant_current(&self.params, i_syn, dt, steps, every)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        d.set_item("dt_sample", tr.dt_sample)?;
        d.set_item("v", tr.v)?;
        d.set_item("p", tr.p)?;
        d.set_item("spikes", tr.spikes)?;
        Ok(d.into_any().unbind())
    }
}

/// `n` stochastic roundings of `x`.
#[pyfunction]
#[pyo3(signature = (x, n=1, seed=0))]
fn sround(x: f64, n: usize, seed: u64) -> Vec<i64> {
    let mut rng = quant::stream_rng(seed, 0);
    (0..n).map(|_| quant::sround(x, &mut rng)).collect()
}

/// Quantizes `weights` to `n_bits`; returns `values`, `levels`, `scale`
/// and the straight-through gradient `ste` of sum(values).
#[pyfunction]
#[pyo3(signature = (weights, n_bits, stochastic=true, seed=0))]
fn quantize(py: Python<'_>, weights: Vec<f64>, n_bits: u32, stochastic: bool, seed: u64) -> PyResult<Py<PyAny>> {
    let spec = QuantSpec {
        rounding: if stochastic { Rounding::Stochastic } else { Rounding::Nearest },
        seed,
        ..QuantSpec::bits(n_bits)
    };
    let mut tape = Tape::new();
    let err = |e: String| PyValueError::new_err(e);
    let leaf = tape.leaf(weights).map_err(|e| err(e.to_string()))?;
    let q = quant::quantize_ste(&mut tape, &leaf, &spec, &mut quant::stream_rng(seed, 0)).map_err(|e| err(e.to_string()))?;
    let s = tape.sum(&q.value).map_err(|e| err(e.to_string()))?;
    let ste = tape.backward(&s).map_err(|e| err(e.to_string()))?.wrt(&leaf);
    let d = PyDict::new(py);
    d.set_item("values", q.value.data().to_vec())?;
    d.set_item("levels", q.levels)?;
    d.set_item("scale", q.scale)?;
    d.set_item("ste", ste)?;
    Ok(d.into_any().unbind())
}

/// Labelled spike-event samples with a train/val/test split.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: netdata::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic dataset from a generator spec dict.
    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn generate(spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let spec: DatasetSpec = from_py(spec)?;
        let inner = netdata::generate_dataset(&spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = netdata::load_dataset(&path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        netdata::save_dataset(&self.inner, &path)
            .map(|_| ())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn spec(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.spec)
    }

    /// Sample `k` as a dict with `label`, `channels`, `duration_us` and
    /// `events` as (time_us, channel) pairs.
    fn sample(&self, py: Python<'_>, k: usize) -> PyResult<Py<PyAny>> {
        let s = self
            .inner
            .samples
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("no sample {k}")))?;
        to_py(py, s)
    }

    /// Sample indices of `"train"`, `"val"` or `"test"`.
    fn split(&self, which: &str) -> PyResult<Vec<usize>> {
        let want = parse_split(which)?;
        Ok(self
            .inner
            .splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == want)
            .map(|(k, _)| k)
            .collect())
    }
}

fn parse_split(which: &str) -> PyResult<Split> {
    match which {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// Two-layer spiking network: LIF or recurrent LIF hidden layer, LIF or
/// FeLIF output layer.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: netdata::Network,
}

#[pymethods]
impl PyNetwork {
    /// `arch` is FF-LIF, RLIF or FF-FeLIF; `bits` None for full precision.
    /// `spec` (a full network spec dict) overrides everything else.
    #[new]
    #[pyo3(signature = (arch="FF-LIF", inputs=12, hidden=64, outputs=4, bits=None, seed=0, spec=None))]
    fn new(
        arch: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        bits: Option<u32>,
        seed: u64,
        spec: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let spec: NetworkSpec = match spec {
            Some(_) => from_py(spec)?,
            None => {
                let a: Architecture = arch.parse().map_err(PyValueError::new_err)?;
                bruno_core::harness::cell_network(a, bits, inputs, hidden, outputs, seed)
            }
        };
        let inner = netdata::build_network(&spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn spec(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.spec)
    }

    /// Weight tensors as flat row-major lists (input, [recurrent,] output).
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.params().iter().map(|p| p.to_vec()).collect()
    }

    /// Trains in place; returns the run record (config, epochs, summary).
    #[pyo3(signature = (data, config=None))]
    fn train(&mut self, py: Python<'_>, data: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
        let cfg: TrainConfig = from_py(config)?;
        let run = py
            .detach(|| train(&mut self.inner, &data.inner, &cfg))
            .map_err(train_err)?;
        to_py(py, &run)
    }

    /// Accuracy on one split of `data`.
    #[pyo3(signature = (data, split="test", config=None))]
    fn evaluate(&self, py: Python<'_>, data: &PyDataset, split: &str, config: Option<&Bound<'_, PyDict>>) -> PyResult<f64> {
        let cfg: TrainConfig = from_py(config)?;
        let samples = data.inner.split(parse_split(split)?);
        py.detach(|| evaluate(&self.inner, &samples, &cfg)).map_err(train_err)
    }
}

/// Runs the verification suite; returns the report dict.
#[pyfunction]
fn verify(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let report = py.detach(run_verify);
    to_py(py, &report)
}

/// Time/memory sweep; returns one dict per row.
#[pyfunction]
#[pyo3(name = "bench", signature = (config=None))]
fn bench_rows(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let cfg: BenchConfig = from_py(config)?;
    let rows = py.detach(|| run_bench(&cfg)).map_err(train_err)?;
    to_py(py, &rows)
}

#[pymodule]
fn bruno_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeLif>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(sround, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(bench_rows, m)?)?;
    Ok(())
}
