//! Python bindings. Matrices cross the boundary as flat channel-major lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use cqkv::attnsim::{run_decode as run_decode_rs, DecodeScenario, KvCodec};
use cqkv::baselines::{Axis, UniformIntCodec, UniformQuantConfig};
use cqkv::{Coupling, ErrorClass, LearningMode};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: cqkv::Error) -> PyErr {
    match err.class() {
        ErrorClass::Io => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn coupling(notation: &str) -> PyResult<Coupling> {
    notation.parse().map_err(to_py)
}

#[pyclass(name = "ActivationMatrix", module = "cqkv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyMatrix(cqkv::ActivationMatrix);

#[pymethods]
impl PyMatrix {
    #[new]
    #[pyo3(signature = (channels, tokens, values, gradients=None))]
    fn new(
        channels: usize,
        tokens: usize,
        values: Vec<f32>,
        gradients: Option<Vec<f32>>,
    ) -> PyResult<Self> {
        let mut m = cqkv::ActivationMatrix::new(channels, tokens, values).map_err(to_py)?;
        if let Some(g) = gradients {
            m = m.with_gradients(g).map_err(to_py)?;
        }
        Ok(Self(m))
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.0.tokens()
    }

    #[getter]
    fn has_gradients(&self) -> bool {
        self.0.has_gradients()
    }

    fn values(&self) -> Vec<f32> {
        self.0.values().to_vec()
    }

    fn gradients(&self) -> Option<Vec<f32>> {
        self.0.gradients().map(<[f32]>::to_vec)
    }

    fn get(&self, channel: usize, token: usize) -> PyResult<f32> {
        if channel >= self.0.channels() || token >= self.0.tokens() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(channel, token))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        cqkv::save_activations(&self.0, &mut out).expect("writing to memory");
        out
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        cqkv::load_activations(data.as_slice())
            .map(Self)
            .map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        cqkv::save_activations(&self.0, &mut w).map_err(to_py)?;
        Ok(w.flush()?)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = BufReader::new(File::open(path)?);
        cqkv::load_activations(f).map(Self).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ActivationMatrix(channels={}, tokens={}, gradients={})",
            self.0.channels(),
            self.0.tokens(),
            self.0.has_gradients()
        )
    }
}

#[pyclass(name = "Codebook", module = "cqkv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCodebook(cqkv::Codebook);

#[pymethods]
impl PyCodebook {
    #[getter]
    fn coupling(&self) -> String {
        self.0.coupling().to_string()
    }

    #[getter]
    fn mode(&self) -> String {
        self.0.mode().to_string()
    }

    #[getter]
    fn num_groups(&self) -> usize {
        self.0.num_groups()
    }

    fn centroids(&self) -> Vec<f32> {
        self.0.centroids().to_vec()
    }

    fn centroid(&self, group: usize, code: usize) -> PyResult<Vec<f32>> {
        if group >= self.0.num_groups() || code >= self.0.coupling().centroids_per_group() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.centroid(group, code).to_vec())
    }

    fn hash(&self) -> u64 {
        self.0.hash()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        cqkv::Codebook::load(data.as_slice())
            .map(Self)
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Codebook({}, {}, groups={})",
            self.0.coupling(),
            self.0.mode(),
            self.0.num_groups()
        )
    }
}

#[pyclass(name = "QuantizedCache", module = "cqkv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCache(cqkv::QuantizedCache);

#[pymethods]
impl PyCache {
    #[getter]
    fn tokens(&self) -> usize {
        self.0.tokens()
    }

    #[getter]
    fn num_groups(&self) -> usize {
        self.0.num_groups()
    }

    #[getter]
    fn payload_bits(&self) -> u64 {
        self.0.payload_bits()
    }

    #[getter]
    fn codebook_hash(&self) -> u64 {
        self.0.codebook_hash()
    }

    /// Group-major codes.
    fn codes(&self) -> Vec<u32> {
        self.0.codes()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        cqkv::QuantizedCache::load(data.as_slice())
            .map(Self)
            .map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (channels, tokens, rank, noise=0.1, seed=0, mixing_scale=1.0))]
fn synth_correlated(
    channels: usize,
    tokens: usize,
    rank: usize,
    noise: f64,
    seed: u64,
    mixing_scale: f64,
) -> PyResult<PyMatrix> {
    let mut spec = cqkv::SynthSpec::new(channels, tokens, rank)
        .noise(noise)
        .seed(seed);
    spec.mixing_scale = mixing_scale;
    cqkv::synth_correlated(&spec).map(PyMatrix).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (matrix, hot_fraction=0.1, hot_scale=1.0, cold_scale=0.01, seed=0))]
fn synth_gradients(
    matrix: &PyMatrix,
    hot_fraction: f64,
    hot_scale: f64,
    cold_scale: f64,
    seed: u64,
) -> PyResult<PyMatrix> {
    let spec = cqkv::GradientSpec {
        hot_fraction,
        hot_scale,
        cold_scale,
        seed,
    };
    cqkv::synth_gradients(matrix.0.clone(), &spec)
        .map(PyMatrix)
        .map_err(to_py)
}

#[pyfunction]
fn bits_per_fpn(notation: &str) -> PyResult<f64> {
    Ok(coupling(notation)?.bits_per_fpn())
}

fn dims(layers: usize, kv_heads: usize, head_dim: usize, max_context: usize) -> cqkv::ModelDims {
    cqkv::ModelDims {
        layers,
        kv_heads,
        head_channels: head_dim,
        max_context,
    }
}

#[pyfunction]
fn codebook_param_count(
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    notation: &str,
) -> PyResult<u64> {
    cqkv::codebook_param_count(
        &dims(layers, kv_heads, head_dim, usize::MAX),
        &coupling(notation)?,
    )
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (layers, kv_heads, head_dim, batch, tokens, bits, max_context=None))]
fn kv_cache_bytes(
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    batch: usize,
    tokens: usize,
    bits: f64,
    max_context: Option<usize>,
) -> PyResult<u64> {
    let d = dims(layers, kv_heads, head_dim, max_context.unwrap_or(tokens));
    cqkv::kv_cache_bytes(&d, batch, tokens, bits).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (matrix, notation, fisher=false, seed=0, iters=100))]
fn learn_codebook(
    py: Python<'_>,
    matrix: &PyMatrix,
    notation: &str,
    fisher: bool,
    seed: u64,
    iters: usize,
) -> PyResult<PyCodebook> {
    let mode = if fisher {
        LearningMode::Fisher
    } else {
        LearningMode::Uniform
    };
    let cfg = cqkv::CQConfig::new(coupling(notation)?)
        .mode(mode)
        .seed(seed)
        .iters(iters);
    let m = &matrix.0;
    py.detach(|| cqkv::learn_codebook(m, &cfg))
        .map(PyCodebook)
        .map_err(to_py)
}

#[pyfunction]
fn quantize(matrix: &PyMatrix, codebook: &PyCodebook) -> PyResult<PyCache> {
    cqkv::quantize(&matrix.0, &codebook.0)
        .map(PyCache)
        .map_err(to_py)
}

#[pyfunction]
fn dequantize(cache: &PyCache, codebook: &PyCodebook) -> PyResult<PyMatrix> {
    cqkv::dequantize(&cache.0, &codebook.0)
        .map(PyMatrix)
        .map_err(to_py)
}

#[pyfunction]
fn quantization_error(original: &PyMatrix, reconstructed: &PyMatrix) -> PyResult<f64> {
    cqkv::quantization_error(&original.0, &reconstructed.0).map_err(to_py)
}

/// One dict per group size with per-group entropies in bits.
#[pyfunction]
#[pyo3(signature = (matrix, group_sizes, bins=16))]
fn entropy_sweep<'py>(
    py: Python<'py>,
    matrix: &PyMatrix,
    group_sizes: Vec<usize>,
    bins: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = cqkv::infostats::entropy_sweep(&matrix.0, &group_sizes, bins).map_err(to_py)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("group_size", r.group_size)?;
            d.set_item("joint_bits", r.joint_bits)?;
            d.set_item("sum_marginal_bits", r.sum_marginal_bits)?;
            d.set_item("joint_mean", r.joint_mean)?;
            d.set_item("sum_marginal_mean", r.sum_marginal_mean)?;
            d.set_item("dropped_channels", r.dropped_channels)?;
            Ok(d)
        })
        .collect()
}

/// Row-major Pearson coefficients of the first `limit` channels.
#[pyfunction]
#[pyo3(signature = (matrix, limit=32))]
fn correlation_matrix(matrix: &PyMatrix, limit: usize) -> PyResult<Vec<Vec<f64>>> {
    let c = cqkv::infostats::correlation_matrix(&matrix.0, limit).map_err(to_py)?;
    Ok((0..c.n)
        .map(|i| (0..c.n).map(|j| c.get(i, j)).collect())
        .collect())
}

fn codec_for(spec: &str, calibration: &cqkv::ActivationMatrix, seed: u64) -> PyResult<KvCodec> {
    if spec == "none" {
        return Ok(KvCodec::Identity);
    }
    if let Some(bits) = spec.strip_prefix("int") {
        let bits: u8 = bits
            .parse()
            .map_err(|_| PyValueError::new_err(format!("bad codec `{spec}`")))?;
        let cfg = UniformQuantConfig::new(bits, Axis::PerChannel);
        return UniformIntCodec::fit(calibration, cfg)
            .map(KvCodec::UniformInt)
            .map_err(to_py);
    }
    let cfg = cqkv::CQConfig::new(coupling(spec)?).seed(seed);
    cqkv::learn_codebook(calibration, &cfg)
        .map(KvCodec::Cq)
        .map_err(to_py)
}

/// Decode simulation; `codec` is "none", "int<bits>" or a coupling such as
/// "4c8b". Codebooks are learned on the keys and values themselves.
#[pyfunction]
#[pyo3(signature = (queries, keys, values, codec="none", seed=0, rope_base=None, scale_scores=false))]
#[allow(clippy::too_many_arguments)]
fn run_decode<'py>(
    py: Python<'py>,
    queries: &PyMatrix,
    keys: &PyMatrix,
    values: &PyMatrix,
    codec: &str,
    seed: u64,
    rope_base: Option<f64>,
    scale_scores: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut sc =
        DecodeScenario::new(queries.0.clone(), keys.0.clone(), values.0.clone()).map_err(to_py)?;
    if let Some(base) = rope_base {
        sc = sc.with_rope(base);
    }
    sc.scale_scores = scale_scores;
    let k = codec_for(codec, &sc.keys, seed)?;
    let v = codec_for(codec, &sc.values, seed)?;
    let sc = sc.with_codecs(k, v);
    let report = py.detach(|| run_decode_rs(&sc)).map_err(to_py)?;
    let s = report.summary;
    let d = PyDict::new(py);
    d.set_item("key_codec", s.key_codec)?;
    d.set_item("value_codec", s.value_codec)?;
    d.set_item("head_channels", s.head_channels)?;
    d.set_item("steps", s.steps)?;
    d.set_item("max_rel_l2_err", s.max_rel_l2_err)?;
    d.set_item("mean_rel_l2_err", s.mean_rel_l2_err)?;
    d.set_item("max_weight_tv_dist", s.max_weight_tv_dist)?;
    d.set_item(
        "rel_l2_err",
        report
            .steps
            .iter()
            .map(|r| r.rel_l2_err)
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

#[pymodule]
fn cqkv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyCache>()?;
    m.add_function(wrap_pyfunction!(synth_correlated, m)?)?;
    m.add_function(wrap_pyfunction!(synth_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(bits_per_fpn, m)?)?;
    m.add_function(wrap_pyfunction!(codebook_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(kv_cache_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(learn_codebook, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_error, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(run_decode, m)?)?;
    Ok(())
}
