//! Python bindings: corpus generation, model training, encoding and metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use cirl::checkpoint::{load_model, save_model};
use cirl::config::RunConfig;
use cirl::dataset::Dataset;
use cirl::encoder::PoolStrategy;
use cirl::eval::{compute_metrics, evaluate, MetricReport};
use cirl::synthcorpus::{gen_corpus, read_corpus, write_corpus, Split};
use cirl::tensor::Tensor;
use cirl::train::EpochLog;

create_exception!(cirl, CirlError, PyException);

fn err(e: cirl::Error) -> PyErr {
    CirlError::new_err(format!("{}: {e}", e.kind()))
}

fn split(s: &str) -> PyResult<Split> {
    s.parse().map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(v: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != cols) {
        return Err(CirlError::new_err("ragged matrix"));
    }
    Ok(Tensor::from_rows(&v))
}

/// Layered run configuration: defaults, then `key = value` overrides.
#[pyclass(name = "RunConfig", module = "cirl")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text=None, overrides=None))]
    fn new(text: Option<&str>, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let o: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
        Ok(Self {
            inner: RunConfig::resolve(text, &o).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(err)?;
        next.model.d_raw = next.corpus.render.d_raw;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(name = "Corpus", module = "cirl")]
struct PyCorpus {
    inner: cirl::synthcorpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=None))]
    fn generate(config: Option<&PyRunConfig>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let inner = gen_corpus(&cfg.corpus, seed.unwrap_or(cfg.seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = File::open(&path)?;
        Ok(Self {
            inner: read_corpus(BufReader::new(f)).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_corpus(&self.inner, &mut w).map_err(err)?;
        w.flush()?;
        Ok(())
    }

    #[getter]
    fn num_candidates(&self) -> usize {
        self.inner.candidates.len()
    }

    #[getter]
    fn subsets(&self) -> Vec<Vec<usize>> {
        self.inner.subsets.clone()
    }

    fn num_triplets(&self, split_name: &str) -> PyResult<usize> {
        Ok(self.inner.split(split(split_name)?).len())
    }

    /// Ground-truth candidate ids of a split's queries.
    fn targets(&self, split_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.split(split(split_name)?).iter().map(|t| t.target_id).collect())
    }

    fn caption(&self, split_name: &str, index: usize) -> PyResult<Vec<u32>> {
        let s = self.inner.split(split(split_name)?);
        let t = s.get(index).ok_or_else(|| CirlError::new_err("index out of range"))?;
        Ok(cirl::synthcorpus::caption_tokens(&t.edits))
    }
}

fn to_py(py: Python<'_>, json_text: &str) -> PyResult<PyObject> {
    Ok(py.import("json")?.call_method1("loads", (json_text,))?.unbind())
}

fn metrics_json(py: Python<'_>, m: &MetricReport) -> PyResult<PyObject> {
    to_py(py, &m.to_json())
}

#[pyclass(name = "Model", module = "cirl")]
struct PyModel {
    inner: cirl::model::Model,
    log: Vec<EpochLog>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&PyRunConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(Self {
            inner: cirl::model::Model::new(cfg.model).map_err(err)?,
            log: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, side) = load_model(&path).map_err(err)?;
        Ok(Self { inner, log: side.log })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, None, &self.log, &path).map_err(err)
    }

    /// Trains in place; returns the per-epoch log.
    #[pyo3(signature = (corpus, config=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        corpus: &PyCorpus,
        config: Option<&PyRunConfig>,
    ) -> PyResult<PyObject> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let model = &mut self.inner;
        let log = py
            .allow_threads(|| {
                let data = Dataset::new(&corpus.inner, model.vision())?;
                cirl::train::train(model, &data, &cfg.train, None)
            })
            .map_err(err)?;
        self.log.extend(log.iter().cloned());
        let text = serde_json::to_string(&log).map_err(|e| CirlError::new_err(e.to_string()))?;
        to_py(py, &text)
    }

    #[pyo3(signature = (corpus, split_name="test"))]
    fn evaluate(&self, py: Python<'_>, corpus: &PyCorpus, split_name: &str) -> PyResult<PyObject> {
        let s = split(split_name)?;
        let data = Dataset::new(&corpus.inner, self.inner.vision()).map_err(err)?;
        let m = evaluate(&self.inner, &data, s, &cirl::eval::DEFAULT_KS, &cirl::eval::DEFAULT_SUBSET_KS)
            .map_err(err)?;
        metrics_json(py, &m)
    }

    fn encode_candidates(&self, corpus: &PyCorpus) -> PyResult<Vec<Vec<f64>>> {
        let data = Dataset::new(&corpus.inner, self.inner.vision()).map_err(err)?;
        Ok(rows(&self.inner.encode_all(&data.candidate_inputs(), 64).map_err(err)?))
    }

    #[pyo3(signature = (corpus, split_name="test"))]
    fn encode_queries(&self, corpus: &PyCorpus, split_name: &str) -> PyResult<Vec<Vec<f64>>> {
        let data = Dataset::new(&corpus.inner, self.inner.vision()).map_err(err)?;
        let q = data.split(split(split_name)?).queries();
        Ok(rows(&self.inner.encode_all(&q, 64).map_err(err)?))
    }

    /// Total decoder forward passes run by this model so far.
    #[getter]
    fn decoder_forwards(&self) -> usize {
        self.inner.decoder_forwards()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().tensors().iter().map(Tensor::len).sum()
    }
}

/// Pooling weights over `k` positions for `strategy` (weighted_mean, last, mean).
#[pyfunction]
fn pooling_weights(strategy: &str, k: usize) -> PyResult<Vec<f64>> {
    if k == 0 {
        return Err(CirlError::new_err("k must be positive"));
    }
    let s: PoolStrategy = strategy.parse().map_err(err)?;
    Ok(s.weights(k))
}

/// In-batch contrastive loss of paired query/target embeddings.
#[pyfunction]
fn contrastive_loss(queries: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, lam: f64) -> PyResult<f64> {
    let (l, _, _) = cirl::train::contrastive_loss(&tensor(queries)?, &tensor(targets)?, lam).map_err(err)?;
    Ok(l)
}

/// Recall metrics from full candidate rankings (best first).
#[pyfunction]
#[pyo3(signature = (rankings, ground_truth, subsets=None, ks=vec![1, 5, 10, 50], subset_ks=vec![1, 2, 3]))]
fn metrics(
    py: Python<'_>,
    rankings: Vec<Vec<usize>>,
    ground_truth: Vec<usize>,
    subsets: Option<Vec<Vec<usize>>>,
    ks: Vec<usize>,
    subset_ks: Vec<usize>,
) -> PyResult<PyObject> {
    if rankings.len() != ground_truth.len() {
        return Err(CirlError::new_err("rankings and ground_truth differ in length"));
    }
    let subset_ks = if subsets.is_some() { subset_ks } else { Vec::new() };
    let m = compute_metrics(&rankings, &ground_truth, subsets.as_deref(), &ks, &subset_ks).map_err(err)?;
    metrics_json(py, &m)
}

#[pymodule]
#[pyo3(name = "cirl")]
fn cirl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CirlError", m.py().get_type::<CirlError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pooling_weights, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
