//! Python module `shaped`: synthetic data, training, decoding and ROUGE.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use shaped_core::data::RawExample;
use shaped_core::eval::{rouge_l, rouge_n};
use shaped_core::model::{Decoding, GenerationMode};
use shaped_core::synth::{default_specs, parse_specs, synth_corpus};
use shaped_core::train::{LoadedModel, TrainConfig, Trainer};
use shaped_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingCheckpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Record = (String, String, Option<String>);

/// `n_per_style` examples per style as `(source, target, style)` tuples;
/// out-of-domain styles have `style=None`.
#[pyfunction]
#[pyo3(signature = (n_per_style, seed, spec=None))]
fn synth(n_per_style: usize, seed: u64, spec: Option<&str>) -> PyResult<Vec<Record>> {
    let specs = match spec {
        Some(text) => parse_specs("<spec>", text).map_err(py_err)?,
        None => default_specs(),
    };
    let corpus = synth_corpus(&specs, n_per_style, seed).map_err(py_err)?;
    Ok(corpus.into_iter().map(|e| (e.source, e.target, e.style)).collect())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L as `(precision, recall, f1)` on
/// whitespace tokens.
#[pyfunction]
fn rouge(candidate: &str, reference: &str) -> PyResult<HashMap<String, (f64, f64, f64)>> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let t = |x: shaped_core::eval::RougeComponent| (x.precision, x.recall, x.f1);
    let mut out = HashMap::new();
    out.insert("rouge1".into(), t(rouge_n(&c, &r, 1).map_err(py_err)?));
    out.insert("rouge2".into(), t(rouge_n(&c, &r, 2).map_err(py_err)?));
    out.insert("rougeL".into(), t(rouge_l(&c, &r)));
    Ok(out)
}

/// Trains on `(source, target, style)` records with a `key = value`
/// configuration, saves the checkpoint to `out` and returns the mean
/// per-token loss of each logging window.
#[pyfunction]
#[pyo3(signature = (examples, out, config=""))]
fn train(py: Python<'_>, examples: Vec<Record>, out: PathBuf, config: &str) -> PyResult<Vec<f64>> {
    let cfg = TrainConfig::parse("<config>", config).map_err(py_err)?;
    let corpus: Vec<RawExample> = examples
        .into_iter()
        .map(|(source, target, style)| RawExample { source, target, style })
        .collect();
    py.detach(|| {
        let mut t = Trainer::new(&corpus, cfg, None)?;
        t.run(|_| {})?;
        t.checkpoint().save(&out)?;
        Ok(t.log().iter().map(|r| r.token_loss).collect())
    })
    .map_err(py_err)
}

/// A trained checkpoint loaded for inference.
#[pyclass(frozen)]
struct Model {
    inner: LoadedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: LoadedModel::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn styles(&self) -> Vec<String> {
        self.inner.model.styles().names().to_vec()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    /// Greedy headline for `source`. `mode` is one of `shaped:<style>`,
    /// `mixture`, `uniform`, `shared` or `private:<style>`.
    #[pyo3(signature = (source, mode="mixture", max_len=None))]
    fn generate(&self, source: &str, mode: &str, max_len: Option<usize>) -> PyResult<String> {
        let m = &self.inner;
        let mode = GenerationMode::parse(mode, m.model.styles()).map_err(py_err)?;
        let ids = self.encode(source)?;
        let out = m
            .model
            .generate(&ids, &mode, max_len.unwrap_or(m.config.max_target), Decoding::Greedy)
            .map_err(py_err)?;
        Ok(m.vocab.decode(&out))
    }

    /// Style posterior of a shaped checkpoint.
    fn posterior(&self, source: &str) -> PyResult<HashMap<String, f64>> {
        let ids = self.encode(source)?;
        let p = self.inner.model.posterior(&ids).map_err(py_err)?;
        Ok(self.styles().into_iter().zip(p.p).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.inner.model)
    }
}

impl Model {
    fn encode(&self, source: &str) -> PyResult<Vec<usize>> {
        let mut ids = self.inner.vocab.encode(source);
        ids.truncate(self.inner.config.max_source);
        if ids.is_empty() {
            return Err(PyValueError::new_err("empty source"));
        }
        Ok(ids)
    }
}

#[pymodule]
fn shaped(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
