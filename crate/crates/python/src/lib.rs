//! Python bindings for the derail library.

use std::collections::HashMap;

use derail::analysis::{binomial_test_two_tailed, fisher_exact_two_tailed, log_odds_ratio as lor};
use derail::corpus::{build_matched_pairs, load_corpus, select_candidates, LoadOptions, SelectionThresholds};
use derail::depparse::{parse_conllu, ParseIndex};
use derail::forecast::{featurize_dataset, horizon_subset, lopo_cv as cv, CvConfig, FeatureInputs, FeatureSet};
use derail::logistic::{fit_logistic as fit, FitOptions, SparseRow};
use derail::politeness::{default_registry, Registry as CoreRegistry};
use derail::prompts::{discover_prompt_types, PromptConfig, PromptModel as CorePromptModel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn read(path: &str) -> PyResult<String> {
    std::fs::read_to_string(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

/// Smoothed log-odds ratio of `k1/n1` against `k2/n2`.
#[pyfunction]
fn log_odds_ratio(k1: u64, n1: u64, k2: u64, n2: u64) -> PyResult<f64> {
    lor(k1, n1, k2, n2).map_err(value_err)
}

/// Exact two-tailed binomial test of `k` successes in `n` trials.
#[pyfunction]
fn binomial_test(k: u64, n: u64, p0: f64) -> PyResult<f64> {
    binomial_test_two_tailed(k, n, p0).map_err(value_err)
}

#[pyfunction]
fn fisher_exact(k1: u64, n1: u64, k2: u64, n2: u64) -> PyResult<f64> {
    fisher_exact_two_tailed(k1, n1, k2, n2).map_err(value_err)
}

/// Parses CoNLL-U text into a list of dicts, one per comment.
#[pyfunction]
fn parse_conllu_text<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parse_conllu(text).map_err(value_err)?)
}

#[pyclass(module = "pyderail")]
struct Registry {
    inner: CoreRegistry,
}

#[pymethods]
impl Registry {
    #[staticmethod]
    fn default() -> Self {
        Registry { inner: default_registry() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Registry { inner: CoreRegistry::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().iter().map(|s| s.to_string()).collect()
    }

    /// Strategy counts for every comment in a CoNLL-U document.
    fn extract(&self, conllu: &str) -> PyResult<HashMap<String, HashMap<String, u32>>> {
        let compiled = self.inner.compile();
        let mut out = HashMap::new();
        for pc in parse_conllu(conllu).map_err(value_err)? {
            let v = compiled.extract(&pc);
            let counts = v.names.iter().cloned().zip(v.counts.iter().copied()).collect();
            out.insert(pc.comment_id.clone(), counts);
        }
        Ok(out)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "pyderail")]
struct PairedDataset {
    inner: derail::corpus::PairedDataset,
}

#[pymethods]
impl PairedDataset {
    /// Pairs a labeled JSONL corpus by its awry/on-track labels.
    #[staticmethod]
    fn from_labeled(path: &str) -> PyResult<Self> {
        let (convs, _) = load_corpus(path, &LoadOptions::default()).map_err(value_err)?;
        Ok(PairedDataset { inner: derail::corpus::PairedDataset::from_labeled(&convs) })
    }

    /// Selects candidates by toxicity and matches them within pages.
    #[staticmethod]
    #[pyo3(signature = (path, civil_max=0.4, toxic_min=0.6))]
    fn from_unlabeled(path: &str, civil_max: f64, toxic_min: f64) -> PyResult<Self> {
        let (convs, _) = load_corpus(path, &LoadOptions::default()).map_err(value_err)?;
        let th = SelectionThresholds::new(civil_max, toxic_min).map_err(value_err)?;
        let c = select_candidates(&convs, &th).map_err(value_err)?;
        Ok(PairedDataset { inner: build_matched_pairs(&c.awry, &c.ontrack) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PairedDataset { inner: derail::corpus::PairedDataset::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary())
    }

    /// Pairs whose attack comes after the fourth comment.
    fn horizon(&self) -> Self {
        PairedDataset { inner: horizon_subset(&self.inner) }
    }

    fn pages(&self) -> Vec<String> {
        self.inner.page_index().keys().cloned().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "pyderail")]
struct PromptModel {
    inner: CorePromptModel,
}

#[pymethods]
impl PromptModel {
    /// Fits prompt types on an unlabeled JSONL corpus and its CoNLL-U parses.
    #[staticmethod]
    #[pyo3(signature = (corpus_path, parses_path, rank=25, k=6, seed=0, min_count=50))]
    fn discover(corpus_path: &str, parses_path: &str, rank: usize, k: usize, seed: u64, min_count: usize) -> PyResult<Self> {
        let (convs, _) = load_corpus(corpus_path, &LoadOptions::default()).map_err(value_err)?;
        let parses = ParseIndex::from_conllu(&read(parses_path)?).map_err(value_err)?;
        let mut cfg = PromptConfig { rank, k, seed, min_count, ..Default::default() };
        cfg.svd.seed = seed;
        Ok(PromptModel { inner: discover_prompt_types(&convs, &parses, &cfg).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PromptModel { inner: CorePromptModel::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn top_phrasings(&self, cluster: usize, n: usize) -> Vec<String> {
        self.inner.top_phrasings(cluster, n).into_iter().map(String::from).collect()
    }

    /// `(type, distance)` per comment; type is None for the null type.
    fn infer(&self, conllu: &str) -> PyResult<HashMap<String, (Option<usize>, f64)>> {
        let mut out = HashMap::new();
        for pc in parse_conllu(conllu).map_err(value_err)? {
            let a = self.inner.infer(&pc);
            out.insert(pc.comment_id.clone(), (a.type_index, a.distance));
        }
        Ok(out)
    }
}

#[pyclass(module = "pyderail")]
struct LogisticModel {
    inner: derail::logistic::LogisticModel,
}

fn dense(row: &[f64]) -> SparseRow {
    row.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, x)| (j, *x)).collect()
}

#[pymethods]
impl LogisticModel {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> Vec<f64> {
        rows.iter().map(|r| self.inner.predict_proba(&dense(r))).collect()
    }

    fn decision(&self, rows: Vec<Vec<f64>>) -> Vec<f64> {
        rows.iter().map(|r| self.inner.decision(&dense(r))).collect()
    }
}

/// L2-regularized logistic regression on standardized dense rows.
#[pyfunction]
#[pyo3(signature = (rows, labels, l2=1.0, max_iters=5000, tolerance=1e-6))]
fn fit_logistic(rows: Vec<Vec<f64>>, labels: Vec<bool>, l2: f64, max_iters: usize, tolerance: f64) -> PyResult<LogisticModel> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let sparse: Vec<SparseRow> = rows.iter().map(|r| dense(r)).collect();
    let opts = FitOptions { l2, max_iters, tolerance };
    Ok(LogisticModel { inner: fit(&sparse, dim, &labels, &opts).map_err(value_err)? })
}

/// Leave-one-page-out pair prediction; returns the report as a dict.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (paired, parses_path, features="pragmatic", prompt_model=None, seed=0, l2_grid=None, pairwise=false))]
fn lopo_cv<'py>(
    py: Python<'py>,
    paired: &PairedDataset,
    parses_path: &str,
    features: &str,
    prompt_model: Option<PyRef<'py, PromptModel>>,
    seed: u64,
    l2_grid: Option<Vec<f64>>,
    pairwise: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let fs: FeatureSet = features.parse().map_err(value_err)?;
    let parses = ParseIndex::from_conllu(&read(parses_path)?).map_err(value_err)?;
    let registry = default_registry().compile();
    let inputs = FeatureInputs {
        parses: Some(&parses),
        registry: Some(&registry),
        prompt_model: prompt_model.as_ref().map(|m| &m.inner),
    };
    let feats = featurize_dataset(&paired.inner, &inputs).map_err(value_err)?;
    let mut cfg = CvConfig { feature_set: fs, seed, pairwise, ..Default::default() };
    if let Some(g) = l2_grid {
        cfg.l2_grid = g;
    }
    let report = py.detach(|| cv(&paired.inner, &feats, &cfg)).map_err(value_err)?;
    to_py(py, &report)
}

/// Runs the command-line pipeline with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    derail::cli::run(std::iter::once("derail".to_string()).chain(args))
}

#[pymodule]
fn pyderail(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_odds_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(binomial_test, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_exact, m)?)?;
    m.add_function(wrap_pyfunction!(parse_conllu_text, m)?)?;
    m.add_function(wrap_pyfunction!(fit_logistic, m)?)?;
    m.add_function(wrap_pyfunction!(lopo_cv, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Registry>()?;
    m.add_class::<PairedDataset>()?;
    m.add_class::<PromptModel>()?;
    m.add_class::<LogisticModel>()?;
    Ok(())
}
