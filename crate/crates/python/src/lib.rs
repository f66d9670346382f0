//! Python bindings: checkpoints, merges, metrics, the toy bigram model,
//! retrieval and patient serialization.

use std::collections::BTreeMap;

use mergebench::ehr::{self, InputFormat, PromptTemplate, SerializationFilter};
use mergebench::merge::{self, AngleScope, AntipodalPolicy, LambdaWeights, SlerpOptions};
use mergebench::retrieval::{self, Bm25Params, InvertedIndex, MapDenominator, Qrels, Ranking};
use mergebench::tensor_store::{self, DType, DTypePolicy, Tensor, WriteOptions};
use mergebench::toy_lm::{self, Symbol, UnknownPolicy};
use mergebench::{dlt, metrics, sweep};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(value_err)?)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn parse_dtype(tag: &str) -> PyResult<DType> {
    DType::parse(&tag.to_ascii_uppercase()).ok_or_else(|| value_err(format!("unknown dtype {tag:?} (F32, F16, BF16)")))
}

/// Named tensors plus string metadata, stored as in a `.safetensors` file.
#[pyclass(name = "TensorMap", module = "pymergebench")]
#[derive(Default)]
struct PyTensorMap {
    inner: tensor_store::TensorMap,
}

#[pymethods]
impl PyTensorMap {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let inner = tensor_store::read_checkpoint(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, force_f32 = false, strict = false))]
    fn write(&self, path: &str, force_f32: bool, strict: bool) -> PyResult<()> {
        let options = WriteOptions {
            dtype_policy: if force_f32 {
                DTypePolicy::ForceF32
            } else {
                DTypePolicy::Preserve
            },
            strict,
        };
        tensor_store::write_checkpoint(&self.inner, path, options).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[pyo3(signature = (name, values, shape = None, dtype = "F32"))]
    fn insert(&mut self, name: &str, values: Vec<f32>, shape: Option<Vec<usize>>, dtype: &str) -> PyResult<()> {
        let shape = shape.unwrap_or_else(|| vec![values.len()]);
        let tensor = Tensor::from_f32_as(parse_dtype(dtype)?, shape, &values).map_err(value_err)?;
        self.inner.insert(name, tensor);
        Ok(())
    }

    /// `(values, shape, dtype)` with values widened to float.
    fn get(&self, name: &str) -> PyResult<(Vec<f32>, Vec<usize>, String)> {
        let t = self
            .inner
            .get(name)
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok((t.to_f32(), t.shape().to_vec(), t.dtype().as_str().to_string()))
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(String::from).collect()
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        self.inner.metadata().clone()
    }

    fn set_metadata(&mut self, key: String, value: String) {
        self.inner.metadata_mut().insert(key, value);
    }

    fn content_digest(&self) -> String {
        self.inner.content_digest()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.get(name).is_some()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("TensorMap({} tensors)", self.inner.len())
    }
}

fn slerp_options(parallel_epsilon: f64, antipodal: &str, angle_scope: &str) -> PyResult<SlerpOptions> {
    let antipodal_policy = match antipodal {
        "error" => AntipodalPolicy::Error,
        "flip_sign" => AntipodalPolicy::FlipSign,
        other => {
            return Err(value_err(format!(
                "unknown antipodal policy {other:?} (error, flip_sign)"
            )))
        }
    };
    let angle_scope = match angle_scope {
        "per_tensor" => AngleScope::PerTensor,
        "global" => AngleScope::Global,
        other => return Err(value_err(format!("unknown angle scope {other:?} (per_tensor, global)"))),
    };
    Ok(SlerpOptions {
        parallel_epsilon,
        antipodal_policy,
        angle_scope,
    })
}

/// Weighted sum of compatible maps; weights are non-negative and sum to one.
#[pyfunction]
fn linear_merge(inputs: Vec<PyRef<'_, PyTensorMap>>, weights: Vec<f64>) -> PyResult<PyTensorMap> {
    let maps: Vec<&tensor_store::TensorMap> = inputs.iter().map(|m| &m.inner).collect();
    let w = LambdaWeights::new(weights).map_err(value_err)?;
    let inner = merge::linear_merge(&maps, &w).map_err(value_err)?;
    Ok(PyTensorMap { inner })
}

/// Returns the merged map and one `{name, omega, fallback}` dict per tensor.
#[pyfunction]
#[pyo3(signature = (a, b, t, parallel_epsilon = 1e-8, antipodal = "error", angle_scope = "per_tensor"))]
fn slerp_merge<'py>(
    py: Python<'py>,
    a: &PyTensorMap,
    b: &PyTensorMap,
    t: f64,
    parallel_epsilon: f64,
    antipodal: &str,
    angle_scope: &str,
) -> PyResult<(PyTensorMap, Bound<'py, PyAny>)> {
    let opts = slerp_options(parallel_epsilon, antipodal, angle_scope)?;
    let (inner, diag) = merge::slerp_merge(&a.inner, &b.inner, t, &opts).map_err(value_err)?;
    Ok((PyTensorMap { inner }, to_py(py, &diag.records)?))
}

/// `(output, omega, fallback)`; `t` weights `v`.
#[pyfunction]
#[pyo3(signature = (u, v, t, parallel_epsilon = 1e-8, antipodal = "error"))]
fn slerp_vector(
    u: Vec<f32>,
    v: Vec<f32>,
    t: f64,
    parallel_epsilon: f64,
    antipodal: &str,
) -> PyResult<(Vec<f32>, f64, String)> {
    let opts = slerp_options(parallel_epsilon, antipodal, "per_tensor")?;
    let (out, step) = merge::slerp_vector(&u, &v, t, &opts).map_err(value_err)?;
    let fallback = serde_json::to_value(step.fallback).map_err(value_err)?;
    Ok((out, step.omega, fallback.as_str().unwrap_or_default().to_string()))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(value_err)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auprc(&scores, &labels).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (p_train, p_test, p_ref, overfit_threshold = dlt::DEFAULT_OVERFIT_THRESHOLD))]
fn dlt_deltas<'py>(
    py: Python<'py>,
    p_train: f64,
    p_test: f64,
    p_ref: f64,
    overfit_threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = dlt::dlt_deltas_with_threshold(p_train, p_test, p_ref, overfit_threshold).map_err(value_err)?;
    to_py(py, &report)
}

/// Stratified fold index per example.
#[pyfunction]
#[pyo3(signature = (labels, k, strict = true))]
fn kfold_split(labels: Vec<u8>, k: usize, strict: bool) -> PyResult<Vec<usize>> {
    let ids: Vec<usize> = (0..labels.len()).collect();
    sweep::kfold_split(&ids, &labels, k, strict).map_err(value_err)
}

fn symbol(c: Option<char>) -> Symbol {
    c.map_or(Symbol::Bos, Symbol::Char)
}

/// Character bigram model whose logits live in a single tensor.
#[pyclass(name = "ToyLm", module = "pymergebench")]
struct PyToyLm {
    inner: toy_lm::ToyLm,
}

#[pymethods]
impl PyToyLm {
    /// Trains on `corpus`; `vocab_texts` adds characters to the vocabulary.
    #[staticmethod]
    #[pyo3(signature = (corpus, alpha = 1.0, vocab_texts = None))]
    fn train(corpus: Vec<String>, alpha: f64, vocab_texts: Option<Vec<String>>) -> PyResult<Self> {
        let mut all = corpus.clone();
        all.extend(vocab_texts.unwrap_or_default());
        let vocab = toy_lm::Vocab::from_texts(&all);
        let inner = toy_lm::train_bigram_with_vocab(&corpus, alpha, vocab).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_tensor_map(map: &PyTensorMap) -> PyResult<Self> {
        let inner = toy_lm::ToyLm::from_tensor_map(&map.inner).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_tensor_map(&self) -> PyTensorMap {
        PyTensorMap {
            inner: self.inner.to_tensor_map(),
        }
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab().len()
    }

    #[pyo3(signature = (text, strict = true))]
    fn perplexity(&self, text: &str, strict: bool) -> PyResult<f64> {
        let policy = if strict {
            UnknownPolicy::Strict
        } else {
            UnknownPolicy::default()
        };
        self.inner.perplexity(text, policy).map_err(value_err)
    }

    /// `(n_tokens, nll_sum)`.
    #[pyo3(signature = (text, strict = true))]
    fn nll(&self, text: &str, strict: bool) -> PyResult<(u64, f64)> {
        let policy = if strict {
            UnknownPolicy::Strict
        } else {
            UnknownPolicy::default()
        };
        self.inner.nll(text, policy).map_err(value_err)
    }

    /// Next-symbol probabilities after `context`; `None` means beginning of text.
    #[pyo3(signature = (context = None))]
    fn next_token_distribution(&self, context: Option<char>) -> PyResult<Vec<f64>> {
        self.inner.next_token_distribution(symbol(context)).map_err(value_err)
    }
}

/// BM25 index over `(doc_id, text)` pairs.
#[pyclass(name = "Bm25Index", module = "pymergebench")]
struct PyBm25Index {
    inner: InvertedIndex,
}

#[pymethods]
impl PyBm25Index {
    #[new]
    #[pyo3(signature = (corpus, stopwords = None))]
    fn new(corpus: Vec<(String, String)>, stopwords: Option<Vec<String>>) -> PyResult<Self> {
        let tokenizer = match stopwords {
            Some(words) => retrieval::Tokenizer::with_stopwords(words),
            None => retrieval::Tokenizer::default(),
        };
        let inner = retrieval::build_index_with(&corpus, tokenizer).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (query, top_k = 1000, k1 = retrieval::DEFAULT_K1, b = retrieval::DEFAULT_B))]
    fn search(&self, query: &str, top_k: usize, k1: f64, b: f64) -> Vec<(String, f64)> {
        retrieval::bm25_search_with(&self.inner, "q", query, top_k, Bm25Params { k1, b }).entries
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __len__(&self) -> usize {
        self.inner.num_docs()
    }
}

fn ranking(entries: Vec<(String, f64)>) -> Ranking {
    Ranking {
        query_id: "q".into(),
        entries,
    }
}

/// Reciprocal rank fusion of ranked `(doc_id, score)` lists.
#[pyfunction]
#[pyo3(signature = (rankings, k_rrf = retrieval::DEFAULT_K_RRF, top_k = 1000))]
fn rrf_fuse(rankings: Vec<Vec<(String, f64)>>, k_rrf: usize, top_k: usize) -> PyResult<Vec<(String, f64)>> {
    let rankings: Vec<Ranking> = rankings.into_iter().map(ranking).collect();
    Ok(retrieval::rrf_fuse(&rankings, k_rrf, top_k).map_err(value_err)?.entries)
}

#[pyfunction]
fn expand_query(query: &str, keywords: Vec<String>) -> String {
    retrieval::expand_query(query, &keywords)
}

/// MRR@1000, P@10, NDCG@10, R@1000 and MAP@100 of one ranking against graded judgments.
#[pyfunction]
#[pyo3(signature = (ranking, judgments, truncated_map = false))]
fn ir_metrics<'py>(
    py: Python<'py>,
    ranking: Vec<(String, f64)>,
    judgments: BTreeMap<String, u32>,
    truncated_map: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut qrels = Qrels::new();
    qrels.insert("q".into(), judgments);
    let denom = if truncated_map {
        MapDenominator::Truncated
    } else {
        MapDenominator::AllRelevant
    };
    let m = retrieval::ir_metrics_with(&self::ranking(ranking), &qrels, denom).map_err(value_err)?;
    to_py(py, &m)
}

fn parse_records(text: &str, format: &str) -> PyResult<Vec<ehr::PatientRecord>> {
    let format: InputFormat = format.parse().map_err(value_err)?;
    ehr::parse_patients(text.as_bytes(), format).map_err(value_err)
}

/// Serializes every patient in a JSONL or TSV document; returns `(id, label, text)`.
#[pyfunction]
#[pyo3(signature = (records, filter = "full", format = "jsonl"))]
fn serialize_patients(records: &str, filter: &str, format: &str) -> PyResult<Vec<(String, Option<u8>, String)>> {
    let filter: SerializationFilter = filter.parse().map_err(value_err)?;
    Ok(parse_records(records, format)?
        .iter()
        .map(|r| {
            (
                r.patient_id.clone(),
                r.outcome.map(|o| o.label()),
                ehr::serialize_patient(r, filter),
            )
        })
        .collect())
}

/// Wraps serialized patient text in the `mortality` or `qe` template.
#[pyfunction]
#[pyo3(signature = (patient_text, template = "mortality"))]
fn build_prompt(patient_text: &str, template: &str) -> PyResult<String> {
    let template = match template {
        "mortality" => PromptTemplate::Mortality,
        "qe" => PromptTemplate::Qe,
        other => return Err(value_err(format!("unknown template {other:?} (mortality, qe)"))),
    };
    Ok(template.render(patient_text))
}

#[pyfunction]
fn corpus_stats<'py>(py: Python<'py>, texts: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ehr::corpus_stats(&texts).map_err(value_err)?)
}

#[pymodule]
fn pymergebench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensorMap>()?;
    m.add_class::<PyToyLm>()?;
    m.add_class::<PyBm25Index>()?;
    m.add_function(wrap_pyfunction!(linear_merge, m)?)?;
    m.add_function(wrap_pyfunction!(slerp_merge, m)?)?;
    m.add_function(wrap_pyfunction!(slerp_vector, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(dlt_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(rrf_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(expand_query, m)?)?;
    m.add_function(wrap_pyfunction!(ir_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_patients, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    Ok(())
}
