//! Python bindings: DSL parsing, validation, arithmetic, the chain metric,
//! multi-turn conversion, corpus statistics and the memory attention.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use comforge::attn::{self, Matrix, TurnKV};
use comforge::dataset::{self, CoMSample, PromptConfig};
use comforge::dsl;
use comforge::exec;
use comforge::metric::{self, MetricConfig, Smoothing};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value as J;
    match v {
        J::Null => Ok(py.None().into_bound(py)),
        J::Bool(b) => b.into_bound_py_any(py),
        J::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_bound_py_any(py),
            (None, Some(f)) => f.into_bound_py_any(py),
            _ => Err(value_error("unrepresentable number")),
        },
        J::String(s) => s.into_bound_py_any(py),
        J::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        J::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value as J;
    if obj.is_none() {
        return Ok(J::Null);
    }
    if let Ok(b) = obj.cast::<pyo3::types::PyBool>() {
        return Ok(J::Bool(b.is_true()));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(J::from(i));
    }
    if let Ok(f) = obj.extract::<f64>() {
        return Ok(J::from(f));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(J::String(s));
    }
    if let Ok(d) = obj.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, v) in d.iter() {
            map.insert(k.extract::<String>()?, from_py(&v)?);
        }
        return Ok(J::Object(map));
    }
    if let Ok(items) = obj.try_iter() {
        return items.map(|i| from_py(&i?)).collect::<PyResult<Vec<_>>>().map(J::Array);
    }
    Err(value_error(format!("cannot convert {} to JSON", obj.get_type().name()?)))
}

fn to_py_serde<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(value_error)?)
}

fn from_py_serde<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_value(from_py(obj)?).map_err(value_error)
}

fn parse_smoothing(s: &str) -> PyResult<Smoothing> {
    match s {
        "off" => Ok(Smoothing::Off),
        "add-one" | "add_one" => Ok(Smoothing::AddOne),
        other => Err(value_error(format!("unknown smoothing {other:?}"))),
    }
}

/// One parsed reasoning step.
#[pyclass(name = "Step", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyStep(dsl::Step);

#[pymethods]
impl PyStep {
    #[getter]
    fn raw_text(&self) -> &str {
        self.0.raw_text()
    }

    /// Calls as dicts with name, args, result_var, bound and span.
    #[getter]
    fn calls<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.0
            .calls()
            .iter()
            .zip(self.0.spans())
            .map(|(c, span)| {
                let d = PyDict::new(py);
                d.set_item("name", c.name.as_str())?;
                d.set_item("args", c.args.iter().map(|a| a.as_str()).collect::<Vec<_>>())?;
                d.set_item("result_var", &c.result_var)?;
                d.set_item("bound", c.bound.as_ref().map(|v| v.to_string()))?;
                d.set_item("span", (span.start, span.end))?;
                Ok(d.into_any())
            })
            .collect()
    }

    fn render(&self) -> String {
        dsl::render_step(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("Step({:?})", self.0.raw_text())
    }
}

#[pyclass(name = "Chain", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyChain(dsl::Chain);

#[pymethods]
impl PyChain {
    #[getter]
    fn steps(&self) -> Vec<PyStep> {
        self.0.steps.iter().cloned().map(PyStep).collect()
    }

    #[getter]
    fn final_answer(&self) -> Option<String> {
        self.0.final_answer.clone()
    }

    fn paragraph(&self) -> String {
        self.0.paragraph()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    /// Violations as readable strings; empty when the chain is valid.
    fn validate(&self) -> Vec<String> {
        dsl::validate_chain(&self.0).iter().map(|v| format!("{v:?}")).collect()
    }

    /// `(kind, surface)` pairs in chain order.
    fn keypoints(&self) -> Vec<(String, String)> {
        metric::extract_keypoints(&self.0)
            .into_iter()
            .map(|k| (format!("{:?}", k.kind), k.surface))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.0.steps.len()
    }

    fn __repr__(&self) -> String {
        format!("Chain({} steps)", self.0.steps.len())
    }
}

#[pyfunction]
fn parse_step(text: &str) -> PyResult<PyStep> {
    dsl::parse_step(text).map(PyStep).map_err(value_error)
}

#[pyfunction]
fn parse_chain(text: &str) -> PyResult<PyChain> {
    dsl::parse_chain(text).map(PyChain).map_err(value_error)
}

/// Exact rational result, printed as an integer or `a/b`.
#[pyfunction]
fn calculate(expr: &str) -> PyResult<String> {
    exec::exec_calculate(expr).map(|n| n.to_string()).map_err(value_error)
}

#[pyfunction]
#[pyo3(signature = (a, b))]
fn levenshtein(a: Vec<i64>, b: Vec<i64>) -> usize {
    metric::levenshtein(&a, &b)
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, smoothing = "off"))]
fn bleu(candidate: &str, reference: &str, smoothing: &str) -> PyResult<f64> {
    Ok(metric::bleu(candidate, reference, parse_smoothing(smoothing)?))
}

/// Scores a predicted chain and answer against the gold pair.
#[pyfunction]
#[pyo3(signature = (pred, pred_answer, gold, gold_answer, divisor = 2, smoothing = "off"))]
fn com_score<'py>(
    py: Python<'py>,
    pred: &PyChain,
    pred_answer: &str,
    gold: &PyChain,
    gold_answer: &str,
    divisor: u8,
    smoothing: &str,
) -> PyResult<Bound<'py, PyAny>> {
    if divisor != 1 && divisor != 2 {
        return Err(value_error("divisor must be 1 or 2"));
    }
    let config = MetricConfig { divisor, smoothing: parse_smoothing(smoothing)? };
    let report = metric::com_score((&pred.0, pred_answer), (&gold.0, gold_answer), &config);
    to_py_serde(py, &report)
}

/// Converts CoM sample dicts into multi-turn sample dicts.
#[pyfunction]
#[pyo3(signature = (samples, seed, launch_probability = 0.5))]
fn convert<'py>(
    py: Python<'py>,
    samples: &Bound<'py, PyAny>,
    seed: u64,
    launch_probability: f64,
) -> PyResult<Bound<'py, PyAny>> {
    if !(0.0..=1.0).contains(&launch_probability) {
        return Err(value_error("launch_probability must be within [0, 1]"));
    }
    let samples: Vec<CoMSample> = from_py_serde(samples)?;
    let config = PromptConfig { launch_probability, ..PromptConfig::default() };
    let out: Vec<_> = samples.iter().map(|s| dataset::convert_to_multiturn(s, &config, seed)).collect();
    to_py_serde(py, &out)
}

#[pyfunction]
fn stats<'py>(py: Python<'py>, samples: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let samples: Vec<CoMSample> = from_py_serde(samples)?;
    to_py_serde(py, &dataset::compute_stats(&samples))
}

type Rows = Vec<Vec<f64>>;

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows).map_err(value_error)
}

/// Key/value memory truncated to its most recent `max_len` rows.
#[pyclass(name = "MemoryState", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMemoryState(attn::MemoryState);

#[pymethods]
impl PyMemoryState {
    #[new]
    fn new(max_len: usize, head_dim: usize) -> PyResult<Self> {
        if max_len == 0 || head_dim == 0 {
            return Err(value_error("max_len and head_dim must be positive"));
        }
        Ok(Self(attn::MemoryState::new(max_len, head_dim)))
    }

    /// Returns a new state; this one is unchanged.
    #[pyo3(signature = (keys, values, turn_index = 0))]
    fn append_turn(&self, keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>, turn_index: usize) -> PyResult<Self> {
        let d = self.0.head_dim();
        let turn = TurnKV::new(matrix(keys, d)?, matrix(values, d)?, turn_index).map_err(value_error)?;
        self.0.append_turn(&turn).map(Self).map_err(value_error)
    }

    /// `(output, weights)` as lists of rows.
    fn attend(&self, query: Rows) -> PyResult<(Rows, Rows)> {
        let q = matrix(query, self.0.head_dim())?;
        let out = attn::attend(&q, &self.0).map_err(value_error)?;
        Ok((out.output.to_rows(), out.weights.to_rows()))
    }

    #[getter]
    fn keys(&self) -> Vec<Vec<f64>> {
        self.0.keys().to_rows()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.0.values().to_rows()
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.0.max_len()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pymodule]
fn comforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStep>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PyMemoryState>()?;
    m.add_function(wrap_pyfunction!(parse_step, m)?)?;
    m.add_function(wrap_pyfunction!(parse_chain, m)?)?;
    m.add_function(wrap_pyfunction!(calculate, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(com_score, m)?)?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(stats, m)?)?;
    Ok(())
}
