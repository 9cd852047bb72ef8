//! Python bindings: text metrics, the rubric, the synthetic task generator
//! and preference expansion from ranking files.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use rlhaif_core::eval::{self, RougeVariant, RubricWeights, SkillAnnotation};
use rlhaif_core::prefs::{build_preferences, select_rankings, CandidateSet, Ranking};
use rlhaif_core::{jsonl, taskgen, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// JSON value as plain Python objects.
fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
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
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn rows<'py, T: serde::Serialize>(py: Python<'py>, items: &[T]) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty(py);
    for item in items {
        let v = serde_json::to_value(item).map_err(|e| PyValueError::new_err(e.to_string()))?;
        list.append(to_py(py, &v)?)?;
    }
    Ok(list)
}

pub fn rouge_variant(name: &str) -> Option<RougeVariant> {
    match name {
        "1" => Some(RougeVariant::One),
        "2" => Some(RougeVariant::Two),
        "L" => Some(RougeVariant::L),
        "Lsum" => Some(RougeVariant::Lsum),
        _ => None,
    }
}

/// Cumulative BLEU-n in [0, 100].
#[pyfunction]
#[pyo3(signature = (candidate, reference, n = 4))]
fn bleu(candidate: &str, reference: &str, n: usize) -> PyResult<f64> {
    if !(1..=4).contains(&n) {
        return Err(PyValueError::new_err(format!("BLEU order must be 1..=4, got {n}")));
    }
    Ok(eval::bleu_n(candidate, reference, n))
}

/// ROUGE F1 in [0, 100]; variant is "1", "2", "L" or "Lsum".
#[pyfunction]
#[pyo3(signature = (candidate, reference, variant = "L"))]
fn rouge(candidate: &str, reference: &str, variant: &str) -> PyResult<f64> {
    let v = rouge_variant(variant).ok_or_else(|| PyValueError::new_err(format!("unknown ROUGE variant {variant:?}")))?;
    Ok(eval::rouge(candidate, reference, v))
}

#[pyfunction]
fn meteor(candidate: &str, reference: &str) -> f64 {
    eval::meteor(candidate, reference)
}

#[pyfunction]
#[pyo3(signature = (ca = 0.0, pd = 0.0, ac_form = 0.0, ac_arith = 0.0, lr = 0.0, cu = 0.0, ed = 0.0))]
#[allow(clippy::too_many_arguments)]
fn reasoning_score(ca: f64, pd: f64, ac_form: f64, ac_arith: f64, lr: f64, cu: f64, ed: f64) -> PyResult<f64> {
    let a = SkillAnnotation { ca, pd, ac_formulation: ac_form, ac_arithmetic: ac_arith, lr, cu, ed, annotator: String::new() };
    eval::reasoning_score(&a, &RubricWeights::default()).map_err(py_err)
}

/// `3 * n_base * 5` items as dicts, a pure function of the arguments.
#[pyfunction]
fn generate_dataset(py: Python<'_>, n_base: usize, seed: u64) -> PyResult<Bound<'_, PyList>> {
    let items = taskgen::generate_dataset(n_base, seed).map_err(py_err)?;
    rows(py, &items)
}

/// Preference pairs from candidates.jsonl and rankings.jsonl, choosing one
/// ranking per question the same way the pipeline does.
#[pyfunction]
fn preference_pairs<'py>(py: Python<'py>, candidates: &str, rankings: &str) -> PyResult<Bound<'py, PyList>> {
    let sets: Vec<CandidateSet> = jsonl::read(Path::new(candidates)).map_err(py_err)?;
    let ranked: Vec<Ranking> = jsonl::read(Path::new(rankings)).map_err(py_err)?;
    let pairs = build_preferences(&sets, &select_rankings(&ranked)).map_err(py_err)?;
    rows(py, &pairs)
}

#[pymodule]
fn rlhaif(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(reasoning_score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(preference_pairs, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_names() {
        assert_eq!(rouge_variant("Lsum"), Some(RougeVariant::Lsum));
        assert_eq!(rouge_variant("l"), None);
    }
}
