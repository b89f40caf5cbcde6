//! Python bindings. Structured results cross the boundary as plain dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};
use serde::Serialize;

use faithprobe::detectors::{detect, DetectorRuleSet};
use faithprobe::domain::{Condition, Experiment, Label, McqItem};
use faithprobe::ingest::load_runs;
use faithprobe::metrics::{by_model, exp1_metrics, exp2_metrics, exp3_metrics, MetricsConfig};
use faithprobe::modelio::parse::{parse_brief, parse_cot, BriefSchema};
use faithprobe::modelio::{synthetic_respond, SyntheticModelConfig};
use faithprobe::probe::ablation::{ablate_question, build_baseline_prompt, validate_steps};
use faithprobe::probe::{build_hint_prompt, DEFAULT_HINT_TEMPLATE};
use faithprobe::stats;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts any serializable value through `json.loads`.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_condition(key: &str) -> PyResult<Condition> {
    if let Some(step) = key.strip_prefix("exp1_ablated:") {
        let step_index = step.parse().map_err(err)?;
        return Ok(Condition::Exp1Ablated { step_index });
    }
    Ok(match key {
        "exp1_baseline" => Condition::Exp1Baseline,
        "exp2_unbiased" => Condition::Exp2Unbiased,
        "exp2_bias_to_gold" => Condition::Exp2BiasToGold,
        "exp2_bias_to_wrong" => Condition::Exp2BiasToWrong,
        "exp3_unbiased" => Condition::Exp3Unbiased,
        "exp3_hint_to_gold" => Condition::Exp3HintToGold,
        "exp3_hint_to_wrong" => Condition::Exp3HintToWrong,
        "exp4_freeform" => Condition::Exp4Freeform,
        other => return Err(PyValueError::new_err(format!("unknown condition {other:?}"))),
    })
}

fn parse_label(s: &str) -> PyResult<Label> {
    s.parse::<Label>().map_err(err)
}

/// A multiple-choice item.
#[pyclass(name = "Item", frozen)]
struct PyItem {
    inner: McqItem,
}

#[pymethods]
impl PyItem {
    #[new]
    fn new(id: String, question: &str, options: BTreeMap<String, String>, answer: &str) -> PyResult<Self> {
        let mut opts = BTreeMap::new();
        for (k, v) in options {
            opts.insert(parse_label(&k)?, v);
        }
        let inner = McqItem::new(id, question, opts, parse_label(answer)?).map_err(err)?;
        Ok(PyItem { inner })
    }

    /// Parses one dataset line.
    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        Ok(PyItem {
            inner: serde_json::from_str(line).map_err(err)?,
        })
    }

    #[getter]
    fn id(&self) -> &str {
        self.inner.id()
    }

    #[getter]
    fn question(&self) -> &str {
        self.inner.question_text()
    }

    #[getter]
    fn gold(&self) -> String {
        self.inner.gold_label().to_string()
    }

    #[getter]
    fn options(&self) -> BTreeMap<String, String> {
        self.inner
            .options()
            .iter()
            .map(|(l, t)| (l.to_string(), t.clone()))
            .collect()
    }

    /// `(system, user)` prompt for the ablation baseline.
    fn baseline_prompt(&self) -> (String, String) {
        build_baseline_prompt(&self.inner)
    }

    /// Question text with bytes `start..end` redacted.
    fn ablate(&self, start: usize, end: usize) -> PyResult<String> {
        ablate_question(&self.inner, start, end).map_err(err)
    }

    /// `(user_prompt, hinted_label)` for a hint condition.
    #[pyo3(signature = (condition, seed, template = None))]
    fn hint_prompt(&self, condition: &str, seed: u64, template: Option<&str>) -> PyResult<(String, Option<String>)> {
        let (user, hint) = build_hint_prompt(
            &self.inner,
            parse_condition(condition)?,
            seed,
            template.unwrap_or(DEFAULT_HINT_TEMPLATE),
        );
        Ok((user, hint.map(|l| l.to_string())))
    }

    /// Parses a reasoning reply and returns the valid-step plan.
    fn ablation_plan(&self, py: Python<'_>, reply: &str) -> PyResult<Py<PyAny>> {
        let pred = parse_cot(reply);
        let plan = validate_steps(&self.inner, &pred).map_err(err)?;
        to_py(py, &plan)
    }

    fn __repr__(&self) -> String {
        format!("Item(id={:?}, gold={})", self.inner.id(), self.inner.gold_label())
    }
}

/// Deterministic simulated model with planted behavior.
#[pyclass(name = "SyntheticModel", frozen)]
struct PySyntheticModel {
    cfg: SyntheticModelConfig,
}

#[pymethods]
impl PySyntheticModel {
    /// Keyword arguments override the default configuration fields.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let text: String = match kwargs {
            Some(k) => py.import("json")?.call_method1("dumps", (k,))?.extract()?,
            None => "{}".into(),
        };
        let cfg: SyntheticModelConfig = serde_json::from_str(&text).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(PySyntheticModel { cfg })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.cfg)
    }

    /// Raw reply text for one query.
    #[pyo3(signature = (item, condition, hinted_label = None))]
    fn respond(&self, item: &PyItem, condition: &str, hinted_label: Option<&str>) -> PyResult<String> {
        let hinted = hinted_label.map(parse_label).transpose()?;
        Ok(synthetic_respond(&self.cfg, &item.inner, parse_condition(condition)?, hinted))
    }
}

/// `(estimate, lo, hi)` Wilson score interval.
#[pyfunction]
#[pyo3(signature = (successes, n, z = stats::Z_95))]
fn wilson_ci(successes: u64, n: u64, z: f64) -> PyResult<(f64, f64, f64)> {
    let ci = stats::wilson_ci(successes, n, z).map_err(err)?;
    Ok((ci.estimate, ci.lo, ci.hi))
}

/// ICC(2,k) for an items x raters matrix; `None` marks a missing rating.
#[pyfunction]
fn icc2k(py: Python<'_>, ratings: Vec<Vec<Option<f64>>>) -> PyResult<Py<PyAny>> {
    to_py(py, &stats::icc2k(&ratings).map_err(err)?)
}

/// `(r, two_sided_p, stars)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, String)> {
    let r = stats::pearson(&x, &y).map_err(err)?;
    Ok((r.r, r.p_two_sided, r.stars))
}

#[pyfunction]
#[pyo3(signature = (values, resamples = 10_000, seed = 20_251_015))]
fn bootstrap_ci(values: Vec<f64>, resamples: usize, seed: u64) -> PyResult<(f64, f64)> {
    stats::bootstrap_ci(&values, resamples, seed).map_err(err)
}

#[pyfunction(name = "parse_cot")]
fn py_parse_cot(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &parse_cot(text))
}

/// `schema` is `"cot"` for `{cot, final_answer}` or `"reasoning"` for
/// `{reasoning, answer}`.
#[pyfunction(name = "parse_brief")]
#[pyo3(signature = (text, schema = "cot"))]
fn py_parse_brief(py: Python<'_>, text: &str, schema: &str) -> PyResult<Py<PyAny>> {
    let schema = match schema {
        "cot" => BriefSchema::CotBrief,
        "reasoning" => BriefSchema::ReasoningAnswer,
        other => return Err(PyValueError::new_err(format!("unknown schema {other:?}"))),
    };
    to_py(py, &parse_brief(text, schema))
}

#[pyfunction]
fn detect_position_ack(text: &str) -> bool {
    detect(&DetectorRuleSet::position_ack(), text).flag
}

#[pyfunction]
fn detect_hint_ack(text: &str) -> bool {
    detect(&DetectorRuleSet::hint_ack(), text).flag
}

/// Content hashes of the shipped detector rule sets.
#[pyfunction]
fn detector_hashes() -> BTreeMap<String, String> {
    [DetectorRuleSet::position_ack(), DetectorRuleSet::hint_ack()]
        .into_iter()
        .map(|r| (r.name().to_string(), r.content_hash().to_string()))
        .collect()
}

/// Metrics per model for one experiment (`"exp1"`, `"exp2"` or `"exp3"`)
/// read from a run store.
#[pyfunction]
#[pyo3(signature = (path, experiment, resamples = 10_000, seed = 20_251_015))]
fn metrics(py: Python<'_>, path: PathBuf, experiment: &str, resamples: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let exp = match experiment {
        "exp1" => Experiment::Exp1,
        "exp2" => Experiment::Exp2,
        "exp3" => Experiment::Exp3,
        other => return Err(PyValueError::new_err(format!("unknown experiment {other:?}"))),
    };
    let loaded = load_runs(&path).map_err(err)?;
    let runs: Vec<_> = loaded.records.into_iter().filter(|r| r.experiment == exp).collect();
    let cfg = MetricsConfig {
        bootstrap_resamples: resamples,
        bootstrap_seed: seed,
    };
    let out = PyDict::new(py);
    for (model, recs) in by_model(&runs) {
        let value = match exp {
            Experiment::Exp1 => to_py(py, &exp1_metrics(&recs, &cfg))?,
            Experiment::Exp2 => to_py(py, &exp2_metrics(&recs, &DetectorRuleSet::position_ack()))?,
            _ => to_py(py, &exp3_metrics(&recs, &DetectorRuleSet::hint_ack()))?,
        };
        out.set_item(model, value)?;
    }
    Ok(out.into_any().unbind())
}

#[pymodule]
fn pyfaithprobe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyItem>()?;
    m.add_class::<PySyntheticModel>()?;
    m.add_function(wrap_pyfunction!(wilson_ci, m)?)?;
    m.add_function(wrap_pyfunction!(icc2k, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(py_parse_cot, m)?)?;
    m.add_function(wrap_pyfunction!(py_parse_brief, m)?)?;
    m.add_function(wrap_pyfunction!(detect_position_ack, m)?)?;
    m.add_function(wrap_pyfunction!(detect_hint_ack, m)?)?;
    m.add_function(wrap_pyfunction!(detector_hashes, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
