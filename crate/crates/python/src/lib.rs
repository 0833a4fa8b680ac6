//! Python bindings for the scoring, parsing, taxonomy, selection, and
//! report primitives. Exact scores cross the boundary as fraction strings
//! ("23/10"), which `fractions.Fraction` parses directly.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::collections::BTreeMap;

use mmcurate::rating::{
    parse_scores as parse_scores_impl, render_scores as render_scores_impl, ImageScores,
    MultimodalScores, TextScores,
};
use mmcurate::report;
use mmcurate::scoring::{self, Rational, Weights};
use mmcurate::selection::{self, Ranking, Strategy};
use mmcurate::taxonomy::{self, TaskLabel};

fn value_error(message: impl ToString) -> PyErr {
    PyValueError::new_err(message.to_string())
}

fn rational(text: &str) -> PyResult<Rational> {
    text.parse::<Rational>().map_err(value_error)
}

fn weights_from(weights: Option<(String, String, String)>) -> PyResult<Weights> {
    match weights {
        None => Ok(Weights::default()),
        Some((w_i, w_t, w_mm)) => {
            Weights::new(rational(&w_i)?, rational(&w_t)?, rational(&w_mm)?).map_err(value_error)
        }
    }
}

/// The 15 (category, sub_task) pairs of the fixed taxonomy.
#[pyfunction]
fn task_taxonomy() -> Vec<(String, String)> {
    taxonomy::ALL_SUB_TASKS
        .iter()
        .map(|sub| {
            (
                taxonomy::parent_category(*sub).name().to_string(),
                sub.name().to_string(),
            )
        })
        .collect()
}

/// Parent category of a sub-task, by canonical name.
#[pyfunction]
fn parent_category(sub_task: &str) -> PyResult<String> {
    let sub = taxonomy::sub_task_by_name(sub_task)
        .ok_or_else(|| value_error(format!("unknown sub-task {sub_task:?}")))?;
    Ok(taxonomy::parent_category(sub).name().to_string())
}

/// Extracts (category, sub_task, category_corrected) from judge output.
#[pyfunction]
fn parse_task_response(text: &str) -> PyResult<(String, String, bool)> {
    let parsed = taxonomy::parse_task_response(text).map_err(value_error)?;
    Ok((
        parsed.label.category.name().to_string(),
        parsed.label.sub_task.name().to_string(),
        parsed.category_corrected,
    ))
}

/// Extracts `KEY: <int>` metric values (all in 0..=5) for the given keys.
#[pyfunction]
fn parse_scores(text: &str, keys: Vec<String>) -> PyResult<BTreeMap<String, u8>> {
    let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    parse_scores_impl(text, &refs).map_err(value_error)
}

/// Canonical rendering of metric pairs, the inverse of `parse_scores`.
#[pyfunction]
fn render_scores(pairs: Vec<(String, u8)>) -> String {
    let refs: Vec<(&str, u8)> = pairs.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    render_scores_impl(&refs)
}

/// Exact arithmetic mean of sub-scores, as a fraction string.
#[pyfunction]
fn aggregate_modality(sub_scores: Vec<u8>) -> PyResult<String> {
    scoring::aggregate_modality(&sub_scores)
        .map(|r| r.to_string())
        .map_err(value_error)
}

/// Weighted composite of three modality scores (fraction strings in, exact
/// fraction string out). Weights default to (1/5, 1/5, 3/5).
#[pyfunction]
#[pyo3(signature = (s_i, s_t, s_mm, weights=None))]
fn compose(
    s_i: &str,
    s_t: &str,
    s_mm: &str,
    weights: Option<(String, String, String)>,
) -> PyResult<String> {
    let weights = weights_from(weights)?;
    scoring::compose(rational(s_i)?, rational(s_t)?, rational(s_mm)?, &weights)
        .map(|r| r.to_string())
        .map_err(value_error)
}

/// Builds a full scorecard from the eight sub-metrics and returns it as a
/// JSON string with exact fraction-string scores.
#[pyfunction]
#[pyo3(signature = (entry_id, text, image, mm, sub_task, weights=None))]
fn scorecard_json(
    entry_id: &str,
    text: (u8, u8, u8),
    image: (u8, u8),
    mm: (u8, u8, u8),
    sub_task: &str,
    weights: Option<(String, String, String)>,
) -> PyResult<String> {
    let sub = taxonomy::sub_task_by_name(sub_task)
        .ok_or_else(|| value_error(format!("unknown sub-task {sub_task:?}")))?;
    let card = scoring::build_scorecard(
        entry_id,
        Some(TextScores { info: text.0, cpxt: text.1, cplt: text.2 }),
        Some(ImageScores { blur: image.0, noise: image.1 }),
        Some(MultimodalScores { clr: mm.0, rel: mm.1, tr: mm.2 }),
        Some(TaskLabel::from_sub_task(sub)),
        weights_from(weights)?,
        Default::default(),
    )
    .map_err(value_error)?;
    serde_json::to_string(&card).map_err(value_error)
}

fn parse_fraction_percentile(p: &str) -> PyResult<Rational> {
    let p = rational(p)?;
    if p <= Rational::zero() || p > Rational::one() {
        return Err(value_error(format!("fraction must lie in (0, 1], got {p}")));
    }
    Ok(p)
}

/// Ranks (id, score) pairs descending with ascending-id tie-break and keeps
/// the top fraction. Scores are exact fraction strings.
#[pyfunction]
fn select_top(pairs: Vec<(String, String)>, p: &str) -> PyResult<Vec<String>> {
    let p = parse_fraction_percentile(p)?;
    let mut keyed = Vec::with_capacity(pairs.len());
    for (id, score) in pairs {
        keyed.push((id, rational(&score)?));
    }
    keyed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let ties = keyed.windows(2).filter(|w| w[0].1 == w[1].1).count() as u64;
    let ranking = Ranking { ordered: keyed, tie_break_events: ties };
    let result = selection::select_top(&ranking, p, Strategy::Scale).map_err(value_error)?;
    Ok(result.selected_ids)
}

/// Seed-deterministic uniform sample without replacement of ceil(p*N) ids.
#[pyfunction]
fn select_random(ids: Vec<String>, p: &str, seed: u64) -> PyResult<Vec<String>> {
    let p = parse_fraction_percentile(p)?;
    selection::select_random(&ids, p, seed)
        .map(|r| r.selected_ids)
        .map_err(value_error)
}

/// Cosine similarity between two equal-dimension nonzero vectors.
#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    selection::cosine_similarity(&u, &v).map_err(value_error)
}

/// Bins composite scores (fraction strings) by round-half-up into 0..=5.
/// Returns (bins, total, unaccounted).
#[pyfunction]
#[pyo3(signature = (composites, declared_pool=None))]
fn score_histogram(
    composites: Vec<String>,
    declared_pool: Option<u64>,
) -> PyResult<(BTreeMap<u8, u64>, u64, Option<u64>)> {
    let mut values = Vec::with_capacity(composites.len());
    for composite in &composites {
        values.push(rational(composite)?);
    }
    let histogram = report::histogram_of_composites(values, declared_pool);
    let unaccounted = histogram.unaccounted();
    Ok((histogram.bins, histogram.total, unaccounted))
}

/// Per-sub-task accuracy of predictions against truth labels, both given as
/// {id: sub_task_name}. Returns rows of (sub_task, correct, total, acc_pct),
/// with an Overall row appended.
#[pyfunction]
fn task_accuracy(
    predicted: BTreeMap<String, String>,
    truth: BTreeMap<String, String>,
) -> PyResult<Vec<(String, u64, u64, String)>> {
    let to_labels = |map: BTreeMap<String, String>| -> PyResult<BTreeMap<String, TaskLabel>> {
        map.into_iter()
            .map(|(id, name)| {
                taxonomy::sub_task_by_name(&name)
                    .map(|sub| (id, TaskLabel::from_sub_task(sub)))
                    .ok_or_else(|| value_error(format!("unknown sub-task {name:?}")))
            })
            .collect()
    };
    let table = report::task_accuracy(&to_labels(predicted)?, &to_labels(truth)?);
    let mut rows: Vec<(String, u64, u64, String)> = table
        .rows
        .into_iter()
        .map(|r| (r.sub_task, r.correct, r.total, r.acc_pct))
        .collect();
    rows.push((
        table.overall.sub_task,
        table.overall.correct,
        table.overall.total,
        table.overall.acc_pct,
    ));
    Ok(rows)
}

#[pymodule]
fn mmcurate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(task_taxonomy, m)?)?;
    m.add_function(wrap_pyfunction!(parent_category, m)?)?;
    m.add_function(wrap_pyfunction!(parse_task_response, m)?)?;
    m.add_function(wrap_pyfunction!(parse_scores, m)?)?;
    m.add_function(wrap_pyfunction!(render_scores, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_modality, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(scorecard_json, m)?)?;
    m.add_function(wrap_pyfunction!(select_top, m)?)?;
    m.add_function(wrap_pyfunction!(select_random, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(score_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(task_accuracy, m)?)?;
    Ok(())
}
