//! Report generation: composite-score histogram, per-sub-task prediction
//! accuracy, and per-source selection statistics.
//!
//! Reports are pure views over persisted records; every number here is
//! recomputable from the stored scorecard and selection files alone. Each
//! report renders both as line-delimited JSON and as an aligned text table;
//! the histogram additionally renders as an SVG bar chart.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::Manifest;
use crate::rating::PipeStage;
use crate::scoring::{Rational, ScoreCard};
use crate::selection::SelectionResult;
use crate::taxonomy::{SubTask, TaskLabel, ALL_SUB_TASKS};

/// How fractional composites map onto integer bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    RoundHalfUp,
}

/// Composite-score histogram over integer bins 0..=5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub binning: Binning,
    pub bins: BTreeMap<u8, u64>,
    pub total: u64,
    /// Pool size the caller declared, when known; lets the report surface
    /// entries that never made it to a composite score.
    pub declared_pool: Option<u64>,
}

impl Histogram {
    pub fn unaccounted(&self) -> Option<u64> {
        self.declared_pool.map(|pool| pool.saturating_sub(self.total))
    }
}

/// Bins composite scores by round-half-up to the nearest integer.
pub fn score_histogram(cards: &[ScoreCard], declared_pool: Option<u64>) -> Histogram {
    histogram_of_composites(cards.iter().map(|c| c.composite), declared_pool)
}

/// Same binning over bare composite values; used when cards are streamed.
pub fn histogram_of_composites(
    composites: impl IntoIterator<Item = Rational>,
    declared_pool: Option<u64>,
) -> Histogram {
    let mut bins: BTreeMap<u8, u64> = (0..=5u8).map(|b| (b, 0)).collect();
    let mut total = 0u64;
    for composite in composites {
        let bin = composite.round_half_up().clamp(0, 5) as u8;
        *bins.get_mut(&bin).unwrap() += 1;
        total += 1;
    }
    Histogram { binning: Binning::RoundHalfUp, bins, total, declared_pool }
}

/// Renders the histogram as an aligned text table, high bins first.
pub fn render_histogram_text(histogram: &Histogram) -> String {
    let mut out = String::new();
    writeln!(out, "composite score distribution (binning: round_half_up)").unwrap();
    writeln!(out, "{:>5}  {:>12}", "bin", "count").unwrap();
    for bin in (0..=5u8).rev() {
        writeln!(out, "{:>5}  {:>12}", bin, histogram.bins[&bin]).unwrap();
    }
    writeln!(out, "{:>5}  {:>12}", "total", histogram.total).unwrap();
    if let Some(pool) = histogram.declared_pool {
        writeln!(out, "declared pool: {pool}").unwrap();
        writeln!(out, "unaccounted entries: {}", histogram.unaccounted().unwrap()).unwrap();
    }
    out
}

/// Renders the histogram as one JSON line per bin plus a summary line.
pub fn render_histogram_jsonl(histogram: &Histogram) -> String {
    let mut out = String::new();
    for bin in (0..=5u8).rev() {
        let line = serde_json::json!({ "bin": bin, "count": histogram.bins[&bin] });
        writeln!(out, "{line}").unwrap();
    }
    let summary = serde_json::json!({
        "total": histogram.total,
        "binning": "round_half_up",
        "declared_pool": histogram.declared_pool,
        "unaccounted": histogram.unaccounted(),
    });
    writeln!(out, "{summary}").unwrap();
    out
}

/// Minimal SVG bar chart of the histogram, bins 0..=5 left to right.
pub fn render_histogram_svg(histogram: &Histogram) -> String {
    const WIDTH: u64 = 640;
    const HEIGHT: u64 = 360;
    const MARGIN: u64 = 40;
    let max_count = histogram.bins.values().copied().max().unwrap_or(0).max(1);
    let plot_width = WIDTH - 2 * MARGIN;
    let plot_height = HEIGHT - 2 * MARGIN;
    let bar_slot = plot_width / 6;
    let bar_width = bar_slot * 3 / 4;

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">composite score distribution</text>"#,
        WIDTH / 2
    )
    .unwrap();
    for bin in 0..=5u8 {
        let count = histogram.bins[&bin];
        let bar_height = count * plot_height / max_count;
        let x = MARGIN + bin as u64 * bar_slot + (bar_slot - bar_width) / 2;
        let y = HEIGHT - MARGIN - bar_height;
        writeln!(
            out,
            r##"<rect x="{x}" y="{y}" width="{bar_width}" height="{bar_height}" fill="#4878a8"/>"##
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{bin}</text>"#,
            x + bar_width / 2,
            HEIGHT - MARGIN + 16
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="10">{count}</text>"#,
            x + bar_width / 2,
            y.saturating_sub(4).max(12)
        )
        .unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    out
}

/// One accuracy row: correct / total and the two-decimal percentage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub sub_task: String,
    pub correct: u64,
    pub total: u64,
    pub acc_pct: String,
}

fn accuracy_row(sub_task: &str, correct: u64, total: u64) -> AccuracyRow {
    let pct = if total == 0 {
        Rational::zero()
    } else {
        Rational::new(100 * correct as i64, total as i64)
    };
    AccuracyRow {
        sub_task: sub_task.to_string(),
        correct,
        total,
        acc_pct: pct.to_decimal_2dp(),
    }
}

/// Per-sub-task prediction accuracy against ground-truth labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    pub overall: AccuracyRow,
    /// Truth ids with no prediction at all; counted as incorrect above.
    pub missing_predictions: u64,
}

/// Grades predictions grouped by the truth label's sub-task. Truth ids
/// absent from `predicted` count as incorrect and are reported separately.
pub fn task_accuracy(
    predicted: &BTreeMap<String, TaskLabel>,
    truth: &BTreeMap<String, TaskLabel>,
) -> AccuracyTable {
    let mut per_task: BTreeMap<SubTask, (u64, u64)> = BTreeMap::new();
    let mut missing_predictions = 0u64;
    for (id, truth_label) in truth {
        let slot = per_task.entry(truth_label.sub_task).or_insert((0, 0));
        slot.1 += 1;
        match predicted.get(id) {
            Some(p) if p.sub_task == truth_label.sub_task => slot.0 += 1,
            Some(_) => {}
            None => missing_predictions += 1,
        }
    }

    let rows: Vec<AccuracyRow> = ALL_SUB_TASKS
        .iter()
        .filter_map(|sub| {
            per_task
                .get(sub)
                .map(|&(correct, total)| accuracy_row(sub.name(), correct, total))
        })
        .collect();
    let correct_sum: u64 = rows.iter().map(|r| r.correct).sum();
    let total_sum: u64 = rows.iter().map(|r| r.total).sum();
    AccuracyTable {
        rows,
        overall: accuracy_row("Overall", correct_sum, total_sum),
        missing_predictions,
    }
}

/// Builds the (correct, total) table directly from fixture pairs, in the
/// given order. Used to regenerate published tables from their raw counts.
pub fn accuracy_from_counts(pairs: &[(SubTask, u64, u64)]) -> AccuracyTable {
    let rows: Vec<AccuracyRow> = pairs
        .iter()
        .map(|&(sub, correct, total)| accuracy_row(sub.name(), correct, total))
        .collect();
    let correct_sum: u64 = rows.iter().map(|r| r.correct).sum();
    let total_sum: u64 = rows.iter().map(|r| r.total).sum();
    AccuracyTable {
        rows,
        overall: accuracy_row("Overall", correct_sum, total_sum),
        missing_predictions: 0,
    }
}

pub fn render_accuracy_text(table: &AccuracyTable) -> String {
    let mut out = String::new();
    writeln!(out, "{:<28} {:>8} {:>8} {:>8}", "sub-task", "correct", "total", "acc%").unwrap();
    for row in &table.rows {
        writeln!(
            out,
            "{:<28} {:>8} {:>8} {:>8}",
            row.sub_task, row.correct, row.total, row.acc_pct
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<28} {:>8} {:>8} {:>8}",
        table.overall.sub_task, table.overall.correct, table.overall.total, table.overall.acc_pct
    )
    .unwrap();
    if table.missing_predictions > 0 {
        writeln!(out, "unpredicted truth ids: {}", table.missing_predictions).unwrap();
    }
    out
}

pub fn render_accuracy_jsonl(table: &AccuracyTable) -> String {
    let mut out = String::new();
    for row in &table.rows {
        writeln!(out, "{}", serde_json::to_string(row).unwrap()).unwrap();
    }
    let mut overall = serde_json::to_value(&table.overall).unwrap();
    overall["missing_predictions"] = serde_json::json!(table.missing_predictions);
    writeln!(out, "{overall}").unwrap();
    out
}

/// Per-source selection counts for one selection result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: String,
    pub selected: u64,
    pub source_total: u64,
    pub pct_of_source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub rows: Vec<SourceRow>,
    pub total_selected: u64,
    pub total_entries: u64,
    /// Entries that failed a stage, per stage; excluded from selection.
    pub stage_failures: BTreeMap<PipeStage, u64>,
    /// Candidates dropped from the embedding baseline for lack of vectors.
    pub embedding_exclusions: u64,
}

#[derive(Debug, thiserror::Error)]
#[error("selection refers to unknown entry id {0}")]
pub struct UnknownId(String);

/// Per-source selected counts and fractions, plus failure accounting.
pub fn selection_stats(
    result: &SelectionResult,
    manifest: &Manifest,
    stage_failures: BTreeMap<PipeStage, u64>,
    embedding_exclusions: u64,
) -> Result<SelectionStats, UnknownId> {
    let mut source_of: BTreeMap<&str, &str> = BTreeMap::new();
    for entry in &manifest.entries {
        source_of.insert(&entry.id, &entry.source);
    }
    let mut selected_per_source: BTreeMap<String, u64> = BTreeMap::new();
    for id in &result.selected_ids {
        let source = source_of
            .get(id.as_str())
            .ok_or_else(|| UnknownId(id.clone()))?;
        *selected_per_source.entry(source.to_string()).or_insert(0) += 1;
    }
    let rows: Vec<SourceRow> = manifest
        .source_counts
        .iter()
        .map(|(source, &total)| {
            let selected = selected_per_source.get(source).copied().unwrap_or(0);
            let pct = if total == 0 {
                Rational::zero()
            } else {
                Rational::new(100 * selected as i64, total as i64)
            };
            SourceRow {
                source: source.clone(),
                selected,
                source_total: total as u64,
                pct_of_source: pct.to_decimal_2dp(),
            }
        })
        .collect();
    Ok(SelectionStats {
        total_selected: result.selected_ids.len() as u64,
        total_entries: manifest.len() as u64,
        rows,
        stage_failures,
        embedding_exclusions,
    })
}

pub fn render_selection_stats_text(stats: &SelectionStats) -> String {
    let mut out = String::new();
    writeln!(out, "{:<24} {:>10} {:>12} {:>9}", "source", "selected", "source size", "pct").unwrap();
    for row in &stats.rows {
        writeln!(
            out,
            "{:<24} {:>10} {:>12} {:>9}",
            row.source, row.selected, row.source_total, row.pct_of_source
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<24} {:>10} {:>12}",
        "total", stats.total_selected, stats.total_entries
    )
    .unwrap();
    for (stage, count) in &stats.stage_failures {
        writeln!(out, "stage failures ({stage}): {count}").unwrap();
    }
    if stats.embedding_exclusions > 0 {
        writeln!(out, "embedding exclusions: {}", stats.embedding_exclusions).unwrap();
    }
    out
}

pub fn render_selection_stats_jsonl(stats: &SelectionStats) -> String {
    let mut out = String::new();
    for row in &stats.rows {
        writeln!(out, "{}", serde_json::to_string(row).unwrap()).unwrap();
    }
    let summary = serde_json::json!({
        "total_selected": stats.total_selected,
        "total_entries": stats.total_entries,
        "stage_failures": stats.stage_failures,
        "embedding_exclusions": stats.embedding_exclusions,
    });
    writeln!(out, "{summary}").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DataEntry, Turn, TurnRole};
    use crate::rating::{ImageScores, MultimodalScores, TextScores};
    use crate::scoring::{build_scorecard, ScoreCard, Weights};
    use crate::selection::{select_by_key, RankKey, Strategy};
    use std::collections::BTreeSet;

    fn uniform_card(entry_id: &str, level: u8) -> ScoreCard {
        build_scorecard(
            entry_id,
            Some(TextScores { info: level, cpxt: level, cplt: level }),
            Some(ImageScores { blur: level, noise: level }),
            Some(MultimodalScores { clr: level, rel: level, tr: level }),
            Some(TaskLabel::from_sub_task(SubTask::ImageScene)),
            Weights::default(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    fn mixed_card(entry_id: &str, text: (u8, u8, u8), image: (u8, u8), mm: (u8, u8, u8)) -> ScoreCard {
        build_scorecard(
            entry_id,
            Some(TextScores { info: text.0, cpxt: text.1, cplt: text.2 }),
            Some(ImageScores { blur: image.0, noise: image.1 }),
            Some(MultimodalScores { clr: mm.0, rel: mm.1, tr: mm.2 }),
            Some(TaskLabel::from_sub_task(SubTask::ImageScene)),
            Weights::default(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn histogram_bins_hand_composites() {
        // 2.6 rounds to 3, 2.3 rounds to 2.
        let cards = vec![
            mixed_card("a", (4, 4, 4), (3, 3), (2, 2, 2)),
            mixed_card("b", (4, 3, 5), (1, 2), (2, 2, 2)),
        ];
        assert_eq!(cards[0].composite, Rational::new(13, 5));
        assert_eq!(cards[1].composite, Rational::new(23, 10));
        let histogram = score_histogram(&cards, None);
        assert_eq!(histogram.bins[&3], 1);
        assert_eq!(histogram.bins[&2], 1);
        assert_eq!(histogram.total, 2);
        assert_eq!(histogram.unaccounted(), None);
    }

    #[test]
    fn histogram_single_max_card() {
        let cards = vec![uniform_card("a", 5)];
        let histogram = score_histogram(&cards, None);
        assert_eq!(histogram.bins[&5], 1);
        assert_eq!(histogram.total, 1);
    }

    #[test]
    fn histogram_count_conservation() {
        let cards: Vec<ScoreCard> = (0..100)
            .map(|i| uniform_card(&format!("e{i}"), (i % 6) as u8))
            .collect();
        let histogram = score_histogram(&cards, Some(120));
        let bin_sum: u64 = histogram.bins.values().sum();
        assert_eq!(bin_sum, 100);
        assert_eq!(histogram.unaccounted(), Some(20));
    }

    #[test]
    fn accuracy_hand_rows() {
        let row = accuracy_row("Image Style", 547, 552);
        assert_eq!(row.acc_pct, "99.09");
        let row = accuracy_row("Image Scene", 842, 920);
        assert_eq!(row.acc_pct, "91.52");
        let row = accuracy_row("x", 0, 10);
        assert_eq!(row.acc_pct, "0.00");
    }

    #[test]
    fn task_accuracy_groups_by_truth_label() {
        let mut truth = BTreeMap::new();
        let mut predicted = BTreeMap::new();
        for i in 0..10 {
            truth.insert(format!("s{i}"), TaskLabel::from_sub_task(SubTask::ImageStyle));
            // 8 of 10 right, 1 wrong, 1 unpredicted.
            if i < 8 {
                predicted.insert(format!("s{i}"), TaskLabel::from_sub_task(SubTask::ImageStyle));
            } else if i == 8 {
                predicted.insert(format!("s{i}"), TaskLabel::from_sub_task(SubTask::Ocr));
            }
        }
        truth.insert("o1".to_string(), TaskLabel::from_sub_task(SubTask::Ocr));
        predicted.insert("o1".to_string(), TaskLabel::from_sub_task(SubTask::Ocr));

        let table = task_accuracy(&predicted, &truth);
        assert_eq!(table.rows.len(), 2);
        let style = &table.rows[0];
        assert_eq!(style.sub_task, "Image Style");
        assert_eq!((style.correct, style.total), (8, 10));
        assert_eq!(style.acc_pct, "80.00");
        let ocr = &table.rows[1];
        assert_eq!((ocr.correct, ocr.total), (1, 1));
        assert_eq!(table.overall.total, 11);
        assert_eq!(table.missing_predictions, 1);
        let grand: u64 = table.rows.iter().map(|r| r.total).sum();
        assert_eq!(grand, truth.len() as u64);
    }

    #[test]
    fn selection_stats_counts_by_source() {
        let entries: Vec<DataEntry> = (0..100)
            .map(|i| DataEntry {
                id: format!("e{i:03}"),
                image_ref: "x.png".into(),
                conversation: vec![
                    Turn { role: TurnRole::User, content: "q".into() },
                    Turn { role: TurnRole::Assistant, content: "a".into() },
                ],
                source: if i < 60 { "alpha".into() } else { "beta".into() },
                answer_format: None,
            })
            .collect();
        let manifest = Manifest::from_entries(entries.clone());
        // Give alpha entries strictly higher scores so they dominate selection.
        let cards: Vec<ScoreCard> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| uniform_card(&e.id, if i < 60 { 5 } else { 1 }))
            .collect();
        let result =
            select_by_key(&cards, RankKey::Composite, Rational::new(1, 10), Strategy::Scale)
                .unwrap();
        let stats = selection_stats(&result, &manifest, BTreeMap::new(), 0).unwrap();
        assert_eq!(stats.total_selected, 10);
        // Brute-force recount oracle.
        let alpha_selected = result
            .selected_ids
            .iter()
            .filter(|id| {
                entries.iter().find(|e| &e.id == *id).unwrap().source == "alpha"
            })
            .count() as u64;
        let alpha_row = stats.rows.iter().find(|r| r.source == "alpha").unwrap();
        assert_eq!(alpha_row.selected, alpha_selected);
        assert_eq!(alpha_row.selected, 10);
        assert_eq!(alpha_row.source_total, 60);
        let beta_row = stats.rows.iter().find(|r| r.source == "beta").unwrap();
        assert_eq!(beta_row.selected, 0);
    }

    #[test]
    fn selection_stats_rejects_unknown_ids() {
        let manifest = Manifest::from_entries(vec![]);
        let result = crate::selection::SelectionResult {
            strategy: Strategy::Scale,
            params: BTreeMap::new(),
            selected_ids: vec!["ghost".into()],
            cutoff_score: None,
            tie_break_events: 0,
        };
        assert!(selection_stats(&result, &manifest, BTreeMap::new(), 0).is_err());
    }

    #[test]
    fn single_source_full_selection_percentages() {
        let entries: Vec<DataEntry> = (0..100)
            .map(|i| DataEntry {
                id: format!("e{i:03}"),
                image_ref: "x.png".into(),
                conversation: vec![
                    Turn { role: TurnRole::User, content: "q".into() },
                    Turn { role: TurnRole::Assistant, content: "a".into() },
                ],
                source: "only".into(),
                answer_format: None,
            })
            .collect();
        let manifest = Manifest::from_entries(entries.clone());
        let cards: Vec<ScoreCard> = entries.iter().map(|e| uniform_card(&e.id, 4)).collect();
        let result =
            select_by_key(&cards, RankKey::Composite, Rational::new(1, 10), Strategy::Scale)
                .unwrap();
        let stats = selection_stats(&result, &manifest, BTreeMap::new(), 0).unwrap();
        assert_eq!(stats.rows.len(), 1);
        assert_eq!(stats.rows[0].selected, 10);
        assert_eq!(stats.rows[0].pct_of_source, "10.00");
    }

    #[test]
    fn renders_do_not_panic_and_contain_headlines() {
        let cards = vec![uniform_card("a", 4), uniform_card("b", 2)];
        let histogram = score_histogram(&cards, Some(5));
        let text = render_histogram_text(&histogram);
        assert!(text.contains("round_half_up"));
        assert!(text.contains("unaccounted entries: 3"));
        let jsonl = render_histogram_jsonl(&histogram);
        assert_eq!(jsonl.lines().count(), 7);
        let svg = render_histogram_svg(&histogram);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("</svg>"));
    }
}
