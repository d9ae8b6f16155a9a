//! Metrics plumbing: category grouping, deltas against the majority-vote
//! baseline, bootstrap confidence intervals, and CSV/JSON/SVG emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerLabel, MMLU_PRO_CATEGORIES};
use crate::rerank::CandidatePool;
use crate::seeding::{derive_rng, hash_str};

const MATH_ADJACENT: [&str; 4] = ["Chemistry", "Computer Science", "Engineering", "Physics"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("no metrics rows to report")]
    EmptyRows,
    #[error("bootstrap needs a non-empty sample and at least one resample")]
    EmptySample,
    #[error("invalid metrics row: {0}")]
    InvalidRow(String),
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
}

/// Category grouping: Math itself, the four Math-adjacent domains, and
/// everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CategoryGroup {
    Math,
    MathAdjacent,
    NonMathAdjacent,
}

impl fmt::Display for CategoryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CategoryGroup::Math => "Math",
            CategoryGroup::MathAdjacent => "Math-adjacent",
            CategoryGroup::NonMathAdjacent => "Non-Math-adjacent",
        })
    }
}

/// Maps a category name onto its group; total over [`MMLU_PRO_CATEGORIES`].
pub fn group_category(category: &str) -> Result<CategoryGroup, ReportError> {
    if !MMLU_PRO_CATEGORIES.contains(&category) {
        return Err(ReportError::UnknownCategory(category.to_owned()));
    }
    if category == "Math" {
        Ok(CategoryGroup::Math)
    } else if MATH_ADJACENT.contains(&category) {
        Ok(CategoryGroup::MathAdjacent)
    } else {
        Ok(CategoryGroup::NonMathAdjacent)
    }
}

/// Absolute difference of a method's accuracy against the MV baseline, in
/// whatever scale the inputs share.
pub fn delta_vs_mv(method_acc: f64, mv_acc: f64) -> f64 {
    method_acc - mv_acc
}

/// Fraction of candidates whose final answer matches the truth.
pub fn pass_at_1(pool: &CandidatePool, truth: AnswerLabel) -> Result<f64, ReportError> {
    let items = pool.items();
    if items.is_empty() {
        return Err(ReportError::EmptyPool);
    }
    let correct = items
        .iter()
        .filter(|(cot, _)| cot.final_answer() == Some(truth))
        .count();
    Ok(correct as f64 / items.len() as f64)
}

/// Seeded percentile bootstrap of the mean: resamples `values` with
/// replacement, takes the 2.5th and 97.5th percentiles of the resampled
/// means, and widens the interval if needed so it brackets the point
/// estimate.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), ReportError> {
    if values.is_empty() || resamples == 0 {
        return Err(ReportError::EmptySample);
    }
    let mut rng = derive_rng(seed, &[hash_str("bootstrap")]);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let sum: f64 = (0..values.len())
            .map(|_| values[rng.random_range(0..values.len())])
            .sum();
        means.push(sum / values.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let rank = |q: f64| ((resamples - 1) as f64 * q).round() as usize;
    let point = values.iter().sum::<f64>() / values.len() as f64;
    let lo = means[rank(0.025)].min(point);
    let hi = means[rank(0.975)].max(point);
    Ok((lo, hi))
}

/// One reporting row: accuracy of (selector, agg) at budget `n` on one
/// category, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    category: String,
    selector: String,
    agg: String,
    n: usize,
    accuracy: f64,
    delta_vs_mv: f64,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

impl MetricsRow {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        category: impl Into<String>,
        selector: impl Into<String>,
        agg: impl Into<String>,
        n: usize,
        accuracy: f64,
        delta_vs_mv: f64,
        ci: Option<(f64, f64)>,
    ) -> Result<Self, ReportError> {
        if let Some((lo, hi)) = ci {
            if !(lo <= accuracy && accuracy <= hi) {
                return Err(ReportError::InvalidRow(format!(
                    "interval [{lo}, {hi}] does not bracket accuracy {accuracy}"
                )));
            }
        }
        Ok(MetricsRow {
            category: category.into(),
            selector: selector.into(),
            agg: agg.into(),
            n,
            accuracy,
            delta_vs_mv,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn selector(&self) -> &str {
        &self.selector
    }

    pub fn agg(&self) -> &str {
        &self.agg
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    pub fn delta(&self) -> f64 {
        self.delta_vs_mv
    }

    pub fn ci(&self) -> Option<(f64, f64)> {
        self.ci_low.zip(self.ci_high)
    }
}

/// Output format of the tabular report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt2_opt(v: Option<f64>) -> String {
    v.map(fmt2).unwrap_or_default()
}

#[derive(Serialize)]
struct JsonRow<'a> {
    category: &'a str,
    group: String,
    selector: &'a str,
    agg: &'a str,
    n: usize,
    accuracy: f64,
    delta_vs_mv: f64,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

/// Writes the report table (and optional per-(category, selector) SVG
/// charts) under `out_dir`; returns the created paths in a stable order.
pub fn emit_report(
    rows: &[MetricsRow],
    format: ReportFormat,
    plot: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyRows);
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    match format {
        ReportFormat::Csv => {
            let path = out_dir.join("report.csv");
            let mut w = csv::Writer::from_path(&path).map_err(io_of_csv)?;
            w.write_record([
                "category",
                "group",
                "selector",
                "agg",
                "n",
                "accuracy",
                "delta_vs_mv",
                "ci_low",
                "ci_high",
            ])
            .map_err(io_of_csv)?;
            for row in rows {
                let group = group_category(&row.category)?;
                w.write_record([
                    row.category.as_str(),
                    &group.to_string(),
                    row.selector.as_str(),
                    row.agg.as_str(),
                    &row.n.to_string(),
                    &fmt2(row.accuracy),
                    &fmt2(row.delta_vs_mv),
                    &fmt2_opt(row.ci_low),
                    &fmt2_opt(row.ci_high),
                ])
                .map_err(io_of_csv)?;
            }
            w.flush()?;
            written.push(path);
        }
        ReportFormat::Json => {
            let path = out_dir.join("report.json");
            let mut json_rows = Vec::with_capacity(rows.len());
            for row in rows {
                json_rows.push(JsonRow {
                    category: &row.category,
                    group: group_category(&row.category)?.to_string(),
                    selector: &row.selector,
                    agg: &row.agg,
                    n: row.n,
                    accuracy: row.accuracy,
                    delta_vs_mv: row.delta_vs_mv,
                    ci_low: row.ci_low,
                    ci_high: row.ci_high,
                });
            }
            let body = serde_json::to_string_pretty(&json_rows).expect("rows serialize");
            fs::write(&path, body + "\n")?;
            written.push(path);
        }
    }

    if plot {
        let mut charts: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
        for row in rows {
            charts
                .entry((row.category.clone(), row.selector.clone()))
                .or_default()
                .push(row);
        }
        for ((category, selector), chart_rows) in charts {
            let path = out_dir.join(format!("{category}_{selector}.svg"));
            fs::write(&path, render_chart(&category, &selector, &chart_rows))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn io_of_csv(e: csv::Error) -> ReportError {
    ReportError::Io(io::Error::other(e))
}

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Renders one accuracy-vs-N line chart as a self-contained SVG. The x axis
/// is log-2 in N with a tick at every distinct N present.
fn render_chart(category: &str, selector: &str, rows: &[&MetricsRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 60.0; // left margin
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;

    let mut ns: Vec<usize> = rows.iter().map(|r| r.n.max(1)).collect();
    ns.sort_unstable();
    ns.dedup();
    let lo = (*ns.first().expect("non-empty chart") as f64).log2();
    let hi = (*ns.last().expect("non-empty chart") as f64).log2();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_of = |n: usize| L + ((n.max(1) as f64).log2() - lo) / span * (W - L - R);
    let y_of = |acc: f64| T + (100.0 - acc.clamp(0.0, 100.0)) / 100.0 * (H - T - B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{} ({})</text>\n",
        W / 2.0,
        xml_escape(category),
        xml_escape(selector)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{T}\" x2=\"{L}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        H - B
    ));
    svg.push_str(&format!(
        "<line x1=\"{L}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        H - B,
        W - R,
        H - B
    ));
    // Y ticks every 20 accuracy points.
    for tick in [0.0, 20.0, 40.0, 60.0, 80.0, 100.0] {
        let y = y_of(tick);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{L}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            L - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{tick:.0}</text>\n",
            L - 8.0,
            y + 4.0
        ));
    }
    // X ticks at each distinct N, log-2 spaced.
    for &n in &ns {
        let x = x_of(n);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            H - B,
            H - B + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{n}</text>\n",
            H - B + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">N</text>\n",
        (L + W - R) / 2.0,
        H - 12.0
    ));

    // One polyline per aggregation method, sorted for stable colors.
    let mut by_agg: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        by_agg.entry(row.agg.as_str()).or_default().push(row);
    }
    for (i, (agg, mut series)) in by_agg.into_iter().enumerate() {
        series.sort_by_key(|r| r.n);
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let points: Vec<String> = series
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_of(r.n), y_of(r.accuracy)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for r in &series {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(r.n),
                y_of(r.accuracy)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - R - 80.0,
            T + 16.0 * (i as f64 + 1.0),
            xml_escape(agg)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ChainOfThought, GenMeta, RewardVector, Step};

    #[test]
    fn grouping_matches_the_partition() {
        assert_eq!(group_category("Math").unwrap(), CategoryGroup::Math);
        for c in MATH_ADJACENT {
            assert_eq!(group_category(c).unwrap(), CategoryGroup::MathAdjacent);
        }
        for c in ["Law", "History", "Psychology", "Other"] {
            assert_eq!(group_category(c).unwrap(), CategoryGroup::NonMathAdjacent);
        }
        assert!(matches!(
            group_category("Alchemy"),
            Err(ReportError::UnknownCategory(_))
        ));
    }

    #[test]
    fn grouping_is_total_over_all_categories() {
        let mut math = 0;
        let mut adjacent = 0;
        let mut rest = 0;
        for c in MMLU_PRO_CATEGORIES {
            match group_category(c).unwrap() {
                CategoryGroup::Math => math += 1,
                CategoryGroup::MathAdjacent => adjacent += 1,
                CategoryGroup::NonMathAdjacent => rest += 1,
            }
        }
        assert_eq!((math, adjacent, rest), (1, 4, 9));
    }

    #[test]
    fn delta_reproduces_the_table_arithmetic() {
        assert!((delta_vs_mv(61.22, 57.15) - 4.07).abs() < 1e-9);
        assert!((delta_vs_mv(57.66, 57.15) - 0.51).abs() < 1e-9);
        assert_eq!(delta_vs_mv(50.0, 50.0), 0.0);
        assert_eq!(delta_vs_mv(40.0, 45.0), -delta_vs_mv(45.0, 40.0));
    }

    fn answer_cot(id: &str, letter: char) -> ChainOfThought {
        let step = Step::new(format!("the answer is ({letter})")).unwrap();
        ChainOfThought::new(id, vec![step], GenMeta::mock(0)).unwrap()
    }

    #[test]
    fn pass_at_1_counts_correct_answers() {
        let truth = AnswerLabel::from_letter('A').unwrap();
        let items = vec![
            (answer_cot("q", 'A'), None),
            (answer_cot("q", 'B'), None),
            (answer_cot("q", 'A'), None),
            (answer_cot("q", 'C'), None),
        ];
        let pool = CandidatePool::new("q", items).unwrap();
        assert_eq!(pass_at_1(&pool, truth).unwrap(), 0.5);

        let all = CandidatePool::new("q", vec![(answer_cot("q", 'A'), None)]).unwrap();
        assert_eq!(pass_at_1(&all, truth).unwrap(), 1.0);

        let empty = CandidatePool::new("q", Vec::new()).unwrap();
        assert!(matches!(pass_at_1(&empty, truth), Err(ReportError::EmptyPool)));
    }

    #[test]
    fn pass_at_1_mean_separates_planted_rates() {
        // Three "pipelines" with planted per-question correctness rates.
        let truth = AnswerLabel::from_letter('A').unwrap();
        let rates = [8usize, 5, 4]; // correct out of 10
        let mut means = Vec::new();
        for rate in rates {
            let mut per_question = Vec::new();
            for _ in 0..5 {
                let items: Vec<_> = (0..10)
                    .map(|i| {
                        let letter = if i < rate { 'A' } else { 'B' };
                        (answer_cot("q", letter), None)
                    })
                    .collect();
                let pool = CandidatePool::new("q", items).unwrap();
                per_question.push(pass_at_1(&pool, truth).unwrap());
            }
            means.push(per_question.iter().sum::<f64>() / per_question.len() as f64);
        }
        assert!((means[0] - 0.8).abs() < 1e-12);
        assert!((means[1] - 0.5).abs() < 1e-12);
        assert!((means[2] - 0.4).abs() < 1e-12);
        assert!(means[0] > means[1] && means[1] > means[2]);
    }

    #[test]
    fn bootstrap_brackets_the_mean_and_is_seeded() {
        let values: Vec<f64> = (0..40).map(|i| (i % 5) as f64 / 4.0).collect();
        let point = values.iter().sum::<f64>() / values.len() as f64;
        let (lo, hi) = bootstrap_ci(&values, 1000, 7).unwrap();
        assert!(lo <= point && point <= hi);
        assert!(lo < hi);
        assert_eq!(bootstrap_ci(&values, 1000, 7).unwrap(), (lo, hi));
        // Seed sensitivity: with few resamples the percentile ranks move.
        let a = bootstrap_ci(&values, 20, 7).unwrap();
        let b = bootstrap_ci(&values, 20, 8).unwrap();
        assert_ne!(a, b);
        assert!(bootstrap_ci(&[], 10, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 0, 0).is_err());
    }

    #[test]
    fn degenerate_sample_collapses_the_interval() {
        let values = vec![0.5; 16];
        let (lo, hi) = bootstrap_ci(&values, 200, 1).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));
    }

    #[test]
    fn metrics_row_enforces_the_bracket_invariant() {
        assert!(MetricsRow::new("Math", "wmv", "min", 8, 61.22, 4.07, Some((58.0, 64.0))).is_ok());
        assert!(
            MetricsRow::new("Math", "wmv", "min", 8, 61.22, 4.07, Some((62.0, 64.0))).is_err()
        );
    }

    fn sample_rows() -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for n in [1usize, 2, 4, 8, 16] {
            let acc = 50.0 + n as f64;
            rows.push(
                MetricsRow::new("Math", "wmv", "min", n, acc, acc - 50.0, Some((acc - 2.0, acc + 2.0)))
                    .unwrap(),
            );
            rows.push(MetricsRow::new("Law", "mv", "min", n, 40.0, 0.0, None).unwrap());
        }
        rows
    }

    #[test]
    fn csv_report_has_stable_columns_and_formatting() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&sample_rows(), ReportFormat::Csv, false, dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        let text = std::fs::read_to_string(&written[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "category,group,selector,agg,n,accuracy,delta_vs_mv,ci_low,ci_high"
        );
        assert_eq!(lines.next().unwrap(), "Math,Math,wmv,min,1,51.00,1.00,49.00,53.00");
        assert_eq!(lines.next().unwrap(), "Law,Non-Math-adjacent,mv,min,1,40.00,0.00,,");
    }

    #[test]
    fn report_emission_is_deterministic() {
        let rows = sample_rows();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w1 = emit_report(&rows, ReportFormat::Csv, true, d1.path()).unwrap();
        let w2 = emit_report(&rows, ReportFormat::Csv, true, d2.path()).unwrap();
        assert_eq!(w1.len(), w2.len());
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(a.file_name(), b.file_name());
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }

    #[test]
    fn plots_are_emitted_per_category_selector_with_ticks() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&sample_rows(), ReportFormat::Json, true, dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["report.json", "Law_mv.svg", "Math_wmv.svg"]);
        let svg = std::fs::read_to_string(dir.path().join("Math_wmv.svg")).unwrap();
        for n in [1, 2, 4, 8, 16] {
            assert!(svg.contains(&format!(">{n}</text>")), "missing tick {n}");
        }
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn empty_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], ReportFormat::Csv, false, dir.path()),
            Err(ReportError::EmptyRows)
        ));
    }

    #[test]
    fn pool_scores_do_not_change_pass_at_1() {
        let truth = AnswerLabel::from_letter('A').unwrap();
        let cot = answer_cot("q", 'A');
        let rv = RewardVector::new(vec![0.2]).unwrap();
        let pool = CandidatePool::new("q", vec![(cot, Some(rv))]).unwrap();
        assert_eq!(pass_at_1(&pool, truth).unwrap(), 1.0);
    }
}
