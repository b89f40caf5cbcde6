//! Free-form answer evaluation: prompt construction for forum posts and
//! analysis of clinician and lay rating files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::normalize_text;
use crate::stats::{icc2k, mean_ci, pearson, proportion, IccResult, MeanCI, PearsonResult, ProportionCI};

#[derive(Debug, thiserror::Error)]
pub enum HumanEvalError {
    #[error("empty {0}")]
    EmptyField(&'static str),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: header must be rater_id,cohort,case_id,model_id,metric,value")]
    BadHeader { path: String },
    #[error("line {line}: duplicate rating {key}")]
    Duplicate { line: u64, key: String },
    #[error("line {line}: {message}")]
    BadPost { line: usize, message: String },
}

/// User prompt for one forum post.
pub fn build_freeform_prompt(title: &str, body: &str) -> Result<String, HumanEvalError> {
    let title = normalize_text(title);
    let body = normalize_text(body);
    if title.is_empty() {
        return Err(HumanEvalError::EmptyField("title"));
    }
    if body.is_empty() {
        return Err(HumanEvalError::EmptyField("body"));
    }
    Ok(format!(
        "The user posted the following question on a medical forum.\nTitle: {title}\nPost: {body}\n\
Please provide an answer in plain text (no lists, no markdown).\n\
Response should be concise, and to the point; do not provide any unnecessary details."
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForumPost {
    pub id: String,
    pub title: String,
    pub body: String,
}

/// Reads posts as JSON lines of `{"id", "title", "body"}`.
pub fn load_posts(path: &Path) -> Result<Vec<ForumPost>, HumanEvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| HumanEvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HumanEvalError::BadPost {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Clinician,
    Lay,
}

impl FromStr for Cohort {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clinician" => Ok(Cohort::Clinician),
            "lay" => Ok(Cohort::Lay),
            other => Err(format!("unknown cohort {other:?}")),
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cohort::Clinician => "clinician",
            Cohort::Lay => "lay",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LogicalConsistency,
    MedicalAccuracy,
    Completeness,
    Urgency,
    PotentialHarm,
    Hallucination,
    SilentCorrection,
    Actionability,
    EaseOfUnderstanding,
    Trustworthiness,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::LogicalConsistency,
        Metric::MedicalAccuracy,
        Metric::Completeness,
        Metric::Urgency,
        Metric::PotentialHarm,
        Metric::Hallucination,
        Metric::SilentCorrection,
        Metric::Actionability,
        Metric::EaseOfUnderstanding,
        Metric::Trustworthiness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::LogicalConsistency => "logical_consistency",
            Metric::MedicalAccuracy => "medical_accuracy",
            Metric::Completeness => "completeness",
            Metric::Urgency => "urgency",
            Metric::PotentialHarm => "potential_harm",
            Metric::Hallucination => "hallucination",
            Metric::SilentCorrection => "silent_correction",
            Metric::Actionability => "actionability",
            Metric::EaseOfUnderstanding => "ease_of_understanding",
            Metric::Trustworthiness => "trustworthiness",
        }
    }

    pub fn cohort(self) -> Cohort {
        match self {
            Metric::Actionability | Metric::EaseOfUnderstanding | Metric::Trustworthiness => Cohort::Lay,
            _ => Cohort::Clinician,
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Metric::Hallucination | Metric::SilentCorrection)
    }

    /// Likert metrics rated by `cohort`, in canonical order.
    pub fn likert(cohort: Cohort) -> Vec<Metric> {
        Metric::ALL
            .into_iter()
            .filter(|m| m.cohort() == cohort && !m.is_binary())
            .collect()
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatingValue {
    Likert(u8),
    Flag(bool),
}

impl RatingValue {
    fn as_f64(self) -> f64 {
        match self {
            RatingValue::Likert(v) => v as f64,
            RatingValue::Flag(b) => b as u8 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub cohort: Cohort,
    pub case_id: String,
    pub model_id: String,
    pub metric: Metric,
    pub value: RatingValue,
}

impl RatingRecord {
    /// Builds a record, checking metric/cohort consistency and value range.
    pub fn new(
        rater_id: &str,
        cohort: Cohort,
        case_id: &str,
        model_id: &str,
        metric: Metric,
        raw_value: &str,
    ) -> Result<Self, String> {
        for (name, v) in [("rater_id", rater_id), ("case_id", case_id), ("model_id", model_id)] {
            if v.trim().is_empty() {
                return Err(format!("empty {name}"));
            }
        }
        if metric.cohort() != cohort {
            return Err(format!("metric {metric} is not rated by the {cohort} cohort"));
        }
        let raw = raw_value.trim();
        let value = if metric.is_binary() {
            match raw.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" => RatingValue::Flag(true),
                "0" | "false" | "no" => RatingValue::Flag(false),
                _ => return Err(format!("{metric} expects a yes/no flag, got {raw:?}")),
            }
        } else {
            match raw.parse::<u8>() {
                Ok(v @ 1..=5) => RatingValue::Likert(v),
                _ => return Err(format!("{metric} expects an integer 1-5, got {raw:?}")),
            }
        };
        Ok(RatingRecord {
            rater_id: rater_id.trim().to_string(),
            cohort,
            case_id: case_id.trim().to_string(),
            model_id: model_id.trim().to_string(),
            metric,
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RatingSet {
    pub records: Vec<RatingRecord>,
    pub rejections: Vec<Rejection>,
}

const HEADER: [&str; 6] = ["rater_id", "cohort", "case_id", "model_id", "metric", "value"];

/// Reads a ratings CSV. Invalid rows are rejected with their line number;
/// a repeated (rater, case, model, metric) key is an error.
pub fn load_ratings(path: &Path) -> Result<RatingSet, HumanEvalError> {
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|source| HumanEvalError::Csv { path: p.clone(), source })?;
    let header = reader
        .headers()
        .map_err(|source| HumanEvalError::Csv { path: p.clone(), source })?;
    if header.iter().map(str::to_ascii_lowercase).ne(HEADER.iter().map(|s| s.to_string())) {
        return Err(HumanEvalError::BadHeader { path: p });
    }
    let mut out = RatingSet::default();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|source| HumanEvalError::Csv { path: p.clone(), source })?;
        let line = row.position().map_or(0, |pos| pos.line());
        if row.len() != 6 {
            out.rejections.push(Rejection {
                line,
                reason: format!("expected 6 fields, found {}", row.len()),
            });
            continue;
        }
        let parsed = row[1]
            .parse::<Cohort>()
            .and_then(|c| Ok((c, row[4].parse::<Metric>()?)))
            .and_then(|(c, m)| RatingRecord::new(&row[0], c, &row[2], &row[3], m, &row[5]));
        match parsed {
            Ok(rec) => {
                let key = (rec.rater_id.clone(), rec.case_id.clone(), rec.model_id.clone(), rec.metric);
                if !seen.insert(key) {
                    return Err(HumanEvalError::Duplicate {
                        line,
                        key: format!("({}, {}, {}, {})", rec.rater_id, rec.case_id, rec.model_id, rec.metric),
                    });
                }
                out.records.push(rec);
            }
            Err(reason) => out.rejections.push(Rejection { line, reason }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikertRow {
    pub model_id: String,
    pub metric: Metric,
    /// Mean over rater x case judgments, with a normal-approximation CI.
    pub mean: MeanCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagRow {
    pub model_id: String,
    pub metric: Metric,
    pub rate: ProportionCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IccRow {
    /// Metric name, or `pooled` for the per-rater mean over Likert metrics.
    pub metric: String,
    pub icc: Option<IccResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub cohort: Cohort,
    pub raters: Vec<String>,
    pub likert: Vec<LikertRow>,
    pub flags: Vec<FlagRow>,
    pub icc: Vec<IccRow>,
}

fn icc_row(name: String, matrix: &[Vec<Option<f64>>]) -> IccRow {
    match icc2k(matrix) {
        Ok(r) => IccRow { metric: name, icc: Some(r), note: None },
        Err(e) => IccRow { metric: name, icc: None, note: Some(e.to_string()) },
    }
}

/// Per-model means and flag rates for one cohort, plus ICC(2,k) across its
/// raters with (case, model) cells as the rated targets.
pub fn cohort_summary(ratings: &RatingSet, cohort: Cohort) -> CohortSummary {
    let recs: Vec<&RatingRecord> = ratings.records.iter().filter(|r| r.cohort == cohort).collect();
    let raters: Vec<String> = recs.iter().map(|r| r.rater_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut by_model_metric: BTreeMap<(&str, Metric), Vec<RatingValue>> = BTreeMap::new();
    for r in &recs {
        by_model_metric.entry((&r.model_id, r.metric)).or_default().push(r.value);
    }
    let mut likert = Vec::new();
    let mut flags = Vec::new();
    for ((model, metric), values) in &by_model_metric {
        if metric.is_binary() {
            let rate = proportion(values.iter().map(|v| matches!(v, RatingValue::Flag(true))))
                .expect("groups are nonempty");
            flags.push(FlagRow { model_id: model.to_string(), metric: *metric, rate });
        } else {
            let xs: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
            let mean = mean_ci(&xs).expect("groups are nonempty");
            likert.push(LikertRow { model_id: model.to_string(), metric: *metric, mean });
        }
    }

    // Rows: (case, model) cells; columns: raters in sorted order.
    let col: BTreeMap<&str, usize> = raters.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut cells: BTreeMap<(Metric, &str, &str), Vec<Option<f64>>> = BTreeMap::new();
    for r in &recs {
        if r.metric.is_binary() {
            continue;
        }
        let row = cells
            .entry((r.metric, &r.case_id, &r.model_id))
            .or_insert_with(|| vec![None; raters.len()]);
        row[col[r.rater_id.as_str()]] = Some(r.value.as_f64());
    }
    let metrics = Metric::likert(cohort);
    let mut icc = Vec::new();
    for m in &metrics {
        let matrix: Vec<Vec<Option<f64>>> = cells
            .iter()
            .filter(|((mm, _, _), _)| mm == m)
            .map(|(_, row)| row.clone())
            .collect();
        if !matrix.is_empty() {
            icc.push(icc_row(m.to_string(), &matrix));
        }
    }
    let targets: BTreeSet<(&str, &str)> = cells.keys().map(|(_, c, m)| (*c, *m)).collect();
    let pooled: Vec<Vec<Option<f64>>> = targets
        .iter()
        .map(|(case, model)| {
            (0..raters.len())
                .map(|j| {
                    let vals: Option<Vec<f64>> = metrics
                        .iter()
                        .map(|m| cells.get(&(*m, *case, *model)).and_then(|row| row[j]))
                        .collect();
                    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect()
        })
        .collect();
    if !pooled.is_empty() {
        icc.push(icc_row("pooled".into(), &pooled));
    }
    CohortSummary { cohort, raters, likert, flags, icc }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub clinician_metric: Metric,
    pub lay_metric: Metric,
    /// Cells with both means available.
    pub n: usize,
    pub result: Option<PearsonResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentTables {
    pub pooled: Vec<CorrelationRow>,
    pub per_model: BTreeMap<String, Vec<CorrelationRow>>,
}

type CellMeans<'a> = BTreeMap<(Metric, &'a str, &'a str), f64>;

fn cell_means(ratings: &RatingSet) -> CellMeans<'_> {
    let mut acc: BTreeMap<(Metric, &str, &str), (f64, usize)> = BTreeMap::new();
    for r in ratings.records.iter().filter(|r| !r.metric.is_binary()) {
        let e = acc.entry((r.metric, &r.case_id, &r.model_id)).or_default();
        e.0 += r.value.as_f64();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn correlate(means: &CellMeans<'_>, cells: &[(&str, &str)]) -> Vec<CorrelationRow> {
    let mut rows = Vec::new();
    for cm in Metric::likert(Cohort::Clinician) {
        for lm in Metric::likert(Cohort::Lay) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter_map(|(case, model)| Some((*means.get(&(cm, *case, *model))?, *means.get(&(lm, *case, *model))?)))
                .unzip();
            let (result, note) = match pearson(&xs, &ys) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(CorrelationRow { clinician_metric: cm, lay_metric: lm, n: xs.len(), result, note });
        }
    }
    rows
}

/// Pearson correlations between clinician and lay cell means, for every
/// clinician x lay Likert metric pair. Cells are (case, model) pairs; missing
/// cells are dropped pairwise and `n` reports what remained.
pub fn expert_lay_alignment(ratings: &RatingSet) -> AlignmentTables {
    let means = cell_means(ratings);
    let cells: Vec<(&str, &str)> = means
        .keys()
        .map(|(_, c, m)| (*c, *m))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let models: BTreeSet<&str> = cells.iter().map(|(_, m)| *m).collect();
    let per_model = models
        .into_iter()
        .map(|model| {
            let sub: Vec<(&str, &str)> = cells.iter().copied().filter(|(_, m)| *m == model).collect();
            (model.to_string(), correlate(&means, &sub))
        })
        .collect();
    AlignmentTables {
        pooled: correlate(&means, &cells),
        per_model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_layout() {
        let p = build_freeform_prompt("Rash", "It itches.").unwrap();
        assert_eq!(
            p,
            "The user posted the following question on a medical forum.\nTitle: Rash\nPost: It itches.\n\
Please provide an answer in plain text (no lists, no markdown).\n\
Response should be concise, and to the point; do not provide any unnecessary details."
        );
        assert!(build_freeform_prompt("Rash", "  ").is_err());
    }

    #[test]
    fn record_validation() {
        let ok = RatingRecord::new("r1", Cohort::Clinician, "c1", "m", Metric::Hallucination, "yes").unwrap();
        assert_eq!(ok.value, RatingValue::Flag(true));
        assert!(RatingRecord::new("r1", Cohort::Clinician, "c1", "m", Metric::Completeness, "6").is_err());
        assert!(RatingRecord::new("r1", Cohort::Lay, "c1", "m", Metric::Completeness, "3").is_err());
        assert!(RatingRecord::new("", Cohort::Lay, "c1", "m", Metric::Actionability, "3").is_err());
    }

    fn set(rows: &[(&str, Cohort, &str, &str, Metric, &str)]) -> RatingSet {
        RatingSet {
            records: rows
                .iter()
                .map(|(r, c, case, m, met, v)| RatingRecord::new(r, *c, case, m, *met, v).unwrap())
                .collect(),
            rejections: vec![],
        }
    }

    #[test]
    fn constant_ratings_have_zero_width() {
        let mut rows = Vec::new();
        let raters = ["a", "b", "c"];
        let cases = ["1", "2", "3", "4"];
        for r in raters {
            for c in cases {
                rows.push((r, Cohort::Lay, c, "m", Metric::Actionability, "3"));
            }
        }
        let s = cohort_summary(&set(&rows), Cohort::Lay);
        let m = &s.likert[0].mean;
        assert_eq!((m.mean, m.lo, m.hi, m.n), (3.0, 3.0, 3.0, 12));
        assert!(s.icc.iter().all(|r| r.icc.is_none()));
    }

    #[test]
    fn one_flag_in_150() {
        let mut rows = Vec::new();
        let raters: Vec<String> = (0..5).map(|i| format!("r{i}")).collect();
        let cases: Vec<String> = (0..30).map(|i| format!("c{i}")).collect();
        for r in &raters {
            for c in &cases {
                let v = if r == "r0" && c == "c0" { "1" } else { "0" };
                rows.push(RatingRecord::new(r, Cohort::Clinician, c, "claude", Metric::Hallucination, v).unwrap());
            }
        }
        let s = cohort_summary(&RatingSet { records: rows, rejections: vec![] }, Cohort::Clinician);
        assert_eq!(s.flags[0].rate.n, 150);
        assert_eq!(format!("{:.1}%", s.flags[0].rate.estimate * 100.0), "0.7%");
    }

    #[test]
    fn anticorrelated_and_duplicated_metrics() {
        let mut rows = Vec::new();
        for (i, case) in ["1", "2", "3", "4", "5"].iter().enumerate() {
            let v = (i + 1).to_string();
            let inv = (5 - i).to_string();
            rows.push(("d", Cohort::Clinician, *case, "m", Metric::MedicalAccuracy, v.clone()));
            rows.push(("d", Cohort::Clinician, *case, "m", Metric::Completeness, inv.clone()));
            rows.push(("l", Cohort::Lay, *case, "m", Metric::Trustworthiness, v));
        }
        let rows: Vec<_> = rows.iter().map(|(a, b, c, d, e, f)| (*a, *b, *c, *d, *e, f.as_str())).collect();
        let t = expert_lay_alignment(&set(&rows));
        let find = |cm: Metric| {
            t.pooled
                .iter()
                .find(|r| r.clinician_metric == cm && r.lay_metric == Metric::Trustworthiness)
                .unwrap()
                .result
                .clone()
                .unwrap()
                .r
        };
        assert!((find(Metric::MedicalAccuracy) - 1.0).abs() < 1e-12);
        assert!((find(Metric::Completeness) + 1.0).abs() < 1e-12);
        let missing = t.pooled.iter().find(|r| r.clinician_metric == Metric::Urgency).unwrap();
        assert_eq!(missing.n, 0);
        assert!(missing.result.is_none());
    }
}
