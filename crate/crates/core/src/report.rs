//! Report assembly and rendering.
//!
//! All numbers go through one list of [`Row`]s; Markdown and CSV are two
//! views of it, JSON carries the full metric structs as well. Nothing here
//! reads the clock, so the same inputs always give the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::detectors::DetectorRuleSet;
use crate::domain::{Experiment, RunRecord};
use crate::humaneval::{cohort_summary, expert_lay_alignment, AlignmentTables, Cohort, CohortSummary, RatingSet};
use crate::metrics::{by_model, exp1_metrics, exp2_metrics, exp3_metrics, BootCI, Exp1Metrics, Exp2Metrics, Exp3Metrics, MetricsConfig};
use crate::modelio::SyntheticModelConfig;
use crate::stats::{MeanCI, ProportionCI};

/// One displayed number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub section: String,
    pub model: String,
    pub metric: String,
    pub condition: String,
    /// `None` when the metric is undefined.
    pub value: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n: Option<usize>,
    pub decimals: usize,
    /// Significance stars for correlations.
    pub stars: String,
}

impl Row {
    fn new(section: &str, model: &str, metric: &str, condition: &str, decimals: usize) -> Self {
        Row {
            section: section.into(),
            model: model.into(),
            metric: metric.into(),
            condition: condition.into(),
            value: None,
            lo: None,
            hi: None,
            n: None,
            decimals,
            stars: String::new(),
        }
    }

    fn prop(mut self, p: &Option<ProportionCI>) -> Self {
        if let Some(p) = p {
            self.value = Some(p.estimate);
            self.lo = Some(p.lo);
            self.hi = Some(p.hi);
            self.n = Some(p.n as usize);
        }
        self
    }

    fn boot(mut self, b: &Option<BootCI>) -> Self {
        if let Some(b) = b {
            self.value = Some(b.value);
            self.lo = Some(b.lo);
            self.hi = Some(b.hi);
            self.n = Some(b.n);
        }
        self
    }

    fn mean(mut self, m: &MeanCI) -> Self {
        self.value = Some(m.mean);
        self.lo = Some(m.lo);
        self.hi = Some(m.hi);
        self.n = Some(m.n);
        self
    }

    fn point(mut self, v: Option<f64>, n: Option<usize>) -> Self {
        self.value = v;
        self.n = n;
        self
    }

    /// `0.92 [0.85, 0.96]`, `0.502**`, or `undefined`.
    pub fn display(&self) -> String {
        let Some(v) = self.value else {
            return "undefined".into();
        };
        let d = self.decimals;
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => format!("{} [{}, {}]", fmt_num(v, d), fmt_num(lo, d), fmt_num(hi, d)),
            _ => format!("{}{}", fmt_num(v, d), self.stars),
        }
    }
}

/// Fixed-decimal formatting without a negative zero.
pub fn fmt_num(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub model: String,
    pub parameter: String,
    pub planted: f64,
    pub measure: String,
    pub measured: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub run_files: Vec<String>,
    pub n_records: usize,
    pub sample_ids: BTreeMap<String, Vec<String>>,
    pub backends: BTreeMap<String, Vec<String>>,
    pub request_seeds: Vec<u64>,
    pub detector_hashes: BTreeMap<String, String>,
    pub metrics_config: Option<MetricsConfig>,
    pub run_manifests: Vec<Value>,
    /// Earliest and latest run timestamps in the store.
    pub run_time_range: Option<(String, String)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HumanSection {
    pub clinician: CohortSummary,
    pub lay: CohortSummary,
    pub alignment: AlignmentTables,
    pub n_rejected_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub provenance: Provenance,
    pub exp1: BTreeMap<String, Exp1Metrics>,
    pub exp2: BTreeMap<String, Exp2Metrics>,
    pub exp3: BTreeMap<String, Exp3Metrics>,
    pub human: Option<HumanSection>,
    pub calibration: Vec<CalibrationRow>,
    pub rows: Vec<Row>,
}

pub struct ReportInputs<'a> {
    pub runs: &'a [RunRecord],
    pub ratings: Option<&'a RatingSet>,
    pub metrics: MetricsConfig,
    pub position_rules: &'a DetectorRuleSet,
    pub hint_rules: &'a DetectorRuleSet,
    pub run_files: Vec<String>,
    pub run_manifests: Vec<Value>,
    pub warnings: Vec<String>,
}

const SYNTHETIC_PREFIX: &str = "synthetic ";

/// Backend description for a synthetic model; the report reads the planted
/// parameters back from it.
pub fn describe_synthetic(cfg: &SyntheticModelConfig) -> String {
    format!("{SYNTHETIC_PREFIX}{}", serde_json::to_string(cfg).expect("config serializes"))
}

fn planted_config(records: &[RunRecord]) -> Option<SyntheticModelConfig> {
    records
        .iter()
        .find_map(|r| r.backend.strip_prefix(SYNTHETIC_PREFIX))
        .and_then(|s| serde_json::from_str(s).ok())
}

fn of_exp(runs: &[RunRecord], exp: Experiment) -> Vec<RunRecord> {
    runs.iter().filter(|r| r.experiment == exp).cloned().collect()
}

pub fn build_report(inp: &ReportInputs<'_>) -> Report {
    let mut rows = Vec::new();
    let mut exp1 = BTreeMap::new();
    let mut exp2 = BTreeMap::new();
    let mut exp3 = BTreeMap::new();
    let mut calibration = Vec::new();

    for (model, recs) in by_model(inp.runs) {
        let e1 = of_exp(&recs, Experiment::Exp1);
        if !e1.is_empty() {
            let m = exp1_metrics(&e1, &inp.metrics);
            rows.extend(exp1_rows(&model, &m));
            exp1.insert(model.clone(), m);
        }
        let e2 = of_exp(&recs, Experiment::Exp2);
        if !e2.is_empty() {
            let m = exp2_metrics(&e2, inp.position_rules);
            rows.extend(exp2_rows(&model, &m));
            exp2.insert(model.clone(), m);
        }
        let e3 = of_exp(&recs, Experiment::Exp3);
        if !e3.is_empty() {
            let m = exp3_metrics(&e3, inp.hint_rules);
            rows.extend(exp3_rows(&model, &m));
            exp3.insert(model.clone(), m);
        }
        if let Some(cfg) = planted_config(&recs) {
            calibration.extend(calibration_rows(&model, &cfg, exp1.get(&model), exp2.get(&model), exp3.get(&model)));
        }
    }

    let human = inp.ratings.map(|ratings| {
        let section = HumanSection {
            clinician: cohort_summary(ratings, Cohort::Clinician),
            lay: cohort_summary(ratings, Cohort::Lay),
            alignment: expert_lay_alignment(ratings),
            n_rejected_rows: ratings.rejections.len(),
        };
        rows.extend(human_rows(&section));
        section
    });

    Report {
        provenance: provenance(inp),
        exp1,
        exp2,
        exp3,
        human,
        calibration,
        rows,
    }
}

fn provenance(inp: &ReportInputs<'_>) -> Provenance {
    let mut sample_ids: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut backends: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    for r in inp.runs {
        sample_ids.entry(r.experiment.to_string()).or_default().insert(r.item_id.clone());
        backends.entry(r.model_id.clone()).or_default().insert(r.backend.clone());
        seeds.extend(r.request_params.seed);
    }
    let times = inp.runs.iter().map(|r| r.created_at);
    let range = times
        .clone()
        .min()
        .zip(times.max())
        .map(|(a, b)| (a.to_rfc3339(), b.to_rfc3339()));
    let mut detector_hashes = BTreeMap::new();
    for rules in [inp.position_rules, inp.hint_rules] {
        detector_hashes.insert(rules.name().to_string(), rules.content_hash().to_string());
    }
    Provenance {
        run_files: inp.run_files.clone(),
        n_records: inp.runs.len(),
        sample_ids: sample_ids.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        backends: backends.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        request_seeds: seeds.into_iter().collect(),
        detector_hashes,
        metrics_config: Some(inp.metrics),
        run_manifests: inp.run_manifests.clone(),
        run_time_range: range,
        warnings: inp.warnings.clone(),
    }
}

fn exp1_rows(model: &str, m: &Exp1Metrics) -> Vec<Row> {
    let s = "exp1";
    vec![
        Row::new(s, model, "baseline_accuracy", "", 2).prop(&m.baseline_accuracy),
        Row::new(s, model, "macro_ablation_accuracy", "", 2).boot(&m.macro_ablation_accuracy),
        Row::new(s, model, "micro_ablation_accuracy", "", 2).prop(&m.micro_ablation_accuracy),
        Row::new(s, model, "ablation_delta", "", 2).point(m.ablation_delta, Some(m.n_items_with_steps)),
        Row::new(s, model, "damage", "", 2).boot(&m.damage),
        Row::new(s, model, "rescue", "", 2).boot(&m.rescue),
        Row::new(s, model, "causal_net_flip", "", 2).boot(&m.causal_net_flip),
        Row::new(s, model, "causal_density", "", 2).boot(&m.causal_density),
    ]
}

fn exp2_rows(model: &str, m: &Exp2Metrics) -> Vec<Row> {
    let s = "exp2";
    let mut rows: Vec<Row> = m
        .accuracy
        .iter()
        .map(|(c, p)| Row::new(s, model, "accuracy", c, 3).prop(p))
        .collect();
    rows.push(Row::new(s, model, "ppr_wrong_b", "exp2_bias_to_wrong", 3).prop(&m.ppr_wrong_b));
    rows.push(Row::new(s, model, "ppr_gold_b", "exp2_unbiased", 3).prop(&m.ppr_gold_b_unbiased));
    rows.push(Row::new(s, model, "ppr_gold_b", "exp2_bias_to_gold", 3).prop(&m.ppr_gold_b_biased));
    for (c, p) in &m.bias_net_flip {
        rows.push(Row::new(s, model, "bias_net_flip", c, 3).prop(p));
    }
    for (c, p) in &m.ack_rate {
        rows.push(Row::new(s, model, "ack_rate", c, 3).prop(p));
    }
    for (c, p) in &m.ack_rate_given_b {
        rows.push(Row::new(s, model, "ack_rate_given_b", c, 3).prop(p));
    }
    rows
}

fn exp3_rows(model: &str, m: &Exp3Metrics) -> Vec<Row> {
    let s = "exp3";
    let mut rows: Vec<Row> = m
        .accuracy
        .iter()
        .map(|(c, p)| Row::new(s, model, "accuracy", c, 2).prop(p))
        .collect();
    for (c, h) in &m.hint {
        rows.push(Row::new(s, model, "flip_rate", c, 2).prop(&h.flip_rate));
        rows.push(Row::new(s, model, "hint_adherence", c, 2).prop(&h.adherence));
        rows.push(Row::new(s, model, "ack_rate", c, 2).prop(&h.ack_rate));
        rows.push(Row::new(s, model, "ack_rate_given_adherence", c, 2).prop(&h.ack_rate_given_adherence));
        let d = &h.decomposition;
        for (name, count) in [
            ("flips_to_hint", d.to_hint),
            ("flips_away", d.away),
            ("no_change", d.no_change),
            ("no_change_already_matched", d.already_matched),
        ] {
            rows.push(Row::new(s, model, name, c, 0).point(Some(count as f64), None));
        }
        for (tag, split) in [("ack_yes", &h.ack_yes), ("ack_no", &h.ack_no)] {
            rows.push(Row::new(s, model, &format!("{tag}_n"), c, 0).point(Some(split.n as f64), None));
            rows.push(Row::new(s, model, &format!("{tag}_accuracy"), c, 2).prop(&split.accuracy));
            rows.push(Row::new(s, model, &format!("{tag}_adherence"), c, 2).prop(&split.adherence));
        }
    }
    rows
}

fn human_rows(h: &HumanSection) -> Vec<Row> {
    let mut rows = Vec::new();
    for summary in [&h.clinician, &h.lay] {
        let section = format!("exp4_{}", summary.cohort);
        for l in &summary.likert {
            rows.push(Row::new(&section, &l.model_id, l.metric.as_str(), "", 2).mean(&l.mean));
        }
        for f in &summary.flags {
            rows.push(Row::new(&section, &f.model_id, f.metric.as_str(), "", 3).prop(&Some(f.rate.clone())));
        }
        for i in &summary.icc {
            let n = i.icc.as_ref().map(|r| r.n_items);
            rows.push(Row::new(&section, "all", &format!("icc2k_{}", i.metric), "", 2).point(i.icc.as_ref().map(|r| r.value), n));
        }
    }
    let mut corr = |model: &str, list: &[crate::humaneval::CorrelationRow]| {
        for c in list {
            let mut row = Row::new("exp4_alignment", model, &format!("{}~{}", c.clinician_metric, c.lay_metric), "", 3)
                .point(c.result.as_ref().map(|r| r.r), Some(c.n));
            row.stars = c.result.as_ref().map(|r| r.stars.to_string()).unwrap_or_default();
            rows.push(row);
        }
    };
    corr("pooled", &h.alignment.pooled);
    for (model, list) in &h.alignment.per_model {
        corr(model, list);
    }
    rows
}

fn calibration_rows(
    model: &str,
    cfg: &SyntheticModelConfig,
    e1: Option<&Exp1Metrics>,
    e2: Option<&Exp2Metrics>,
    e3: Option<&Exp3Metrics>,
) -> Vec<CalibrationRow> {
    let mut out = Vec::new();
    let mut push = |parameter: &str, planted: f64, measure: &str, p: Option<(f64, Option<f64>, Option<f64>)>| {
        out.push(CalibrationRow {
            model: model.into(),
            parameter: parameter.into(),
            planted,
            measure: measure.into(),
            measured: p.map(|x| x.0),
            lo: p.and_then(|x| x.1),
            hi: p.and_then(|x| x.2),
        });
    };
    let prop = |p: &Option<ProportionCI>| p.as_ref().map(|p| (p.estimate, Some(p.lo), Some(p.hi)));
    if let Some(m) = e1 {
        push("base_accuracy", cfg.base_accuracy, "exp1 baseline accuracy", prop(&m.baseline_accuracy));
        push(
            "ablation_flip_probability",
            cfg.ablation_flip_probability,
            "exp1 causal density",
            m.causal_density.map(|b| (b.value, Some(b.lo), Some(b.hi))),
        );
    }
    if let Some(m) = e2 {
        push("base_accuracy", cfg.base_accuracy, "exp2 unbiased accuracy", prop(&m.accuracy["exp2_unbiased"]));
        push("position_pull_to_b", cfg.position_pull_to_b, "exp2 PPR wrong-B (includes own B answers)", prop(&m.ppr_wrong_b));
    }
    if let Some(m) = e3 {
        push("base_accuracy", cfg.base_accuracy, "exp3 unbiased accuracy", prop(&m.accuracy["exp3_unbiased"]));
        if let Some(h) = m.hint.get("exp3_hint_to_gold") {
            push("hint_adherence_gold", cfg.hint_adherence_gold, "exp3 hint-to-gold adherence (includes own gold answers)", prop(&h.adherence));
        }
        if let Some(h) = m.hint.get("exp3_hint_to_wrong") {
            push("hint_adherence_wrong", cfg.hint_adherence_wrong, "exp3 hint-to-wrong adherence", prop(&h.adherence));
            push(
                "ack_probability_given_adherence",
                cfg.ack_probability_given_adherence,
                "exp3 hint-to-wrong ack rate among adherent runs",
                prop(&h.ack_rate_given_adherence),
            );
        }
    }
    out
}

const SECTION_TITLES: [(&str, &str); 6] = [
    ("exp1", "Causal ablation"),
    ("exp2", "Positional bias"),
    ("exp3", "Hint injection"),
    ("exp4_clinician", "Free-form answers: clinician ratings"),
    ("exp4_lay", "Free-form answers: lay ratings"),
    ("exp4_alignment", "Free-form answers: clinician-lay correlations (r)"),
];

pub fn render_markdown(r: &Report) -> String {
    let mut out = String::from("# Faithfulness probe report\n");

    if !r.exp1.is_empty() {
        out.push_str("\n## Causal ablation summary\n\n| Model | Baseline | Ablations | Δ |\n|---|---|---|---|\n");
        for row_model in r.exp1.keys() {
            let get = |metric: &str| {
                r.rows
                    .iter()
                    .find(|x| x.section == "exp1" && x.model == *row_model && x.metric == metric)
                    .map(Row::display)
                    .unwrap_or_default()
            };
            let _ = writeln!(
                out,
                "| {row_model} | {} | {} | {} |",
                get("baseline_accuracy"),
                get("macro_ablation_accuracy"),
                get("ablation_delta")
            );
        }
    }

    for (section, title) in SECTION_TITLES {
        let rows: Vec<&Row> = r.rows.iter().filter(|x| x.section == section).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = write!(out, "\n## {title}\n\n| Model | Metric | Condition | Value | n |\n|---|---|---|---|---|\n");
        for x in rows {
            let n = x.n.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(out, "| {} | {} | {} | {} | {n} |", x.model, x.metric, x.condition, x.display());
        }
    }

    if !r.calibration.is_empty() {
        out.push_str("\n## Planted vs measured (synthetic backend)\n\n| Model | Parameter | Planted | Measure | Measured |\n|---|---|---|---|---|\n");
        for c in &r.calibration {
            let measured = match (c.measured, c.lo, c.hi) {
                (Some(v), Some(lo), Some(hi)) => format!("{} [{}, {}]", fmt_num(v, 2), fmt_num(lo, 2), fmt_num(hi, 2)),
                (Some(v), _, _) => fmt_num(v, 2),
                _ => "undefined".into(),
            };
            let _ = writeln!(out, "| {} | {} | {} | {} | {measured} |", c.model, c.parameter, fmt_num(c.planted, 2), c.measure);
        }
    }

    if r.human.is_some() {
        out.push_str("\nLikert means use mean ± 1.96·sd/√n over rater × case judgments.\n");
    }

    let p = &r.provenance;
    out.push_str("\n## Provenance\n\n");
    let _ = writeln!(out, "- records: {}", p.n_records);
    for f in &p.run_files {
        let _ = writeln!(out, "- run file: {f}");
    }
    if let Some((a, b)) = &p.run_time_range {
        let _ = writeln!(out, "- runs recorded: {a} to {b}");
    }
    for (model, list) in &p.backends {
        let _ = writeln!(out, "- backend {model}: {}", list.join("; "));
    }
    if !p.request_seeds.is_empty() {
        let seeds: Vec<String> = p.request_seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "- backend seeds: {}", seeds.join(", "));
    }
    for (name, hash) in &p.detector_hashes {
        let _ = writeln!(out, "- detector {name}: sha256 {hash}");
    }
    if let Some(m) = &p.metrics_config {
        let _ = writeln!(out, "- bootstrap: {} resamples, seed {}", m.bootstrap_resamples, m.bootstrap_seed);
    }
    for m in &p.run_manifests {
        let _ = writeln!(out, "- run manifest: {m}");
    }
    for (exp, ids) in &p.sample_ids {
        let _ = writeln!(out, "- {exp} items ({}): {}", ids.len(), ids.join(", "));
    }
    for w in &p.warnings {
        let _ = writeln!(out, "- warning: {w}");
    }
    out
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(r: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["section", "model", "metric", "condition", "value", "lo", "hi", "n", "display"])
        .expect("in-memory write");
    for x in &r.rows {
        w.write_record([
            x.section.clone(),
            x.model.clone(),
            x.metric.clone(),
            x.condition.clone(),
            csv_opt(x.value),
            csv_opt(x.lo),
            csv_opt(x.hi),
            x.n.map(|n| n.to_string()).unwrap_or_default(),
            x.display(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn render_json(r: &Report) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_formats() {
        let mut r = Row::new("exp1", "ChatGPT", "causal_net_flip", "", 2);
        r.value = Some(-0.28);
        r.lo = Some(-0.54);
        r.hi = Some(-0.02);
        assert_eq!(r.display(), "-0.28 [-0.54, -0.02]");
        r.value = Some(0.05);
        r.lo = Some(0.03);
        r.hi = Some(0.08);
        assert_eq!(r.display(), "0.05 [0.03, 0.08]");
        assert_eq!(fmt_num(-0.0001, 2), "0.00");
        let mut c = Row::new("exp4_alignment", "gemini", "medical_accuracy~trustworthiness", "", 3);
        c.value = Some(0.474);
        c.stars = "**".into();
        assert_eq!(c.display(), "0.474**");
        assert_eq!(Row::new("exp1", "m", "rescue", "", 2).display(), "undefined");
    }
}
