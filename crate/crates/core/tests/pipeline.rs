use std::collections::BTreeSet;
use std::io::Write;

use proptest::prelude::*;

use faithprobe::detectors::DetectorRuleSet;
use faithprobe::domain::{Condition, Label, McqItem, RunRecord};
use faithprobe::ingest::{load_runs, sample_items, ExemplarSet, RunStore};
use faithprobe::metrics::MetricsConfig;
use faithprobe::modelio::{Counted, SyntheticBackend, SyntheticModelConfig};
use faithprobe::probe::{reposition, run_exp1, run_exp2, run_exp3, ProbeOptions};
use faithprobe::report::{build_report, render_csv, render_markdown, ReportInputs};

fn items(n: usize, prefix: &str, k: usize) -> Vec<McqItem> {
    (0..n)
        .map(|i| {
            let options = (0..k)
                .map(|j| (Label::from_index(j).unwrap(), format!("choice {i}.{j}")))
                .collect();
            McqItem::new(
                format!("{prefix}{i:03}"),
                &format!("Patient {i} has fever, cough and chest pain. What is the diagnosis?"),
                options,
                Label::from_index(i % k).unwrap(),
            )
            .unwrap()
        })
        .collect()
}

fn backend(seed: u64) -> Counted<SyntheticBackend> {
    let cfg = SyntheticModelConfig {
        seed,
        position_pull_to_b: 0.6,
        ..SyntheticModelConfig::default()
    };
    Counted::new(SyntheticBackend::new("synth", cfg).unwrap())
}

fn report_md(records: &[RunRecord]) -> (String, String) {
    let position = DetectorRuleSet::position_ack();
    let hint = DetectorRuleSet::hint_ack();
    let rep = build_report(&ReportInputs {
        runs: records,
        ratings: None,
        metrics: MetricsConfig {
            bootstrap_resamples: 300,
            bootstrap_seed: 1,
        },
        position_rules: &position,
        hint_rules: &hint,
        run_files: vec!["runs.jsonl".into()],
        run_manifests: vec![],
        warnings: vec![],
    });
    (render_markdown(&rep), render_csv(&rep))
}

#[test]
fn all_experiments_into_one_store_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    let eval = items(30, "e", 5);
    let ex = ExemplarSet::new(items(3, "x", 5)).unwrap();
    let b = backend(3);
    let opts = ProbeOptions {
        seed: 9,
        ..ProbeOptions::default()
    };
    let mut store = RunStore::open(&path).unwrap();
    let e1 = run_exp1(&eval, &b, &mut store, &opts).unwrap();
    assert!(e1.summary.failed.is_empty());
    let ablations: usize = e1.plans.iter().map(|p| p.valid_steps.len()).sum();
    assert_eq!(e1.summary.executed, 30 + ablations);
    run_exp2(&eval, &ex, &b, &mut store, &opts).unwrap();
    run_exp3(&eval, &b, &mut store, &opts).unwrap();
    assert_eq!(b.calls(), store.len());
    assert_eq!(store.len(), 30 + ablations + 90 + 90);

    let loaded = load_runs(&path).unwrap();
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.records, store.records());

    let (md1, csv1) = report_md(&loaded.records);
    let (md2, csv2) = report_md(&loaded.records);
    assert_eq!(md1, md2);
    assert_eq!(csv1, csv2);
    assert!(md1.contains("| Model | Baseline | Ablations | Δ |"));
    assert!(md1.contains("position_pull_to_b"));
}

#[test]
fn torn_tail_is_dropped_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    let eval = items(10, "t", 4);
    let opts = ProbeOptions::default();
    {
        let mut store = RunStore::open(&path).unwrap();
        run_exp3(&eval, &backend(1), &mut store, &opts).unwrap();
    }
    // Half-written record at the end.
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"experiment\":\"exp3\",\"cond").unwrap();
    drop(f);
    let loaded = load_runs(&path).unwrap();
    assert_eq!(loaded.records.len(), 30);
    assert_eq!(loaded.warnings.len(), 1);

    // Dropping the last complete line too forces exactly one rerun.
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let kept = lines[..29].join("\n") + "\n" + &lines[30][..10];
    std::fs::write(&path, kept).unwrap();
    let b = backend(1);
    let mut store = RunStore::open(&path).unwrap();
    assert_eq!(store.len(), 29);
    let sum = run_exp3(&eval, &b, &mut store, &opts).unwrap();
    assert_eq!((sum.executed, sum.skipped, b.calls()), (1, 29, 1));
    assert!(load_runs(&path).unwrap().warnings.is_empty());
}

#[test]
fn sampling_is_seeded_and_distinct() {
    let pool = items(200, "s", 4);
    let a = sample_items(&pool, 100, 42).unwrap();
    let b = sample_items(&pool, 100, 42).unwrap();
    let c = sample_items(&pool, 100, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ids: BTreeSet<&str> = a.iter().map(McqItem::id).collect();
    assert_eq!(ids.len(), 100);
    assert!(sample_items(&pool, 201, 42).is_err());
}

proptest! {
    #[test]
    fn reposition_keeps_option_set_and_places_gold(
        gold in 0usize..5, k in 4usize..=5, seed in any::<u64>(), idx in 0usize..1000,
    ) {
        prop_assume!(gold < k);
        let mut it = items(1, &format!("p{idx}_"), k).remove(0);
        let options = it.options().clone();
        it = McqItem::new(it.id(), it.question_text(), options, Label::from_index(gold).unwrap()).unwrap();
        let texts: BTreeSet<String> = it.options().values().cloned().collect();
        for cond in [Condition::Exp2Unbiased, Condition::Exp2BiasToGold, Condition::Exp2BiasToWrong] {
            let (shown, perm) = reposition(&it, cond, seed);
            let shown_texts: BTreeSet<String> = shown.options().values().cloned().collect();
            prop_assert_eq!(&shown_texts, &texts);
            prop_assert_eq!(shown.gold_text(), it.gold_text());
            prop_assert_eq!(perm.map(it.gold_label()), Some(shown.gold_label()));
            match cond {
                Condition::Exp2Unbiased => prop_assert_eq!(&shown, &it),
                Condition::Exp2BiasToGold => prop_assert_eq!(shown.gold_label(), Label::B),
                _ => prop_assert_ne!(shown.gold_label(), Label::B),
            }
        }
    }
}
