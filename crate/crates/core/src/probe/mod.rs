//! Experiment drivers and the shared job executor.
//!
//! Every model call is one job keyed by [`RunKey`]. Jobs already present in
//! the run store are skipped, so an interrupted run resumes where it stopped.
//! Calls run on up to `max_inflight` worker threads; appends to the store are
//! serialized behind a mutex.

pub mod ablation;
pub mod hint;
pub mod position;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Utc;
use serde::Serialize;

use crate::domain::{
    prompt_fingerprint, AblatedSpan, Condition, Label, Permutation, Prediction, RunKey, RunRecord,
};
use crate::ingest::{IngestError, RunStore};
use crate::modelio::{ChatBackend, ModelError};

pub use ablation::{ablate_question, build_baseline_prompt, run_exp1, validate_steps, AblationPlan, ValidStep};
pub use hint::{build_hint_prompt, run_exp3, DEFAULT_HINT_TEMPLATE};
pub use position::{build_fewshot_prompt, reposition, run_exp2};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] IngestError),
    #[error("invalid span {start}..{end} for a question of {len} bytes")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("baseline for {0} failed to parse")]
    UnparsedBaseline(String),
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// Seed for repositioning and wrong-hint choices.
    pub seed: u64,
    pub max_inflight: usize,
    /// Hint line with `{label}` standing for the hinted letter.
    pub hint_template: String,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            seed: 0,
            max_inflight: 4,
            hint_template: DEFAULT_HINT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JobFailure {
    pub item_id: String,
    pub condition: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    /// Jobs that called the backend in this invocation.
    pub executed: usize,
    /// Jobs already present in the store.
    pub skipped: usize,
    pub failed: Vec<JobFailure>,
    /// Items left out of later phases, with the reason.
    pub dropped: Vec<JobFailure>,
}

impl RunSummary {
    fn absorb(&mut self, other: RunSummary) {
        self.executed += other.executed;
        self.skipped += other.skipped;
        self.failed.extend(other.failed);
        self.dropped.extend(other.dropped);
    }
}

/// Runs `jobs` concurrently, skipping keys already stored.
pub(crate) fn execute<J, K, R>(
    jobs: &[J],
    key_of: K,
    run: R,
    store: &mut RunStore,
    max_inflight: usize,
) -> RunSummary
where
    J: Sync,
    K: Fn(&J) -> RunKey + Sync,
    R: Fn(&J) -> Result<RunRecord, ProbeError> + Sync,
{
    let next = AtomicUsize::new(0);
    let executed = AtomicUsize::new(0);
    let skipped = AtomicUsize::new(0);
    let failed = Mutex::new(Vec::new());
    let store = Mutex::new(store);
    let workers = max_inflight.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let key = key_of(job);
                if store.lock().unwrap_or_else(|e| e.into_inner()).contains(&key) {
                    skipped.fetch_add(1, Ordering::SeqCst);
                    continue;
                }
                executed.fetch_add(1, Ordering::SeqCst);
                let outcome = run(job).and_then(|rec| {
                    store
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .append(rec)
                        .map_err(ProbeError::from)
                });
                if let Err(e) = outcome {
                    failed.lock().unwrap_or_else(|e| e.into_inner()).push(JobFailure {
                        item_id: key.item_id.clone(),
                        condition: key.condition.clone(),
                        error: e.to_string(),
                    });
                }
            });
        }
    });
    let mut failed = failed.into_inner().unwrap_or_else(|e| e.into_inner());
    failed.sort_by(|a, b| (&a.item_id, &a.condition).cmp(&(&b.item_id, &b.condition)));
    RunSummary {
        executed: executed.into_inner(),
        skipped: skipped.into_inner(),
        failed,
        dropped: Vec::new(),
    }
}

/// Fields of a [`RunRecord`] that vary by experiment.
pub(crate) struct Outcome<'a> {
    pub condition: Condition,
    pub item_id: &'a str,
    pub system: &'a str,
    pub user: &'a str,
    pub prediction: Prediction,
    pub reasoning_text: String,
    pub gold: Option<Label>,
    pub hinted_label: Option<Label>,
    pub permutation: Option<Permutation>,
    pub ablation: Option<AblatedSpan>,
    pub repair_retry: bool,
}

pub(crate) fn make_record(backend: &dyn ChatBackend, o: Outcome<'_>) -> RunRecord {
    RunRecord {
        experiment: o.condition.experiment(),
        condition: o.condition,
        item_id: o.item_id.to_string(),
        model_id: backend.model_id().to_string(),
        prompt_fingerprint: prompt_fingerprint(o.system, o.user),
        prediction: o.prediction,
        gold_label_after_permutation: o.gold,
        hinted_label: o.hinted_label,
        reasoning_text: o.reasoning_text,
        created_at: Utc::now(),
        request_params: backend.request_params(),
        permutation: o.permutation,
        ablation: o.ablation,
        repair_retry: o.repair_retry,
        backend: backend.describe(),
    }
}

/// Option lines as `A) text`.
pub(crate) fn options_paren(item: &crate::domain::McqItem) -> String {
    item.options()
        .iter()
        .map(|(l, t)| format!("{l}) {t}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `A|B|C|D|E` restricted to the item's labels.
pub(crate) fn label_alternatives(item: &crate::domain::McqItem) -> String {
    item.labels().map(|l| l.to_string()).collect::<Vec<_>>().join("|")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{item, record};

    #[test]
    fn executor_skips_stored_keys_and_counts_calls() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(&dir.path().join("runs.jsonl")).unwrap();
        let items: Vec<_> = (0..100).map(|i| item(&format!("q{i}"), Label::A, 5)).collect();
        let mk = |it: &crate::domain::McqItem| {
            let mut r = record(Condition::Exp3Unbiased, Some(Label::A), Label::A);
            r.item_id = it.id().to_string();
            r
        };
        for it in &items[..40] {
            store.append(mk(it)).unwrap();
        }
        let calls = AtomicUsize::new(0);
        let summary = execute(
            &items,
            |it| RunKey::new(Condition::Exp3Unbiased, it.id(), "m"),
            |it| {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(mk(it))
            },
            &mut store,
            8,
        );
        assert_eq!(calls.into_inner(), 60);
        assert_eq!((summary.executed, summary.skipped), (60, 40));
        assert_eq!(store.len(), 100);
    }

    #[test]
    fn executor_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(&dir.path().join("runs.jsonl")).unwrap();
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let summary = execute(
            &ids,
            |id| RunKey::new(Condition::Exp2Unbiased, id, "m"),
            |id| {
                if id == "q3" {
                    return Err(ProbeError::UnparsedBaseline(id.clone()));
                }
                let mut r = record(Condition::Exp2Unbiased, Some(Label::B), Label::B);
                r.item_id = id.clone();
                Ok(r)
            },
            &mut store,
            3,
        );
        assert_eq!(store.len(), 9);
        assert_eq!(summary.failed.len(), 1);
        assert_eq!(summary.failed[0].item_id, "q3");
    }
}
