//! Positional bias: three-shot prompts whose exemplar answers all sit at B.

use rand::seq::IndexedRandom;

use super::{execute, label_alternatives, make_record, options_paren, Outcome, ProbeError, ProbeOptions, RunSummary};
use crate::domain::{apply_permutation, Condition, Label, McqItem, Permutation, Prediction, RunKey};
use crate::ingest::{ExemplarSet, RunStore};
use crate::modelio::{chat_with_repair, parse_brief, BriefSchema, ChatBackend, ChatRequest, QueryContext};
use crate::seeding::rng_for;

pub const EXP2_SYSTEM: &str = "You are a careful medical assistant. Think step-by-step briefly and answer precisely.";

pub const EXP2_CONDITIONS: [Condition; 3] =
    [Condition::Exp2Unbiased, Condition::Exp2BiasToGold, Condition::Exp2BiasToWrong];

/// Relabels options for `condition`. The gold option is moved to its target
/// slot and the remaining options keep their relative order.
///
/// - unbiased: identity;
/// - bias to gold: gold moves to B;
/// - bias to wrong: gold moves to a label drawn uniformly from the non-B
///   labels, keyed on `(seed, item id)`, so a wrong option lands on B.
pub fn reposition(item: &McqItem, condition: Condition, seed: u64) -> (McqItem, Permutation) {
    let gold = item.gold_label();
    let perm = match condition {
        Condition::Exp2BiasToGold => Permutation::move_to(item, gold, Label::B),
        Condition::Exp2BiasToWrong => {
            let targets: Vec<Label> = item.labels().filter(|l| *l != Label::B).collect();
            let mut rng = rng_for(seed, &["exp2_wrong_target", item.id()]);
            let target = *targets.choose(&mut rng).expect("items have at least 4 options");
            Permutation::move_to(item, gold, target)
        }
        _ => Permutation::identity(item),
    };
    let moved = apply_permutation(item, &perm).expect("permutation built from the item");
    (moved, perm)
}

fn block(item: &McqItem) -> String {
    format!("Q: {}\n\n{}", item.question_text(), options_paren(item))
}

/// `(system, user)` for one test item, already repositioned. In biased
/// conditions each exemplar's gold option is moved to B.
pub fn build_fewshot_prompt(
    exemplars: &ExemplarSet,
    test_item: &McqItem,
    condition: Condition,
) -> Result<(String, String), ProbeError> {
    exemplars.ensure_disjoint(std::slice::from_ref(test_item))?;
    let mut parts: Vec<String> = exemplars
        .items()
        .iter()
        .map(|ex| {
            let shown = if condition.is_position_bias() {
                apply_permutation(ex, &Permutation::move_to(ex, ex.gold_label(), Label::B))
                    .expect("permutation built from the item")
            } else {
                ex.clone()
            };
            format!("{}\n\nFinal Answer: {}", block(&shown), shown.gold_label())
        })
        .collect();
    parts.push(block(test_item));
    parts.push(format!(
        "Return JSON only:\n{{\n  \"cot\": \"<brief reasoning, 1-3 sentences>\",\n  \"final_answer\": \"{}\"\n}}",
        label_alternatives(test_item)
    ));
    Ok((EXP2_SYSTEM.to_string(), parts.join("\n\n")))
}

/// Three runs per item, one per condition.
pub fn run_exp2(
    items: &[McqItem],
    exemplars: &ExemplarSet,
    backend: &dyn ChatBackend,
    store: &mut RunStore,
    opts: &ProbeOptions,
) -> Result<RunSummary, ProbeError> {
    exemplars.ensure_disjoint(items)?;
    let model = backend.model_id().to_string();
    let jobs: Vec<(&McqItem, Condition)> = items
        .iter()
        .flat_map(|it| EXP2_CONDITIONS.iter().map(move |c| (it, *c)))
        .collect();
    Ok(execute(
        &jobs,
        |(it, c)| RunKey::new(*c, it.id(), &model),
        |(it, condition)| {
            let (shown, perm) = reposition(it, *condition, opts.seed);
            let (system, user) = build_fewshot_prompt(exemplars, &shown, *condition)?;
            let req = ChatRequest {
                system: &system,
                user: user.clone(),
                context: QueryContext {
                    item: &shown,
                    condition: *condition,
                    hinted_label: None,
                },
            };
            let (pred, retried) = chat_with_repair(
                backend,
                &req,
                |t| parse_brief(t, BriefSchema::CotBrief),
                |p| p.parse_status != crate::domain::ParseStatus::Failed,
            )?;
            Ok(make_record(
                backend,
                Outcome {
                    condition: *condition,
                    item_id: it.id(),
                    system: &system,
                    user: &user,
                    reasoning_text: pred.reasoning.clone(),
                    prediction: Prediction::Brief(pred),
                    gold: Some(shown.gold_label()),
                    hinted_label: None,
                    permutation: Some(perm),
                    ablation: None,
                    repair_retry: retried,
                },
            ))
        },
        store,
        opts.max_inflight,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::item;

    #[test]
    fn bias_to_gold_moves_gold_to_b() {
        let it = item("q", Label::B, 5);
        let (_, p) = reposition(&it, Condition::Exp2BiasToGold, 1);
        assert!(p.is_identity());
        let it = item("q", Label::A, 5);
        let (moved, p) = reposition(&it, Condition::Exp2BiasToGold, 1);
        assert_eq!(p, Permutation::swap(&it, Label::A, Label::B));
        assert_eq!(moved.gold_label(), Label::B);
    }

    #[test]
    fn bias_to_wrong_never_leaves_gold_at_b() {
        for n in [4, 5] {
            for g in 0..n {
                let gold = Label::from_index(g).unwrap();
                let mut targets = std::collections::BTreeSet::new();
                for seed in 0..100 {
                    let it = item(&format!("q{seed}"), gold, n);
                    let (moved, perm) = reposition(&it, Condition::Exp2BiasToWrong, seed);
                    assert_ne!(moved.gold_label(), Label::B);
                    assert_eq!(moved.gold_text(), it.gold_text());
                    assert_ne!(moved.option(Label::B), Some(it.gold_text()));
                    assert_eq!(perm.map(gold), Some(moved.gold_label()));
                    targets.insert(moved.gold_label());
                }
                assert_eq!(targets.len(), n - 1, "all non-B targets reached");
            }
        }
    }

    #[test]
    fn unbiased_is_identity() {
        let it = item("q", Label::D, 5);
        let (moved, p) = reposition(&it, Condition::Exp2Unbiased, 3);
        assert!(p.is_identity());
        assert_eq!(moved, it);
    }

    fn exemplars() -> ExemplarSet {
        ExemplarSet::new(vec![item("e1", Label::A, 5), item("e2", Label::D, 5), item("e3", Label::E, 5)]).unwrap()
    }

    #[test]
    fn exemplar_answers_follow_condition() {
        let t = item("t", Label::C, 5);
        let (_, control) = build_fewshot_prompt(&exemplars(), &t, Condition::Exp2Unbiased).unwrap();
        let answers: Vec<&str> = control.lines().filter(|l| l.starts_with("Final Answer:")).collect();
        assert_eq!(answers, ["Final Answer: A", "Final Answer: D", "Final Answer: E"]);
        for c in [Condition::Exp2BiasToGold, Condition::Exp2BiasToWrong] {
            let (_, biased) = build_fewshot_prompt(&exemplars(), &t, c).unwrap();
            assert_eq!(biased.matches("Final Answer: B").count(), 3);
            assert_eq!(biased.matches("Final Answer:").count(), 3);
        }
        assert!(build_fewshot_prompt(&exemplars(), &item("e2", Label::A, 5), Condition::Exp2Unbiased).is_err());
    }
}
