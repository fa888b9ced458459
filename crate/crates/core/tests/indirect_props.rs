mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use xshot::indirect::{build_indirect_dataset, filter_similar_tasks, NegativeSource, PairPolarity};
use xshot::model::{TaskInstance, TaskRecord};

fn task_set() -> impl Strategy<Value = Vec<TaskRecord>> {
    prop::collection::vec((1usize..30, 1usize..6, 1usize..3), 1..12).prop_map(|shapes| {
        shapes
            .into_iter()
            .enumerate()
            .map(|(t, (n, answers, golds))| TaskRecord {
                task_id: format!("task{t:03}"),
                definition: format!("Answer question set {t}."),
                positive_demos: vec![xshot::model::Demo {
                    input: "demo".into(),
                    output: format!("demo-{t}"),
                }],
                instances: (0..n)
                    .map(|i| TaskInstance {
                        id: format!("t{t}-{i}"),
                        input: format!("q{i}"),
                        outputs: (0..golds).map(|g| format!("a{}", (i + g) % answers)).collect(),
                    })
                    .collect(),
            })
            .collect()
    })
}

fn source() -> impl Strategy<Value = NegativeSource> {
    prop_oneof![Just(NegativeSource::OtherInstances), Just(NegativeSource::AnswerInventory)]
}

/// Exact key for cosine ordering on integer vectors: sign(d) * d^2 / |a|^2,
/// kept as a fraction so ties are ties.
fn cosine_key(a: &[i64], target: &[i64]) -> (i128, i128) {
    let d: i64 = a.iter().zip(target).map(|(x, y)| x * y).sum();
    let norm: i64 = a.iter().map(|x| x * x).sum();
    ((d.signum() * d * d) as i128, norm as i128)
}

/// Exhaustive reference: sort every task by (similarity desc, id asc).
fn brute_force(ids: &[String], embeddings: &[Vec<i64>], target: &[i64], k: usize) -> Vec<String> {
    let mut all: Vec<((i128, i128), &String)> =
        ids.iter().zip(embeddings).map(|(id, e)| (cosine_key(e, target), id)).collect();
    all.sort_by(|((an, ad), aid), ((bn, bd), bid)| (bn * ad).cmp(&(an * bd)).then_with(|| aid.cmp(bid)));
    all.into_iter().take(k).map(|(_, id)| id.clone()).collect()
}

fn embedding(dim: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-3i64..=3, dim).prop_filter("non-zero", |v| v.iter().any(|x| *x != 0))
}

proptest! {
    #[test]
    fn pairs_are_balanced_and_negatives_wrong(
        tasks in task_set(),
        cap in 1usize..40,
        seed: u64,
        source in source(),
    ) {
        let data = build_indirect_dataset(&tasks, cap, 512, seed, source).unwrap();
        let yes = data.pairs.iter().filter(|p| p.polarity == PairPolarity::Yes).count();
        let no = data.pairs.len() - yes;
        prop_assert_eq!(yes, no);

        let golds: HashMap<(&str, &str), &Vec<String>> = tasks
            .iter()
            .flat_map(|t| t.instances.iter().map(move |i| ((t.task_id.as_str(), i.input.as_str()), &i.outputs)))
            .collect();
        for p in &data.pairs {
            let outputs = golds[&(p.task_id.as_str(), p.input.as_str())];
            match p.polarity {
                PairPolarity::Yes => prop_assert_eq!(&p.candidate, &outputs[0]),
                PairPolarity::No => prop_assert!(!outputs.contains(&p.candidate), "{} is gold", p.candidate),
            }
        }
        for (task, stats) in tasks.iter().zip(&data.per_task) {
            prop_assert!(stats.sampled <= cap.min(task.instances.len()));
        }
    }

    #[test]
    fn indirect_build_is_deterministic(tasks in task_set(), cap in 1usize..40, seed: u64, source in source()) {
        let a = build_indirect_dataset(&tasks, cap, 512, seed, source).unwrap();
        let b = build_indirect_dataset(&tasks, cap, 512, seed, source).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
        prop_assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn filter_matches_exhaustive_sort(
        (embeddings, target, k) in (2usize..1000, 1usize..6).prop_flat_map(|(n, dim)| {
            (prop::collection::vec(embedding(dim), n), embedding(dim), 0..n)
        }),
    ) {
        let ids: Vec<String> = (0..embeddings.len()).map(|i| format!("task{i:04}")).collect();
        let tasks: Vec<TaskRecord> = ids.iter().map(|id| TaskRecord {
            task_id: id.clone(),
            definition: String::new(),
            positive_demos: vec![],
            instances: vec![TaskInstance { id: "i".into(), input: "q".into(), outputs: vec!["a".into()] }],
        }).collect();
        let as_f64 = |v: &Vec<i64>| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();
        let float_embeddings: Vec<Vec<f64>> = embeddings.iter().map(as_f64).collect();
        let out = filter_similar_tasks(&tasks, &float_embeddings, &as_f64(&target), k).unwrap();
        let removed: Vec<String> = out.removed.iter().map(|r| r.task_id.clone()).collect();
        prop_assert_eq!(&removed, &brute_force(&ids, &embeddings, &target, k));
        prop_assert_eq!(out.kept.len() + k, tasks.len());
        let kept: Vec<&str> = out.kept.iter().map(|t| t.task_id.as_str()).collect();
        let expected: Vec<&str> = ids.iter().filter(|id| !removed.contains(id)).map(String::as_str).collect();
        prop_assert_eq!(kept, expected);
    }
}
