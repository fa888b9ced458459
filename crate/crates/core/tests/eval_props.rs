use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use xshot::eval::{assign_labels, evaluate, tune_threshold, ScoreTable, ThresholdGrid};
use xshot::model::{triplet_id, FrequencyGroup, LabelEntry, LabelSpace, Prediction, ScoreRecord, NONE_LABEL};

fn space(labels: usize, none: bool) -> LabelSpace {
    let groups = [FrequencyGroup::Freq, FrequencyGroup::Few, FrequencyGroup::Zero];
    let mut entries: Vec<LabelEntry> = (0..labels)
        .map(|i| LabelEntry {
            name: format!("L{i}"),
            group: groups[i % 3],
        })
        .collect();
    if none {
        entries.push(LabelEntry {
            name: NONE_LABEL.into(),
            group: FrequencyGroup::Zero,
        });
    }
    LabelSpace::new(entries, none).unwrap()
}

/// Scores on a 0.01 lattice (so many land exactly on grid points and tie
/// within rows) or continuous, plus gold labels with some "None".
#[derive(Debug, Clone)]
struct Dev {
    labels: usize,
    rows: Vec<Vec<f64>>,
    gold: Vec<String>,
}

fn dev(max_n: usize) -> impl Strategy<Value = Dev> {
    (1usize..8, 1usize..max_n, any::<bool>(), any::<u64>()).prop_map(|(labels, n, lattice, seed)| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                (0..labels)
                    .map(|_| {
                        if lattice {
                            rng.random_range(0..=100u32) as f64 / 100.0
                        } else {
                            rng.random::<f64>()
                        }
                    })
                    .collect()
            })
            .collect();
        let gold = (0..n)
            .map(|_| match rng.random_range(0..=labels) {
                k if k == labels => NONE_LABEL.to_string(),
                k => format!("L{k}"),
            })
            .collect();
        Dev { labels, rows, gold }
    })
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

fn table(d: &Dev, space: &LabelSpace) -> ScoreTable {
    let ids = ids(d.rows.len());
    let records: Vec<ScoreRecord> = ids
        .iter()
        .zip(&d.rows)
        .flat_map(|(id, row)| {
            row.iter()
                .enumerate()
                .map(move |(l, p)| ScoreRecord::new(triplet_id(id, &format!("L{l}")), *p).unwrap())
        })
        .collect();
    ScoreTable::build(&records, space, &ids).unwrap()
}

/// Straight reading of the tuning rule: 51 points 0.50..=1.00, strict
/// "below threshold means None", first label wins argmax ties, and the
/// earliest point wins accuracy ties.
fn brute_force_tune(d: &Dev) -> (f64, f64) {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..=50 {
        let t = (50 + i) as f64 / 100.0;
        let mut correct = 0;
        for (row, gold) in d.rows.iter().zip(&d.gold) {
            let mut arg = 0;
            for (l, p) in row.iter().enumerate() {
                if *p > row[arg] {
                    arg = l;
                }
            }
            let predicted = if row[arg] < t { NONE_LABEL.to_string() } else { format!("L{arg}") };
            if &predicted == gold {
                correct += 1;
            }
        }
        if best.is_none_or(|(_, c)| correct > c) {
            best = Some((t, correct));
        }
    }
    let (t, c) = best.unwrap();
    (t, c as f64 / d.rows.len() as f64)
}

fn gold_map(d: &Dev) -> HashMap<String, String> {
    ids(d.rows.len()).into_iter().zip(d.gold.iter().cloned()).collect()
}

fn predicted(preds: &[Prediction]) -> Vec<&str> {
    preds.iter().map(|p| p.assigned.as_str()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tuner_matches_brute_force(d in dev(10_000)) {
        prop_assume!(d.gold.iter().any(|g| g == NONE_LABEL));
        let space = space(d.labels, true);
        let out = tune_threshold(&table(&d, &space), &gold_map(&d), &space, &ThresholdGrid::default()).unwrap();
        let (t, acc) = brute_force_tune(&d);
        prop_assert_eq!(out.threshold, t);
        prop_assert_eq!(out.accuracy, acc);
        prop_assert!(out.warning.is_none());
    }
}

proptest! {
    #[test]
    fn none_predictions_grow_with_threshold(d in dev(200), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let space = space(d.labels, true);
        let table = table(&d, &space);
        let low = assign_labels(&table, &space, Some(lo));
        let high = assign_labels(&table, &space, Some(hi));
        for (l, h) in low.iter().zip(&high) {
            if l.assigned == NONE_LABEL {
                prop_assert_eq!(&h.assigned, NONE_LABEL);
            }
        }
    }

    #[test]
    fn argmax_survives_monotone_rescaling(d in dev(200), power in 0.1f64..5.0, scale in 0.01f64..1.0) {
        let space = space(d.labels, false);
        let before = assign_labels(&table(&d, &space), &space, None);
        let rescaled = Dev {
            rows: d.rows.iter().map(|r| r.iter().map(|p| p.powf(power) * scale).collect()).collect(),
            ..d.clone()
        };
        let after = assign_labels(&table(&rescaled, &space), &space, None);
        prop_assert_eq!(predicted(&before), predicted(&after));
    }

    #[test]
    fn no_threshold_without_none_label(d in dev(100), t in 0.0f64..=1.0) {
        let space = space(d.labels, false);
        let table = table(&d, &space);
        let preds = assign_labels(&table, &space, Some(t));
        prop_assert!(preds.iter().all(|p| p.assigned != NONE_LABEL));
        prop_assert_eq!(preds, assign_labels(&table, &space, None));
    }

    #[test]
    fn evaluation_ignores_prediction_order(d in dev(300), t in 0.5f64..=1.0, seed: u64) {
        let space = space(d.labels, true);
        let mut preds = assign_labels(&table(&d, &space), &space, Some(t));
        let gold: BTreeMap<String, String> = gold_map(&d).into_iter().collect();
        let report = evaluate(&preds, &gold, &space).unwrap();
        preds.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&evaluate(&preds, &gold, &space).unwrap(), &report);

        let c = report.counts;
        prop_assert_eq!(c.freq + c.few + c.zero, c.all);
        prop_assert_eq!(c.all, d.rows.len());
        for g in [FrequencyGroup::Freq, FrequencyGroup::Few, FrequencyGroup::Zero] {
            let expected = (c.get(g) > 0).then(|| report.correct.get(g) as f64 / c.get(g) as f64);
            prop_assert_eq!(report.accuracy(g), expected);
        }
        let hits = preds.iter().filter(|p| gold[&p.instance_id] == p.assigned).count();
        prop_assert_eq!(report.accuracy_all, Some(hits as f64 / c.all as f64));
        let misses: usize = report.confusion_slices.iter().filter(|s| s.gold != s.predicted).map(|s| s.count).sum();
        prop_assert_eq!(misses, c.all - hits);
    }
}
