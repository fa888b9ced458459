//! From per-triplet scores to predictions, a tuned "None" threshold and the
//! grouped accuracy report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    triplet_id, ConfusionSlice, EvaluationReport, FrequencyGroup, GroupCounts, LabelSpace, Prediction, ScoreRecord,
    NONE_LABEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid { lo: 0.5, hi: 1.0, step: 0.01 }
    }
}

impl ThresholdGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || lo >= hi || step <= 0.0 {
            return Err(Error::InvalidArgument(format!("bad threshold grid {lo}:{hi}:{step}")));
        }
        Ok(ThresholdGrid { lo, hi, step })
    }

    /// `lo + i*step` for every i that stays within `hi`, rounded to 12
    /// decimals so 0.5 + 11*0.01 is exactly 0.61.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e12).round() / 1e12)
            .collect()
    }
}

impl FromStr for ThresholdGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("threshold grid {s:?} is not lo:hi:step")))?;
        match parts[..] {
            [lo, hi, step] => ThresholdGrid::new(lo, hi, step),
            _ => Err(Error::InvalidArgument(format!("threshold grid {s:?} is not lo:hi:step"))),
        }
    }
}

/// Scores arranged as one row per instance and one column per scored label
/// (canonical order, "None" excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub instance_ids: Vec<String>,
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreTable {
    /// Resolves each record's triplet id against `instance_ids` × scored
    /// labels. Every cell must be filled exactly once.
    pub fn build(records: &[ScoreRecord], space: &LabelSpace, instance_ids: &[String]) -> Result<Self> {
        let labels: Vec<String> = space.scored_labels().map(|e| e.name.clone()).collect();
        let mut index: HashMap<String, (usize, usize)> = HashMap::with_capacity(instance_ids.len() * labels.len());
        for (r, id) in instance_ids.iter().enumerate() {
            for (c, label) in labels.iter().enumerate() {
                if index.insert(triplet_id(id, label), (r, c)).is_some() {
                    return Err(Error::InvalidArgument(format!("triplet id {id}::{label} is ambiguous")));
                }
            }
        }
        let mut rows = vec![vec![f64::NAN; labels.len()]; instance_ids.len()];
        for rec in records {
            let &(r, c) = index
                .get(&rec.triplet_id)
                .ok_or_else(|| Error::ScoreMismatch(format!("unknown triplet id {}", rec.triplet_id)))?;
            if !rows[r][c].is_nan() {
                return Err(Error::ScoreMismatch(format!("duplicate score for {}", rec.triplet_id)));
            }
            rows[r][c] = crate::model::check_probability(rec.p_yes)?;
        }
        let missing: Vec<String> = rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, p)| p.is_nan())
                    .map(move |(c, _)| (r, c))
            })
            .map(|(r, c)| triplet_id(&instance_ids[r], &labels[c]))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingScores { missing });
        }
        Ok(ScoreTable {
            instance_ids: instance_ids.to_vec(),
            labels,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Index and value of the first maximum.
fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &p) in row.iter().enumerate() {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

/// Argmax per instance; with a "None"-bearing space and a threshold, any
/// instance whose best score is below the threshold becomes "None".
pub fn assign_labels(table: &ScoreTable, space: &LabelSpace, threshold: Option<f64>) -> Vec<Prediction> {
    let threshold = threshold.filter(|_| space.includes_none());
    table
        .instance_ids
        .iter()
        .zip(&table.rows)
        .map(|(id, row)| {
            let (i, max) = argmax(row);
            let assigned = match threshold {
                Some(t) if max < t => NONE_LABEL.to_string(),
                _ => table.labels[i].clone(),
            };
            Prediction {
                instance_id: id.clone(),
                assigned,
                max_score: max,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub threshold: f64,
    pub accuracy: f64,
    pub grid: ThresholdGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Picks the grid point with the best dev accuracy, smallest on ties.
/// Without any gold "None" in dev, returns the grid's lower end with a warning.
pub fn tune_threshold(
    table: &ScoreTable,
    gold: &HashMap<String, String>,
    space: &LabelSpace,
    grid: &ThresholdGrid,
) -> Result<TuneOutcome> {
    if !space.includes_none() {
        return Err(Error::InvalidArgument("threshold tuning needs a label space with \"None\"".into()));
    }
    if table.is_empty() {
        return Err(Error::InvalidArgument("no dev instances to tune on".into()));
    }
    let mut cases = Vec::with_capacity(table.len());
    let mut any_none = false;
    for (id, row) in table.instance_ids.iter().zip(&table.rows) {
        let g = gold
            .get(id)
            .ok_or_else(|| Error::InvalidRecord(format!("dev instance {id} has no gold label")))?;
        let is_none = g == NONE_LABEL;
        any_none |= is_none;
        let (i, max) = argmax(row);
        cases.push((max, is_none, table.labels[i] == *g));
    }
    let accuracy_at = |t: f64| {
        let correct = cases
            .iter()
            .filter(|&&(max, is_none, hit)| if max < t { is_none } else { hit })
            .count();
        correct as f64 / cases.len() as f64
    };
    let points = grid.points();
    if !any_none {
        let warning = format!(
            "dev set has no gold \"{NONE_LABEL}\" instance; using threshold {} without tuning",
            points[0]
        );
        log::warn!("{warning}");
        return Ok(TuneOutcome {
            threshold: points[0],
            accuracy: accuracy_at(points[0]),
            grid: *grid,
            warning: Some(warning),
        });
    }
    let mut best = (points[0], accuracy_at(points[0]));
    for &t in &points[1..] {
        let acc = accuracy_at(t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(TuneOutcome {
        threshold: best.0,
        accuracy: best.1,
        grid: *grid,
        warning: None,
    })
}

fn ratio(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Micro accuracy overall and per frequency group ("None" counts as zero),
/// plus the unweighted mean of the non-empty groups.
pub fn evaluate(predictions: &[Prediction], gold: &BTreeMap<String, String>, space: &LabelSpace) -> Result<EvaluationReport> {
    let mut seen: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    let mut extra = Vec::new();
    for p in predictions {
        if !gold.contains_key(&p.instance_id) || seen.insert(&p.instance_id, p).is_some() {
            extra.push(p.instance_id.clone());
        }
    }
    let missing: Vec<String> = gold.keys().filter(|id| !seen.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::CoverageMismatch { missing, extra });
    }

    let mut counts = GroupCounts::default();
    let mut correct = GroupCounts::default();
    let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
    for (id, g) in gold {
        let group = space
            .evaluation_group(g)
            .ok_or_else(|| Error::InvalidRecord(format!("gold label {g:?} of {id} is not in the label space")))?;
        let predicted = seen[id.as_str()].assigned.as_str();
        counts.bump(group);
        if predicted == g {
            correct.bump(group);
        }
        *pairs.entry((g.as_str(), predicted)).or_default() += 1;
    }

    let rank = |label: &str| space.position(label).unwrap_or(usize::MAX);
    let mut confusion_slices: Vec<ConfusionSlice> = pairs
        .into_iter()
        .map(|((g, p), count)| ConfusionSlice {
            gold: g.to_string(),
            predicted: p.to_string(),
            count,
        })
        .collect();
    confusion_slices.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| rank(&a.gold).cmp(&rank(&b.gold)))
            .then_with(|| rank(&a.predicted).cmp(&rank(&b.predicted)))
            .then_with(|| a.predicted.cmp(&b.predicted))
    });

    let per_group: Vec<f64> = FrequencyGroup::ALL
        .iter()
        .filter_map(|&g| ratio(correct.get(g), counts.get(g)))
        .collect();
    Ok(EvaluationReport {
        accuracy_all: ratio(correct.all, counts.all),
        accuracy_freq: ratio(correct.freq, counts.freq),
        accuracy_few: ratio(correct.few, counts.few),
        accuracy_zero: ratio(correct.zero, counts.zero),
        accuracy_macro: (!per_group.is_empty()).then(|| per_group.iter().sum::<f64>() / per_group.len() as f64),
        counts,
        correct,
        threshold_used: None,
        template_id: None,
        confusion_slices,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
    pub predicted_group: Option<FrequencyGroup>,
}

/// The `top_k` most frequent mistakes, tagged with the predicted label's group.
pub fn confusion_report(report: &EvaluationReport, space: &LabelSpace, top_k: usize) -> Vec<ConfusionEntry> {
    report
        .confusion_slices
        .iter()
        .filter(|s| s.gold != s.predicted)
        .take(top_k)
        .map(|s| ConfusionEntry {
            gold: s.gold.clone(),
            predicted: s.predicted.clone(),
            count: s.count,
            predicted_group: space.evaluation_group(&s.predicted),
        })
        .collect()
}

pub fn render_confusion(entries: &[ConfusionEntry]) -> String {
    let mut out = String::new();
    if entries.is_empty() {
        out.push_str("no misclassifications\n");
        return out;
    }
    let _ = writeln!(out, "{:>6}  {:<30} {:<30} group", "count", "gold", "predicted");
    for e in entries {
        let group = e.predicted_group.map_or("-", FrequencyGroup::as_str);
        let _ = writeln!(out, "{:>6}  {:<30} {:<30} {group}", e.count, e.gold, e.predicted);
    }
    out
}

/// Accuracy table with all/freq/few/zero columns, as percentages.
pub fn render_table(report: &EvaluationReport, name: &str) -> String {
    let cell = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |a| format!("{:.2}", a * 100.0));
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8} {:>8}", "", "all", "freq", "few", "zero");
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>8}",
        name,
        cell(report.accuracy_all),
        cell(report.accuracy_freq),
        cell(report.accuracy_few),
        cell(report.accuracy_zero)
    );
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>8}",
        "n",
        report.counts.all,
        report.counts.freq,
        report.counts.few,
        report.counts.zero
    );
    if let Some(t) = report.threshold_used {
        let _ = writeln!(out, "threshold {t}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelEntry;

    fn space(names: &[(&str, FrequencyGroup)], none: bool) -> LabelSpace {
        let mut entries: Vec<LabelEntry> = names
            .iter()
            .map(|&(n, g)| LabelEntry { name: n.into(), group: g })
            .collect();
        if none {
            entries.push(LabelEntry { name: NONE_LABEL.into(), group: FrequencyGroup::Zero });
        }
        LabelSpace::new(entries, none).unwrap()
    }

    fn abc(none: bool) -> LabelSpace {
        use FrequencyGroup::*;
        space(&[("a", Freq), ("b", Few), ("c", Zero)], none)
    }

    fn table(space: &LabelSpace, rows: &[(&str, &[f64])]) -> ScoreTable {
        let ids: Vec<String> = rows.iter().map(|(id, _)| id.to_string()).collect();
        let mut recs = Vec::new();
        for (id, row) in rows {
            for (e, p) in space.scored_labels().zip(row.iter()) {
                recs.push(ScoreRecord { triplet_id: triplet_id(id, &e.name), p_yes: *p });
            }
        }
        ScoreTable::build(&recs, space, &ids).unwrap()
    }

    #[test]
    fn grid_points() {
        let g = ThresholdGrid::default();
        let p = g.points();
        assert_eq!(p.len(), 51);
        assert_eq!(p[0], 0.5);
        assert_eq!(p[11], 0.61);
        assert_eq!(p[50], 1.0);
        assert_eq!("0.5:1.0:0.01".parse::<ThresholdGrid>().unwrap(), g);
        assert!("1:0.5:0.1".parse::<ThresholdGrid>().is_err());
        assert!("0.5:1".parse::<ThresholdGrid>().is_err());
        assert!(ThresholdGrid::new(0.0, 1.0, 0.0).is_err());
        assert_eq!(ThresholdGrid::new(0.0, 1.0, 0.3).unwrap().points(), vec![0.0, 0.3, 0.6, 0.9]);
    }

    #[test]
    fn argmax_and_threshold() {
        let s = abc(true);
        let t = table(&s, &[("x", &[0.2, 0.7, 0.1]), ("y", &[0.4, 0.3, 0.0]), ("z", &[0.7, 0.7, 0.1])]);
        let plain: Vec<String> = assign_labels(&t, &s, None).into_iter().map(|p| p.assigned).collect();
        assert_eq!(plain, vec!["b", "a", "a"]);
        let cut: Vec<String> = assign_labels(&t, &s, Some(0.5)).into_iter().map(|p| p.assigned).collect();
        assert_eq!(cut, vec!["b", "None", "a"]);
        let exact: Vec<String> = assign_labels(&t, &s, Some(0.7)).into_iter().map(|p| p.assigned).collect();
        assert_eq!(exact, vec!["b", "None", "a"]);
    }

    #[test]
    fn threshold_ignored_without_none() {
        let s = abc(false);
        let t = table(&s, &[("y", &[0.4, 0.3, 0.0])]);
        assert_eq!(assign_labels(&t, &s, Some(0.9))[0].assigned, "a");
    }

    #[test]
    fn table_errors() {
        let s = abc(false);
        let ids = vec!["x".to_string()];
        let rec = |l: &str, p| ScoreRecord { triplet_id: triplet_id("x", l), p_yes: p };
        match ScoreTable::build(&[rec("a", 0.1), rec("b", 0.2)], &s, &ids) {
            Err(Error::MissingScores { missing }) => assert_eq!(missing, vec!["x::c"]),
            other => panic!("{other:?}"),
        }
        assert!(ScoreTable::build(&[rec("a", 0.1), rec("a", 0.2), rec("b", 0.1), rec("c", 0.1)], &s, &ids).is_err());
        assert!(ScoreTable::build(&[rec("zz", 0.1)], &s, &ids).is_err());
    }

    #[test]
    fn ids_containing_separator_resolve() {
        let s = abc(false);
        let t = table(&s, &[("weak::a::0", &[0.1, 0.9, 0.2])]);
        assert_eq!(t.instance_ids, vec!["weak::a::0"]);
        assert_eq!(t.rows[0], vec![0.1, 0.9, 0.2]);
    }

    #[test]
    fn tuner_picks_smallest_best() {
        let s = space(&[("l1", FrequencyGroup::Freq)], true);
        let t = table(&s, &[("A", &[0.9]), ("B", &[0.6])]);
        let gold = HashMap::from([("A".to_string(), "l1".to_string()), ("B".to_string(), "None".to_string())]);
        let out = tune_threshold(&t, &gold, &s, &ThresholdGrid::default()).unwrap();
        assert_eq!((out.threshold, out.accuracy), (0.61, 1.0));
        assert!(out.warning.is_none());
    }

    #[test]
    fn tuner_without_gold_none_warns() {
        let s = space(&[("l1", FrequencyGroup::Freq), ("l2", FrequencyGroup::Few)], true);
        let t = table(&s, &[("A", &[0.9, 0.1]), ("B", &[0.2, 0.3])]);
        let gold = HashMap::from([("A".to_string(), "l1".to_string()), ("B".to_string(), "l1".to_string())]);
        let out = tune_threshold(&t, &gold, &s, &ThresholdGrid::default()).unwrap();
        assert_eq!(out.threshold, 0.5);
        assert_eq!(out.accuracy, 0.5);
        assert!(out.warning.is_some());
        assert!(tune_threshold(&t, &gold, &abc(false), &ThresholdGrid::default()).is_err());
    }

    #[test]
    fn tuner_all_none_high_scores() {
        let s = space(&[("l1", FrequencyGroup::Freq)], true);
        let t = table(&s, &[("A", &[0.995]), ("B", &[0.999])]);
        let gold: HashMap<String, String> =
            [("A", "None"), ("B", "None")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let out = tune_threshold(&t, &gold, &s, &ThresholdGrid::default()).unwrap();
        assert_eq!((out.threshold, out.accuracy), (1.0, 1.0));
    }

    fn pred(id: &str, label: &str) -> Prediction {
        Prediction { instance_id: id.into(), assigned: label.into(), max_score: 0.0 }
    }

    fn gold(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn grouped_accuracy() {
        let s = abc(true);
        let g = gold(&[("1", "a"), ("2", "a"), ("3", "b"), ("4", "c"), ("5", "None")]);
        let p = vec![pred("1", "a"), pred("2", "b"), pred("3", "b"), pred("4", "a"), pred("5", "None")];
        let r = evaluate(&p, &g, &s).unwrap();
        assert_eq!(r.accuracy_all, Some(0.6));
        assert_eq!(r.accuracy_freq, Some(0.5));
        assert_eq!(r.accuracy_few, Some(1.0));
        assert_eq!(r.accuracy_zero, Some(0.5));
        assert_eq!(r.counts.zero, 2);
        assert!((r.accuracy_macro.unwrap() - (0.5 + 1.0 + 0.5) / 3.0).abs() < 1e-12);
        let mut shuffled = p.clone();
        shuffled.reverse();
        assert_eq!(evaluate(&shuffled, &g, &s).unwrap(), r);
    }

    #[test]
    fn all_none_predictions_score_zero() {
        let s = abc(true);
        let g = gold(&[("1", "a"), ("2", "b")]);
        let r = evaluate(&[pred("1", "None"), pred("2", "None")], &g, &s).unwrap();
        assert_eq!(r.accuracy_all, Some(0.0));
        assert_eq!(r.accuracy_zero, None);
    }

    #[test]
    fn coverage_mismatch_lists_ids() {
        let s = abc(false);
        let g = gold(&[("1", "a"), ("2", "b")]);
        match evaluate(&[pred("1", "a"), pred("1", "a"), pred("9", "a")], &g, &s) {
            Err(Error::CoverageMismatch { missing, extra }) => {
                assert_eq!(missing, vec!["2"]);
                assert_eq!(extra, vec!["1", "9"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn confusion_ordering_and_report() {
        use FrequencyGroup::*;
        let s = space(&[("f1", Freq), ("f2", Freq), ("k1", Few), ("k2", Few), ("z1", Zero)], false);
        let g = gold(&[("1", "k1"), ("2", "k2"), ("3", "k1"), ("4", "f1"), ("5", "z1")]);
        let p = vec![pred("1", "f2"), pred("2", "f2"), pred("3", "f2"), pred("4", "f1"), pred("5", "f1")];
        let r = evaluate(&p, &g, &s).unwrap();
        assert_eq!(r.confusion_slices[0].count, 2);
        assert_eq!((r.confusion_slices[0].gold.as_str(), r.confusion_slices[0].predicted.as_str()), ("k1", "f2"));
        let order: Vec<&str> = r.confusion_slices[1..].iter().map(|s| s.gold.as_str()).collect();
        assert_eq!(order, vec!["f1", "k2", "z1"]);
        let top = confusion_report(&r, &s, 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].predicted_group, Some(Freq));
        assert_eq!(top[1].gold, "k2");
        assert!(confusion_report(&r, &s, 0).is_empty());
        let perfect = evaluate(&[pred("1", "k1")], &gold(&[("1", "k1")]), &s).unwrap();
        assert!(confusion_report(&perfect, &s, 10).is_empty());
        assert!(render_confusion(&top).contains("k1"));
        assert!(render_table(&r, "run").contains("all"));
    }
}
