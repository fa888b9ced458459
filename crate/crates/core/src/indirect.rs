//! Binary pairs from an instruction-tuning task collection, the similar-task
//! filter, and the tasks-vs-instances ablation schedules.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rand::seq::{index, IndexedRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TaskInstance, TaskRecord};
use crate::seed::{self, Rng};

const SCOPE: &str = "indirect-supervision";

pub const DEFAULT_CAP: usize = 100;
pub const DEFAULT_MAX_WORDS: usize = 512;
pub const DEFAULT_FILTER_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairPolarity {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectPair {
    pub pair_id: String,
    pub task_id: String,
    pub prefix: String,
    pub input: String,
    pub candidate: String,
    pub polarity: PairPolarity,
}

/// Where negative candidates are drawn from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSource {
    /// Gold outputs of the other instances of the same task.
    #[default]
    OtherInstances,
    /// The task's whole answer inventory: instance golds plus demo outputs.
    AnswerInventory,
}

fn task_rng(seed: u64, task_id: &str) -> Rng {
    seed::rng_for(seed, &format!("{SCOPE}/{task_id}"))
}

/// Seeded sample without replacement of `min(cap, n)` instances, returned in
/// their original order.
pub fn sample_task_instances<'a>(task: &'a TaskRecord, cap: usize, rng: &mut Rng) -> Result<Vec<&'a TaskInstance>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("instance cap must be at least 1".into()));
    }
    let n = task.instances.len();
    if cap >= n {
        return Ok(task.instances.iter().collect());
    }
    let mut picked = index::sample(rng, n, cap).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &task.instances[i]).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prefix {
    pub text: String,
    pub words: usize,
    pub demos_included: usize,
    pub warning: Option<String>,
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn render_demo(input: &str, output: &str) -> String {
    format!("Input: {input}\nOutput: {output}")
}

/// Definition followed by up to two positive demos, each appended only if
/// the running word count stays within `max_words`.
pub fn build_prefix(task: &TaskRecord, max_words: usize) -> Prefix {
    let def_words = word_count(&task.definition);
    if def_words > max_words {
        let text = task
            .definition
            .split_whitespace()
            .take(max_words)
            .collect::<Vec<_>>()
            .join(" ");
        return Prefix {
            text,
            words: max_words,
            demos_included: 0,
            warning: Some(format!(
                "task {}: definition has {def_words} words, truncated to {max_words}",
                task.task_id
            )),
        };
    }

    let mut text = task.definition.clone();
    let mut words = def_words;
    let mut demos_included = 0;
    for demo in task.positive_demos.iter().take(2) {
        let block = render_demo(&demo.input, &demo.output);
        let w = word_count(&block);
        if words + w <= max_words {
            text.push_str("\n\n");
            text.push_str(&block);
            words += w;
            demos_included += 1;
        }
    }
    Prefix {
        text,
        words,
        demos_included,
        warning: None,
    }
}

/// Candidate pool for one instance: distinct answers, sorted, minus the
/// instance's own golds.
fn answer_pool<'a>(answers: &'a BTreeSet<&'a str>, instance: &TaskInstance) -> Vec<&'a str> {
    answers
        .iter()
        .copied()
        .filter(|a| !instance.outputs.iter().any(|g| g == a))
        .collect()
}

fn task_answers(task: &TaskRecord, source: NegativeSource) -> BTreeSet<&str> {
    let mut answers: BTreeSet<&str> = task
        .instances
        .iter()
        .flat_map(|i| i.outputs.iter().map(String::as_str))
        .collect();
    if source == NegativeSource::AnswerInventory {
        answers.extend(task.positive_demos.iter().map(|d| d.output.as_str()));
    }
    answers
}

/// A uniformly drawn answer of the same task that is not a gold output of
/// `instance`, or `None` when no such answer exists.
pub fn sample_negative_answer(
    task: &TaskRecord,
    instance: &TaskInstance,
    source: NegativeSource,
    rng: &mut Rng,
) -> Option<String> {
    let answers = task_answers(task, source);
    answer_pool(&answers, instance).choose(rng).map(|s| s.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectStats {
    pub tasks: usize,
    pub sampled_instances: usize,
    pub skipped_instances: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: String,
    pub sampled: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndirectDataset {
    pub pairs: Vec<IndirectPair>,
    pub stats: IndirectStats,
    pub per_task: Vec<TaskStats>,
    pub warnings: Vec<String>,
}

struct TaskOutput {
    pairs: Vec<IndirectPair>,
    sampled: usize,
    skipped: usize,
    warning: Option<String>,
}

fn build_task_pairs(task: &TaskRecord, cap: usize, max_words: usize, seed: u64, source: NegativeSource) -> Result<TaskOutput> {
    let mut rng = task_rng(seed, &task.task_id);
    let sampled = sample_task_instances(task, cap, &mut rng)?;
    let prefix = build_prefix(task, max_words);
    let answers = task_answers(task, source);
    let mut pairs = Vec::with_capacity(sampled.len() * 2);
    let mut skipped = 0;
    for inst in &sampled {
        let pool = answer_pool(&answers, inst);
        let Some(negative) = pool.choose(&mut rng) else {
            skipped += 1;
            continue;
        };
        let base = format!("{}::{}", task.task_id, inst.id);
        pairs.push(IndirectPair {
            pair_id: format!("{base}::yes"),
            task_id: task.task_id.clone(),
            prefix: prefix.text.clone(),
            input: inst.input.clone(),
            candidate: inst.outputs[0].clone(),
            polarity: PairPolarity::Yes,
        });
        pairs.push(IndirectPair {
            pair_id: format!("{base}::no"),
            task_id: task.task_id.clone(),
            prefix: prefix.text.clone(),
            input: inst.input.clone(),
            candidate: negative.to_string(),
            polarity: PairPolarity::No,
        });
    }
    Ok(TaskOutput {
        pairs,
        sampled: sampled.len(),
        skipped,
        warning: prefix.warning,
    })
}

/// One yes pair (first gold) and one no pair (sampled negative) per sampled
/// instance. Instances with an empty negative pool contribute nothing.
/// Tasks are processed in parallel with per-task sub-seeds, and the output
/// keeps task order.
pub fn build_indirect_dataset(
    tasks: &[TaskRecord],
    cap: usize,
    max_words: usize,
    seed: u64,
    source: NegativeSource,
) -> Result<IndirectDataset> {
    let per_task: Vec<TaskOutput> = tasks
        .par_iter()
        .map(|t| build_task_pairs(t, cap, max_words, seed, source))
        .collect::<Result<_>>()?;

    let mut out = IndirectDataset {
        stats: IndirectStats {
            tasks: tasks.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (task, t) in tasks.iter().zip(per_task) {
        out.per_task.push(TaskStats {
            task_id: task.task_id.clone(),
            sampled: t.sampled,
            skipped: t.skipped,
        });
        out.stats.sampled_instances += t.sampled;
        out.stats.skipped_instances += t.skipped;
        out.warnings.extend(t.warning);
        out.pairs.extend(t.pairs);
    }
    out.stats.pairs = out.pairs.len();
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine similarity needs equal non-zero dimensions, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTask {
    pub task_id: String,
    pub similarity: f64,
}

/// Similarities equal to 12 decimal places count as tied.
fn rank_key(similarity: f64) -> f64 {
    (similarity * 1e12).round()
}

/// Ranks task ids by descending similarity to `target`, ties by ascending id.
pub fn rank_by_similarity(task_ids: &[&str], embeddings: &[Vec<f64>], target: &[f64]) -> Result<Vec<RankedTask>> {
    if task_ids.len() != embeddings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tasks but {} embeddings",
            task_ids.len(),
            embeddings.len()
        )));
    }
    let mut ranked = task_ids
        .iter()
        .zip(embeddings)
        .map(|(id, e)| {
            Ok(RankedTask {
                task_id: id.to_string(),
                similarity: cosine_similarity(e, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        rank_key(b.similarity)
            .partial_cmp(&rank_key(a.similarity))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.task_id.cmp(&b.task_id))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<TaskRecord>,
    pub removed: Vec<RankedTask>,
}

/// Removes the `k` tasks whose definitions are closest to the target
/// instruction. Kept tasks stay in input order.
pub fn filter_similar_tasks(
    tasks: &[TaskRecord],
    task_embeddings: &[Vec<f64>],
    target_embedding: &[f64],
    k: usize,
) -> Result<FilterOutcome> {
    if k == 0 {
        return Ok(FilterOutcome {
            kept: tasks.to_vec(),
            removed: Vec::new(),
        });
    }
    if k >= tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {k} of {} tasks",
            tasks.len()
        )));
    }
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let mut ranked = rank_by_similarity(&ids, task_embeddings, target_embedding)?;
    ranked.truncate(k);
    let removed_ids: HashSet<&str> = ranked.iter().map(|r| r.task_id.as_str()).collect();
    let kept = tasks
        .iter()
        .filter(|t| !removed_ids.contains(t.task_id.as_str()))
        .cloned()
        .collect();
    Ok(FilterOutcome { kept, removed: ranked })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    VaryTasks,
    VaryInstances,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vary-tasks" => Ok(ScheduleMode::VaryTasks),
            "vary-instances" => Ok(ScheduleMode::VaryInstances),
            other => Err(Error::InvalidArgument(format!("unknown schedule mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub num_tasks: usize,
    pub instances_per_task: usize,
    pub total: usize,
}

impl AblationPoint {
    fn new(num_tasks: usize, instances_per_task: usize) -> Self {
        AblationPoint {
            num_tasks,
            instances_per_task,
            total: num_tasks * instances_per_task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub points: Vec<AblationPoint>,
    pub warning: Option<String>,
}

const STEPS: usize = 7;
const TASK_STEP: usize = 100;
const INSTANCES_PER_TASK: usize = 100;

/// Seven-step schedules with matching per-step totals of about 10,000 * i.
pub fn build_ablation_schedule(mode: ScheduleMode, total_tasks_available: usize) -> Result<Schedule> {
    if total_tasks_available == 0 {
        return Err(Error::InvalidArgument("no tasks available".into()));
    }
    let budget = |i: usize| (TASK_STEP * INSTANCES_PER_TASK * i) as f64;
    match mode {
        ScheduleMode::VaryTasks => {
            let full = TASK_STEP * STEPS;
            if total_tasks_available >= full {
                let points = (1..=STEPS).map(|i| AblationPoint::new(TASK_STEP * i, INSTANCES_PER_TASK)).collect();
                return Ok(Schedule { points, warning: None });
            }
            let scale = total_tasks_available as f64 / full as f64;
            let points = (1..=STEPS)
                .map(|i| {
                    let n = ((TASK_STEP * i) as f64 * scale).round().max(1.0) as usize;
                    AblationPoint::new(n, INSTANCES_PER_TASK)
                })
                .collect();
            Ok(Schedule {
                points,
                warning: Some(format!(
                    "only {total_tasks_available} tasks available (< {full}); task counts scaled by {scale:.4}"
                )),
            })
        }
        ScheduleMode::VaryInstances => {
            let points = (1..=STEPS)
                .map(|i| {
                    let per = (budget(i) / total_tasks_available as f64).round().max(1.0) as usize;
                    AblationPoint::new(total_tasks_available, per)
                })
                .collect();
            Ok(Schedule { points, warning: None })
        }
    }
}

/// Picks the tasks and per-task cap for one schedule point.
pub fn select_for_point<'a>(tasks: &'a [TaskRecord], point: &AblationPoint, seed: u64) -> Result<Vec<&'a TaskRecord>> {
    if point.num_tasks > tasks.len() {
        return Err(Error::InvalidArgument(format!(
            "schedule point needs {} tasks, only {} available",
            point.num_tasks,
            tasks.len()
        )));
    }
    let mut rng = seed::rng_for(seed, &format!("{SCOPE}/ablation"));
    let mut picked = index::sample(&mut rng, tasks.len(), point.num_tasks).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &tasks[i]).collect())
}
