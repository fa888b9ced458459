#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use xshot::benchmark::Preset;
use xshot::model::{Demo, RawInstance, TaskInstance, TaskRecord, NONE_LABEL};
use xshot::pipeline::{BackendRef, BackendsConfig, DatasetConfig, RunConfig};

pub fn label_name(i: usize) -> String {
    format!("label_{i:03}")
}

/// An instance carrying every anchor role any shipped template reads.
pub fn instance(id: &str, label: Option<&str>, n: usize) -> RawInstance {
    let tag = label.unwrap_or("unlabeled");
    RawInstance::new(id, format!("Sentence {n} mentions {tag} between alpha{n} and beta{n}."), label)
        .with_anchor("entity1", format!("alpha{n}"))
        .with_anchor("entity2", format!("beta{n}"))
        .with_anchor("trigger", format!("mentions{n}"))
        .with_anchor("argument", format!("beta{n}"))
}

/// `labels` labels with `per_label` instances each, plus `none` instances
/// whose gold is "None".
pub fn corpus(labels: usize, per_label: usize, none: usize) -> Vec<RawInstance> {
    let mut out = Vec::with_capacity(labels * per_label + none);
    let mut n = 0;
    for l in 0..labels {
        let name = label_name(l);
        for i in 0..per_label {
            out.push(instance(&format!("{name}-{i}"), Some(&name), n));
            n += 1;
        }
    }
    for i in 0..none {
        out.push(instance(&format!("none-{i}"), Some(NONE_LABEL), n));
        n += 1;
    }
    out
}

/// Smallest corpus that satisfies a preset whatever the group assignment.
pub fn preset_corpus(preset: Preset) -> Vec<RawInstance> {
    let spec = preset.spec();
    let labels = spec.group_label_counts.total();
    let per_label = spec
        .required_for(xshot::model::FrequencyGroup::Freq)
        .max(spec.min_instances_per_label);
    let none = if spec.includes_none { spec.dev_per_label + spec.test_per_label } else { 0 };
    corpus(labels, per_label, none)
}

pub fn write_corpus(dir: &Path, instances: &[RawInstance]) -> PathBuf {
    let path = dir.join("raw.jsonl");
    xshot::io::write_jsonl(&path, instances).unwrap();
    path
}

pub fn task(id: usize, instances: usize) -> TaskRecord {
    TaskRecord {
        task_id: format!("task{id:04}"),
        definition: format!("Definition of task {id}: answer about topic {}.", id % 17),
        positive_demos: vec![Demo {
            input: format!("demo input {id}"),
            output: format!("demo-answer-{id}"),
        }],
        instances: (0..instances)
            .map(|i| TaskInstance {
                id: format!("t{id}-i{i}"),
                input: format!("question {i} of task {id}"),
                outputs: vec![format!("answer-{id}-{}", i % 7)],
            })
            .collect(),
    }
}

pub fn tasks(n: usize, mut sizes: impl FnMut(usize) -> usize) -> Vec<TaskRecord> {
    (0..n).map(|i| task(i, sizes(i))).collect()
}

pub fn run_config(dir: &Path, preset: Preset, dataset: PathBuf, score: Option<BackendRef>) -> RunConfig {
    RunConfig {
        seed: 7,
        out_dir: dir.join("run"),
        dataset: DatasetConfig {
            path: dataset,
            preset: Some(preset),
            spec: None,
            assignment: None,
        },
        template: None,
        backends: BackendsConfig {
            score,
            complete: Some(BackendRef::Spec("echo-mock".into())),
            embed: Some(BackendRef::Spec("hash-mock".into())),
        },
        triplets: Default::default(),
        threshold: Default::default(),
        eval: Default::default(),
        weakgen: Default::default(),
        indirect: None,
    }
}

pub fn oracle() -> Option<BackendRef> {
    Some(BackendRef::Inline(xshot::scoring::BackendConfig::new(
        xshot::scoring::BackendKind::OracleMock,
    )))
}

/// Every regular file under `dir`, relative path → bytes.
pub fn snapshot(dir: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if !skip.contains(&rel.as_str()) {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}
