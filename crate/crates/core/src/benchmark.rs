//! Recompiles a raw labeled corpus into a freq/few/zero-shot benchmark.
//!
//! Labels are partitioned into the three frequency groups, then each label's
//! instances are shuffled and carved into test, dev and train slices, in
//! that order, so shrinking a train quota never moves evaluation instances.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    validate_dataset, FrequencyGroup, LabelEntry, LabelSpace, RawInstance, ViolationKind, NONE_LABEL,
};
use crate::seed;

const SCOPE: &str = "benchmark-builder";

pub const LABEL_SPACE_FILE: &str = "label_space.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GOLD_MAP_FILE: &str = "gold_map.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerGroup {
    pub freq: usize,
    pub few: usize,
    pub zero: usize,
}

impl PerGroup {
    pub const fn new(freq: usize, few: usize, zero: usize) -> Self {
        PerGroup { freq, few, zero }
    }

    pub fn get(&self, group: FrequencyGroup) -> usize {
        match group {
            FrequencyGroup::Freq => self.freq,
            FrequencyGroup::Few => self.few,
            FrequencyGroup::Zero => self.zero,
        }
    }

    pub fn total(&self) -> usize {
        self.freq + self.few + self.zero
    }
}

/// Group sizes and per-label instance quotas for one benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub group_label_counts: PerGroup,
    pub train_quota_per_label: PerGroup,
    pub dev_per_label: usize,
    pub test_per_label: usize,
    #[serde(default)]
    pub min_instances_per_label: usize,
    /// Adds the reserved "None" label to the zero group.
    #[serde(default)]
    pub includes_none: bool,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_quota_per_label.zero != 0 {
            return Err(Error::InvalidArgument("zero-shot train quota must be 0".into()));
        }
        if self.dev_per_label == 0 || self.test_per_label == 0 {
            return Err(Error::InvalidArgument("dev_per_label and test_per_label must be positive".into()));
        }
        Ok(())
    }

    pub fn required_for(&self, group: FrequencyGroup) -> usize {
        self.test_per_label + self.dev_per_label + self.train_quota_per_label.get(group)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    FewRel,
    Maven,
    Rams,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::FewRel, Preset::Maven, Preset::Rams];

    pub fn spec(self) -> SplitSpec {
        match self {
            Preset::FewRel => SplitSpec {
                group_label_counts: PerGroup::new(26, 26, 26),
                train_quota_per_label: PerGroup::new(500, 5, 0),
                dev_per_label: 200,
                test_per_label: 200,
                min_instances_per_label: 0,
                includes_none: false,
            },
            Preset::Maven => SplitSpec {
                group_label_counts: PerGroup::new(23, 23, 23),
                train_quota_per_label: PerGroup::new(300, 5, 0),
                dev_per_label: 100,
                test_per_label: 100,
                min_instances_per_label: 400,
                includes_none: true,
            },
            Preset::Rams => SplitSpec {
                group_label_counts: PerGroup::new(10, 10, 10),
                train_quota_per_label: PerGroup::new(300, 5, 0),
                dev_per_label: 50,
                test_per_label: 50,
                min_instances_per_label: 101,
                includes_none: false,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::FewRel => "fewrel",
            Preset::Maven => "maven",
            Preset::Rams => "rams",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fewrel" => Ok(Preset::FewRel),
            "maven" => Ok(Preset::Maven),
            "rams" => Ok(Preset::Rams),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedLabel {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub space: LabelSpace,
    /// Labels below `min_instances_per_label`.
    pub dropped: Vec<DroppedLabel>,
    /// Eligible labels left over after every group was filled.
    pub unassigned: Vec<String>,
}

/// Assigns eligible labels to frequency groups.
///
/// Eligible labels are taken in name order, shuffled with the derived
/// sub-seed and dealt out freq, few, zero. "None" is never shuffled; it is
/// appended to the zero group when the spec asks for it.
pub fn partition_labels(
    label_frequencies: &BTreeMap<String, usize>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<Partition> {
    let mut eligible = Vec::new();
    let mut dropped = Vec::new();
    for (label, &count) in label_frequencies {
        if label == NONE_LABEL {
            continue;
        }
        if count >= spec.min_instances_per_label {
            eligible.push(label.clone());
        } else {
            dropped.push(DroppedLabel {
                label: label.clone(),
                count,
            });
        }
    }

    let counts = spec.group_label_counts;
    let required = counts.total();
    if eligible.len() < required {
        return Err(Error::TooFewEligibleLabels {
            required,
            available: eligible.len(),
        });
    }

    let mut rng = seed::rng_for(seed, &format!("{SCOPE}/partition"));
    eligible.shuffle(&mut rng);

    let unassigned = eligible.split_off(required);
    let mut entries: Vec<LabelEntry> = eligible
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let group = if i < counts.freq {
                FrequencyGroup::Freq
            } else if i < counts.freq + counts.few {
                FrequencyGroup::Few
            } else {
                FrequencyGroup::Zero
            };
            LabelEntry { name, group }
        })
        .collect();
    if spec.includes_none {
        entries.push(LabelEntry {
            name: NONE_LABEL.to_string(),
            group: FrequencyGroup::Zero,
        });
    }

    Ok(Partition {
        space: LabelSpace::new(entries, spec.includes_none)?,
        dropped,
        unassigned,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortage {
    pub label: String,
    pub required: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub preset: Option<Preset>,
    pub spec: SplitSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XShotBenchmark {
    pub space: LabelSpace,
    pub train: Vec<RawInstance>,
    pub dev: Vec<RawInstance>,
    pub test: Vec<RawInstance>,
    pub provenance: Provenance,
}

/// Carves each label's instances into disjoint test/dev/train slices.
///
/// Instances whose gold label is outside `space` (dropped or unassigned
/// labels) and unlabeled instances are ignored. "None" is only carved when
/// the corpus actually contains None instances.
pub fn sample_split(
    instances: &[RawInstance],
    space: &LabelSpace,
    spec: &SplitSpec,
    seed: u64,
) -> Result<XShotBenchmark> {
    spec.validate()?;
    let mut by_label: HashMap<&str, Vec<&RawInstance>> = HashMap::new();
    for inst in instances {
        if let Some(label) = inst.gold_label.as_deref() {
            if space.contains(label) {
                by_label.entry(label).or_default().push(inst);
            }
        }
    }

    let mut shortages = Vec::new();
    let mut carved = Vec::with_capacity(space.len());
    for entry in space.entries() {
        let pool = by_label.remove(entry.name.as_str()).unwrap_or_default();
        if entry.name == NONE_LABEL && pool.is_empty() {
            continue;
        }
        let required = spec.required_for(entry.group);
        if pool.len() < required {
            shortages.push(Shortage {
                label: entry.name.clone(),
                required,
                available: pool.len(),
            });
            continue;
        }
        carved.push((entry, pool));
    }
    if !shortages.is_empty() {
        return Err(Error::LabelShortage(shortages));
    }

    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (entry, mut pool) in carved {
        let mut rng = seed::rng_for(seed, &format!("{SCOPE}/split/{}", entry.name));
        pool.shuffle(&mut rng);
        let t = spec.test_per_label;
        let d = spec.dev_per_label;
        let q = spec.train_quota_per_label.get(entry.group);
        test.extend(pool[..t].iter().map(|i| (*i).clone()));
        dev.extend(pool[t..t + d].iter().map(|i| (*i).clone()));
        train.extend(pool[t + d..t + d + q].iter().map(|i| (*i).clone()));
    }

    Ok(XShotBenchmark {
        space: space.clone(),
        train,
        dev,
        test,
        provenance: Provenance {
            seed,
            preset: None,
            spec: spec.clone(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub label: String,
    pub group: FrequencyGroup,
    pub available: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitTotals {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub preset: Option<Preset>,
    pub spec: SplitSpec,
    pub assignment: String,
    pub per_label: Vec<LabelCounts>,
    pub totals: SplitTotals,
    pub dropped_labels: Vec<DroppedLabel>,
    pub unassigned_labels: Vec<String>,
}

/// Where the freq/few/zero assignment comes from.
#[derive(Debug, Clone)]
pub enum Assignment {
    Seeded,
    /// An explicit label space overriding [`partition_labels`].
    Explicit(LabelSpace),
}

/// Reads a raw corpus, partitions, splits and writes the benchmark directory.
pub fn build_benchmark(
    dataset: &Path,
    spec: &SplitSpec,
    preset: Option<Preset>,
    seed: u64,
    assignment: &Assignment,
    out_dir: &Path,
) -> Result<BenchmarkManifest> {
    spec.validate()?;
    let instances: Vec<RawInstance> = io::read_jsonl(dataset)?;
    check_ids(&instances)?;

    let mut frequencies: BTreeMap<String, usize> = BTreeMap::new();
    for inst in &instances {
        if let Some(label) = &inst.gold_label {
            *frequencies.entry(label.clone()).or_default() += 1;
        }
    }

    let (space, dropped, unassigned, assignment_name) = match assignment {
        Assignment::Seeded => {
            let p = partition_labels(&frequencies, spec, seed)?;
            (p.space, p.dropped, p.unassigned, "seeded".to_string())
        }
        Assignment::Explicit(space) => (space.clone(), Vec::new(), Vec::new(), "explicit".to_string()),
    };

    let mut bench = sample_split(&instances, &space, spec, seed)?;
    bench.provenance.preset = preset;

    let per_label = space
        .entries()
        .iter()
        .map(|e| {
            let count = |split: &[RawInstance]| {
                split
                    .iter()
                    .filter(|i| i.gold_label.as_deref() == Some(e.name.as_str()))
                    .count()
            };
            LabelCounts {
                label: e.name.clone(),
                group: e.group,
                available: frequencies.get(&e.name).copied().unwrap_or(0),
                train: count(&bench.train),
                dev: count(&bench.dev),
                test: count(&bench.test),
            }
        })
        .collect();

    let manifest = BenchmarkManifest {
        seed,
        preset,
        spec: spec.clone(),
        assignment: assignment_name,
        per_label,
        totals: SplitTotals {
            train: bench.train.len(),
            dev: bench.dev.len(),
            test: bench.test.len(),
        },
        dropped_labels: dropped,
        unassigned_labels: unassigned,
    };
    bench.write(out_dir, &manifest)?;
    Ok(manifest)
}

fn check_ids(instances: &[RawInstance]) -> Result<()> {
    // Labels are not known yet; only identity invariants apply here.
    let open = LabelSpace::new(Vec::new(), false)?;
    let violations: Vec<_> = validate_dataset(instances, &open)
        .into_iter()
        .filter(|v| !matches!(v.kind, ViolationKind::UnknownLabel(_)))
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(violations))
    }
}

impl XShotBenchmark {
    pub fn write(&self, dir: &Path, manifest: &BenchmarkManifest) -> Result<()> {
        io::write_json(&dir.join(LABEL_SPACE_FILE), &self.space)?;
        io::write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        io::write_jsonl(&dir.join(DEV_FILE), &self.dev)?;
        io::write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        let gold: BTreeMap<&str, &str> = self
            .train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .filter_map(|i| Some((i.id.as_str(), i.gold_label.as_deref()?)))
            .collect();
        io::write_json(&dir.join(GOLD_MAP_FILE), &gold)?;
        io::write_json(&dir.join(MANIFEST_FILE), manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let space: LabelSpace = io::read_json(&dir.join(LABEL_SPACE_FILE))?;
        let manifest: BenchmarkManifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        Ok(XShotBenchmark {
            space,
            train: io::read_jsonl(&dir.join(TRAIN_FILE))?,
            dev: io::read_jsonl(&dir.join(DEV_FILE))?,
            test: io::read_jsonl(&dir.join(TEST_FILE))?,
            provenance: Provenance {
                seed: manifest.seed,
                preset: manifest.preset,
                spec: manifest.spec,
            },
        })
    }
}

pub fn load_space(dir: &Path) -> Result<LabelSpace> {
    io::read_json(&dir.join(LABEL_SPACE_FILE))
}
