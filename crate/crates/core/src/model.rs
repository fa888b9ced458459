//! Shared domain types and their JSON forms.
//!
//! All types are plain immutable values. Wire field names are fixed; see the
//! README for the record layouts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Reserved label meaning "no label in the space applies".
pub const NONE_LABEL: &str = "None";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyGroup {
    Freq,
    Few,
    Zero,
}

impl FrequencyGroup {
    pub const ALL: [FrequencyGroup; 3] = [FrequencyGroup::Freq, FrequencyGroup::Few, FrequencyGroup::Zero];

    pub fn as_str(self) -> &'static str {
        match self {
            FrequencyGroup::Freq => "freq",
            FrequencyGroup::Few => "few",
            FrequencyGroup::Zero => "zero",
        }
    }
}

impl fmt::Display for FrequencyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub group: FrequencyGroup,
}

/// Ordered label set. The order of `labels` is canonical and drives every
/// tie-break in the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceWire", into = "LabelSpaceWire")]
pub struct LabelSpace {
    entries: Vec<LabelEntry>,
    includes_none: bool,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSpaceWire {
    labels: Vec<LabelEntry>,
    includes_none: bool,
}

impl TryFrom<LabelSpaceWire> for LabelSpace {
    type Error = Error;

    fn try_from(wire: LabelSpaceWire) -> Result<Self> {
        LabelSpace::new(wire.labels, wire.includes_none)
    }
}

impl From<LabelSpace> for LabelSpaceWire {
    fn from(space: LabelSpace) -> Self {
        LabelSpaceWire {
            labels: space.entries,
            includes_none: space.includes_none,
        }
    }
}

impl PartialEq for LabelSpace {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.includes_none == other.includes_none
    }
}

impl LabelSpace {
    pub fn new(entries: Vec<LabelEntry>, includes_none: bool) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if entry.name.is_empty() {
                return Err(Error::InvalidLabelSpace(format!("label at position {i} has an empty name")));
            }
            if index.insert(entry.name.clone(), i).is_some() {
                return Err(Error::InvalidLabelSpace(format!("duplicate label {:?}", entry.name)));
            }
        }
        match (includes_none, index.get(NONE_LABEL)) {
            (true, None) => {
                return Err(Error::InvalidLabelSpace(
                    "includes_none is set but the \"None\" label is absent".into(),
                ))
            }
            (true, Some(&i)) if entries[i].group != FrequencyGroup::Zero => {
                return Err(Error::InvalidLabelSpace("\"None\" must belong to the zero group".into()))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidLabelSpace(
                    "\"None\" is reserved; set includes_none to use it".into(),
                ))
            }
            _ => {}
        }
        Ok(LabelSpace {
            entries,
            includes_none,
            index,
        })
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn includes_none(&self) -> bool {
        self.includes_none
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Labels that receive a triplet: every label except "None", in canonical order.
    pub fn scored_labels(&self) -> impl Iterator<Item = &LabelEntry> {
        self.entries.iter().filter(|e| e.name != NONE_LABEL)
    }

    pub fn scored_len(&self) -> usize {
        self.entries.len() - usize::from(self.includes_none)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn group_of(&self, label: &str) -> Option<FrequencyGroup> {
        self.position(label).map(|i| self.entries[i].group)
    }

    /// Group used when scoring a gold label. "None" counts as zero-shot even
    /// when it is not a member of the space.
    pub fn evaluation_group(&self, label: &str) -> Option<FrequencyGroup> {
        if label == NONE_LABEL {
            Some(FrequencyGroup::Zero)
        } else {
            self.group_of(label)
        }
    }

    pub fn members(&self, group: FrequencyGroup) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |e| e.group == group)
            .map(|e| e.name.as_str())
    }

    pub fn group_size(&self, group: FrequencyGroup) -> usize {
        self.members(group).count()
    }
}

/// One classification example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub id: String,
    pub text: String,
    pub anchors: BTreeMap<String, String>,
    #[serde(rename = "label", deserialize_with = "required_option")]
    pub gold_label: Option<String>,
    /// Set on machine-generated instances.
    #[serde(default, skip_serializing_if = "is_false")]
    pub weak: bool,
}

impl RawInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: Option<&str>) -> Self {
        RawInstance {
            id: id.into(),
            text: text.into(),
            anchors: BTreeMap::new(),
            gold_label: gold_label.map(str::to_owned),
            weak: false,
        }
    }

    pub fn with_anchor(mut self, role: impl Into<String>, span: impl Into<String>) -> Self {
        self.anchors.insert(role.into(), span.into());
        self
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Like `Option<T>`'s own impl, but a missing field is an error rather than `None`.
fn required_option<'de, D, T>(deserializer: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(deserializer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Yes,
    No,
    /// Evaluation-time triplet awaiting a score.
    Unknown,
}

impl Serialize for Polarity {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Polarity::Yes => serializer.serialize_str("yes"),
            Polarity::No => serializer.serialize_str("no"),
            Polarity::Unknown => serializer.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match Option::<String>::deserialize(deserializer)?.as_deref() {
            None => Ok(Polarity::Unknown),
            Some("yes") => Ok(Polarity::Yes),
            Some("no") => Ok(Polarity::No),
            Some(other) => Err(serde::de::Error::custom(format!(
                "polarity must be \"yes\", \"no\" or null, got {other:?}"
            ))),
        }
    }
}

fn required_polarity<'de, D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Polarity, D::Error> {
    Polarity::deserialize(deserializer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletExample {
    pub triplet_id: String,
    pub instance_id: String,
    pub instruction: String,
    pub input: String,
    pub label: String,
    #[serde(deserialize_with = "required_polarity")]
    pub polarity: Polarity,
    pub group: FrequencyGroup,
}

pub fn triplet_id(instance_id: &str, label: &str) -> String {
    format!("{instance_id}::{label}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaskInstanceWire")]
pub struct TaskInstance {
    pub id: String,
    pub input: String,
    pub outputs: Vec<String>,
}

#[derive(Deserialize)]
struct TaskInstanceWire {
    id: String,
    input: String,
    outputs: Vec<String>,
}

impl TryFrom<TaskInstanceWire> for TaskInstance {
    type Error = Error;

    fn try_from(w: TaskInstanceWire) -> Result<Self> {
        if w.outputs.is_empty() {
            return Err(Error::InvalidRecord(format!("task instance {} has no gold output", w.id)));
        }
        Ok(TaskInstance {
            id: w.id,
            input: w.input,
            outputs: w.outputs,
        })
    }
}

/// An instruction-tuning source task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub definition: String,
    pub positive_demos: Vec<Demo>,
    pub instances: Vec<TaskInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoreRecordWire")]
pub struct ScoreRecord {
    pub triplet_id: String,
    pub p_yes: f64,
}

#[derive(Deserialize)]
struct ScoreRecordWire {
    triplet_id: String,
    p_yes: f64,
}

impl TryFrom<ScoreRecordWire> for ScoreRecord {
    type Error = Error;
    fn try_from(w: ScoreRecordWire) -> Result<Self> {
        ScoreRecord::new(w.triplet_id, w.p_yes)
    }
}

pub fn check_probability(p: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::InvalidRecord(format!("p_yes {p} outside [0, 1]")))
    }
}

impl ScoreRecord {
    pub fn new(triplet_id: impl Into<String>, p_yes: f64) -> Result<Self> {
        let triplet_id = triplet_id.into();
        check_probability(p_yes).map_err(|_| {
            Error::InvalidRecord(format!("p_yes {p_yes} for {triplet_id} outside [0, 1]"))
        })?;
        Ok(ScoreRecord { triplet_id, p_yes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub assigned: String,
    pub max_score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub all: usize,
    pub freq: usize,
    pub few: usize,
    pub zero: usize,
}

impl GroupCounts {
    pub fn get(&self, group: FrequencyGroup) -> usize {
        match group {
            FrequencyGroup::Freq => self.freq,
            FrequencyGroup::Few => self.few,
            FrequencyGroup::Zero => self.zero,
        }
    }

    pub fn bump(&mut self, group: FrequencyGroup) {
        self.all += 1;
        match group {
            FrequencyGroup::Freq => self.freq += 1,
            FrequencyGroup::Few => self.few += 1,
            FrequencyGroup::Zero => self.zero += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionSlice {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
}

/// Grouped accuracies. A group accuracy is `null` when the group has no
/// test instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy_all: Option<f64>,
    pub accuracy_freq: Option<f64>,
    pub accuracy_few: Option<f64>,
    pub accuracy_zero: Option<f64>,
    pub accuracy_macro: Option<f64>,
    pub counts: GroupCounts,
    pub correct: GroupCounts,
    pub threshold_used: Option<f64>,
    pub template_id: Option<String>,
    pub confusion_slices: Vec<ConfusionSlice>,
}

impl EvaluationReport {
    pub fn accuracy(&self, group: FrequencyGroup) -> Option<f64> {
        match group {
            FrequencyGroup::Freq => self.accuracy_freq,
            FrequencyGroup::Few => self.accuracy_few,
            FrequencyGroup::Zero => self.accuracy_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    EmptyId,
    DuplicateId,
    UnknownLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub instance_id: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::EmptyId => write!(f, "instance with empty id"),
            ViolationKind::DuplicateId => write!(f, "{}: duplicate id", self.instance_id),
            ViolationKind::UnknownLabel(l) => {
                write!(f, "{}: gold label {l:?} is not in the label space", self.instance_id)
            }
        }
    }
}

/// Checks instance invariants against a label space. Empty result means valid.
pub fn validate_dataset(instances: &[RawInstance], space: &LabelSpace) -> Vec<Violation> {
    let mut seen = HashSet::with_capacity(instances.len());
    let mut violations = Vec::new();
    for inst in instances {
        if inst.id.is_empty() {
            violations.push(Violation {
                instance_id: String::new(),
                kind: ViolationKind::EmptyId,
            });
        } else if !seen.insert(inst.id.as_str()) {
            violations.push(Violation {
                instance_id: inst.id.clone(),
                kind: ViolationKind::DuplicateId,
            });
        }
        if let Some(label) = &inst.gold_label {
            if label != NONE_LABEL && !space.contains(label) {
                violations.push(Violation {
                    instance_id: inst.id.clone(),
                    kind: ViolationKind::UnknownLabel(label.clone()),
                });
            }
        }
    }
    violations
}
