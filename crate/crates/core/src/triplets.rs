//! Conversion of classification instances into (instruction, input, label)
//! binary triplets.

use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{triplet_id, LabelSpace, Polarity, RawInstance, TripletExample, NONE_LABEL};
use crate::seed;

const SCOPE: &str = "triplet-builder";

/// Source value of one rendered field: the instance text or a named anchor.
pub const TEXT_SOURCE: &str = "text";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutField {
    pub label: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderTemplate {
    pub template_id: String,
    pub instruction: String,
    pub input_layout: Vec<LayoutField>,
    pub label_field_name: String,
}

fn layout(fields: &[(&str, &str)]) -> Vec<LayoutField> {
    fields
        .iter()
        .map(|(label, source)| LayoutField {
            label: label.to_string(),
            source: source.to_string(),
        })
        .collect()
}

const FEWREL_INSTRUCTIONS: [&str; 3] = [
    "Given a sentence about two entities, return a relation between the two entities that can be inferred from the sentence.",
    "Your task is to identify a relationship between two entities mentioned in a given sentence.",
    "Identify the relationship between two entities in a given sentence that can be inferred from the sentence.",
];

const MAVEN_INSTRUCTIONS: [&str; 3] = [
    "Given the sentence and the identified trigger word, determine the most appropriate event category for this trigger.",
    "Identify the event type in the sentence associated with the trigger word.",
    "Classify the event represented by the trigger word in the context of the following sentence.",
];

// Variants b and c are worded identically in the source material.
const RAMS_INSTRUCTIONS: [&str; 3] = [
    "Your task is to identify the role of a specified argument within a given sentence, in relation to an identified event trigger.",
    "Identify the role of the argument given the event trigger within the sentence.",
    "Identify the role of the argument given the event trigger within the sentence.",
];

pub const PRESET_IDS: [&str; 9] = [
    "fewrel-a", "fewrel-b", "fewrel-c", "maven-a", "maven-b", "maven-c", "rams-a", "rams-b", "rams-c",
];

impl RenderTemplate {
    /// One of the shipped templates: `fewrel-a` .. `rams-c`.
    pub fn preset(id: &str) -> Option<RenderTemplate> {
        let (dataset, variant) = id.split_once('-')?;
        let v = match variant {
            "a" => 0,
            "b" => 1,
            "c" => 2,
            _ => return None,
        };
        let (instructions, input_layout, label_field_name) = match dataset {
            "fewrel" => (
                &FEWREL_INSTRUCTIONS,
                layout(&[("Sentence", TEXT_SOURCE), ("Entity 1", "entity1"), ("Entity 2", "entity2")]),
                "Relation",
            ),
            "maven" => (
                &MAVEN_INSTRUCTIONS,
                layout(&[("Sentence", TEXT_SOURCE), ("Trigger", "trigger")]),
                "Event type",
            ),
            "rams" => (
                &RAMS_INSTRUCTIONS,
                layout(&[("Sentence", TEXT_SOURCE), ("Trigger", "trigger"), ("Argument", "argument")]),
                "Role",
            ),
            _ => return None,
        };
        Some(RenderTemplate {
            template_id: id.to_string(),
            instruction: instructions[v].to_string(),
            input_layout,
            label_field_name: label_field_name.to_string(),
        })
    }

    /// Resolves a preset id, or else reads a template JSON file.
    pub fn resolve(id_or_path: &str) -> Result<RenderTemplate> {
        if let Some(t) = RenderTemplate::preset(id_or_path) {
            return Ok(t);
        }
        let path = Path::new(id_or_path);
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{id_or_path:?} is neither a template preset ({}) nor a file",
                PRESET_IDS.join(", ")
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn clean(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the context lines of an instance, one `Field: value` per line.
/// The candidate label line is added by [`render_with_label`].
pub fn render_input(instance: &RawInstance, tmpl: &RenderTemplate) -> Result<String> {
    let mut lines = Vec::with_capacity(tmpl.input_layout.len());
    for field in &tmpl.input_layout {
        let value = if field.source == TEXT_SOURCE {
            &instance.text
        } else {
            instance
                .anchors
                .get(&field.source)
                .ok_or_else(|| Error::MissingAnchor {
                    instance_id: instance.id.clone(),
                    role: field.source.clone(),
                })?
        };
        lines.push(format!("{}: {}", field.label, clean(value)));
    }
    Ok(lines.join("\n"))
}

pub fn render_with_label(instance: &RawInstance, tmpl: &RenderTemplate, label: &str) -> Result<String> {
    let context = render_input(instance, tmpl)?;
    Ok(label_line(&context, tmpl, label))
}

fn label_line(context: &str, tmpl: &RenderTemplate, label: &str) -> String {
    if context.is_empty() {
        format!("{}: {}", tmpl.label_field_name, label)
    } else {
        format!("{context}\n{}: {}", tmpl.label_field_name, label)
    }
}

/// One unscored triplet per non-"None" label, in canonical order.
pub fn expand_for_evaluation(
    instance: &RawInstance,
    space: &LabelSpace,
    tmpl: &RenderTemplate,
) -> Result<Vec<TripletExample>> {
    let context = render_input(instance, tmpl)?;
    Ok(space
        .scored_labels()
        .map(|entry| TripletExample {
            triplet_id: triplet_id(&instance.id, &entry.name),
            instance_id: instance.id.clone(),
            instruction: tmpl.instruction.clone(),
            input: label_line(&context, tmpl, &entry.name),
            label: entry.name.clone(),
            polarity: Polarity::Unknown,
            group: entry.group,
        })
        .collect())
}

pub fn expand_split(
    instances: &[RawInstance],
    space: &LabelSpace,
    tmpl: &RenderTemplate,
) -> Result<Vec<TripletExample>> {
    let mut out = Vec::with_capacity(instances.len() * space.scored_len());
    for inst in instances {
        out.extend(expand_for_evaluation(inst, space, tmpl)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeMode {
    All,
    Sample(usize),
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(NegativeMode::All);
        }
        s.parse::<usize>()
            .map(NegativeMode::Sample)
            .map_err(|_| Error::InvalidArgument(format!("negatives must be \"all\" or an integer, got {s:?}")))
    }
}

/// Yes-triplet for each gold label plus all (or `k` sampled) other labels
/// as no-triplets. Output order is instance order, then canonical label order.
pub fn build_target_training_set(
    train: &[RawInstance],
    space: &LabelSpace,
    tmpl: &RenderTemplate,
    negatives: NegativeMode,
    seed: u64,
) -> Result<Vec<TripletExample>> {
    let labels: Vec<_> = space.scored_labels().collect();
    if let NegativeMode::Sample(k) = negatives {
        if k >= labels.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {k} negatives from a space of {} labels; use \"all\"",
                labels.len()
            )));
        }
    }

    let mut out = Vec::new();
    for inst in train {
        let gold = match inst.gold_label.as_deref() {
            Some(g) if g != NONE_LABEL => g,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "training instance {} needs a gold label other than \"None\"",
                    inst.id
                )))
            }
        };
        let gold_pos = labels.iter().position(|e| e.name == gold).ok_or_else(|| {
            Error::InvalidArgument(format!("gold label {gold:?} of {} is not in the label space", inst.id))
        })?;

        let mut keep = vec![matches!(negatives, NegativeMode::All); labels.len()];
        keep[gold_pos] = true;
        if let NegativeMode::Sample(k) = negatives {
            let mut rng = seed::rng_for(seed, &format!("{SCOPE}/{}", inst.id));
            for j in index::sample(&mut rng, labels.len() - 1, k) {
                let pos = if j >= gold_pos { j + 1 } else { j };
                keep[pos] = true;
            }
        }

        let context = render_input(inst, tmpl)?;
        for (entry, _) in labels.iter().zip(&keep).filter(|(_, k)| **k) {
            out.push(TripletExample {
                triplet_id: triplet_id(&inst.id, &entry.name),
                instance_id: inst.id.clone(),
                instruction: tmpl.instruction.clone(),
                input: label_line(&context, tmpl, &entry.name),
                label: entry.name.clone(),
                polarity: if entry.name == gold { Polarity::Yes } else { Polarity::No },
                group: entry.group,
            });
        }
    }
    Ok(out)
}
