//! Generation prompts for weak supervision of zero-shot labels, completion
//! parsing, and the in-context-learning baseline prompt.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{LabelSpace, RawInstance, NONE_LABEL};
use crate::scoring::{CompletionParams, Completer};
use crate::seed;
use crate::triplets::{render_with_label, RenderTemplate, TEXT_SOURCE};

const SCOPE: &str = "prompting";

/// Source of a schema field when rendering demonstrations.
pub const LABEL_SOURCE: &str = "label";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    /// `label`, `text`, or an anchor role.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WeakGenSpecWire")]
pub struct WeakGenSpec {
    pub field_schema: Vec<SchemaField>,
    pub demos_per_prompt: usize,
    pub instances_per_label: usize,
    pub max_retries: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WeakGenSpecWire {
    field_schema: Vec<SchemaField>,
    #[serde(default = "default_demos")]
    demos_per_prompt: usize,
    #[serde(default = "default_per_label")]
    instances_per_label: usize,
    #[serde(default = "default_retries")]
    max_retries: u32,
}

fn default_demos() -> usize {
    2
}
fn default_per_label() -> usize {
    5
}
fn default_retries() -> u32 {
    3
}

impl TryFrom<WeakGenSpecWire> for WeakGenSpec {
    type Error = Error;

    fn try_from(w: WeakGenSpecWire) -> Result<Self> {
        WeakGenSpec::new(w.field_schema, w.demos_per_prompt, w.instances_per_label, w.max_retries)
    }
}

fn fields(pairs: &[(&str, &str)]) -> Vec<SchemaField> {
    pairs
        .iter()
        .map(|(name, source)| SchemaField {
            name: name.to_string(),
            source: source.to_string(),
        })
        .collect()
}

impl WeakGenSpec {
    pub fn new(field_schema: Vec<SchemaField>, demos_per_prompt: usize, instances_per_label: usize, max_retries: u32) -> Result<Self> {
        match field_schema.first() {
            Some(f) if f.source == LABEL_SOURCE => {}
            _ => return Err(Error::InvalidArgument("the first schema field must be the label field".into())),
        }
        if field_schema.iter().skip(1).any(|f| f.source == LABEL_SOURCE) {
            return Err(Error::InvalidArgument("only the first schema field may carry the label".into()));
        }
        if instances_per_label == 0 {
            return Err(Error::InvalidArgument("instances_per_label must be at least 1".into()));
        }
        Ok(WeakGenSpec {
            field_schema,
            demos_per_prompt,
            instances_per_label,
            max_retries,
        })
    }

    /// Field schemas per dataset: `maven`, `fewrel` or `rams`.
    pub fn preset(name: &str) -> Option<WeakGenSpec> {
        let schema = match name {
            "maven" => fields(&[("event type", LABEL_SOURCE), ("event trigger", "trigger"), ("sentence", TEXT_SOURCE)]),
            "fewrel" => fields(&[
                ("relation", LABEL_SOURCE),
                ("entity 1", "entity1"),
                ("entity 2", "entity2"),
                ("sentence", TEXT_SOURCE),
            ]),
            "rams" => fields(&[
                ("role", LABEL_SOURCE),
                ("trigger", "trigger"),
                ("argument", "argument"),
                ("sentence", TEXT_SOURCE),
            ]),
            _ => return None,
        };
        WeakGenSpec::new(schema, default_demos(), default_per_label(), default_retries()).ok()
    }

    pub fn resolve(name_or_path: &str) -> Result<WeakGenSpec> {
        if let Some(s) = WeakGenSpec::preset(name_or_path) {
            return Ok(s);
        }
        io::read_json(Path::new(name_or_path))
    }

    pub fn label_field(&self) -> &SchemaField {
        &self.field_schema[0]
    }

    fn generated_fields(&self) -> &[SchemaField] {
        &self.field_schema[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakProvenance {
    pub prompt_hash: String,
    pub completion_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakInstance {
    pub label: String,
    pub fields: BTreeMap<String, String>,
    pub provenance: WeakProvenance,
}

impl WeakInstance {
    /// Standard instance record with the `weak` marker set.
    pub fn to_raw(&self, spec: &WeakGenSpec, id: String) -> RawInstance {
        let mut inst = RawInstance::new(id, "", Some(&self.label));
        inst.weak = true;
        for f in spec.generated_fields() {
            let Some(value) = self.fields.get(&f.name) else { continue };
            if f.source == TEXT_SOURCE {
                inst.text = value.clone();
            } else {
                inst.anchors.insert(f.source.clone(), value.clone());
            }
        }
        inst
    }
}

fn demo_value<'a>(inst: &'a RawInstance, field: &SchemaField) -> Result<&'a str> {
    match field.source.as_str() {
        LABEL_SOURCE => inst.gold_label.as_deref().ok_or_else(|| {
            Error::InvalidArgument(format!("demo {} has no gold label", inst.id))
        }),
        TEXT_SOURCE => Ok(&inst.text),
        role => inst.anchors.get(role).map(String::as_str).ok_or_else(|| Error::MissingAnchor {
            instance_id: inst.id.clone(),
            role: role.to_string(),
        }),
    }
}

/// Sampled demonstration blocks followed by a block holding only the label
/// field set to `zero_label`, which the completion model fills in.
pub fn build_weak_prompt(zero_label: &str, demo_pool: &[RawInstance], spec: &WeakGenSpec, seed: u64) -> Result<String> {
    if demo_pool.is_empty() {
        return Err(Error::InvalidArgument("weak-supervision demo pool is empty".into()));
    }
    let mut rng = seed::rng_for(seed, &format!("{SCOPE}/weak"));
    let n = spec.demos_per_prompt.min(demo_pool.len());
    let mut blocks = Vec::with_capacity(n + 1);
    for i in index::sample(&mut rng, demo_pool.len(), n) {
        let demo = &demo_pool[i];
        let mut lines = Vec::with_capacity(spec.field_schema.len());
        for field in &spec.field_schema {
            let value = demo_value(demo, field)?;
            lines.push(format!("{}: {}", field.name, value.split_whitespace().collect::<Vec<_>>().join(" ")));
        }
        blocks.push(lines.join("\n"));
    }
    blocks.push(format!("{}: {}", spec.label_field().name, zero_label));
    let mut prompt = blocks.join("\n\n");
    prompt.push('\n');
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub missing: Vec<String>,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "completion is missing field(s): {}", self.missing.join(", "))
    }
}

/// Finds each generated field as a `name: value` line (case-insensitive
/// name, first occurrence wins, order-independent).
pub fn parse_weak_completion(completion: &str, spec: &WeakGenSpec, zero_label: &str) -> Result<WeakInstance, ParseFailure> {
    let mut found = BTreeMap::new();
    let mut missing = Vec::new();
    for field in spec.generated_fields() {
        let key = field.name.to_lowercase();
        let value = completion.lines().find_map(|line| {
            let (name, value) = line.split_once(':')?;
            (name.trim().to_lowercase() == key).then(|| value.trim())
        });
        match value {
            Some(v) if !v.is_empty() => {
                found.insert(field.name.clone(), v.to_string());
            }
            _ => missing.push(field.name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(ParseFailure { missing });
    }
    Ok(WeakInstance {
        label: zero_label.to_string(),
        fields: found,
        provenance: WeakProvenance {
            prompt_hash: String::new(),
            completion_id: String::new(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub label: String,
    pub produced: usize,
    pub required: usize,
    pub attempts: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeakGeneration {
    pub instances: Vec<WeakInstance>,
    pub shortfalls: Vec<Shortfall>,
    pub backend_calls: usize,
}

/// Demo pool for weak generation: labeled freq/few instances only, so no
/// zero-shot gold reaches a prompt.
pub fn weak_demo_pool(train: &[RawInstance], space: &LabelSpace) -> Vec<RawInstance> {
    train
        .iter()
        .filter(|i| {
            i.gold_label
                .as_deref()
                .and_then(|l| space.group_of(l))
                .is_some_and(|g| g != crate::model::FrequencyGroup::Zero)
        })
        .cloned()
        .collect()
}

/// Each instance slot gets up to `1 + max_retries` build-complete-parse
/// attempts, each with a fresh sub-seed. Partial results are kept and
/// shortfalls reported per label.
pub fn generate_weak_instances(
    zero_labels: &[String],
    demo_pool: &[RawInstance],
    spec: &WeakGenSpec,
    backend: &dyn Completer,
    params: &CompletionParams,
    seed: u64,
) -> Result<WeakGeneration> {
    let mut out = WeakGeneration::default();
    for label in zero_labels {
        let mut produced = 0;
        let mut attempts: u32 = 0;
        for slot in 0..spec.instances_per_label {
            for retry in 0..=spec.max_retries {
                attempts += 1;
                let attempt_seed = seed::derive_seed(seed, &format!("{SCOPE}/{label}/{slot}/{retry}"));
                let prompt = build_weak_prompt(label, demo_pool, spec, attempt_seed)?;
                out.backend_calls += 1;
                let completion = backend.complete(&prompt, params).map_err(|e| Error::Generation {
                    label: label.clone(),
                    attempt: attempts,
                    source: Box::new(e),
                })?;
                if let Ok(mut weak) = parse_weak_completion(&completion, spec, label) {
                    weak.provenance = WeakProvenance {
                        prompt_hash: io::sha256_hex(prompt.as_bytes())[..16].to_string(),
                        completion_id: format!("{label}#{slot}.{retry}"),
                    };
                    out.instances.push(weak);
                    produced += 1;
                    break;
                }
            }
        }
        if produced < spec.instances_per_label {
            out.shortfalls.push(Shortfall {
                label: label.clone(),
                produced,
                required: spec.instances_per_label,
                attempts,
            });
        }
    }
    Ok(out)
}

/// Two positive demonstrations, one negative, then the test instance with
/// its candidate label and an open `Label:` line.
pub fn build_icl_prompt(
    test: &RawInstance,
    candidate: &str,
    demo_pool: &[RawInstance],
    space: &LabelSpace,
    tmpl: &RenderTemplate,
    seed: u64,
) -> Result<String> {
    let pool: Vec<&RawInstance> = demo_pool
        .iter()
        .filter(|i| i.gold_label.as_deref().is_some_and(|l| l != NONE_LABEL && space.contains(l)))
        .collect();
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "in-context prompt needs at least 2 labeled demos, pool has {}",
            pool.len()
        )));
    }
    let mut rng = seed::rng_for(seed, &format!("{SCOPE}/icl/{}", test.id));
    let take = pool.len().min(3);
    let picked = index::sample(&mut rng, pool.len(), take).into_vec();
    let (pos_a, pos_b) = (pool[picked[0]], pool[picked[1]]);
    let neg = pool[*picked.get(2).unwrap_or(&picked[0])];

    let neg_gold = neg.gold_label.as_deref().unwrap_or_default();
    let wrong: Vec<&str> = space.scored_labels().map(|e| e.name.as_str()).filter(|l| *l != neg_gold).collect();
    let wrong = wrong
        .choose(&mut rng)
        .ok_or_else(|| Error::InvalidArgument("label space has no alternative label for the negative demo".into()))?;

    let mut blocks = Vec::with_capacity(4);
    for demo in [pos_a, pos_b] {
        let gold = demo.gold_label.as_deref().unwrap_or_default();
        blocks.push(format!("{}\nLabel: Yes", render_with_label(demo, tmpl, gold)?));
    }
    blocks.push(format!("{}\nLabel: No", render_with_label(neg, tmpl, wrong)?));
    blocks.push(format!("{}\nLabel:", render_with_label(test, tmpl, candidate)?));
    Ok(blocks.join("\n\n"))
}

/// Zero-group labels of a space, excluding "None".
pub fn zero_labels(space: &LabelSpace) -> Vec<String> {
    space
        .members(crate::model::FrequencyGroup::Zero)
        .filter(|l| *l != NONE_LABEL)
        .map(str::to_owned)
        .collect()
}

/// Assigns stable ids to generated instances: `weak::<label>::<n>`.
pub fn weak_to_raw(weak: &[WeakInstance], spec: &WeakGenSpec) -> Vec<RawInstance> {
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut seen = HashSet::new();
    weak.iter()
        .map(|w| {
            let n = counters.entry(w.label.as_str()).or_default();
            let id = format!("weak::{}::{}", w.label, n);
            *n += 1;
            debug_assert!(seen.insert(id.clone()));
            w.to_raw(spec, id)
        })
        .collect()
}
