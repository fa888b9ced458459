//! End-to-end runs driven by a TOML config, with a `run.json` manifest.
//!
//! Each stage reads and writes plain files under the output directory. A
//! stage whose inputs, config slice and outputs are unchanged since the last
//! recorded run is skipped, so repeating a run does no work.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::benchmark::{self, Assignment, Preset, SplitSpec, XShotBenchmark};
use crate::error::{Error, Result};
use crate::eval::{self, ScoreTable, ThresholdGrid, TuneOutcome};
use crate::indirect::{self, NegativeSource, ScheduleMode, DEFAULT_CAP, DEFAULT_FILTER_K, DEFAULT_MAX_WORDS};
use crate::io;
use crate::model::{EvaluationReport, LabelSpace, RawInstance, ScoreRecord, TaskRecord, TripletExample};
use crate::prompting::{self, WeakGenSpec, WeakInstance};
use crate::scoring::{
    self, BackendConfig, BackendKind, BatchOptions, CompletionParams, Completer, Embedder, ScoreCache, Scorer,
};
use crate::triplets::{self, NegativeMode, RenderTemplate};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Split,
    Weakgen,
    Triplets,
    Indirect,
    Score,
    Tune,
    Eval,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 7] = [
        Stage::Split,
        Stage::Weakgen,
        Stage::Triplets,
        Stage::Indirect,
        Stage::Score,
        Stage::Tune,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Weakgen => "weakgen",
            Stage::Triplets => "triplets",
            Stage::Indirect => "indirect",
            Stage::Score => "score",
            Stage::Tune => "tune",
            Stage::Eval => "eval",
        }
    }

    /// Parses `all` or a comma-separated list.
    pub fn parse_list(s: &str) -> Result<BTreeSet<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.into_iter().collect());
        }
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// SplitSpec JSON; overrides the preset's spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    /// Label space JSON fixing the freq/few/zero assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<PathBuf>,
}

/// A backend given inline or as a shorthand (URL, mock name, config path).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendRef {
    Spec(String),
    Inline(BackendConfig),
}

impl BackendRef {
    pub fn resolve(&self) -> Result<BackendConfig> {
        match self {
            BackendRef::Spec(s) => BackendConfig::resolve(s),
            BackendRef::Inline(c) => Ok(c.clone()),
        }
    }

    fn rebase(&mut self, base: &Path) {
        match self {
            BackendRef::Spec(s) => {
                let looks_like_file = !s.contains("://") && !matches!(s.as_str(), "hash-mock" | "echo-mock");
                if looks_like_file && Path::new(s).is_relative() {
                    *s = base.join(&*s).to_string_lossy().into_owned();
                }
            }
            BackendRef::Inline(c) => {
                for p in [&mut c.score_path, &mut c.gold_map, &mut c.cache_dir].into_iter().flatten() {
                    rebase_path(p, base);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<BackendRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<BackendRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<BackendRef>,
}

fn default_negatives() -> String {
    "all".into()
}
fn default_grid() -> String {
    "0.5:1.0:0.01".into()
}
fn default_top_k() -> usize {
    10
}
fn default_cap() -> usize {
    DEFAULT_CAP
}
fn default_max_words() -> usize {
    DEFAULT_MAX_WORDS
}
fn default_filter_k() -> usize {
    DEFAULT_FILTER_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletsConfig {
    /// `all` or the number of sampled negatives per training instance.
    #[serde(default = "default_negatives")]
    pub negatives: String,
}

impl Default for TripletsConfig {
    fn default() -> Self {
        TripletsConfig { negatives: default_negatives() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default = "default_grid")]
    pub grid: String,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { grid: default_grid() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: default_top_k() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakgenConfig {
    /// Schema preset name or JSON path; defaults to the dataset preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_label: Option<usize>,
    #[serde(default)]
    pub params: CompletionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndirectConfig {
    pub tasks: PathBuf,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    /// Number of most similar tasks to drop; needs `target_instruction`.
    #[serde(default = "default_filter_k")]
    pub filter_similar: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_instruction: Option<PathBuf>,
    #[serde(default)]
    pub negative_source: NegativeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// Template preset id or JSON path; defaults to `<preset>-a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub triplets: TripletsConfig,
    #[serde(default)]
    pub threshold: ThresholdConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub weakgen: WeakgenConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indirect: Option<IndirectConfig>,
}

fn rebase_path(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a TOML config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        rebase_path(&mut self.out_dir, base);
        rebase_path(&mut self.dataset.path, base);
        for p in [&mut self.dataset.spec, &mut self.dataset.assignment].into_iter().flatten() {
            rebase_path(p, base);
        }
        if let Some(t) = &mut self.template {
            if RenderTemplate::preset(t).is_none() && Path::new(t).is_relative() {
                *t = base.join(&*t).to_string_lossy().into_owned();
            }
        }
        if let Some(s) = &mut self.weakgen.schema {
            if WeakGenSpec::preset(s).is_none() && Path::new(s).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
        for b in [&mut self.backends.score, &mut self.backends.complete, &mut self.backends.embed]
            .into_iter()
            .flatten()
        {
            b.rebase(base);
        }
        if let Some(ind) = &mut self.indirect {
            rebase_path(&mut ind.tasks, base);
            if let Some(t) = &mut ind.target_instruction {
                rebase_path(t, base);
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let spec = match (&self.dataset.spec, self.dataset.preset) {
            (Some(path), _) => io::read_json(path)?,
            (None, Some(p)) => p.spec(),
            (None, None) => return Err(Error::Config("dataset needs a preset or a spec file".into())),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn template_ref(&self) -> Result<String> {
        match (&self.template, self.dataset.preset) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(p)) => Ok(format!("{}-a", p.name())),
            (None, None) => Err(Error::Config("no template given and no dataset preset to default from".into())),
        }
    }

    /// Stages this config can run: every stage, minus weakgen without a
    /// completion backend or schema and indirect without its section.
    pub fn configured_stages(&self) -> BTreeSet<Stage> {
        let weak = self.backends.complete.is_some() && (self.weakgen.schema.is_some() || self.dataset.preset.is_some());
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Weakgen => weak,
                Stage::Indirect => self.indirect.is_some(),
                _ => true,
            })
            .collect()
    }

    fn weak_spec(&self) -> Result<WeakGenSpec> {
        let name = match (&self.weakgen.schema, self.dataset.preset) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => p.name().to_string(),
            (None, None) => return Err(Error::Config("weakgen needs a schema".into())),
        };
        let mut spec = WeakGenSpec::resolve(&name)?;
        if let Some(n) = self.weakgen.per_label {
            spec = WeakGenSpec::new(spec.field_schema, spec.demos_per_prompt, n, spec.max_retries)?;
        }
        Ok(spec)
    }
}

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn benchmark(&self) -> PathBuf {
        self.root.join("benchmark")
    }
    pub fn bench_file(&self, name: &str) -> PathBuf {
        self.benchmark().join(name)
    }
    pub fn weak_instances(&self) -> PathBuf {
        self.root.join("weak").join("weak.jsonl")
    }
    pub fn weak_raw(&self) -> PathBuf {
        self.root.join("weak").join("raw.jsonl")
    }
    pub fn triplets(&self, split: &str) -> PathBuf {
        self.root.join("triplets").join(format!("{split}.jsonl"))
    }
    pub fn indirect_pairs(&self) -> PathBuf {
        self.root.join("indirect").join("pairs.jsonl")
    }
    pub fn indirect_stats(&self) -> PathBuf {
        self.root.join("indirect").join("stats.json")
    }
    pub fn scores(&self, split: &str) -> PathBuf {
        self.root.join("scores").join(format!("{split}.jsonl"))
    }
    pub fn tune(&self) -> PathBuf {
        self.root.join("tune.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(RUN_MANIFEST)
    }

    /// Files whose presence shows a stage has produced its output.
    fn markers(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Split => vec![
                self.bench_file(benchmark::LABEL_SPACE_FILE),
                self.bench_file(benchmark::TRAIN_FILE),
                self.bench_file(benchmark::DEV_FILE),
                self.bench_file(benchmark::TEST_FILE),
            ],
            Stage::Weakgen => vec![self.weak_raw()],
            Stage::Triplets => vec![self.triplets("dev"), self.triplets("test")],
            Stage::Indirect => vec![self.indirect_pairs()],
            Stage::Score => vec![self.scores("dev"), self.scores("test")],
            Stage::Tune => vec![self.tune()],
            Stage::Eval => vec![self.report()],
        }
    }

    fn present(&self, stage: Stage) -> bool {
        self.markers(stage).iter().all(|p| p.exists())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Digest over the stage's config slice and input digests.
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Every distinct warning from every stage, in first-seen order.
    pub warnings: Vec<String>,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Backends injected in place of the configured ones.
#[derive(Default)]
pub struct Backends<'a> {
    pub scorer: Option<&'a dyn Scorer>,
    pub completer: Option<&'a dyn Completer>,
    pub embedder: Option<&'a dyn Embedder>,
}

pub fn run_pipeline(cfg: &RunConfig, stages: &BTreeSet<Stage>) -> Result<RunManifest> {
    run_pipeline_with(cfg, stages, &Backends::default())
}

/// Runs the requested stages in order. Unmet dependencies and missing input
/// files are reported before any stage starts.
pub fn run_pipeline_with(cfg: &RunConfig, stages: &BTreeSet<Stage>, backends: &Backends) -> Result<RunManifest> {
    let layout = Layout::new(&cfg.out_dir);
    check_plan(cfg, stages, &layout)?;
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;

    let previous: Option<RunManifest> = match layout.manifest().exists() {
        true => io::read_json(&layout.manifest()).ok(),
        false => None,
    };
    let mut prev_records: HashMap<Stage, StageRecord> = previous
        .map(|m| m.stages.into_iter().map(|s| (s.stage, s)).collect())
        .unwrap_or_default();

    let mut memo = DigestMemo::default();
    let mut records = Vec::new();
    for &stage in stages {
        let started = Instant::now();
        let (slice, input_paths) = stage_inputs(cfg, stage, &layout, backends)?;
        let inputs = memo.digest_files(&input_paths, &layout.root)?;
        let fingerprint = io::sha256_hex(
            &serde_json::to_vec(&json!({"stage": stage, "config": slice, "inputs": inputs})).expect("serializes"),
        );
        let reusable = prev_records
            .remove(&stage)
            .filter(|p| p.fingerprint == fingerprint && memo.unchanged(&p.outputs, &layout.root).unwrap_or(false));
        let record = match reusable {
            Some(prev) => {
                log::info!("stage {stage}: unchanged, skipped");
                StageRecord {
                    status: StageStatus::Skipped,
                    backend_calls: 0,
                    cache_hits: 0,
                    elapsed_ms: started.elapsed().as_millis(),
                    ..prev
                }
            }
            None => {
                log::info!("stage {stage}: running");
                let out = run_stage(cfg, stage, &layout, backends)?;
                StageRecord {
                    stage,
                    status: StageStatus::Ran,
                    fingerprint,
                    inputs,
                    outputs: memo.digest_files(&out.outputs, &layout.root)?,
                    warnings: dedup(out.warnings),
                    backend_calls: out.backend_calls,
                    cache_hits: out.cache_hits,
                    elapsed_ms: started.elapsed().as_millis(),
                }
            }
        };
        records.push(record);
    }

    // Stages not requested this time keep their previous entries.
    let mut all: Vec<StageRecord> = records.into_iter().chain(prev_records.into_values()).collect();
    all.sort_by_key(|r| r.stage);
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        warnings: dedup(all.iter().flat_map(|r| r.warnings.iter().cloned()).collect()),
        backend_calls: all.iter().filter(|r| r.status == StageStatus::Ran).map(|r| r.backend_calls).sum(),
        cache_hits: all.iter().filter(|r| r.status == StageStatus::Ran).map(|r| r.cache_hits).sum(),
        stages: all,
    };
    io::write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|w| seen.insert(w.clone())).collect()
}

fn dependencies(cfg: &RunConfig, stage: Stage) -> Vec<Stage> {
    let includes_none = cfg.split_spec().map(|s| s.includes_none).unwrap_or(false);
    match stage {
        Stage::Split | Stage::Indirect => vec![],
        Stage::Weakgen | Stage::Triplets => vec![Stage::Split],
        Stage::Score => vec![Stage::Triplets],
        Stage::Tune => vec![Stage::Score],
        Stage::Eval if includes_none => vec![Stage::Score, Stage::Tune],
        Stage::Eval => vec![Stage::Score],
    }
}

fn check_plan(cfg: &RunConfig, stages: &BTreeSet<Stage>, layout: &Layout) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no stages requested".into()));
    }
    let mut unmet = Vec::new();
    for &stage in stages {
        for dep in dependencies(cfg, stage) {
            if !stages.contains(&dep) && !layout.present(dep) {
                unmet.push(format!("{stage} needs {dep} output (not requested and not found in {})", layout.root.display()));
            }
        }
    }
    if !unmet.is_empty() {
        return Err(Error::Dependency(unmet.join("; ")));
    }

    let mut missing = Vec::new();
    let mut need = |p: &Path| {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    };
    if stages.contains(&Stage::Split) {
        need(&cfg.dataset.path);
        cfg.dataset.spec.as_deref().map(&mut need);
        cfg.dataset.assignment.as_deref().map(&mut need);
    }
    if stages.contains(&Stage::Indirect) {
        match &cfg.indirect {
            Some(ind) => {
                need(&ind.tasks);
                ind.target_instruction.as_deref().map(&mut need);
            }
            None => return Err(Error::Config("indirect stage requested without an [indirect] section".into())),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing input file(s): {}", missing.join(", "))));
    }
    if stages.contains(&Stage::Split) {
        cfg.split_spec()?;
    }
    if stages.iter().any(|s| matches!(s, Stage::Triplets | Stage::Tune | Stage::Eval)) {
        RenderTemplate::resolve(&cfg.template_ref()?)?;
    }
    cfg.threshold.grid.parse::<ThresholdGrid>()?;
    cfg.triplets.negatives.parse::<NegativeMode>()?;
    Ok(())
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// File digests remembered for the length of one run, keyed by path, size
/// and modification time, so large artifacts are hashed once.
#[derive(Default)]
struct DigestMemo {
    known: HashMap<(PathBuf, u64, Option<std::time::SystemTime>), String>,
}

impl DigestMemo {
    fn digest(&mut self, path: &Path) -> Result<String> {
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        let key = (path.to_path_buf(), meta.len(), meta.modified().ok());
        if let Some(d) = self.known.get(&key) {
            return Ok(d.clone());
        }
        let d = io::file_digest(path)?;
        self.known.insert(key, d.clone());
        Ok(d)
    }

    fn digest_files(&mut self, paths: &[PathBuf], root: &Path) -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((relative(p, root), self.digest(p)?)))
            .collect()
    }

    fn unchanged(&mut self, outputs: &BTreeMap<String, String>, root: &Path) -> Result<bool> {
        for (name, digest) in outputs {
            let p = root.join(name);
            if !p.exists() || self.digest(&p)? != *digest {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn score_config(cfg: &RunConfig, layout: &Layout) -> Result<BackendConfig> {
    let mut b = cfg
        .backends
        .score
        .as_ref()
        .ok_or_else(|| Error::Config("score stage needs backends.score".into()))?
        .resolve()?;
    if b.kind == BackendKind::OracleMock && b.gold_map.is_none() {
        b.gold_map = Some(layout.bench_file(benchmark::GOLD_MAP_FILE));
    }
    if b.kind.is_remote() && b.cache_dir.is_none() {
        b.cache_dir = Some(layout.cache());
    }
    Ok(b)
}

fn backend_slice(r: &Option<BackendRef>) -> Result<Value> {
    Ok(match r {
        Some(r) => serde_json::to_value(r.resolve()?).expect("serializes"),
        None => Value::Null,
    })
}

/// Config slice and input files that determine one stage's output.
fn stage_inputs(cfg: &RunConfig, stage: Stage, layout: &Layout, backends: &Backends) -> Result<(Value, Vec<PathBuf>)> {
    let bench = |names: &[&str]| names.iter().map(|n| layout.bench_file(n)).collect::<Vec<_>>();
    Ok(match stage {
        Stage::Split => {
            let mut files = vec![cfg.dataset.path.clone()];
            files.extend(cfg.dataset.spec.clone());
            files.extend(cfg.dataset.assignment.clone());
            (json!({"seed": cfg.seed, "preset": cfg.dataset.preset, "spec": cfg.split_spec()?}), files)
        }
        Stage::Weakgen => {
            let completer = match backends.completer {
                Some(_) => json!("injected"),
                None => backend_slice(&cfg.backends.complete)?,
            };
            (
                json!({"seed": cfg.seed, "spec": cfg.weak_spec()?, "params": cfg.weakgen.params, "backend": completer}),
                bench(&[benchmark::LABEL_SPACE_FILE, benchmark::TRAIN_FILE]),
            )
        }
        Stage::Triplets => {
            let mut files = bench(&[
                benchmark::LABEL_SPACE_FILE,
                benchmark::TRAIN_FILE,
                benchmark::DEV_FILE,
                benchmark::TEST_FILE,
            ]);
            if layout.weak_raw().exists() {
                files.push(layout.weak_raw());
            }
            let tmpl = RenderTemplate::resolve(&cfg.template_ref()?)?;
            (json!({"seed": cfg.seed, "template": tmpl, "negatives": cfg.triplets.negatives}), files)
        }
        Stage::Indirect => {
            let ind = cfg.indirect.as_ref().ok_or_else(|| Error::Config("missing [indirect] section".into()))?;
            let mut files = vec![ind.tasks.clone()];
            files.extend(ind.target_instruction.clone());
            let embed = match (backends.embedder, ind.target_instruction.is_some()) {
                (_, false) => Value::Null,
                (Some(_), true) => json!("injected"),
                (None, true) => backend_slice(&cfg.backends.embed)?,
            };
            (json!({"seed": cfg.seed, "indirect": ind, "embed": embed}), files)
        }
        Stage::Score => {
            let identity = match backends.scorer {
                Some(s) => json!({"injected": s.identity()}),
                None => serde_json::to_value(score_config(cfg, layout)?).expect("serializes"),
            };
            let mut files = vec![layout.triplets("dev"), layout.triplets("test")];
            let gold = layout.bench_file(benchmark::GOLD_MAP_FILE);
            if backends.scorer.is_none() && score_config(cfg, layout)?.gold_map.as_deref() == Some(gold.as_path()) {
                files.push(gold);
            }
            (json!({"backend": identity}), files)
        }
        Stage::Tune => (
            json!({"grid": cfg.threshold.grid, "template": cfg.template_ref()?}),
            vec![
                layout.bench_file(benchmark::LABEL_SPACE_FILE),
                layout.bench_file(benchmark::DEV_FILE),
                layout.scores("dev"),
            ],
        ),
        Stage::Eval => {
            let mut files = vec![
                layout.bench_file(benchmark::LABEL_SPACE_FILE),
                layout.bench_file(benchmark::TEST_FILE),
                layout.scores("test"),
            ];
            if layout.tune().exists() {
                files.push(layout.tune());
            }
            (json!({"top_k": cfg.eval.top_k, "template": cfg.template_ref()?}), files)
        }
    })
}

#[derive(Default)]
struct StageOutput {
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    backend_calls: usize,
    cache_hits: usize,
}

fn run_stage(cfg: &RunConfig, stage: Stage, layout: &Layout, backends: &Backends) -> Result<StageOutput> {
    match stage {
        Stage::Split => stage_split(cfg, layout),
        Stage::Weakgen => stage_weakgen(cfg, layout, backends),
        Stage::Triplets => stage_triplets(cfg, layout),
        Stage::Indirect => stage_indirect(cfg, layout, backends),
        Stage::Score => stage_score(cfg, layout, backends),
        Stage::Tune => stage_tune(cfg, layout),
        Stage::Eval => stage_eval(cfg, layout),
    }
}

fn stage_split(cfg: &RunConfig, layout: &Layout) -> Result<StageOutput> {
    let spec = cfg.split_spec()?;
    let assignment = match &cfg.dataset.assignment {
        Some(p) => Assignment::Explicit(io::read_json::<LabelSpace>(p)?),
        None => Assignment::Seeded,
    };
    let dir = layout.benchmark();
    let manifest = benchmark::build_benchmark(&cfg.dataset.path, &spec, cfg.dataset.preset, cfg.seed, &assignment, &dir)?;
    let mut warnings = Vec::new();
    if !manifest.dropped_labels.is_empty() {
        warnings.push(format!(
            "split: {} label(s) below {} instances dropped",
            manifest.dropped_labels.len(),
            spec.min_instances_per_label
        ));
    }
    if !manifest.unassigned_labels.is_empty() {
        warnings.push(format!("split: {} eligible label(s) left unassigned", manifest.unassigned_labels.len()));
    }
    let outputs = [
        benchmark::LABEL_SPACE_FILE,
        benchmark::TRAIN_FILE,
        benchmark::DEV_FILE,
        benchmark::TEST_FILE,
        benchmark::GOLD_MAP_FILE,
        benchmark::MANIFEST_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    Ok(StageOutput { outputs, warnings, ..Default::default() })
}

fn stage_weakgen(cfg: &RunConfig, layout: &Layout, backends: &Backends) -> Result<StageOutput> {
    let space = benchmark::load_space(&layout.benchmark())?;
    let train: Vec<RawInstance> = io::read_jsonl(&layout.bench_file(benchmark::TRAIN_FILE))?;
    let spec = cfg.weak_spec()?;
    let owned;
    let completer: &dyn Completer = match backends.completer {
        Some(c) => c,
        None => {
            let b = cfg
                .backends
                .complete
                .as_ref()
                .ok_or_else(|| Error::Config("weakgen stage needs backends.complete".into()))?
                .resolve()?;
            owned = b.completer()?;
            owned.as_ref()
        }
    };
    let pool = prompting::weak_demo_pool(&train, &space);
    let labels = prompting::zero_labels(&space);
    let generation = prompting::generate_weak_instances(&labels, &pool, &spec, completer, &cfg.weakgen.params, cfg.seed)?;
    let warnings = generation
        .shortfalls
        .iter()
        .map(|s| {
            format!(
                "weakgen: label {:?} produced {} of {} instances after {} attempts",
                s.label, s.produced, s.required, s.attempts
            )
        })
        .collect();
    io::write_jsonl::<WeakInstance, _>(&layout.weak_instances(), &generation.instances)?;
    io::write_jsonl(&layout.weak_raw(), &prompting::weak_to_raw(&generation.instances, &spec))?;
    Ok(StageOutput {
        outputs: vec![layout.weak_instances(), layout.weak_raw()],
        warnings,
        backend_calls: generation.backend_calls,
        cache_hits: 0,
    })
}

fn stage_triplets(cfg: &RunConfig, layout: &Layout) -> Result<StageOutput> {
    let bench = XShotBenchmark::load(&layout.benchmark())?;
    let tmpl = RenderTemplate::resolve(&cfg.template_ref()?)?;
    let negatives: NegativeMode = cfg.triplets.negatives.parse()?;
    let mut train = bench.train.clone();
    if layout.weak_raw().exists() {
        train.extend(io::read_jsonl::<RawInstance>(&layout.weak_raw())?);
    }
    let train_triplets = triplets::build_target_training_set(&train, &bench.space, &tmpl, negatives, cfg.seed)?;
    io::write_jsonl(&layout.triplets("train"), &train_triplets)?;
    drop(train_triplets);
    for (name, split) in [("dev", &bench.dev), ("test", &bench.test)] {
        let t = triplets::expand_split(split, &bench.space, &tmpl)?;
        io::write_jsonl(&layout.triplets(name), &t)?;
    }
    Ok(StageOutput {
        outputs: vec![layout.triplets("train"), layout.triplets("dev"), layout.triplets("test")],
        ..Default::default()
    })
}

fn stage_indirect(cfg: &RunConfig, layout: &Layout, backends: &Backends) -> Result<StageOutput> {
    let ind = cfg.indirect.as_ref().ok_or_else(|| Error::Config("missing [indirect] section".into()))?;
    let mut tasks: Vec<TaskRecord> = io::read_jsonl(&ind.tasks)?;
    let mut warnings = Vec::new();
    let mut backend_calls = 0;
    let mut removed = Vec::new();
    if let (Some(target_path), true) = (&ind.target_instruction, ind.filter_similar > 0) {
        let target = std::fs::read_to_string(target_path).map_err(|e| Error::io(target_path, e))?;
        let owned;
        let embedder: &dyn Embedder = match backends.embedder {
            Some(e) => e,
            None => {
                let b = cfg
                    .backends
                    .embed
                    .as_ref()
                    .ok_or_else(|| Error::Config("similar-task filtering needs backends.embed".into()))?
                    .resolve()?;
                owned = b.embedder()?;
                owned.as_ref()
            }
        };
        let mut texts: Vec<String> = tasks.iter().map(|t| t.definition.clone()).collect();
        texts.push(target.trim().to_string());
        let mut vectors = scoring::embed_with(embedder, &texts)?;
        backend_calls += 1;
        let target_vec = vectors.pop().expect("target embedded");
        let outcome = indirect::filter_similar_tasks(&tasks, &vectors, &target_vec, ind.filter_similar)?;
        tasks = outcome.kept;
        removed = outcome.removed;
    }
    let data = indirect::build_indirect_dataset(&tasks, ind.cap, ind.max_words, cfg.seed, ind.negative_source)?;
    warnings.extend(data.warnings.iter().map(|w| format!("indirect: {w}")));
    let schedule = match ind.schedule {
        Some(mode) => {
            let s = indirect::build_ablation_schedule(mode, tasks.len())?;
            warnings.extend(s.warning.iter().map(|w| format!("indirect: {w}")));
            Some(s.points)
        }
        None => None,
    };
    io::write_jsonl(&layout.indirect_pairs(), &data.pairs)?;
    io::write_json(
        &layout.indirect_stats(),
        &json!({
            "stats": data.stats,
            "per_task": data.per_task,
            "removed_similar": removed,
            "schedule": schedule,
        }),
    )?;
    Ok(StageOutput {
        outputs: vec![layout.indirect_pairs(), layout.indirect_stats()],
        warnings,
        backend_calls,
        cache_hits: 0,
    })
}

fn stage_score(cfg: &RunConfig, layout: &Layout, backends: &Backends) -> Result<StageOutput> {
    let (owned, opts, cache) = match backends.scorer {
        Some(_) => {
            let opts = match &cfg.backends.score {
                Some(r) => r.resolve()?.batch_options(),
                None => BatchOptions::default(),
            };
            (None, opts, None)
        }
        None => {
            let b = score_config(cfg, layout)?;
            let cache = match (&b.cache_dir, b.kind.is_remote()) {
                (Some(dir), true) => Some(ScoreCache::open(dir)?),
                _ => None,
            };
            (Some(b.scorer()?), b.batch_options(), cache)
        }
    };
    let scorer: &dyn Scorer = match (backends.scorer, &owned) {
        (Some(s), _) => s,
        (None, Some(s)) => s.as_ref(),
        (None, None) => unreachable!("a scorer is always built"),
    };
    let mut out = StageOutput::default();
    for split in ["dev", "test"] {
        let triplets: Vec<TripletExample> = io::read_jsonl(&layout.triplets(split))?;
        let scored = scoring::score_with(scorer, &triplets, &opts, cache.as_ref())?;
        drop(triplets);
        io::write_jsonl(&layout.scores(split), &scored.scores)?;
        out.backend_calls += scored.backend_calls;
        out.cache_hits += scored.cache_hits;
        out.outputs.push(layout.scores(split));
    }
    Ok(out)
}

fn load_table(layout: &Layout, split: &str, space: &LabelSpace) -> Result<(Vec<RawInstance>, ScoreTable)> {
    let file = if split == "dev" { benchmark::DEV_FILE } else { benchmark::TEST_FILE };
    let instances: Vec<RawInstance> = io::read_jsonl(&layout.bench_file(file))?;
    let scores: Vec<ScoreRecord> = io::read_jsonl(&layout.scores(split))?;
    let ids: Vec<String> = instances.iter().map(|i| i.id.clone()).collect();
    let table = ScoreTable::build(&scores, space, &ids)?;
    Ok((instances, table))
}

/// Contents of `tune.json`; `threshold` is absent for spaces without "None".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub threshold: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub grid: ThresholdGrid,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Reads a threshold given either as a number or a `tune.json` path.
pub fn read_threshold(arg: &str) -> Result<Option<f64>> {
    if let Ok(t) = arg.parse::<f64>() {
        return Ok(Some(t));
    }
    Ok(io::read_json::<TuneRecord>(Path::new(arg))?.threshold)
}

pub fn tune_from_files(
    space: &LabelSpace,
    dev: &[RawInstance],
    table: &ScoreTable,
    grid: &ThresholdGrid,
    template_id: &str,
) -> Result<TuneRecord> {
    if !space.includes_none() {
        return Ok(TuneRecord {
            threshold: None,
            dev_accuracy: None,
            grid: *grid,
            template_id: template_id.to_string(),
            warning: Some("label space has no \"None\"; no threshold is applied".into()),
        });
    }
    let gold: HashMap<String, String> = dev
        .iter()
        .filter_map(|i| Some((i.id.clone(), i.gold_label.clone()?)))
        .collect();
    let TuneOutcome { threshold, accuracy, warning, .. } = eval::tune_threshold(table, &gold, space, grid)?;
    Ok(TuneRecord {
        threshold: Some(threshold),
        dev_accuracy: Some(accuracy),
        grid: *grid,
        template_id: template_id.to_string(),
        warning,
    })
}

fn stage_tune(cfg: &RunConfig, layout: &Layout) -> Result<StageOutput> {
    let space = benchmark::load_space(&layout.benchmark())?;
    let grid: ThresholdGrid = cfg.threshold.grid.parse()?;
    let tmpl = RenderTemplate::resolve(&cfg.template_ref()?)?;
    let (dev, table) = load_table(layout, "dev", &space)?;
    let record = tune_from_files(&space, &dev, &table, &grid, &tmpl.template_id)?;
    io::write_json(&layout.tune(), &record)?;
    Ok(StageOutput {
        outputs: vec![layout.tune()],
        warnings: record.warning.iter().map(|w| format!("tune: {w}")).collect(),
        ..Default::default()
    })
}

pub fn evaluate_from_files(
    space: &LabelSpace,
    test: &[RawInstance],
    table: &ScoreTable,
    threshold: Option<f64>,
    template_id: Option<String>,
) -> Result<EvaluationReport> {
    let predictions = eval::assign_labels(table, space, threshold);
    let gold: BTreeMap<String, String> = test
        .iter()
        .filter_map(|i| Some((i.id.clone(), i.gold_label.clone()?)))
        .collect();
    let mut report = eval::evaluate(&predictions, &gold, space)?;
    report.threshold_used = threshold.filter(|_| space.includes_none());
    report.template_id = template_id;
    Ok(report)
}

fn stage_eval(cfg: &RunConfig, layout: &Layout) -> Result<StageOutput> {
    let space = benchmark::load_space(&layout.benchmark())?;
    let tmpl = RenderTemplate::resolve(&cfg.template_ref()?)?;
    let threshold = match layout.tune().exists() {
        true => io::read_json::<TuneRecord>(&layout.tune())?.threshold,
        false => None,
    };
    let (test, table) = load_table(layout, "test", &space)?;
    let report = evaluate_from_files(&space, &test, &table, threshold, Some(tmpl.template_id.clone()))?;
    io::write_json(&layout.report(), &report)?;
    let name = cfg.dataset.preset.map_or("run", Preset::name);
    let text = format!(
        "{}\n{}",
        eval::render_table(&report, name),
        eval::render_confusion(&eval::confusion_report(&report, &space, cfg.eval.top_k))
    );
    std::fs::write(layout.report_text(), text).map_err(|e| Error::io(layout.report_text(), e))?;
    Ok(StageOutput {
        outputs: vec![layout.report(), layout.report_text()],
        ..Default::default()
    })
}
