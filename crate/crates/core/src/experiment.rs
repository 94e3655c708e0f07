//! Declarative experiments: one TOML file drives victim training, serving,
//! extraction, attribute inference and the defense sweep, and the results
//! land in CSV files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aia::{run_aia, AiaSettings, AttributeKind, AttributeTarget, PrivacyReport, DEFAULT_HIDDEN};
use crate::corpus::{generate_synthetic, load_jsonl, split, Dataset, SplitSpec, SynthConfig};
use crate::hashing::derive_seed;
use crate::mea::{
    build_transfer_set, evaluate_extraction, run_extraction, sample_queries, ExtractionReport,
    QueryPlan, SAME_DOMAIN,
};
use crate::metrics::{
    max_posterior_stats, privacy_by_sharpness, spearman, SharpnessBin, SharpnessStats,
    SHARPNESS_BINS,
};
use crate::modeling::{
    init_pretrained, train_with_history, Encoder, EncoderConfig, Model, Posterior, PretrainConfig,
    TrainConfig,
};
use crate::par::{self, Exec};
use crate::victim_api::{
    BudgetLedger, DefenseConfig, HttpClient, HttpServer, InProcessClient,
    VictimService,
};
use crate::{Error, Result};

/// Version written into every CSV row; bump on any column change.
pub const SCHEMA_VERSION: u32 = 1;

const ATTACKER: &str = "attacker";

fn default_batch() -> usize {
    64
}

fn default_aux_fraction() -> f64 {
    0.10
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

fn default_bins() -> usize {
    SHARPNESS_BINS
}

fn default_min_count() -> usize {
    20
}

fn default_source() -> String {
    SAME_DOMAIN.into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Synthetic,
    Jsonl,
}

/// The task corpus. Synthetic corpora draw `test_docs` extra documents from
/// the same generator for the held-out test split; JSONL corpora name a
/// separate test file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub synth: Option<SynthConfig>,
    pub test_docs: Option<usize>,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

/// A corpus given either as a generator config or as a JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub synth: Option<SynthConfig>,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub synth: Option<SynthConfig>,
    pub path: Option<PathBuf>,
}

impl SourceSpec {
    fn corpus(&self) -> CorpusSource {
        CorpusSource {
            synth: self.synth.clone(),
            path: self.path.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSettings {
    #[serde(default = "default_aux_fraction")]
    pub aux_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            aux_fraction: default_aux_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    #[serde(default = "default_pretrain_buckets")]
    pub buckets: usize,
    pub learning_rate: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSource,
}

fn default_pretrain_buckets() -> usize {
    64
}

fn default_pretrain_batch() -> usize {
    32
}

impl PretrainSettings {
    fn config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            buckets: self.buckets,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AiaConfig {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default = "default_source")]
    pub source: String,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessSettings {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Bins with fewer evaluated records are left out of the privacy curve.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

impl Default for SharpnessSettings {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            min_count: default_min_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default = "default_batch")]
    pub query_batch_size: usize,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub split: SplitSettings,
    pub pretrain: PretrainSettings,
    pub victim: RoleConfig,
    pub attacker: RoleConfig,
    pub aia: AiaConfig,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub queries: Vec<QuerySpec>,
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub attributes: Vec<AttributeTarget>,
    #[serde(default)]
    pub sharpness: SharpnessSettings,
}

/// One validation finding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn issues_error(issues: &[ConfigIssue]) -> Error {
    Error::Config(
        issues
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Maps dotted key paths (`defenses[1].tau`) to source lines.
struct LineIndex {
    keys: Vec<(String, usize)>,
}

impl LineIndex {
    fn new(text: &str) -> Self {
        let mut keys = Vec::new();
        let mut table = String::new();
        let mut counters: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let n = i + 1;
            if let Some(name) = line.strip_prefix("[[").and_then(|s| s.split("]]").next()) {
                let name = name.trim().to_string();
                let c = counters.entry(name.clone()).or_insert(0);
                table = format!("{name}[{c}]");
                *c += 1;
                keys.push((table.clone(), n));
            } else if let Some(name) = line.strip_prefix('[').and_then(|s| s.split(']').next()) {
                let name = name.trim();
                // a sub-table of the latest array element, e.g. [victim.encoder]
                table = match counters.keys().find(|k| name.starts_with(&format!("{k}."))) {
                    Some(arr) => {
                        let idx = counters[arr] - 1;
                        format!("{arr}[{idx}]{}", &name[arr.len()..])
                    }
                    None => name.to_string(),
                };
                keys.push((table.clone(), n));
            } else if let Some((key, _)) = line.split_once('=') {
                let key = key.trim().trim_matches('"');
                if !key.is_empty() && !line.starts_with('#') {
                    let full = if table.is_empty() {
                        key.to_string()
                    } else {
                        format!("{table}.{key}")
                    };
                    keys.push((full, n));
                }
            }
        }
        Self { keys }
    }

    /// Line of `path`, or of its longest present prefix.
    fn line_of(&self, path: &str) -> Option<usize> {
        let mut probe = path.to_string();
        loop {
            if let Some((_, n)) = self.keys.iter().find(|(k, _)| *k == probe) {
                return Some(*n);
            }
            let cut = probe.rfind(['.', '['])?;
            probe.truncate(cut);
        }
    }
}

struct Checker<'a> {
    issues: Vec<ConfigIssue>,
    index: Option<&'a LineIndex>,
}

impl Checker<'_> {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        let path = path.into();
        let line = self.index.and_then(|ix| ix.line_of(&path));
        self.issues.push(ConfigIssue {
            line,
            path,
            message: message.into(),
        });
    }

    fn check(&mut self, path: impl Into<String>, r: Result<()>) {
        if let Err(e) = r {
            self.push(path, strip_kind(&e));
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Validation(m) => m.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Parse and validate; every issue found is reported.
    pub fn parse(text: &str, base_dir: &Path) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            vec![ConfigIssue {
                line,
                path: String::new(),
                message: e.message().trim().to_string(),
            }]
        })?;
        cfg.resolve_paths(base_dir);
        let index = LineIndex::new(text);
        let issues = cfg.issues(Some(&index));
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(issues)
        }
    }

    /// Read, parse and validate a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![ConfigIssue {
                line: None,
                path: path.display().to_string(),
                message: e.to_string(),
            }]
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues(None);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues_error(&issues))
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.corpus.path, &mut self.corpus.test_path, &mut self.pretrain.corpus.path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for s in &mut self.sources {
            if let Some(p) = &mut s.path {
                fix(p);
            }
        }
    }

    fn issues(&self, index: Option<&LineIndex>) -> Vec<ConfigIssue> {
        let mut c = Checker {
            issues: Vec::new(),
            index,
        };
        if self.seeds.is_empty() {
            c.push("seeds", "empty");
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                c.push("seeds", format!("duplicate seed {s}"));
            }
        }
        if self.query_batch_size == 0 {
            c.push("query_batch_size", "must be >= 1");
        }
        self.check_corpus(&mut c);
        if !(self.split.aux_fraction > 0.0 && self.split.aux_fraction < 1.0) {
            c.push("split.aux_fraction", "must lie in (0, 1)");
        }
        c.check("pretrain", self.pretrain.config().validate());
        check_source(&mut c, "pretrain.corpus", &self.pretrain.corpus);
        for (role, rc) in [("victim", &self.victim), ("attacker", &self.attacker)] {
            c.check(format!("{role}.encoder"), rc.encoder.validate());
            c.check(format!("{role}.train"), rc.train.validate());
        }
        if self.aia.hidden == 0 {
            c.push("aia.hidden", "must be >= 1");
        }
        c.check("aia.train", self.aia.train.validate());

        let mut names = std::collections::BTreeSet::from([SAME_DOMAIN.to_string()]);
        for (i, s) in self.sources.iter().enumerate() {
            let path = format!("sources[{i}]");
            if !names.insert(s.name.clone()) {
                c.push(format!("{path}.name"), format!("duplicate source `{}`", s.name));
            }
            check_source(&mut c, &path, &s.corpus());
        }
        if self.queries.is_empty() {
            c.push("queries", "empty");
        }
        for (i, q) in self.queries.iter().enumerate() {
            if !names.contains(&q.source) {
                c.push(format!("queries[{i}].source"), format!("unknown source `{}`", q.source));
            }
            if !(q.multiplier > 0.0 && q.multiplier.is_finite()) {
                c.push(format!("queries[{i}].multiplier"), "must be > 0");
            }
        }
        if self.defenses.is_empty() {
            c.push("defenses", "empty");
        }
        for (i, d) in self.defenses.iter().enumerate() {
            c.check(format!("defenses[{i}]"), d.validate());
        }
        let mut attr_names = std::collections::BTreeSet::new();
        for (i, a) in self.attributes.iter().enumerate() {
            if !attr_names.insert(a.name.as_str()) {
                c.push(format!("attributes[{i}].name"), format!("duplicate attribute `{}`", a.name));
            }
            if let Some(synth) = &self.corpus.synth {
                if !synth.attributes.iter().any(|s| s.name == a.name) {
                    c.push(
                        format!("attributes[{i}].name"),
                        format!("synthetic corpus does not generate `{}`", a.name),
                    );
                }
            }
        }
        if self.sharpness.bins == 0 {
            c.push("sharpness.bins", "must be >= 1");
        }
        c.issues
    }

    fn check_corpus(&self, c: &mut Checker) {
        let spec = &self.corpus;
        match spec.kind {
            CorpusKind::Synthetic => {
                match &spec.synth {
                    Some(s) => c.check("corpus.synth", s.validate()),
                    None => c.push("corpus.synth", "required for a synthetic corpus"),
                }
                match spec.test_docs {
                    Some(n) if n > 0 => {}
                    _ => c.push("corpus.test_docs", "required and >= 1 for a synthetic corpus"),
                }
                if spec.path.is_some() || spec.test_path.is_some() {
                    c.push("corpus", "path/test_path only apply to jsonl corpora");
                }
            }
            CorpusKind::Jsonl => {
                for (key, p) in [("corpus.path", &spec.path), ("corpus.test_path", &spec.test_path)] {
                    match p {
                        Some(p) if p.is_file() => {}
                        Some(p) => c.push(key, format!("file not found: {}", p.display())),
                        None => c.push(key, "required for a jsonl corpus"),
                    }
                }
                if spec.synth.is_some() || spec.test_docs.is_some() {
                    c.push("corpus", "synth/test_docs only apply to synthetic corpora");
                }
            }
        }
    }
}

fn check_source(c: &mut Checker, path: &str, src: &CorpusSource) {
    match (&src.synth, &src.path) {
        (Some(s), None) => c.check(format!("{path}.synth"), s.validate()),
        (None, Some(p)) if p.is_file() => {}
        (None, Some(p)) => c.push(format!("{path}.path"), format!("file not found: {}", p.display())),
        _ => c.push(path.to_string(), "exactly one of `synth` or `path` is required"),
    }
}

/// Seed of component `label` in trial `seed`.
fn trial_seed(base: u64, seed: u64, label: &str) -> u64 {
    derive_seed(derive_seed(base, label), &seed.to_string())
}

fn with_seed(s: &SynthConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..s.clone()
    }
}

fn load_source(src: &CorpusSource, seed: u64, label: &str) -> Result<Dataset> {
    match (&src.synth, &src.path) {
        (Some(s), _) => generate_synthetic(&with_seed(s, trial_seed(s.seed, seed, label))),
        (None, Some(p)) => load_jsonl(p),
        (None, None) => Err(Error::Config(format!("{label}: no corpus given"))),
    }
}

/// Everything one seed's rows share.
struct Trial {
    seed: u64,
    aux: Dataset,
    victim_train: Dataset,
    test: Dataset,
    sources: BTreeMap<String, Dataset>,
    victim: Arc<Model>,
    victim_losses: Vec<f64>,
}

/// Task documents and held-out test split for `seed`.
pub fn trial_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.corpus.kind {
        CorpusKind::Synthetic => {
            let synth = cfg
                .corpus
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("corpus.synth missing".into()))?;
            let test_docs = cfg.corpus.test_docs.unwrap_or(0);
            let all = generate_synthetic(&SynthConfig {
                num_docs: synth.num_docs + test_docs,
                seed: trial_seed(synth.seed, seed, "corpus"),
                ..synth.clone()
            })?;
            let idx: Vec<usize> = (0..all.len()).collect();
            let (task, test) = idx.split_at(synth.num_docs);
            Ok((all.subset(task), all.subset(test)))
        }
        CorpusKind::Jsonl => {
            let path = cfg.corpus.path.as_ref().ok_or_else(|| Error::Config("corpus.path missing".into()))?;
            let test = cfg
                .corpus
                .test_path
                .as_ref()
                .ok_or_else(|| Error::Config("corpus.test_path missing".into()))?;
            Ok((load_jsonl(path)?, load_jsonl(test)?))
        }
    }
}

/// Pretrained encoders keyed by their config, computed once per run.
struct Pretrained {
    victim: Encoder,
    attacker: Encoder,
}

fn pretrain(cfg: &ExperimentConfig) -> Result<Pretrained> {
    let public = load_source(&cfg.pretrain.corpus, 0, "pretrain")?;
    let pcfg = cfg.pretrain.config();
    let victim = init_pretrained(&cfg.victim.encoder, &public, &pcfg)?;
    let attacker = if cfg.attacker.encoder == cfg.victim.encoder {
        victim.clone()
    } else {
        init_pretrained(&cfg.attacker.encoder, &public, &pcfg)?
    };
    Ok(Pretrained { victim, attacker })
}

fn prepare_trial(cfg: &ExperimentConfig, pre: &Pretrained, seed: u64, exec: Exec) -> std::result::Result<Trial, StageError> {
    let data = |e: Error| StageError::new("data", e);
    let (task, test) = trial_corpus(cfg, seed).map_err(data)?;
    let parts = split(
        &task,
        &SplitSpec {
            aux_fraction: cfg.split.aux_fraction,
            seed: trial_seed(0, seed, "split"),
        },
    )
    .map_err(data)?;
    let mut sources = BTreeMap::from([(SAME_DOMAIN.to_string(), parts.query)]);
    for s in &cfg.sources {
        let ds = load_source(&s.corpus(), seed, &format!("source/{}", s.name)).map_err(data)?;
        sources.insert(s.name.clone(), ds);
    }
    let k = task.num_classes();
    let init = Model::from_encoder(pre.victim.clone(), k).map_err(|e| StageError::new("victim", e))?;
    let targets: Vec<(String, Posterior)> = parts
        .victim
        .documents()
        .iter()
        .map(|d| (d.text.clone(), Posterior::one_hot(d.label, k)))
        .collect();
    let tc = cfg.victim.train.with_seed(trial_seed(cfg.victim.train.seed, seed, "victim"));
    let trained = train_with_history(&init, &targets, &tc, exec).map_err(|e| StageError::new("victim", e))?;
    Ok(Trial {
        seed,
        aux: parts.aux,
        victim_train: parts.victim,
        test,
        sources,
        victim: Arc::new(trained.model),
        victim_losses: trained.epoch_losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl StageError {
    fn new(stage: &'static str, e: Error) -> Self {
        Self {
            stage,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

/// Identifies one row: defense × query plan × seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RowKey {
    pub defense_index: usize,
    pub plan_index: usize,
    pub seed: u64,
    pub defense: String,
    pub source: String,
    pub multiplier: f64,
}

impl RowKey {
    fn sort_key(&self) -> (usize, usize, u64) {
        (self.defense_index, self.plan_index, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowMetrics {
    pub queries: usize,
    pub utility: f64,
    pub extraction: ExtractionReport,
    pub privacy: PrivacyReport,
    /// Max-posterior summary of the answers the attacker received.
    pub query_sharpness: SharpnessStats,
    /// Attack outcome on D_V binned by the victim's max posterior.
    pub privacy_bins: Vec<SharpnessBin>,
    pub victim_final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub key: RowKey,
    pub outcome: std::result::Result<RowMetrics, StageError>,
}

impl RowResult {
    pub fn metrics(&self) -> Option<&RowMetrics> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub num_classes: usize,
    pub rows: Vec<RowResult>,
    /// Trained victim of every seed whose data and training succeeded.
    pub victims: Vec<(u64, Arc<Model>)>,
}

impl ExperimentReport {
    /// Successful rows matching a defense label and plan.
    pub fn select<'a>(
        &'a self,
        defense: &'a str,
        source: &'a str,
        multiplier: f64,
    ) -> impl Iterator<Item = &'a RowMetrics> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.key.defense == defense && r.key.source == source && r.key.multiplier == multiplier)
            .filter_map(RowResult::metrics)
    }

    /// Mean of `f` over the seeds of one (defense, plan) cell.
    pub fn mean(
        &self,
        defense: &str,
        source: &str,
        multiplier: f64,
        f: impl Fn(&RowMetrics) -> f64,
    ) -> Option<f64> {
        let xs: Vec<f64> = self.select(defense, source, multiplier).map(f).collect();
        (!xs.is_empty()).then(|| crate::metrics::mean(&xs))
    }

    pub fn failures(&self) -> impl Iterator<Item = &RowResult> {
        self.rows.iter().filter(|r| r.outcome.is_err())
    }
}

/// Runtime knobs that do not change results.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Overrides the config's transport when set.
    pub transport: Option<Transport>,
}

fn trial_defense(d: &DefenseConfig, seed: u64) -> DefenseConfig {
    DefenseConfig {
        noise_seed: trial_seed(d.noise_seed, seed, "noise"),
        ..d.clone()
    }
}

fn run_row(
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    trial: &Trial,
    defense: &DefenseConfig,
    plan_spec: &QuerySpec,
    transport: Transport,
    exec: Exec,
) -> std::result::Result<RowMetrics, StageError> {
    let seed = trial.seed;
    let k = trial.victim.num_classes();
    let plan = QueryPlan {
        source: plan_spec.source.clone(),
        multiplier: plan_spec.multiplier,
        seed: trial_seed(0, seed, &format!("queries/{}", plan_spec.source)),
    };
    let serve = |e| StageError::new("serve", e);
    let defense = trial_defense(defense, seed);
    let m = plan.query_count(trial.victim_train.len()).map_err(|e| StageError::new("query", e))?;
    let mut ledger = BudgetLedger::new();
    ledger.register(ATTACKER, m as u64);
    // The HTTP handler must not wait on the rayon pool that the blocked
    // client call is occupying.
    let service_exec = match transport {
        Transport::InProcess => exec,
        Transport::Http => Exec::Sequential,
    };
    let service = Arc::new(
        VictimService::new(trial.victim.clone(), defense.clone(), ledger)
            .map_err(serve)?
            .with_exec(service_exec),
    );
    let measurement = service.measurement();
    let utility = measurement
        .defended_accuracy(&defense, &trial.test.texts(), &trial.test.labels(), exec)
        .map_err(|e| StageError::new("evaluate", e))?;

    let sample = sample_queries(&plan, trial.victim_train.len(), &trial.sources)
        .map_err(|e| StageError::new("query", e))?;
    let mut ts = match transport {
        Transport::InProcess => {
            let client = InProcessClient::new(service.clone(), ATTACKER);
            build_transfer_set(&sample.texts, &client, k, cfg.query_batch_size)
        }
        Transport::Http => {
            let server = HttpServer::spawn(service.clone(), ([127, 0, 0, 1], 0).into()).map_err(serve)?;
            let client = HttpClient::new(&server.url(), ATTACKER);
            let ts = build_transfer_set(&sample.texts, &client, k, cfg.query_batch_size);
            drop(server);
            ts
        }
    }
    .map_err(|e| StageError::new("query", e))?;
    ts.plan = Some(plan.clone());
    ts.defense = Some(defense.clone());
    ts.with_replacement = sample.with_replacement;

    let tc = cfg.attacker.train.with_seed(trial_seed(cfg.attacker.train.seed, seed, "extract"));
    let extracted = run_extraction(&ts, &pre.attacker, k, &tc).map_err(|e| StageError::new("extract", e))?;
    let extraction = evaluate_extraction(&extracted, &measurement, &ts, &trial.test, exec)
        .map_err(|e| StageError::new("evaluate", e))?;
    let query_sharpness = max_posterior_stats(&ts.targets()).map_err(|e| StageError::new("evaluate", e))?;

    let plain = Model::from_encoder(pre.attacker.clone(), k).map_err(|e| StageError::new("aia", e))?;
    let settings = AiaSettings {
        train: cfg.aia.train.with_seed(trial_seed(cfg.aia.train.seed, seed, "aia")),
        hidden: cfg.aia.hidden,
    };
    let privacy = run_aia(
        &extracted,
        &plain,
        &trial.aux,
        &trial.victim_train,
        &cfg.attributes,
        &settings,
        exec,
    )
    .map_err(|e| StageError::new("aia", e))?;

    let eval_max: Vec<f64> = measurement
        .posteriors(&trial.victim_train.texts(), exec)
        .iter()
        .map(Posterior::max_prob)
        .collect();
    let mut probs = Vec::new();
    let mut hits = Vec::new();
    for a in privacy.attributes.iter().filter(|a| a.kind == AttributeKind::Demographic) {
        for &(i, ok) in &a.per_record {
            probs.push(eval_max[i]);
            hits.push(ok);
        }
    }
    let privacy_bins = privacy_by_sharpness(&probs, &hits, k, cfg.sharpness.bins, cfg.sharpness.min_count);
    Ok(RowMetrics {
        queries: m,
        utility,
        extraction,
        privacy,
        query_sharpness,
        privacy_bins,
        victim_final_loss: trial.victim_losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Run every (defense, query plan, seed) row. Stage failures are recorded
/// on their rows; the run continues.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let exec = opts.exec;
    let transport = opts.transport.unwrap_or(cfg.transport);
    let pre = pretrain(cfg)?;
    let trials: Vec<std::result::Result<Trial, StageError>> =
        par::map(exec, &cfg.seeds, |&seed| prepare_trial(cfg, &pre, seed, exec));
    let num_classes = trials
        .iter()
        .flatten()
        .map(|t| t.victim.num_classes())
        .next()
        .unwrap_or(0);

    let mut jobs = Vec::new();
    for (ti, &seed) in cfg.seeds.iter().enumerate() {
        for (di, d) in cfg.defenses.iter().enumerate() {
            for (pi, q) in cfg.queries.iter().enumerate() {
                jobs.push((
                    ti,
                    RowKey {
                        defense_index: di,
                        plan_index: pi,
                        seed,
                        defense: d.label(),
                        source: q.source.clone(),
                        multiplier: q.multiplier,
                    },
                ));
            }
        }
    }
    let mut rows: Vec<RowResult> = par::map(exec, &jobs, |(ti, key)| {
        let outcome = match &trials[*ti] {
            Err(e) => Err(e.clone()),
            Ok(trial) => run_row(
                cfg,
                &pre,
                trial,
                &cfg.defenses[key.defense_index],
                &cfg.queries[key.plan_index],
                transport,
                exec,
            ),
        };
        RowResult {
            key: key.clone(),
            outcome,
        }
    });
    rows.sort_by_key(|r| r.key.sort_key());
    let victims = trials.iter().flatten().map(|t| (t.seed, t.victim.clone())).collect();
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        num_classes,
        rows,
        victims,
    })
}

/// Write synthetic corpora of every seed (task, test, sources) and the
/// public pretraining corpus as JSONL under `out_dir`.
pub fn synth_corpora(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, ds: &Dataset| -> Result<()> {
        let p = out_dir.join(name);
        ds.write_jsonl(&p)?;
        written.push(p);
        Ok(())
    };
    if cfg.pretrain.corpus.synth.is_some() {
        emit("pretrain.jsonl".into(), &load_source(&cfg.pretrain.corpus, 0, "pretrain")?)?;
    }
    for &seed in &cfg.seeds {
        if cfg.corpus.kind == CorpusKind::Synthetic {
            let (task, test) = trial_corpus(cfg, seed)?;
            emit(format!("corpus_seed{seed}.jsonl"), &task)?;
            emit(format!("test_seed{seed}.jsonl"), &test)?;
        }
        for s in cfg.sources.iter().filter(|s| s.synth.is_some()) {
            let ds = load_source(&s.corpus(), seed, &format!("source/{}", s.name))?;
            emit(format!("source_{}_seed{seed}.jsonl", s.name), &ds)?;
        }
    }
    Ok(written)
}

fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn key_fields(k: &RowKey) -> Vec<String> {
    vec![
        SCHEMA_VERSION.to_string(),
        k.defense.clone(),
        k.source.clone(),
        num(k.multiplier),
        k.seed.to_string(),
    ]
}

fn status_fields(r: &RowResult) -> Vec<String> {
    match &r.outcome {
        Ok(_) => vec!["ok".into(), String::new(), String::new()],
        Err(e) => vec!["error".into(), e.stage.into(), e.message.clone()],
    }
}

const KEY_COLUMNS: [&str; 5] = ["schema_version", "defense", "source", "multiplier", "seed"];
const STATUS_COLUMNS: [&str; 3] = ["status", "stage", "error"];

fn header(extra: &[&str]) -> Vec<String> {
    KEY_COLUMNS
        .iter()
        .chain(STATUS_COLUMNS.iter())
        .chain(extra.iter())
        .map(|s| s.to_string())
        .collect()
}

fn blank(n: usize) -> Vec<String> {
    vec![String::new(); n]
}

pub const MEA_COLUMNS: [&str; 10] = [
    "queries",
    "queries_spent",
    "truncated",
    "with_replacement",
    "victim_accuracy",
    "extracted_accuracy",
    "agreement",
    "overlap_unigram",
    "overlap_5gram",
    "victim_final_loss",
];

pub const AIA_COLUMNS: [&str; 13] = [
    "attribute",
    "kind",
    "evaluated",
    "attribute_std",
    "privacy_extracted",
    "privacy_plain",
    "privacy_majority",
    "score_extracted",
    "score_plain",
    "score_majority",
    "degenerate_extracted",
    "degenerate_plain",
    "degenerate_majority",
];

pub const SWEEP_COLUMNS: [&str; 7] = [
    "utility",
    "mea_agreement",
    "mea_accuracy",
    "victim_accuracy",
    "aia_privacy",
    "query_maxprob_mean",
    "query_maxprob_median",
];

pub const SHARPNESS_COLUMNS: [&str; 6] = [
    "bin",
    "bin_center",
    "query_count",
    "eval_count",
    "eval_privacy",
    "num_classes",
];

/// Render the four report tables as CSV strings keyed by file name.
pub fn render_csvs(report: &ExperimentReport) -> Result<BTreeMap<&'static str, String>> {
    let mut out = BTreeMap::new();
    let mut mea = csv::Writer::from_writer(Vec::new());
    let mut aia = csv::Writer::from_writer(Vec::new());
    let mut sweep = csv::Writer::from_writer(Vec::new());
    let mut sharp = csv::Writer::from_writer(Vec::new());
    mea.write_record(header(&MEA_COLUMNS))?;
    aia.write_record(header(&AIA_COLUMNS))?;
    sweep.write_record(header(&SWEEP_COLUMNS))?;
    sharp.write_record(header(&SHARPNESS_COLUMNS))?;
    let k = report.num_classes;
    for r in &report.rows {
        let mut base = key_fields(&r.key);
        base.extend(status_fields(r));
        let Some(m) = r.metrics() else {
            let row = |n| base.iter().cloned().chain(blank(n)).collect::<Vec<_>>();
            mea.write_record(row(MEA_COLUMNS.len()))?;
            aia.write_record(row(AIA_COLUMNS.len()))?;
            sweep.write_record(row(SWEEP_COLUMNS.len()))?;
            sharp.write_record(row(SHARPNESS_COLUMNS.len()))?;
            continue;
        };
        let e = &m.extraction;
        let mut row = base.clone();
        row.extend([
            m.queries.to_string(),
            e.queries_spent.to_string(),
            e.truncated.to_string(),
            e.with_replacement.to_string(),
            num(e.victim_accuracy),
            num(e.extracted_accuracy),
            num(e.agreement),
            opt(e.overlap_unigram),
            opt(e.overlap_5gram),
            num(m.victim_final_loss),
        ]);
        mea.write_record(&row)?;

        let mut attr_rows: Vec<(String, &str, String, String, [crate::aia::PrivacyScore; 3])> = m
            .privacy
            .attributes
            .iter()
            .map(|a| {
                (
                    a.attribute.clone(),
                    a.kind.as_str(),
                    a.evaluated.to_string(),
                    num(a.attribute_std),
                    [a.extracted, a.plain_encoder, a.majority],
                )
            })
            .collect();
        if let Some(em) = &m.privacy.entity_micro {
            attr_rows.push((
                "entity_micro".into(),
                AttributeKind::Entity.as_str(),
                String::new(),
                String::new(),
                [em.extracted, em.plain_encoder, em.majority],
            ));
        }
        for (name, kind, evaluated, std, scores) in attr_rows {
            let mut row = base.clone();
            row.extend([name, kind.to_string(), evaluated, std]);
            row.extend(scores.iter().map(|s| num(s.privacy)));
            row.extend(scores.iter().map(|s| opt(s.attack_score)));
            row.extend(scores.iter().map(|s| s.degenerate.to_string()));
            aia.write_record(&row)?;
        }

        let mut row = base.clone();
        row.extend([
            num(m.utility),
            num(e.agreement),
            num(e.extracted_accuracy),
            num(e.victim_accuracy),
            if m.privacy.attributes.is_empty() {
                String::new()
            } else {
                num(m.privacy.headline())
            },
            num(m.query_sharpness.mean),
            num(m.query_sharpness.median),
        ]);
        sweep.write_record(&row)?;

        let bins = m.query_sharpness.histogram.len();
        for b in 0..bins {
            let eval = m
                .privacy_bins
                .iter()
                .find(|pb| (pb.center - crate::metrics::sharpness_bin_center(b, k, bins)).abs() < 1e-12);
            let mut row = base.clone();
            row.extend([
                b.to_string(),
                num(crate::metrics::sharpness_bin_center(b, k, bins)),
                m.query_sharpness.histogram[b].to_string(),
                eval.map(|pb| pb.count.to_string()).unwrap_or_default(),
                eval.map(|pb| num(pb.privacy)).unwrap_or_default(),
                k.to_string(),
            ]);
            sharp.write_record(&row)?;
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Validation(e.to_string()))
    };
    out.insert("mea.csv", finish(mea)?);
    out.insert("aia.csv", finish(aia)?);
    out.insert("defense_sweep.csv", finish(sweep)?);
    out.insert("sharpness.csv", finish(sharp)?);
    Ok(out)
}

/// Write the report tables into `dir`; returns the paths written.
pub fn write_csvs(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, body) in render_csvs(report)? {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Spearman correlation between bin center and mean privacy, pooling the
/// privacy-by-sharpness curves of every successful row.
pub fn sharpness_correlation(report: &ExperimentReport, bins: usize, min_count: usize) -> Option<f64> {
    let mut hits = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let k = report.num_classes;
    for m in report.rows.iter().filter_map(RowResult::metrics) {
        for pb in &m.privacy_bins {
            let b = crate::metrics::sharpness_bin(pb.center, k, bins);
            counts[b] += pb.count;
            hits[b] += pb.privacy * pb.count as f64;
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..bins)
        .filter(|&b| counts[b] >= min_count.max(1))
        .map(|b| (crate::metrics::sharpness_bin_center(b, k, bins), hits[b] / counts[b] as f64))
        .unzip();
    spearman(&xs, &ys)
}
