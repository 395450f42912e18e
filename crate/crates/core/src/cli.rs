//! Command-line pipeline: each subcommand reads prior artifacts from the
//! output directory, writes its own, and records a manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{marker_analysis, DisplayFilter, MarkerPresence, MarkerTable, NullTest};
use crate::corpus::{
    build_matched_pairs, fill_toxicity, load_corpus, parse_corpus, select_candidates, to_jsonl,
    Conversation, DatasetSummary, FixtureToxicityScorer, HttpToxicityScorer, LoadOptions, OnError,
    PairedDataset, SelectionThresholds, ToxicityScorer,
};
use crate::depparse::ParseIndex;
use crate::forecast::{
    accuracy_table, featurize_dataset, horizon_subset, lopo_cv, CvConfig, CvReport,
    ExchangeFeatures, FeatureInputs, FeatureSet,
};
use crate::logistic::FitOptions;
use crate::politeness::{default_registry, Registry};
use crate::prompts::{discover_prompt_types, Averaging, PromptConfig, PromptModel, Weighting};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_UPSTREAM: i32 = 4;

const FORMAT: &str = "derail/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Upstream(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Upstream(_) => EXIT_UPSTREAM,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Labeled (or to-be-selected) conversations, JSONL.
    pub labeled: Option<PathBuf>,
    /// CoNLL-U parses of the labeled corpus.
    pub parses: Option<PathBuf>,
    /// Unlabeled conversations used to fit the prompt model, JSONL.
    pub prompt_training: Option<PathBuf>,
    pub prompt_parses: Option<PathBuf>,
    /// Politeness registry JSON; the bundled one when absent.
    pub registry: Option<PathBuf>,
    pub toxicity_fixture: Option<PathBuf>,
    pub toxicity_endpoint: Option<String>,
    pub on_error: OnError,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            labeled: None,
            parses: None,
            prompt_training: None,
            prompt_parses: None,
            registry: None,
            toxicity_fixture: None,
            toxicity_endpoint: None,
            on_error: OnError::Abort,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub rank: usize,
    pub k: usize,
    pub seed: u64,
    pub min_count: usize,
    pub null_distance: f64,
    pub weighting: Weighting,
    pub averaging: Averaging,
}

impl Default for PromptSection {
    fn default() -> Self {
        let d = PromptConfig::default();
        PromptSection {
            rank: d.rank,
            k: d.k,
            seed: d.seed,
            min_count: d.min_count,
            null_distance: d.null_distance,
            weighting: d.weighting,
            averaging: d.averaging,
        }
    }
}

impl PromptSection {
    pub fn to_config(&self) -> PromptConfig {
        let mut cfg = PromptConfig {
            rank: self.rank,
            k: self.k,
            seed: self.seed,
            min_count: self.min_count,
            null_distance: self.null_distance,
            weighting: self.weighting,
            averaging: self.averaging,
            ..PromptConfig::default()
        };
        cfg.svd.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSection {
    pub features: String,
    pub l2_grid: Vec<f64>,
    pub seed: u64,
    pub inner_folds: usize,
    pub pairwise: bool,
    pub horizon_only: bool,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for PredictionSection {
    fn default() -> Self {
        let cv = CvConfig::default();
        PredictionSection {
            features: cv.feature_set.cli_name().to_string(),
            l2_grid: cv.l2_grid,
            seed: cv.seed,
            inner_folds: cv.inner_folds,
            pairwise: cv.pairwise,
            horizon_only: false,
            tolerance: cv.fit.tolerance,
            max_iters: cv.fit.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub test: NullTest,
    pub min_occurrences: u64,
    pub min_effect: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let f = DisplayFilter::default();
        AnalysisSection {
            test: NullTest::Binomial,
            min_occurrences: f.min_occurrences,
            min_effect: f.min_effect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub thresholds: SelectionThresholds,
    pub prompts: PromptSection,
    pub prediction: PredictionSection,
    pub analysis: AnalysisSection,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: CorpusSection::default(),
            thresholds: SelectionThresholds::default(),
            prompts: PromptSection::default(),
            prediction: PredictionSection::default(),
            analysis: AnalysisSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Environment variables that override configured paths.
pub const PATH_OVERRIDES: [&str; 6] = [
    "DERAIL_LABELED",
    "DERAIL_PARSES",
    "DERAIL_PROMPT_CORPUS",
    "DERAIL_PROMPT_PARSES",
    "DERAIL_REGISTRY",
    "DERAIL_OUTPUT_DIR",
];

impl PipelineConfig {
    /// Reads TOML or JSON (chosen by extension, TOML otherwise). Relative
    /// paths resolve against the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        let c = &mut self.corpus;
        for p in [
            &mut c.labeled,
            &mut c.parses,
            &mut c.prompt_training,
            &mut c.prompt_parses,
            &mut c.registry,
            &mut c.toxicity_fixture,
        ] {
            fix(p);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        let c = &mut self.corpus;
        for (var, slot) in [
            ("DERAIL_LABELED", &mut c.labeled),
            ("DERAIL_PARSES", &mut c.parses),
            ("DERAIL_PROMPT_CORPUS", &mut c.prompt_training),
            ("DERAIL_PROMPT_PARSES", &mut c.prompt_parses),
            ("DERAIL_REGISTRY", &mut c.registry),
        ] {
            if let Some(v) = get(var) {
                *slot = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = get("DERAIL_OUTPUT_DIR") {
            self.output_dir = PathBuf::from(v);
        }
    }

    /// Hash of the settings that shape data artifacts. Paths, prediction and
    /// report settings are excluded; inputs are hashed by content instead.
    pub fn data_hash(&self) -> String {
        let view = serde_json::json!({
            "on_error": self.corpus.on_error,
            "toxicity_fixture": self.corpus.toxicity_fixture.is_some(),
            "toxicity_endpoint": self.corpus.toxicity_endpoint,
            "thresholds": self.thresholds,
            "prompts": self.prompts,
        });
        sha256_hex(view.to_string().as_bytes())
    }

    fn require(&self, path: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
        let p = path
            .clone()
            .ok_or_else(|| CliError::Config(format!("corpus.{key} is not set")))?;
        if !p.exists() {
            return Err(CliError::Config(format!(
                "corpus.{key} = {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Parser)]
#[command(name = "derail", version, about = "Conversational derailment analysis pipeline")]
pub struct Cli {
    /// TOML or JSON pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the labeled corpus.
    Ingest,
    /// Build the matched pair dataset.
    Match,
    /// Fit the prompt-type model on the unlabeled corpus.
    DiscoverPrompts,
    /// Compute strategy, prompt-type and other features for paired conversations.
    Extract,
    /// Marker log-odds analysis.
    Analyze(AnalyzeArgs),
    /// Leave-one-page-out pair prediction.
    Predict(PredictArgs),
    /// Render the Markdown report from prior artifacts.
    Report,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Use Fisher's exact test instead of the binomial test.
    #[arg(long)]
    pub fisher: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Feature set name, or "all".
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub horizon_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated l2 strengths.
    #[arg(long, value_delimiter = ',')]
    pub l2_grid: Option<Vec<f64>>,
    /// Train on within-pair feature differences.
    #[arg(long)]
    pub pairwise: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    cfg.thresholds.check().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    let ctx = Context::new(cfg)?;
    match &cli.command {
        Command::Ingest => ctx.ingest(),
        Command::Match => ctx.match_pairs(),
        Command::DiscoverPrompts => ctx.discover_prompts(),
        Command::Extract => ctx.extract(),
        Command::Analyze(a) => ctx.analyze(a),
        Command::Predict(p) => ctx.predict(p),
        Command::Report => ctx.report(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| data(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| data(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesPayload {
    pub strategy_names: Vec<String>,
    pub strategy_labels: Vec<String>,
    pub prompt_k: usize,
    pub features: BTreeMap<String, ExchangeFeatures>,
}

pub const CONVERSATIONS: &str = "conversations.jsonl";
pub const PAIRS: &str = "pairs.json";
pub const SUMMARY: &str = "dataset_summary.json";
pub const PROMPT_MODEL: &str = "prompt_model.json";
pub const FEATURES: &str = "features.json";
pub const MARKERS_JSON: &str = "markers.json";
pub const MARKERS_CSV: &str = "markers.csv";
pub const REPORT: &str = "report.md";

struct Context {
    cfg: PipelineConfig,
    out: PathBuf,
    hash: String,
}

struct Recorder {
    command: String,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    fn new(command: &str) -> Self {
        Recorder {
            command: command.to_string(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), sha256_hex(bytes));
    }
}

impl Context {
    fn new(cfg: PipelineConfig) -> Result<Self, CliError> {
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out)
            .map_err(|e| CliError::Config(format!("output_dir {}: {e}", out.display())))?;
        let hash = cfg.data_hash();
        Ok(Context { cfg, out, hash })
    }

    fn read_input(&self, rec: &mut Recorder, path: &Path) -> Result<String, CliError> {
        let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        rec.input(path, text.as_bytes());
        Ok(text)
    }

    fn upstream(&self, rec: &mut Recorder, name: &str, command: &str) -> Result<String, CliError> {
        let path = self.out.join(name);
        if !path.exists() {
            return Err(CliError::Upstream(format!(
                "missing {}; run `derail {command}` first",
                path.display()
            )));
        }
        self.read_input(rec, &path)
    }

    fn load_artifact<T: DeserializeOwned>(
        &self,
        rec: &mut Recorder,
        name: &str,
        command: &str,
    ) -> Result<T, CliError> {
        let text = self.upstream(rec, name, command)?;
        let art: Artifact<T> = serde_json::from_str(&text)
            .map_err(|e| CliError::Upstream(format!("{name} is unreadable ({e}); re-run `derail {command}`")))?;
        if art.config_hash != self.hash {
            return Err(CliError::Upstream(format!(
                "{name} was produced under a different config (hash {}, current {}); re-run `derail {command}`",
                art.config_hash, self.hash
            )));
        }
        Ok(art.payload)
    }

    fn write(&self, rec: &mut Recorder, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        atomic_write(&self.out.join(name), bytes)?;
        rec.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_artifact<T: Serialize>(
        &self,
        rec: &mut Recorder,
        name: &str,
        kind: &str,
        payload: T,
    ) -> Result<(), CliError> {
        let art = Artifact {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            config_hash: self.hash.clone(),
            seeds: rec.seeds.clone(),
            payload,
        };
        let text = serde_json::to_string_pretty(&art).map_err(data)?;
        self.write(rec, name, text.as_bytes())
    }

    fn finish(&self, rec: Recorder, manifest_name: &str) -> Result<(), CliError> {
        let m = Manifest {
            command: rec.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.clone(),
            seeds: rec.seeds,
            inputs: rec.inputs,
            outputs: rec.outputs,
        };
        let text = serde_json::to_string_pretty(&m).map_err(data)?;
        atomic_write(&self.out.join(manifest_name), text.as_bytes())
    }

    fn load_conversations(&self, rec: &mut Recorder, path: &Path) -> Result<Vec<Conversation>, CliError> {
        let text = self.read_input(rec, path)?;
        let opts = LoadOptions {
            on_error: self.cfg.corpus.on_error,
        };
        let (convs, report) = parse_corpus(&text, &opts).map_err(data)?;
        if report.skipped > 0 {
            log::warn!("{}: skipped {} records", path.display(), report.skipped);
        }
        Ok(convs)
    }

    fn load_parses(&self, rec: &mut Recorder, path: &Path) -> Result<ParseIndex, CliError> {
        let text = self.read_input(rec, path)?;
        ParseIndex::from_conllu(&text).map_err(|e| data(format!("{}: {e}", path.display())))
    }

    fn registry(&self, rec: &mut Recorder) -> Result<Registry, CliError> {
        match &self.cfg.corpus.registry {
            None => Ok(default_registry()),
            Some(_) => {
                let path = self.cfg.require(&self.cfg.corpus.registry, "registry")?;
                let text = self.read_input(rec, &path)?;
                Registry::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
        }
    }

    fn ingest(&self) -> Result<(), CliError> {
        let mut rec = Recorder::new("ingest");
        let path = self.cfg.require(&self.cfg.corpus.labeled, "labeled")?;
        let bytes = fs::read(&path).map_err(|e| data(format!("{}: {e}", path.display())))?;
        rec.input(&path, &bytes);
        let opts = LoadOptions {
            on_error: self.cfg.corpus.on_error,
        };
        let (mut convs, report) = load_corpus(&path, &opts).map_err(data)?;

        let scorer: Option<Box<dyn ToxicityScorer>> =
            match (&self.cfg.corpus.toxicity_fixture, &self.cfg.corpus.toxicity_endpoint) {
                (Some(_), _) => {
                    let p = self.cfg.require(&self.cfg.corpus.toxicity_fixture, "toxicity_fixture")?;
                    let text = fs::read(&p).map_err(|e| data(format!("{}: {e}", p.display())))?;
                    rec.input(&p, &text);
                    Some(Box::new(FixtureToxicityScorer::from_file(&p).map_err(data)?))
                }
                (None, Some(url)) => Some(Box::new(HttpToxicityScorer { endpoint: url.clone() })),
                (None, None) => None,
            };
        let filled = match scorer {
            Some(s) => fill_toxicity(&mut convs, s.as_ref()).map_err(data)?,
            None => 0,
        };

        self.write(&mut rec, CONVERSATIONS, to_jsonl(&convs).as_bytes())?;
        let summary = serde_json::json!({
            "loaded": report.loaded,
            "skipped": report.skipped,
            "diagnostics": report.diagnostics,
            "toxicity_filled": filled,
        });
        self.write_artifact(&mut rec, "ingest_report.json", "ingest-report", summary)?;
        println!("ingested {} conversations ({} skipped)", report.loaded, report.skipped);
        self.finish(rec, "ingest.manifest.json")
    }

    fn match_pairs(&self) -> Result<(), CliError> {
        let mut rec = Recorder::new("match");
        let path = self.out.join(CONVERSATIONS);
        if !path.exists() {
            return Err(CliError::Upstream(format!(
                "missing {}; run `derail ingest` first",
                path.display()
            )));
        }
        let convs = self.load_conversations(&mut rec, &path)?;
        let labeled = convs.iter().filter(|c| c.label.is_some()).count();
        let paired = if labeled == convs.len() {
            PairedDataset::from_labeled(&convs)
        } else if labeled == 0 {
            let cands = select_candidates(&convs, &self.cfg.thresholds).map_err(data)?;
            log::info!(
                "{} awry and {} on-track candidates, {} dropped",
                cands.awry.len(),
                cands.ontrack.len(),
                cands.dropped
            );
            build_matched_pairs(&cands.awry, &cands.ontrack)
        } else {
            return Err(CliError::Data(format!(
                "{labeled} of {} conversations are labeled; expected all or none",
                convs.len()
            )));
        };
        let summary = paired.summary();
        self.write_artifact(&mut rec, PAIRS, "paired-dataset", &paired)?;
        self.write_artifact(&mut rec, SUMMARY, "dataset-summary", &summary)?;
        println!(
            "{} pairs over {} pages (max {} per page)",
            summary.pairs, summary.pages, summary.max_pairs_per_page
        );
        self.finish(rec, "match.manifest.json")
    }

    fn discover_prompts(&self) -> Result<(), CliError> {
        let mut rec = Recorder::new("discover-prompts");
        let cpath = self.cfg.require(&self.cfg.corpus.prompt_training, "prompt_training")?;
        let ppath = self.cfg.require(&self.cfg.corpus.prompt_parses, "prompt_parses")?;
        let pcfg = self.cfg.prompts.to_config();
        rec.seeds.insert("prompts".into(), pcfg.seed);
        let convs = self.load_conversations(&mut rec, &cpath)?;
        let parses = self.load_parses(&mut rec, &ppath)?;
        let model = discover_prompt_types(&convs, &parses, &pcfg).map_err(data)?;

        let mut md = String::new();
        let _ = writeln!(
            md,
            "# Prompt types\n\n{} phrasings, rank {}, k = {}\n",
            model.vocabulary.len(),
            model.rank(),
            model.k()
        );
        md.push_str("| Type | Phrasings | Closest phrasings |\n|---|---:|---|\n");
        for t in 0..model.k() {
            let size = model.phrasing_types.iter().filter(|x| **x == Some(t)).count();
            let top = model.top_phrasings(t, 8).join("; ");
            let _ = writeln!(md, "| {t} | {size} | {top} |");
        }
        let model_json: serde_json::Value = serde_json::from_str(&model.to_json()).map_err(data)?;
        self.write_artifact(&mut rec, PROMPT_MODEL, "prompt-model", model_json)?;
        self.write(&mut rec, "prompt_types.md", md.as_bytes())?;
        println!("fitted {} prompt types over {} phrasings", model.k(), model.vocabulary.len());
        self.finish(rec, "discover-prompts.manifest.json")
    }

    fn load_prompt_model(&self, rec: &mut Recorder) -> Result<PromptModel, CliError> {
        let v: serde_json::Value = self.load_artifact(rec, PROMPT_MODEL, "discover-prompts")?;
        PromptModel::from_json(&v.to_string())
            .map_err(|e| CliError::Upstream(format!("{PROMPT_MODEL}: {e}; re-run `derail discover-prompts`")))
    }

    fn load_pairs(&self, rec: &mut Recorder) -> Result<PairedDataset, CliError> {
        let v: serde_json::Value = self.load_artifact(rec, PAIRS, "match")?;
        PairedDataset::from_json(&v.to_string())
            .map_err(|e| CliError::Upstream(format!("{PAIRS}: {e}; re-run `derail match`")))
    }

    fn extract(&self) -> Result<(), CliError> {
        let mut rec = Recorder::new("extract");
        let paired = self.load_pairs(&mut rec)?;
        let model = self.load_prompt_model(&mut rec)?;
        rec.seeds.insert("prompts".into(), model.config.seed);
        let ppath = self.cfg.require(&self.cfg.corpus.parses, "parses")?;
        let parses = self.load_parses(&mut rec, &ppath)?;
        let registry = self.registry(&mut rec)?;
        let compiled = registry.compile();
        let inputs = FeatureInputs {
            parses: Some(&parses),
            registry: Some(&compiled),
            prompt_model: Some(&model),
        };
        let feats = featurize_dataset(&paired, &inputs).map_err(data)?;

        let names = registry.names();
        let mut strategies = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["comment_id", "conversation_id", "position"];
        header.extend(names.iter().copied());
        strategies.write_record(&header).map_err(data)?;
        let mut types = csv::Writer::from_writer(Vec::new());
        types
            .write_record(["comment_id", "conversation_id", "position", "prompt_type", "distance"])
            .map_err(data)?;
        for conv in paired.conversations() {
            for (pos, c) in conv.comments.iter().enumerate() {
                let Some(pc) = parses.get(&c.id) else { continue };
                let v = compiled.extract(pc);
                let mut row = vec![c.id.clone(), conv.id.clone(), pos.to_string()];
                row.extend(v.counts.iter().map(u32::to_string));
                strategies.write_record(&row).map_err(data)?;
                let a = model.infer(pc);
                types
                    .write_record([
                        c.id.clone(),
                        conv.id.clone(),
                        pos.to_string(),
                        a.type_index.map_or("null".into(), |t| t.to_string()),
                        format!("{}", a.distance),
                    ])
                    .map_err(data)?;
            }
        }
        let payload = FeaturesPayload {
            strategy_names: names.iter().map(|s| s.to_string()).collect(),
            strategy_labels: registry.rules.iter().map(|r| r.label.clone()).collect(),
            prompt_k: model.k(),
            features: feats.into_iter().collect(),
        };
        let n = payload.features.len();
        self.write_artifact(&mut rec, FEATURES, "exchange-features", payload)?;
        self.write(&mut rec, "strategies.csv", &strategies.into_inner().map_err(data)?)?;
        self.write(&mut rec, "prompt_types.csv", &types.into_inner().map_err(data)?)?;
        println!("extracted features for {n} conversations");
        self.finish(rec, "extract.manifest.json")
    }

    fn load_features(&self, rec: &mut Recorder) -> Result<FeaturesPayload, CliError> {
        self.load_artifact(rec, FEATURES, "extract")
    }

    fn analyze(&self, args: &AnalyzeArgs) -> Result<(), CliError> {
        let mut rec = Recorder::new("analyze");
        let feats = self.load_features(&mut rec)?;
        let paired = self.load_pairs(&mut rec)?;
        let test = if args.fisher { NullTest::Fisher } else { self.cfg.analysis.test };
        let (markers, presence) = marker_presence(&paired, &feats)?;
        let table = marker_analysis(&paired, &markers, &presence, test).map_err(data)?;
        self.write(&mut rec, MARKERS_CSV, table.to_csv().map_err(data)?.as_bytes())?;
        self.write_artifact(&mut rec, MARKERS_JSON, "marker-table", &table)?;
        println!(
            "{} marker rows; {} attacker-initiated, {} non-attacker-initiated, {} excluded",
            table.rows.len(),
            table.attacker_initiated,
            table.non_attacker_initiated,
            table.role_exclusions
        );
        self.finish(rec, "analyze.manifest.json")
    }

    fn predict(&self, args: &PredictArgs) -> Result<(), CliError> {
        let p = &self.cfg.prediction;
        let name = args.features.clone().unwrap_or_else(|| p.features.clone());
        let sets: Vec<FeatureSet> = if name == "all" {
            FeatureSet::ALL.to_vec()
        } else {
            vec![name.parse().map_err(|e: crate::forecast::FeatureError| CliError::Config(e.to_string()))?]
        };
        let horizon = args.horizon_only || p.horizon_only;
        let grid = args.l2_grid.clone().unwrap_or_else(|| p.l2_grid.clone());
        if grid.is_empty() || grid.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CliError::Config(format!("invalid l2 grid {grid:?}")));
        }
        let seed = args.seed.unwrap_or(p.seed);

        for fs in sets {
            let mut rec = Recorder::new("predict");
            rec.seeds.insert("prediction".into(), seed);
            let feats = self.load_features(&mut rec)?;
            let mut paired = self.load_pairs(&mut rec)?;
            if horizon {
                paired = horizon_subset(&paired);
            }
            let cfg = CvConfig {
                feature_set: fs,
                l2_grid: grid.clone(),
                inner_folds: p.inner_folds,
                seed,
                pairwise: args.pairwise || p.pairwise,
                fit: FitOptions {
                    tolerance: p.tolerance,
                    max_iters: p.max_iters,
                    ..FitOptions::default()
                },
                ..CvConfig::default()
            };
            let features: HashMap<String, ExchangeFeatures> = feats.features.into_iter().collect();
            let report = lopo_cv(&paired, &features, &cfg).map_err(data)?;
            let stem = cv_stem(fs, horizon);
            self.write(&mut rec, &format!("{stem}.md"), accuracy_table(std::slice::from_ref(&report)).as_bytes())?;
            println!(
                "{}{}: {:.1}% over {} pairs",
                fs.label(),
                if horizon { " (horizon)" } else { "" },
                100.0 * report.accuracy,
                report.pairs
            );
            self.write_artifact(&mut rec, &format!("{stem}.json"), "cv-report", report)?;
            self.finish(rec, &format!("{stem}.manifest.json"))?;
        }
        Ok(())
    }

    fn report(&self) -> Result<(), CliError> {
        let mut rec = Recorder::new("report");
        let summary: DatasetSummary = self.load_artifact(&mut rec, SUMMARY, "match")?;
        let mut md = String::from("# Derailment analysis report\n\n## Dataset\n\n");
        let _ = writeln!(
            md,
            "- pairs: {}\n- conversations: {}\n- pages: {}\n- max pairs per page: {}\n- mean pairs per page: {:.2}\n- mean conversation length: {:.2} comments\n",
            summary.pairs,
            summary.conversations,
            summary.pages,
            summary.max_pairs_per_page,
            summary.mean_pairs_per_page,
            summary.mean_conversation_length
        );

        md.push_str("## Markers\n\n");
        if self.out.join(MARKERS_JSON).exists() {
            let table: MarkerTable = self.load_artifact(&mut rec, MARKERS_JSON, "analyze")?;
            let labels: HashMap<String, String> = if self.out.join(FEATURES).exists() {
                let f = self.load_features(&mut rec)?;
                f.strategy_names.into_iter().zip(f.strategy_labels).collect()
            } else {
                HashMap::new()
            };
            let filter = DisplayFilter {
                min_occurrences: self.cfg.analysis.min_occurrences,
                min_effect: self.cfg.analysis.min_effect,
            };
            let label = |m: &str| labels.get(m).cloned().unwrap_or_else(|| marker_label(m));
            md.push_str(&table.to_markdown(&filter, &label));
            let _ = writeln!(
                md,
                "\nRole partitions: {} attacker-initiated, {} non-attacker-initiated, {} excluded.\n",
                table.attacker_initiated, table.non_attacker_initiated, table.role_exclusions
            );
        } else {
            md.push_str("No marker analysis found; run `derail analyze`.\n\n");
        }

        md.push_str("## Prediction\n\n");
        let mut full = Vec::new();
        let mut horizon = Vec::new();
        for fs in FeatureSet::ALL {
            for (h, bucket) in [(false, &mut full), (true, &mut horizon)] {
                let name = format!("{}.json", cv_stem(fs, h));
                if self.out.join(&name).exists() {
                    let r: CvReport = self.load_artifact(&mut rec, &name, "predict")?;
                    bucket.push(r);
                }
            }
        }
        if full.is_empty() && horizon.is_empty() {
            md.push_str("No prediction results found; run `derail predict`.\n");
        }
        if !full.is_empty() {
            let _ = writeln!(md, "All pairs ({}):\n", full[0].pairs);
            md.push_str(&accuracy_table(&full));
            md.push('\n');
        }
        if !horizon.is_empty() {
            let _ = writeln!(md, "Attack after the fourth comment ({} pairs):\n", horizon[0].pairs);
            md.push_str(&accuracy_table(&horizon));
        }
        self.write(&mut rec, REPORT, md.as_bytes())?;
        println!("wrote {}", self.out.join(REPORT).display());
        self.finish(rec, "report.manifest.json")
    }
}

pub fn cv_stem(fs: FeatureSet, horizon: bool) -> String {
    let base = fs.cli_name().replace('+', "_");
    if horizon {
        format!("cv_{base}_horizon")
    } else {
        format!("cv_{base}")
    }
}

pub fn prompt_marker(t: usize) -> String {
    format!("prompt_type_{t}")
}

fn marker_label(m: &str) -> String {
    match m.strip_prefix("prompt_type_") {
        Some(t) => format!("Prompt type {t}"),
        None => m.to_string(),
    }
}

/// Marker names (strategies, then prompt types) and per-comment presence for
/// the first two comments of every paired conversation.
pub fn marker_presence(
    paired: &PairedDataset,
    feats: &FeaturesPayload,
) -> Result<(Vec<String>, MarkerPresence), CliError> {
    let mut markers = feats.strategy_names.clone();
    markers.extend((0..feats.prompt_k).map(prompt_marker));
    let mut presence = MarkerPresence::new();
    for conv in paired.conversations() {
        let ef = feats
            .features
            .get(&conv.id)
            .ok_or_else(|| CliError::Upstream(format!("no features for {}; re-run `derail extract`", conv.id)))?;
        for slot in 0..2 {
            let mut set = BTreeSet::new();
            if let Some(p) = &ef.politeness {
                for (name, &c) in feats.strategy_names.iter().zip(&p[slot]) {
                    if c > 0 {
                        set.insert(name.clone());
                    }
                }
            }
            if let Some(Some(t)) = ef.prompt_types.map(|p| p[slot]) {
                set.insert(prompt_marker(t));
            }
            presence.insert(conv.comments[slot].id.clone(), set);
        }
    }
    Ok((markers, presence))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_paths_only() {
        let mut cfg = PipelineConfig::default();
        let before = cfg.data_hash();
        cfg.apply_env(|k| (k == "DERAIL_LABELED").then(|| "/x/y.jsonl".to_string()));
        assert_eq!(cfg.corpus.labeled, Some(PathBuf::from("/x/y.jsonl")));
        assert_eq!(cfg.data_hash(), before);
        cfg.prompts.k = 5;
        assert_ne!(cfg.data_hash(), before);
    }

    #[test]
    fn toml_and_json_configs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "output_dir = \"o\"\n[prompts]\nk = 4\n[prediction]\nl2_grid = [1.0]\n").unwrap();
        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"output_dir": "o", "prompts": {"k": 4}, "prediction": {"l2_grid": [1.0]}}"#).unwrap();
        let a = PipelineConfig::from_file(&t).unwrap();
        let b = PipelineConfig::from_file(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output_dir, dir.path().join("o"));
        assert!(matches!(
            PipelineConfig::from_file(&dir.path().join("missing.toml")),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "[prompts]\nrnak = 3\n").unwrap();
        assert!(matches!(PipelineConfig::from_file(&t), Err(CliError::Config(_))));
    }
}
