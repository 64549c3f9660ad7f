//! Config-driven experiment runs: train, score, find, compare, cluster,
//! baseline, intersect and report, each writing its artifacts under one
//! output directory indexed by `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{score_eap, score_eap_ig, score_exact, Method, ScoreTable, DEFAULT_EXACT_LIMIT, DEFAULT_IG_STEPS};
use crate::circuit::{all_members, Circuit, Granularity, Provenance};
use crate::circuits::{faithfulness, find_minimal_circuit, FaithfulnessReport, PreparedTask, SearchParams, DEFAULT_THRESHOLD};
use crate::cluster::{cluster, Dendrogram, Linkage};
use crate::compare::{MatrixSummary, SimilarityMatrix, SimilarityMetric, TaskLabel};
use crate::error::{Error, Result};
use crate::graph::{build_graph, ChannelMode, ComputationalGraph};
use crate::model::{load_checkpoint, save_checkpoint, train, ModelConfig, TrainOptions, Transformer};
use crate::render::{render_dendrogram, render_matrix, render_structure};
use crate::rng::derive_seed;
use crate::stats::{baseline_report, intersect_and_profile, BaselineInput, DEFAULT_REPLICATES};
use crate::tasks::{
    eval_accuracy, generate_task, load_manifest, save_manifest, InputChoice, TaskKind, TaskSpec, DEFAULT_TASK_SIZE,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CIRCUITSCOPE_OUT";
pub const DEFAULT_OUT: &str = "circuitscope-out";
pub const MANIFEST_VERSION: u32 = 1;

type Model = Transformer<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub config: ModelConfig,
    #[serde(default)]
    pub options: TrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Train(TrainRecipe),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateEntry {
    pub kind: TaskKind,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_size() -> usize {
    DEFAULT_TASK_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Manifest(PathBuf),
    Generate(Vec<GenerateEntry>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    Eap,
    #[default]
    EapIg,
}

impl std::str::FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eap" => Ok(ScoreMethod::Eap),
            "eap-ig" => Ok(ScoreMethod::EapIg),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

fn default_steps() -> usize {
    DEFAULT_IG_STEPS
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_metrics() -> Vec<SimilarityMetric> {
    SimilarityMetric::ALL.to_vec()
}
fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}
fn default_granularity() -> Granularity {
    Granularity::Edge
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub tasks: TaskSource,
    #[serde(default)]
    pub method: ScoreMethod,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<SimilarityMetric>,
    #[serde(default)]
    pub linkage: Linkage,
    /// Matrix whose rows are clustered; the first of `metrics` by default.
    #[serde(default)]
    pub cluster_metric: Option<SimilarityMetric>,
    #[serde(default = "default_replicates")]
    pub baseline_replicates: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub method: Option<ScoreMethod>,
    pub steps: Option<usize>,
    pub granularity: Option<Granularity>,
    pub linkage: Option<Linkage>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelSource::Checkpoint(p) = &mut config.model {
            resolve(p);
        }
        if let TaskSource::Manifest(p) = &mut config.tasks {
            resolve(p);
        }
        if let Some(p) = &mut config.out_dir {
            resolve(p);
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.threshold {
            self.threshold = v;
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.granularity {
            self.granularity = v;
        }
        if let Some(v) = o.linkage {
            self.linkage = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} is outside (0, 1]", self.threshold)));
        }
        if self.steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("no similarity metrics requested".into()));
        }
        match &self.model {
            ModelSource::Checkpoint(p) if !p.is_file() => {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())))
            }
            ModelSource::Train(r) => r.config.validate()?,
            _ => {}
        }
        match &self.tasks {
            TaskSource::Manifest(p) if !p.is_file() => {
                return Err(Error::Config(format!("task manifest {} does not exist", p.display())))
            }
            TaskSource::Generate(list) if list.is_empty() => return Err(Error::Config("no tasks to generate".into())),
            _ => {}
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        match self.method {
            ScoreMethod::Eap => Method::Eap,
            ScoreMethod::EapIg => Method::EapIg { steps: self.steps },
        }
    }

    pub fn cluster_metric(&self) -> SimilarityMetric {
        self.cluster_metric.unwrap_or(self.metrics[0])
    }

    /// Output directory: the config value, else the environment default.
    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Failed,
    ConfigError,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Failed => 1,
            Status::ConfigError => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Train,
    Score,
    Find,
    Faithfulness,
    Compare,
    Cluster,
    Baseline,
    Intersect,
    Report,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: Stage,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub status: Status,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub config: Option<RunConfig>,
    pub error: Option<ErrorRecord>,
    pub notes: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Outcome of a command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub status: Status,
    pub out_dir: PathBuf,
    pub error: Option<ErrorRecord>,
}

/// Per-task entry of `evaluation.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: String,
    pub family: String,
    pub n_examples: usize,
    pub accuracy: f64,
    pub m: f64,
    pub m_null: f64,
}

/// Per-task entry of `search/<task>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub task: String,
    pub threshold: f64,
    /// Top-n size that reached the threshold, before pruning.
    pub n: usize,
    pub n_pruned: usize,
    pub total_members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub task: String,
    pub granularity: Granularity,
    pub n_members: usize,
    pub steps: usize,
    pub mean_abs_error_eap: f64,
    pub mean_abs_error_eap_ig: f64,
    pub max_abs_error_eap: f64,
    pub max_abs_error_eap_ig: f64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// File-name-safe form of a task id.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn stage<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, ErrorRecord> {
    r.map_err(|e| ErrorRecord { stage, message: e.to_string() })
}

/// One command's view of an output directory.
pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    notes: Vec<String>,
    /// Reuse artifacts already present in the output directory.
    reuse: bool,
}

struct Loaded {
    model: Model,
    graph: ComputationalGraph,
    tasks: Vec<TaskSpec>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let out = config.out_dir();
        Self { config, out, notes: Vec::new(), reuse: true }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write(&self, rel: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn read(&self, rel: &str) -> Option<String> {
        fs::read_to_string(self.path(rel)).ok()
    }

    fn labels(tasks: &[TaskSpec]) -> Vec<TaskLabel> {
        tasks.iter().map(|t| TaskLabel::new(t.id.clone(), t.family)).collect()
    }

    fn load_tasks(&self) -> Result<Vec<TaskSpec>> {
        let tasks = match &self.config.tasks {
            TaskSource::Manifest(p) => load_manifest(p)?,
            TaskSource::Generate(list) => list
                .iter()
                .enumerate()
                .map(|(i, g)| generate_task(g.kind, g.size, g.seed.unwrap_or_else(|| derive_seed(self.config.seed, i as u64, 0))))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            if !seen.insert(file_stem(&t.id)) {
                return Err(Error::Config(format!("duplicate task id {}", t.id)));
            }
        }
        Ok(tasks)
    }

    /// Loads the model from the configured checkpoint, from a checkpoint of
    /// an earlier command in this directory, or trains it.
    fn load_model(&mut self, tasks: &[TaskSpec]) -> std::result::Result<Model, ErrorRecord> {
        match &self.config.model {
            ModelSource::Checkpoint(p) => stage(Stage::Config, load_checkpoint(p)),
            ModelSource::Train(recipe) => {
                let cached = self.path("model.ckpt");
                if self.reuse && cached.is_file() {
                    let model: Model = stage(Stage::Train, load_checkpoint(&cached))?;
                    if model.config == recipe.config {
                        self.notes.push("model loaded from model.ckpt".into());
                        return Ok(model);
                    }
                }
                let recipe = recipe.clone();
                stage(Stage::Train, self.train_model(&recipe, tasks))
            }
        }
    }

    fn train_model(&self, recipe: &TrainRecipe, tasks: &[TaskSpec]) -> Result<Model> {
        let (model, report) = train::<f64>(&recipe.config, tasks, &recipe.options)?;
        save_checkpoint(&model, &self.path("model.ckpt"))?;
        self.write_json("training.json", &report)?;
        Ok(model)
    }

    fn setup(&mut self) -> std::result::Result<Loaded, ErrorRecord> {
        stage(Stage::Config, self.config.validate())?;
        let tasks = stage(Stage::Config, self.load_tasks())?;
        stage(Stage::Config, fs::create_dir_all(&self.out).map_err(Error::from))?;
        if matches!(self.config.tasks, TaskSource::Generate(_)) {
            stage(Stage::Config, save_manifest(&tasks, &self.path("tasks")).map(|_| ()))?;
        }
        let model = self.load_model(&tasks)?;
        for t in &tasks {
            for ex in &t.examples {
                stage(Stage::Config, ex.validate(model.config.vocab_size))?;
            }
        }
        let graph = stage(Stage::Config, build_graph(&model.config, self.config.channel_mode))?;
        Ok(Loaded { model, graph, tasks })
    }

    fn evaluate(&self, l: &Loaded, prepared: &[PreparedTask<f64>]) -> Result<()> {
        let mut out = Vec::new();
        for (t, p) in l.tasks.iter().zip(prepared) {
            out.push(TaskEvaluation {
                task: t.id.clone(),
                family: t.family.as_str().into(),
                n_examples: t.examples.len(),
                accuracy: eval_accuracy(&l.model, t)?,
                m: p.m(),
                m_null: p.m_null(),
            });
        }
        self.write_json("evaluation.json", &out)
    }

    fn scores(&self, l: &Loaded, task: &TaskSpec) -> Result<ScoreTable> {
        let rel = format!("scores/{}.json", file_stem(&task.id));
        let method = self.config.method();
        if self.reuse {
            if let Some(text) = self.read(&rel) {
                let table = ScoreTable::from_json(&text)?;
                if table.method == method && table.granularity == self.config.granularity && table.check_graph(&l.graph).is_ok() {
                    return Ok(table);
                }
            }
        }
        let g = self.config.granularity;
        let table = match method {
            Method::EapIg { steps } => score_eap_ig(&l.model, &l.graph, task, g, steps)?,
            _ => score_eap(&l.model, &l.graph, task, g)?,
        };
        self.write(&rel, format!("{}\n", table.to_json()?).as_bytes())?;
        Ok(table)
    }

    fn provenance(&self, l: &Loaded, task: &TaskSpec) -> Provenance {
        let mut p = Provenance::new(task.id.clone(), self.config.method().to_string());
        p.model_config_hash = l.model.config.fingerprint();
        p.channel_mode = self.config.channel_mode;
        p
    }

    fn find(&self, l: &Loaded, task: &TaskSpec, prepared: &PreparedTask<f64>, scores: &ScoreTable) -> Result<Circuit> {
        let params = SearchParams { threshold: self.config.threshold, ..Default::default() };
        let found = find_minimal_circuit(&l.model, &l.graph, prepared, scores, &params, self.provenance(l, task))?;
        let stem = file_stem(&task.id);
        self.write(&format!("circuits/{stem}.json"), format!("{}\n", found.circuit.to_json()?).as_bytes())?;
        self.write_json(&format!("faithfulness/{stem}.json"), &found.report)?;
        self.write_json(
            &format!("search/{stem}.json"),
            &SearchRecord {
                task: task.id.clone(),
                threshold: self.config.threshold,
                n: found.n,
                n_pruned: found.circuit.len(),
                total_members: scores.len(),
            },
        )?;
        Ok(found.circuit)
    }

    fn load_circuit(&self, l: &Loaded, task: &TaskSpec) -> Result<Circuit> {
        let rel = format!("circuits/{}.json", file_stem(&task.id));
        let text = self
            .read(&rel)
            .ok_or_else(|| Error::Config(format!("{rel} is missing; run `find` first")))?;
        let c = Circuit::from_json(&text)?;
        c.validate(&l.graph)?;
        Ok(c)
    }

    fn compare(&self, l: &Loaded, circuits: &[Circuit], prepared: &[PreparedTask<f64>]) -> Result<Vec<SimilarityMatrix>> {
        let labels = Self::labels(&l.tasks);
        let mut out = Vec::new();
        let mut summaries: Vec<(SimilarityMetric, MatrixSummary)> = Vec::new();
        for &metric in &self.config.metrics {
            let m = match metric {
                SimilarityMetric::Iou => SimilarityMatrix::iou(labels.clone(), circuits)?,
                SimilarityMetric::Recall => SimilarityMatrix::recall(labels.clone(), circuits)?,
                SimilarityMetric::CrossFaithfulness => {
                    SimilarityMatrix::cross_faithfulness(labels.clone(), circuits, &l.model, &l.graph, prepared)?
                }
            };
            self.write(&format!("matrices/{}.csv", metric.as_str()), m.to_csv().as_bytes())?;
            summaries.push((metric, m.summary()));
            out.push(m);
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            granularity: Granularity,
            aggregation: &'a str,
            metrics: Vec<(SimilarityMetric, MatrixSummary)>,
        }
        self.write_json(
            "matrices/summary.json",
            &Summary { granularity: self.config.granularity, aggregation: "per-example metric, mean over examples", metrics: summaries },
        )?;
        Ok(out)
    }

    fn cluster(&self, matrices: &[SimilarityMatrix]) -> Result<Option<Dendrogram>> {
        let metric = self.config.cluster_metric();
        let Some(m) = matrices.iter().find(|m| m.metric == metric) else {
            return Err(Error::Config(format!("cluster metric {metric} was not computed")));
        };
        if m.size() < 2 {
            return Ok(None);
        }
        let d = cluster(m, self.config.linkage)?;
        self.write("dendrogram.json", format!("{}\n", d.to_json()?).as_bytes())?;
        Ok(Some(d))
    }

    fn search_n(&self, task: &TaskSpec, circuit: &Circuit) -> usize {
        self.read(&format!("search/{}.json", file_stem(&task.id)))
            .and_then(|t| serde_json::from_str::<SearchRecord>(&t).ok())
            .map_or(circuit.len(), |r| r.n)
    }

    fn baseline_and_structure(&mut self, l: &Loaded, circuits: &[Circuit], want: (bool, bool)) -> Result<()> {
        if self.config.granularity != Granularity::Edge {
            self.notes.push("baseline and structure reports need edge circuits; skipped".into());
            return Ok(());
        }
        let labels = Self::labels(&l.tasks);
        if want.0 {
            let inputs: Vec<BaselineInput> = labels
                .iter()
                .zip(circuits)
                .zip(&l.tasks)
                .map(|((label, c), t)| BaselineInput { label: label.clone(), circuit: c.clone(), n: self.search_n(t, c) })
                .collect();
            let report = baseline_report(&inputs, &l.graph, self.config.baseline_replicates, self.config.seed)?;
            self.write_json("baseline.json", &report)?;
        }
        if want.1 {
            if circuits.len() < 2 {
                self.notes.push("structure report needs two or more circuits; skipped".into());
            } else {
                let report = intersect_and_profile(&labels, circuits, &l.graph)?;
                self.write("structure.json", format!("{}\n", report.to_json()?).as_bytes())?;
                self.write("figures/structure.svg", render_structure(&report)?.as_bytes())?;
            }
        }
        Ok(())
    }

    fn render_all(&self, matrices: &[SimilarityMatrix], dendrogram: Option<&Dendrogram>) -> Result<()> {
        for m in matrices {
            self.write(&format!("figures/{}.svg", m.metric.as_str()), render_matrix(m)?.as_bytes())?;
        }
        if let Some(d) = dendrogram {
            self.write("figures/dendrogram.svg", render_dendrogram(d)?.as_bytes())?;
        }
        Ok(())
    }

    fn prepare(l: &Loaded) -> Result<Vec<PreparedTask<f64>>> {
        l.tasks.iter().map(|t| PreparedTask::new(&l.model, t)).collect()
    }

    fn circuits(&self, l: &Loaded) -> Result<Vec<Circuit>> {
        l.tasks.iter().map(|t| self.load_circuit(l, t)).collect()
    }

    fn saved_matrices(&self, l: &Loaded) -> Result<Vec<SimilarityMatrix>> {
        let mut out = Vec::new();
        for &metric in &self.config.metrics {
            let rel = format!("matrices/{}.csv", metric.as_str());
            let text = self
                .read(&rel)
                .ok_or_else(|| Error::Config(format!("{rel} is missing; run `compare` first")))?;
            let m = SimilarityMatrix::from_csv(&text, metric, self.config.granularity)?;
            if m.tasks != Self::labels(&l.tasks) {
                return Err(Error::Matrix(format!("{rel} does not list the configured tasks")));
            }
            out.push(m);
        }
        Ok(out)
    }

    fn oracle(&self, l: &Loaded) -> Result<()> {
        let g = self.config.granularity;
        let n_members = all_members(&l.graph, g).len();
        if n_members > DEFAULT_EXACT_LIMIT {
            return Err(Error::TooManyMembers { members: n_members, limit: DEFAULT_EXACT_LIMIT });
        }
        let mut records = Vec::new();
        for t in &l.tasks {
            let exact = score_exact(&l.model, &l.graph, t, g)?;
            let eap = score_eap(&l.model, &l.graph, t, g)?;
            let ig = score_eap_ig(&l.model, &l.graph, t, g, self.config.steps)?;
            let errs = |a: &ScoreTable| -> (f64, f64) {
                let e: Vec<f64> = a.values().zip(exact.values()).map(|(x, y)| (x - y).abs()).collect();
                (e.iter().sum::<f64>() / e.len() as f64, e.iter().copied().fold(0.0, f64::max))
            };
            let ((me, xe), (mi, xi)) = (errs(&eap), errs(&ig));
            records.push(OracleRecord {
                task: t.id.clone(),
                granularity: g,
                n_members,
                steps: self.config.steps,
                mean_abs_error_eap: me,
                mean_abs_error_eap_ig: mi,
                max_abs_error_eap: xe,
                max_abs_error_eap_ig: xi,
            });
            self.write(&format!("oracle/{}.exact.json", file_stem(&t.id)), format!("{}\n", exact.to_json()?).as_bytes())?;
        }
        self.write_json("oracle/summary.json", &records)
    }

    fn execute(&mut self, command: Command) -> std::result::Result<(), ErrorRecord> {
        self.reuse = command != Command::Run;
        let l = self.setup()?;
        if command == Command::Train {
            return Ok(());
        }
        if command == Command::Oracle {
            return stage(Stage::Oracle, self.oracle(&l));
        }
        let needs_prepared = matches!(command, Command::Run | Command::Find | Command::Faithfulness | Command::Compare);
        let prepared = if needs_prepared { stage(Stage::Score, Self::prepare(&l))? } else { Vec::new() };

        let circuits = match command {
            Command::Run | Command::Score | Command::Find => {
                if !prepared.is_empty() {
                    stage(Stage::Score, self.evaluate(&l, &prepared))?;
                }
                let mut circuits = Vec::new();
                for (i, t) in l.tasks.iter().enumerate() {
                    let table = stage(Stage::Score, self.scores(&l, t))?;
                    if command != Command::Score {
                        circuits.push(stage(Stage::Find, self.find(&l, t, &prepared[i], &table))?);
                    }
                }
                circuits
            }
            _ => stage(Stage::Find, self.circuits(&l))?,
        };
        if matches!(command, Command::Score | Command::Find) {
            return Ok(());
        }
        if command == Command::Faithfulness {
            for ((t, c), p) in l.tasks.iter().zip(&circuits).zip(&prepared) {
                let r: FaithfulnessReport = stage(Stage::Faithfulness, faithfulness(&l.model, &l.graph, c, p))?;
                stage(Stage::Faithfulness, self.write_json(&format!("faithfulness/{}.json", file_stem(&t.id)), &r))?;
            }
            return Ok(());
        }
        let matrices = match command {
            Command::Run | Command::Compare => stage(Stage::Compare, self.compare(&l, &circuits, &prepared))?,
            Command::Cluster | Command::Report => stage(Stage::Cluster, self.saved_matrices(&l))?,
            _ => Vec::new(),
        };
        let dendrogram = match command {
            Command::Run | Command::Cluster => stage(Stage::Cluster, self.cluster(&matrices))?,
            Command::Report => match self.read("dendrogram.json") {
                Some(text) => Some(stage(Stage::Report, Dendrogram::from_json(&text))?),
                None => None,
            },
            _ => None,
        };
        let want = match command {
            Command::Run => (true, true),
            Command::Baseline => (true, false),
            Command::Intersect => (false, true),
            _ => (false, false),
        };
        if want != (false, false) {
            let st = if want.0 { Stage::Baseline } else { Stage::Intersect };
            stage(st, self.baseline_and_structure(&l, &circuits, want))?;
        }
        if matches!(command, Command::Run | Command::Report) {
            stage(Stage::Report, self.render_all(&matrices, dendrogram.as_ref()))?;
        }
        Ok(())
    }

    /// Runs one command and writes `manifest.json`, whatever the outcome.
    pub fn run(mut self, command: Command) -> RunOutcome {
        let started = now_unix();
        let result = self.execute(command);
        let (status, error) = match result {
            Ok(()) => (Status::Ok, None),
            Err(e) if e.stage == Stage::Config => (Status::ConfigError, Some(e)),
            Err(e) => (Status::Failed, Some(e)),
        };
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            command: command.as_str().into(),
            status,
            started_at_unix: started,
            finished_at_unix: now_unix(),
            config: Some(self.config.clone()),
            error: error.clone(),
            notes: self.notes.clone(),
            artifacts: list_artifacts(&self.out).unwrap_or_default(),
        };
        if fs::create_dir_all(&self.out).is_ok() {
            let _ = self.write_json("manifest.json", &manifest);
        }
        RunOutcome { status, out_dir: self.out, error }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Run,
    Train,
    Score,
    Find,
    Faithfulness,
    Compare,
    Cluster,
    Baseline,
    Intersect,
    Report,
    Oracle,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Train => "train",
            Command::Score => "score",
            Command::Find => "find",
            Command::Faithfulness => "faithfulness",
            Command::Compare => "compare",
            Command::Cluster => "cluster",
            Command::Baseline => "baseline",
            Command::Intersect => "intersect",
            Command::Report => "report",
            Command::Oracle => "oracle",
        }
    }
}

/// Every file under `dir` except the manifest, sorted by path.
pub fn list_artifacts(dir: &Path) -> Result<Vec<ArtifactEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<ArtifactEntry>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
                continue;
            }
            let rel = p.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            let bytes = fs::read(&p)?;
            out.push(ArtifactEntry { path: rel, sha256: hex(&Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, &mut out)?;
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads `config_path`, applies overrides and runs `command`. A config that
/// cannot be read still produces a manifest when an output directory is
/// known.
pub fn run_command(command: Command, config_path: &Path, overrides: &Overrides) -> RunOutcome {
    match RunConfig::load(config_path) {
        Ok(mut config) => {
            config.apply(overrides);
            Pipeline::new(config).run(command)
        }
        Err(e) => {
            let out = overrides
                .out
                .clone()
                .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let error = ErrorRecord { stage: Stage::Config, message: e.to_string() };
            let manifest = RunManifest {
                version: MANIFEST_VERSION,
                command: command.as_str().into(),
                status: Status::ConfigError,
                started_at_unix: now_unix(),
                finished_at_unix: now_unix(),
                config: None,
                error: Some(error.clone()),
                notes: Vec::new(),
                artifacts: list_artifacts(&out).unwrap_or_default(),
            };
            if fs::create_dir_all(&out).is_ok() {
                if let Ok(mut bytes) = serde_json::to_vec_pretty(&manifest) {
                    bytes.push(b'\n');
                    let _ = fs::write(out.join("manifest.json"), bytes);
                }
            }
            RunOutcome { status: Status::ConfigError, out_dir: out, error: Some(error) }
        }
    }
}

/// Mean metric of a task on clean or corrupted inputs; exposed for reports.
pub fn task_metric(model: &Model, task: &TaskSpec, input: InputChoice) -> Result<f64> {
    crate::tasks::eval_metric(model, task, input)
}

impl RunConfig {
    /// The reference experiment: a 4-layer, 4-head model trained on the two
    /// mirror retrieval tasks, greater-than and repeat-last-distinct.
    pub fn reference(seed: u64) -> Self {
        let config = ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size: crate::tasks::ToyVocab::SIZE,
            max_positions: 8,
            normalization: crate::model::Normalization::None,
            seed: 1,
        };
        let options = TrainOptions { seed: 3, ..Default::default() };
        let kinds = [TaskKind::MirrorRetrievalAb, TaskKind::MirrorRetrievalBa, TaskKind::GreaterThan2Digit, TaskKind::RepeatLastDistinct];
        RunConfig {
            model: ModelSource::Train(TrainRecipe { config, options }),
            tasks: TaskSource::Generate(
                kinds.into_iter().map(|kind| GenerateEntry { kind, size: DEFAULT_TASK_SIZE, seed: Some(11) }).collect(),
            ),
            method: ScoreMethod::EapIg,
            steps: DEFAULT_IG_STEPS,
            granularity: Granularity::Edge,
            channel_mode: ChannelMode::Split,
            threshold: DEFAULT_THRESHOLD,
            metrics: default_metrics(),
            linkage: Linkage::Average,
            cluster_metric: None,
            baseline_replicates: DEFAULT_REPLICATES,
            out_dir: None,
            seed,
        }
    }
}
