//! End-to-end runs: curate, score, normalize, train, eval.
//!
//! A run is driven by one TOML file with a section per stage. Every default
//! is written back into the run manifest, so a manifest fully describes the
//! run that produced it. Artifacts are hashed (sha256) into the manifest; the
//! manifest itself carries no timestamp, only the run directory name does.
//!
//! ```toml
//! seed = 7
//! agents = "agents.toml"   # generator, judge and scorers; needed for text pairs
//!
//! [data]
//! train_fraction = 0.5
//! [data.synth]
//! n = 200
//!
//! [curate]
//! mode = "both"
//!
//! [noise]
//! mode = "local"
//!
//! [train]
//! mode = "mmedpo"
//! ```
//!
//! The agents file holds a `[generator]` table, a `[judge]` table and one
//! `[[scorers]]` entry per consensus agent, each an agent spec.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{AgentClient, AgentSpec};
use crate::curation::{build_text_pairs, build_visual_pairs, merge, CurationReport};
use crate::dataset::{load_dataset, save_dataset, MedicalSample, Task};
use crate::dpo::{trace_csv, train, train_sft, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::noising::{NoiseConfig, NoiseMode};
use crate::normalize::{attach_weights, NormalizationConfig};
use crate::pair::{save_pairs, PreferencePair, Source};
use crate::policy::{Init, PolicyModel, Vocab};
use crate::relevance::{score_pairs, ConsensusConfig, PairTranscript};
use crate::rng::{derive_seed, Rng};
use crate::synth::{split, synth_dataset, SynthConfig};

pub const MANIFEST_FORMAT: &str = "medpref-run-1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurateMode {
    Text,
    Visual,
    #[default]
    Both,
}

impl CurateMode {
    pub fn text(self) -> bool {
        self != CurateMode::Visual
    }

    pub fn visual(self) -> bool {
        self != CurateMode::Text
    }
}

impl FromStr for CurateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "visual" => Ok(Self::Visual),
            "both" => Ok(Self::Both),
            other => Err(Error::validation(format!("unknown curate mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every pair weighted 1.
    Dpo,
    #[default]
    Mmedpo,
    Sft,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Self::Dpo),
            "mmedpo" => Ok(Self::Mmedpo),
            "sft" => Ok(Self::Sft),
            other => Err(Error::validation(format!("unknown train mode {other:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Dpo => "dpo",
            TrainMode::Mmedpo => "mmedpo",
            TrainMode::Sft => "sft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL dataset; a synthetic one is generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub train_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            train_fraction: 0.5,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    pub mode: CurateMode,
    pub candidates: usize,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            mode: CurateMode::Both,
            candidates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub round_cap: usize,
    /// Score with the first scorer alone instead of the consensus.
    pub single_agent: bool,
    pub include_ground_truth: bool,
    pub scale_low: f64,
    pub scale_high: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            round_cap: 5,
            single_agent: false,
            include_ground_truth: true,
            scale_low: 1.0,
            scale_high: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub embed_dim: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Maximum-likelihood warm-up that produces the reference; 0 skips it.
    pub sft_epochs: usize,
    pub sft_learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Mmedpo,
            embed_dim: 8,
            alpha: 1.0,
            learning_rate: 0.1,
            epochs: 3,
            batch_size: 16,
            sft_epochs: 30,
            sft_learning_rate: 0.5,
        }
    }
}

impl TrainSection {
    pub fn preference(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            weighted: self.mode == TrainMode::Mmedpo,
        }
    }

    pub fn sft(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sft_learning_rate,
            epochs: self.sft_epochs,
            batch_size: self.batch_size,
            seed,
            weighted: false,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Only this task; every task in the held-out split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsFile {
    pub generator: AgentSpec,
    pub judge: AgentSpec,
    pub scorers: Vec<AgentSpec>,
}

impl AgentsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AgentsFile = toml::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scorers.is_empty() {
            return Err(Error::validation(
                "agents file needs at least one [[scorers]] entry",
            ));
        }
        self.generator.validate()?;
        self.judge.validate()?;
        self.scorers.iter().try_for_each(AgentSpec::validate)
    }

    /// Stub agents matching the synthetic experiments.
    pub fn stubs() -> Self {
        Self {
            generator: AgentSpec::stub("generator", "mutate"),
            judge: AgentSpec::stub("judge", "hash-pick"),
            scorers: ["edit-score:1..5", "deferential:1..5", "edit-score:1..5"]
                .iter()
                .enumerate()
                .map(|(i, b)| AgentSpec::stub(format!("scorer{}", i + 1), b))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agents: Option<PathBuf>,
    pub data: DataConfig,
    pub curate: CurateConfig,
    pub score: ScoreConfig,
    pub noise: NoiseConfig,
    pub norm: NormalizationConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            agents: None,
            data: DataConfig::default(),
            curate: CurateConfig::default(),
            score: ScoreConfig::default(),
            noise: NoiseConfig::default(),
            norm: NormalizationConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::validation("data.train_fraction must be in (0, 1)"));
        }
        if self.data.dataset.is_none() {
            self.data.synth.validate()?;
        }
        if self.curate.candidates == 0 {
            return Err(Error::validation("curate.candidates must be at least 1"));
        }
        if self.score.round_cap == 0 {
            return Err(Error::validation("score.round_cap must be at least 1"));
        }
        if !(self.score.scale_low < self.score.scale_high) {
            return Err(Error::validation(
                "score.scale_low must be below score.scale_high",
            ));
        }
        if self.curate.mode.visual() {
            self.noise.schedule()?;
        }
        self.norm.validate()?;
        if self.train.embed_dim == 0 {
            return Err(Error::validation("train.embed_dim must be positive"));
        }
        self.train.preference(self.seed).validate()?;
        if self.train.sft_epochs > 0 || self.train.mode == TrainMode::Sft {
            TrainConfig {
                epochs: self.train.sft_epochs.max(1),
                ..self.train.sft(self.seed)
            }
            .validate()?;
        }
        if self.train.mode == TrainMode::Sft && self.train.sft_epochs == 0 {
            return Err(Error::validation(
                "train.mode = sft needs train.sft_epochs > 0",
            ));
        }
        if self.curate.mode.text() && self.agents.is_none() {
            return Err(Error::validation(
                "curate.mode includes text pairs but no agents file is configured",
            ));
        }
        Ok(())
    }

    /// Validates the config and loads the agents file it needs.
    pub fn load_agents(&self) -> Result<Option<AgentsFile>> {
        self.validate()?;
        if !self.curate.mode.text() {
            return Ok(None);
        }
        let path = self.resolve(self.agents.as_deref().expect("validated"));
        if !path.is_file() {
            return Err(Error::validation(format!(
                "agents file {} not found",
                path.display()
            )));
        }
        AgentsFile::load(&path).map(Some)
    }

    pub fn consensus(&self, agents: &AgentsFile) -> ConsensusConfig {
        let scorers = if self.score.single_agent {
            agents.scorers[..1].to_vec()
        } else {
            agents.scorers.clone()
        };
        ConsensusConfig {
            agents: scorers,
            round_cap: self.score.round_cap,
            scale: (self.score.scale_low, self.score.scale_high),
            include_ground_truth: self.score.include_ground_truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunError {
    pub stage: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl WeightSummary {
    fn of(weights: &[f64]) -> Option<Self> {
        if weights.is_empty() {
            return None;
        }
        Some(Self {
            count: weights.len(),
            min: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: weights.iter().sum::<f64>() / weights.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<RunError>,
    /// Stages that completed, in order.
    pub stages: Vec<String>,
    pub config: PipelineConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agents: Option<AgentsFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightSummary>,
    /// Corpus metric means keyed by `<model>/<task>`.
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    /// sha256 of every file in the run directory except the manifest.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value).expect("value serializes");
    body.push(b'\n');
    write(path, body)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut body, r).expect("row serializes");
        body.push(b'\n');
    }
    write(path, body)
}

/// sha256 of every file under `dir` except the manifest, keyed by the
/// slash-separated relative path.
pub fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(format!("walking {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("under run dir");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if key == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        out.insert(key, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// A fresh `run-<utc timestamp>` directory under `out_dir`.
pub fn create_run_dir(out_dir: &Path) -> Result<PathBuf> {
    let stamp = humantime::format_rfc3339_seconds(std::time::SystemTime::now())
        .to_string()
        .replace([':', '-'], "");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for n in 1.. {
        let name = if n == 1 {
            format!("run-{stamp}")
        } else {
            format!("run-{stamp}-{n}")
        };
        let dir = out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, Serialize)]
struct WeightRow<'a> {
    sample_id: &'a str,
    source: Source,
    raw_score: Option<f64>,
    weight: Option<f64>,
}

#[derive(Debug, Default, Serialize)]
struct StageReport {
    curation: CurationReport,
    /// Text pairs dropped because their relevance score could not be obtained.
    unscored: Vec<crate::curation::SampleFailure>,
}

struct Run<'a> {
    config: &'a PipelineConfig,
    agents: Option<&'a AgentsFile>,
    dir: &'a Path,
    stage: &'static str,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn begin(&mut self, stage: &'static str) {
        log::info!("stage {stage}");
        self.stage = stage;
    }

    fn done(&mut self) {
        self.manifest.stages.push(self.stage.to_string());
    }

    fn load_data(&mut self) -> Result<(Vec<MedicalSample>, Vec<MedicalSample>)> {
        self.begin("data");
        let cfg = self.config;
        let samples = match &cfg.data.dataset {
            Some(p) => load_dataset(&cfg.resolve(p))?,
            None => synth_dataset(
                &cfg.data.synth,
                &mut Rng::new(derive_seed(cfg.seed, "synth")),
            )?,
        };
        let (train_set, test_set) = split(samples, cfg.data.train_fraction);
        if train_set.is_empty() || test_set.is_empty() {
            return Err(Error::validation("train/test split leaves an empty side"));
        }
        save_dataset(&train_set, &self.dir.join("dataset/train.jsonl"))?;
        save_dataset(&test_set, &self.dir.join("dataset/test.jsonl"))?;
        self.done();
        Ok((train_set, test_set))
    }

    fn curate(
        &mut self,
        train_set: &[MedicalSample],
        report: &mut StageReport,
    ) -> Result<Vec<PreferencePair>> {
        self.begin("curate");
        let cfg = self.config;
        let client = AgentClient::default();
        let mut text = Vec::new();
        if let Some(agents) = self.agents.filter(|_| cfg.curate.mode.text()) {
            let mut rng = Rng::new(derive_seed(cfg.seed, "curate-text"));
            let (pairs, r) = build_text_pairs(
                &client,
                train_set,
                &agents.generator,
                &agents.judge,
                cfg.curate.candidates,
                &mut rng,
            )?;
            report.curation.extend(r);
            text = pairs;
        }
        let mut visual = Vec::new();
        if cfg.curate.mode.visual() {
            let schedule = cfg.noise.schedule()?;
            let mut rng = Rng::new(derive_seed(cfg.seed, "curate-visual"));
            let (pairs, r) =
                build_visual_pairs(train_set, &schedule, cfg.noise.k, cfg.noise.mode, &mut rng)?;
            report.curation.extend(r);
            visual = pairs;
        }
        let pairs = merge(text, visual);
        if pairs.is_empty() {
            return Err(Error::validation("curation produced no pairs"));
        }
        save_pairs(&pairs, &self.dir.join("pairs/curated.jsonl"))?;
        self.done();
        Ok(pairs)
    }

    fn score(
        &mut self,
        pairs: Vec<PreferencePair>,
        report: &mut StageReport,
    ) -> Result<Vec<PreferencePair>> {
        self.begin("score");
        let cfg = self.config;
        let (scored, transcripts): (Vec<PreferencePair>, Vec<PairTranscript>) = match self.agents {
            Some(agents) if pairs.iter().any(|p| p.source == Source::TextHallucination) => {
                let consensus = cfg.consensus(agents);
                let mut rng = Rng::new(derive_seed(cfg.seed, "score"));
                let (scored, transcripts, r) =
                    score_pairs(&AgentClient::default(), pairs, &consensus, &mut rng)?;
                report.unscored = r.failures;
                (scored, transcripts)
            }
            _ => (pairs, Vec::new()),
        };
        let kept: Vec<PreferencePair> = scored
            .into_iter()
            .filter(|p| p.raw_score.is_some())
            .collect();
        if kept.is_empty() {
            return Err(Error::Consensus(
                "no pair received a relevance score".into(),
            ));
        }
        save_pairs(&kept, &self.dir.join("pairs/scored.jsonl"))?;
        write_jsonl(&self.dir.join("transcripts/consensus.jsonl"), &transcripts)?;
        write_json(&self.dir.join("reports/curation.json"), report)?;
        self.done();
        Ok(kept)
    }

    fn normalize(&mut self, pairs: Vec<PreferencePair>) -> Result<Vec<PreferencePair>> {
        self.begin("normalize");
        let pairs = match self.config.train.mode {
            TrainMode::Mmedpo => attach_weights(pairs, &self.config.norm)?,
            TrainMode::Dpo | TrainMode::Sft => pairs
                .into_iter()
                .map(|p| PreferencePair {
                    weight: Some(1.0),
                    ..p
                })
                .collect(),
        };
        let rows: Vec<WeightRow> = pairs
            .iter()
            .map(|p| WeightRow {
                sample_id: &p.sample_id,
                source: p.source,
                raw_score: p.raw_score,
                weight: p.weight,
            })
            .collect();
        write_jsonl(&self.dir.join("weights/weights.jsonl"), &rows)?;
        let weights: Vec<f64> = pairs.iter().filter_map(|p| p.weight).collect();
        self.manifest.weights = WeightSummary::of(&weights);
        self.done();
        Ok(pairs)
    }

    fn train(
        &mut self,
        train_set: &[MedicalSample],
        test_set: &[MedicalSample],
        pairs: &[PreferencePair],
    ) -> Result<(PolicyModel, PolicyModel)> {
        self.begin("train");
        let cfg = self.config;
        let texts = train_set
            .iter()
            .flat_map(|s| [s.query.as_str(), s.answer.as_str()])
            .chain(test_set.iter().map(|s| s.query.as_str()))
            .chain(pairs.iter().map(|p| p.dispreferred.as_str()));
        let vocab = Vocab::from_texts(texts)?;
        let channels = train_set[0].image.channels();
        let init = PolicyModel::new(
            vocab,
            cfg.train.embed_dim,
            channels,
            derive_seed(cfg.seed, "init"),
            Init::Uniform,
        )?;
        let reference = if cfg.train.sft_epochs > 0 {
            let sft_seed = derive_seed(cfg.seed, "sft");
            let (model, trace) = train_sft(
                &init,
                train_set,
                &cfg.train.sft(sft_seed),
                &mut Rng::new(sft_seed),
            )?;
            write(&self.dir.join("traces/sft.csv"), trace_csv(&trace))?;
            model
        } else {
            init
        };
        let policy = if cfg.train.mode == TrainMode::Sft {
            reference.clone()
        } else {
            let train_seed = derive_seed(cfg.seed, "train");
            let (model, trace) = train(
                &reference,
                &reference,
                pairs,
                &cfg.train.preference(train_seed),
                &mut Rng::new(train_seed),
            )?;
            write(&self.dir.join("traces/train.csv"), trace_csv(&trace))?;
            model
        };
        fs::create_dir_all(self.dir.join("checkpoints")).map_err(|e| Error::io(self.dir, e))?;
        reference.save(&self.dir.join("checkpoints/reference.ckpt"))?;
        policy.save(&self.dir.join("checkpoints/policy.ckpt"))?;
        self.done();
        Ok((reference, policy))
    }

    fn eval(
        &mut self,
        test_set: &[MedicalSample],
        reference: &PolicyModel,
        policy: &PolicyModel,
    ) -> Result<()> {
        self.begin("eval");
        for task in eval_tasks(test_set, self.config.eval.task)? {
            let subset: Vec<MedicalSample> = test_set
                .iter()
                .filter(|s| s.task == task)
                .cloned()
                .collect();
            for (name, model) in [("reference", reference), ("policy", policy)] {
                let report = evaluate(model, &subset, task)?;
                write_json(
                    &self.dir.join(format!("reports/eval_{name}_{task}.json")),
                    &report,
                )?;
                self.manifest
                    .metrics
                    .insert(format!("{name}/{task}"), report.means);
            }
        }
        self.done();
        Ok(())
    }
}

fn eval_tasks(test_set: &[MedicalSample], only: Option<Task>) -> Result<Vec<Task>> {
    let present: Vec<Task> = [Task::ClosedQa, Task::OpenQa, Task::Report]
        .into_iter()
        .filter(|t| test_set.iter().any(|s| s.task == *t))
        .collect();
    match only {
        None => Ok(present),
        Some(t) if present.contains(&t) => Ok(vec![t]),
        Some(t) => Err(Error::validation(format!(
            "no held-out samples with task {t}"
        ))),
    }
}

fn execute(run: &mut Run) -> Result<()> {
    let (train_set, test_set) = run.load_data()?;
    let mut report = StageReport::default();
    let pairs = run.curate(&train_set, &mut report)?;
    let pairs = run.score(pairs, &mut report)?;
    let pairs = run.normalize(pairs)?;
    let (reference, policy) = run.train(&train_set, &test_set, &pairs)?;
    run.eval(&test_set, &reference, &policy)
}

/// Run every stage into an existing (empty) directory. On failure the
/// completed stages' outputs stay in place and the manifest records the
/// failing stage.
pub fn run_in_dir(
    config: &PipelineConfig,
    agents: Option<&AgentsFile>,
    dir: &Path,
) -> Result<Manifest> {
    let mut run = Run {
        config,
        agents,
        dir,
        stage: "setup",
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            status: RunStatus::Ok,
            error: None,
            stages: Vec::new(),
            config: config.clone(),
            agents: agents.cloned(),
            weights: None,
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        },
    };
    let outcome = execute(&mut run);
    let mut manifest = run.manifest;
    if let Err(e) = &outcome {
        log::error!("stage {} failed: {e}", run.stage);
        manifest.status = RunStatus::Error;
        manifest.error = Some(RunError {
            stage: run.stage.to_string(),
            message: e.to_string(),
            exit_code: e.exit_code(),
        });
    }
    manifest.artifacts = hash_artifacts(dir)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    outcome.map(|()| manifest)
}

/// Validate, load agents, then run into a fresh timestamped directory under
/// `out_dir`. Nothing is written if validation fails.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<RunOutcome> {
    let agents = config.load_agents()?;
    let dir = create_run_dir(out_dir)?;
    let manifest = run_in_dir(config, agents.as_ref(), &dir)?;
    Ok(RunOutcome { dir, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub weighted: bool,
    pub multi_agent: bool,
    pub noise: NoiseMode,
    pub task: Task,
    pub weight_mean: f64,
    pub metrics: BTreeMap<String, f64>,
    pub run: String,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub dir: PathBuf,
    pub rows: Vec<AblationRow>,
}

/// The eight cells of {weighted, unweighted} × {single, multi agent} ×
/// {local, global noise}, each a full run on the same seed.
pub fn ablation_grid(base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let mut cells = Vec::with_capacity(8);
    for weighted in [true, false] {
        for multi in [false, true] {
            for noise in [NoiseMode::Local, NoiseMode::Global] {
                let mut c = base.clone();
                c.train.mode = if weighted {
                    TrainMode::Mmedpo
                } else {
                    TrainMode::Dpo
                };
                c.score.single_agent = !multi;
                c.noise.mode = noise;
                let name = format!(
                    "{}-{}-{}",
                    if weighted { "weighted" } else { "unweighted" },
                    if multi { "multi" } else { "single" },
                    match noise {
                        NoiseMode::Local => "local",
                        NoiseMode::Global => "global",
                    }
                );
                cells.push((name, c));
            }
        }
    }
    cells
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    use std::fmt::Write;
    let keys: Vec<&String> = rows
        .first()
        .map(|r| r.metrics.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("weighted,agents,noise,task,weight_mean");
    for k in &keys {
        write!(out, ",{k}").unwrap();
    }
    out.push_str(",run\n");
    for r in rows {
        write!(
            out,
            "{},{},{},{},{}",
            r.weighted,
            if r.multi_agent { "multi" } else { "single" },
            if r.noise == NoiseMode::Local {
                "local"
            } else {
                "global"
            },
            r.task,
            r.weight_mean
        )
        .unwrap();
        for k in &keys {
            write!(out, ",{}", r.metrics.get(*k).copied().unwrap_or(f64::NAN)).unwrap();
        }
        writeln!(out, ",{}", r.run).unwrap();
    }
    out
}

/// Run the ablation grid into `out_dir/ablation-<timestamp>/<cell>/` and
/// write `ablation.csv` beside the cells. The table reports the policy's
/// metrics on the first evaluated task.
pub fn run_ablation(config: &PipelineConfig, out_dir: &Path) -> Result<AblationOutcome> {
    let agents = config.load_agents()?;
    if config.curate.mode != CurateMode::Both {
        log::warn!("ablation with curate.mode other than both leaves some axes inert");
    }
    let root = create_run_dir(out_dir)?;
    let mut rows = Vec::with_capacity(8);
    for (name, cell) in ablation_grid(config) {
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = run_in_dir(&cell, agents.as_ref(), &dir)?;
        let (key, metrics) = manifest
            .metrics
            .iter()
            .find(|(k, _)| k.starts_with("policy/"))
            .ok_or_else(|| Error::validation("run produced no policy metrics"))?;
        rows.push(AblationRow {
            weighted: cell.train.mode == TrainMode::Mmedpo,
            multi_agent: !cell.score.single_agent,
            noise: cell.noise.mode,
            task: key["policy/".len()..].parse()?,
            weight_mean: manifest.weights.as_ref().map_or(f64::NAN, |w| w.mean),
            metrics: metrics.clone(),
            run: name,
        });
    }
    write(&root.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(AblationOutcome { dir: root, rows })
}
