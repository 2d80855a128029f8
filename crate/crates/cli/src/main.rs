use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use medpref::agents::AgentClient;
use medpref::curation::{build_text_pairs, build_visual_pairs, merge, CurationReport};
use medpref::dataset::{load_dataset, save_dataset, MedicalSample, Task};
use medpref::dpo::{trace_csv, train, train_sft};
use medpref::metrics::evaluate;
use medpref::noising::NoiseMode;
use medpref::normalize::{attach_weights, NormMode};
use medpref::pair::{load_pairs, save_pairs, PreferencePair};
use medpref::pipeline::{run_ablation, run_pipeline, CurateMode, PipelineConfig, TrainMode};
use medpref::policy::{Init, PolicyModel, Vocab};
use medpref::relevance::score_pairs;
use medpref::rng::{derive_seed, Rng};
use medpref::synth::synth_dataset;
use medpref::{Error, Result};

#[derive(Parser)]
#[command(
    name = "medpref",
    version,
    about = "Relevance-weighted multimodal preference optimization"
)]
struct Cli {
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline TOML config (sections per stage).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where run directories and default outputs go.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-lesion dataset.
    Synth(SynthArgs),
    /// Build preference pairs from a dataset.
    Curate(CurateArgs),
    /// Attach consensus relevance scores to text pairs.
    Score(ScoreArgs),
    /// Turn raw scores into bounded weights.
    Normalize(NormalizeArgs),
    /// Train a policy on (weighted) pairs.
    Train(TrainArgs),
    /// Decode a dataset with a checkpoint and score it.
    Eval(EvalArgs),
    /// Run every stage into a fresh run directory.
    Pipeline,
    /// Run the weighted × agents × noise grid.
    Ablate,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    task: Option<Task>,
    /// Dataset JSONL; defaults to <out-dir>/synth/dataset.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<CurateMode>,
    #[arg(long = "noise.mode")]
    noise_mode: Option<String>,
    /// Candidate answers sampled per sample.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    agents: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    agents: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for consensus transcripts.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Score with the first scorer only.
    #[arg(long)]
    single: bool,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "norm.mode")]
    norm_mode: Option<NormMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    out: PathBuf,
    /// Reference checkpoint; a fresh model from the pairs' vocabulary otherwise.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Loss trace CSV; defaults to <out>.loss.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializes"));
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn with_agents(mut config: PipelineConfig, flag: Option<PathBuf>) -> PipelineConfig {
    if let Some(p) = flag {
        config.agents = Some(std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p));
    }
    config
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(n) = args.n {
        config.data.synth.n = n;
    }
    if let Some(t) = args.task {
        config.data.synth.task = t;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("synth/dataset.jsonl"));
    let samples = synth_dataset(
        &config.data.synth,
        &mut Rng::new(derive_seed(config.seed, "synth")),
    )?;
    ensure_parent(&out)?;
    save_dataset(&samples, &out)?;
    print_json(&serde_json::json!({"dataset": out, "samples": samples.len()}));
    Ok(())
}

#[derive(Serialize)]
struct CurateSummary {
    pairs: usize,
    report: CurationReport,
}

fn curate(cli: &Cli, args: &CurateArgs) -> Result<()> {
    let mut config = with_agents(load_config(cli)?, args.agents.clone());
    if let Some(m) = args.mode {
        config.curate.mode = m;
    }
    if let Some(m) = &args.noise_mode {
        config.noise.mode = match m.as_str() {
            "local" => NoiseMode::Local,
            "global" => NoiseMode::Global,
            other => return Err(Error::validation(format!("unknown noise mode {other:?}"))),
        };
    }
    if let Some(n) = args.n {
        config.curate.candidates = n;
    }
    let agents = config.load_agents()?;
    let dataset = load_dataset(&args.dataset)?;
    let mut report = CurationReport::default();
    let mut text = Vec::new();
    if let Some(a) = &agents {
        let mut rng = Rng::new(derive_seed(config.seed, "curate-text"));
        let (p, r) = build_text_pairs(
            &AgentClient::default(),
            &dataset,
            &a.generator,
            &a.judge,
            config.curate.candidates,
            &mut rng,
        )?;
        report.extend(r);
        text = p;
    }
    let mut visual = Vec::new();
    if config.curate.mode.visual() {
        let mut rng = Rng::new(derive_seed(config.seed, "curate-visual"));
        let schedule = config.noise.schedule()?;
        let (p, r) = build_visual_pairs(
            &dataset,
            &schedule,
            config.noise.k,
            config.noise.mode,
            &mut rng,
        )?;
        report.extend(r);
        visual = p;
    }
    let pairs = merge(text, visual);
    ensure_parent(&args.out)?;
    save_pairs(&pairs, &args.out)?;
    print_json(&CurateSummary {
        pairs: pairs.len(),
        report,
    });
    Ok(())
}

fn score(cli: &Cli, args: &ScoreArgs) -> Result<()> {
    let mut config = with_agents(load_config(cli)?, args.agents.clone());
    config.curate.mode = CurateMode::Text;
    if let Some(r) = args.rounds {
        config.score.round_cap = r;
    }
    config.score.single_agent |= args.single;
    let agents = config.load_agents()?.expect("text mode loads agents");
    let pairs = load_pairs(&args.pairs)?;
    let mut rng = Rng::new(derive_seed(config.seed, "score"));
    let (scored, transcripts, report) = score_pairs(
        &AgentClient::default(),
        pairs,
        &config.consensus(&agents),
        &mut rng,
    )?;
    ensure_parent(&args.out)?;
    save_pairs(&scored, &args.out)?;
    if let Some(dir) = &args.transcripts {
        let mut body = Vec::new();
        for t in &transcripts {
            serde_json::to_writer(&mut body, t).expect("transcript serializes");
            body.push(b'\n');
        }
        write_file(&dir.join("consensus.jsonl"), body)?;
    }
    print_json(
        &serde_json::json!({"pairs": scored.len(), "transcripts": transcripts.len(), "report": report}),
    );
    Ok(())
}

fn normalize(cli: &Cli, args: &NormalizeArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(m) = args.norm_mode {
        config.norm.mode = m;
    }
    config.norm.validate()?;
    let pairs = attach_weights(load_pairs(&args.pairs)?, &config.norm)?;
    ensure_parent(&args.out)?;
    save_pairs(&pairs, &args.out)?;
    print_json(&serde_json::json!({"pairs": pairs.len(), "norm": config.norm}));
    Ok(())
}

/// The preferred side of each pair as a supervised sample, once per sample id.
fn sft_samples(pairs: &[PreferencePair]) -> Vec<MedicalSample> {
    let mut seen = BTreeSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.sample_id.clone()))
        .map(|p| MedicalSample {
            id: p.sample_id.clone(),
            image: p.input_image.clone(),
            heatmap: None,
            query: p.query.clone(),
            answer: p.preferred.clone(),
            task: Task::ClosedQa,
        })
        .collect()
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if let Some(m) = args.mode {
        config.train.mode = m;
    }
    let mut pairs = load_pairs(&args.pairs)?;
    if pairs.is_empty() {
        return Err(Error::validation("pair file is empty"));
    }
    if config.train.mode == TrainMode::Dpo {
        pairs.iter_mut().for_each(|p| p.weight = Some(1.0));
    }
    let reference = match &args.reference {
        Some(p) => PolicyModel::load(p)?,
        None => {
            let texts = pairs.iter().flat_map(|p| {
                [
                    p.query.as_str(),
                    p.preferred.as_str(),
                    p.dispreferred.as_str(),
                ]
            });
            PolicyModel::new(
                Vocab::from_texts(texts)?,
                config.train.embed_dim,
                pairs[0].input_image.channels(),
                derive_seed(config.seed, "init"),
                Init::Uniform,
            )?
        }
    };
    let seed = derive_seed(config.seed, "train");
    let (model, trace) = match config.train.mode {
        TrainMode::Sft => {
            let cfg = config.train.sft(seed);
            cfg.validate()?;
            train_sft(&reference, &sft_samples(&pairs), &cfg, &mut Rng::new(seed))?
        }
        TrainMode::Dpo | TrainMode::Mmedpo => {
            let cfg = config.train.preference(seed);
            cfg.validate()?;
            train(&reference, &reference, &pairs, &cfg, &mut Rng::new(seed))?
        }
    };
    ensure_parent(&args.out)?;
    model.save(&args.out)?;
    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut s = args.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    write_file(&trace_path, trace_csv(&trace))?;
    let last = trace.last().expect("trace has the epoch-0 row");
    print_json(&serde_json::json!({
        "checkpoint": args.out, "trace": trace_path, "mode": config.train.mode.to_string(), "final_loss": last.loss
    }));
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let model = PolicyModel::load(&args.ckpt)?;
    let dataset: Vec<MedicalSample> = load_dataset(&args.dataset)?
        .into_iter()
        .filter(|s| s.task == args.task)
        .collect();
    let report = evaluate(&model, &dataset, args.task)?;
    let mut body = serde_json::to_vec_pretty(&report).expect("report serializes");
    body.push(b'\n');
    write_file(&args.out, body)?;
    print_json(
        &serde_json::json!({"task": args.task, "samples": report.samples, "means": report.means}),
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Curate(a) => curate(cli, a),
        Command::Score(a) => score(cli, a),
        Command::Normalize(a) => normalize(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Pipeline => {
            let out = run_pipeline(&load_config(cli)?, &cli.out_dir)?;
            print_json(&serde_json::json!({"run": out.dir, "metrics": out.manifest.metrics}));
            Ok(())
        }
        Command::Ablate => {
            let out = run_ablation(&load_config(cli)?, &cli.out_dir)?;
            print!("{}", medpref::pipeline::ablation_csv(&out.rows));
            eprintln!("ablation written to {}", out.dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
