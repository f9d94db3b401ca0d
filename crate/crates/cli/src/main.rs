use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gudn_core::harness::{self, Checkpoint, TrainConfig};
use gudn_core::{DatasetBundle, GudnError, SynthConfig};

mod plot;

#[derive(Parser)]
#[command(name = "gudn", version, about = "Guide-network multi-label text classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train.jsonl, test.jsonl, labels.tsv).
    GenSynth(GenSynth),
    /// Train one model and save checkpoint.json and run.json.
    Train(Train),
    /// Test-split metrics of a checkpoint.
    Eval(Eval),
    /// Rank labels for every sample of a JSONL file.
    Predict(Predict),
    /// Cluster the labels of a dataset into balanced groups.
    Cluster(Cluster),
    /// Train every combination of the given axes with one seed.
    Ablate(Ablate),
    /// Draw metric bars and loss curves for the runs below a directory.
    PlotMetrics(PlotMetrics),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "L", default_value_t = 16)]
    num_labels: usize,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 2)]
    labels_per_sample: usize,
    #[arg(long, default_value_t = 1.0)]
    semantic_strength: f64,
    #[arg(long, default_value_t = 5)]
    noise_tokens: usize,
    #[arg(long, default_value_t = 2)]
    signature_words: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set encoder.num_layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| GudnError::Config(format!("cannot read {}: {e}", path.display())))?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metric options; defaults to the config in `run.json` beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Args)]
struct Cluster {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "C")]
    num_clusters: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated axes, each optionally `name=a|b`.
    #[arg(long)]
    axes: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotMetrics {
    #[arg(long)]
    runs: PathBuf,
    /// `.svg` or `.png`.
    #[arg(long)]
    out: PathBuf,
}

fn load_data(dir: &Path, max_input_len: usize) -> Result<DatasetBundle> {
    Ok(DatasetBundle::load_dir(dir, max_input_len)?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => {
            let cfg = SynthConfig {
                num_labels: a.num_labels,
                n_train: a.n_train,
                n_test: a.n_test,
                labels_per_sample: a.labels_per_sample,
                noise_tokens: a.noise_tokens,
                semantic_strength: a.semantic_strength,
                seed: a.seed,
                signature_words: a.signature_words,
                ..SynthConfig::default()
            };
            let data = gudn_core::gen_synthetic(&cfg)?;
            data.save_dir(&a.out)?;
            print_json(&data.stats)?;
        }
        Command::Train(a) => {
            let cfg = a.config.load()?;
            let data = load_data(&a.data, cfg.encoder.max_input_len)?;
            let outcome = harness::train_to_dir(&cfg, &data, &a.out)?;
            log::info!("wrote {}", a.out.display());
            if let Some(m) = &outcome.record.final_metrics {
                print_json(m)?;
            }
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let cfg = match &a.config {
                Some(path) => ConfigArgs { config: Some(path.clone()), overrides: Vec::new() }.load()?,
                None => sibling_config(&a.checkpoint).unwrap_or_default(),
            };
            let data = load_data(&a.data, ckpt.model.encoder.max_input_len)?;
            print_json(&harness::evaluate_checkpoint(&ckpt, &data, &cfg)?)?;
        }
        Command::Predict(a) => predict(&a)?,
        Command::Cluster(a) => {
            let data = load_data(&a.data, 2)?;
            let index = gudn_core::build_clusters(&gudn_core::label_bow(&data), a.num_clusters, a.seed)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&a.out, serde_json::to_vec(&index)?)?;
            writeln!(std::io::stdout(), "{} labels in {} clusters -> {}", index.num_labels(), index.num_clusters(), a.out.display())?;
        }
        Command::Ablate(a) => {
            let cfg = a.config.load()?;
            let axes = harness::parse_axes(&a.axes)?;
            let data = load_data(&a.data, cfg.encoder.max_input_len)?;
            let table = harness::run_ablation(&cfg, &axes, &data, Some(&a.out))?;
            write!(std::io::stdout(), "{}", table.to_text())?;
        }
        Command::PlotMetrics(a) => {
            let runs = plot::collect_runs(&a.runs)?;
            plot::write_chart(&plot::render_svg(&runs), &a.out)?;
            writeln!(std::io::stdout(), "{} runs -> {}", runs.len(), a.out.display())?;
        }
    }
    Ok(())
}

fn sibling_config(checkpoint: &Path) -> Option<TrainConfig> {
    let path = checkpoint.parent()?.join("run.json");
    let text = fs::read_to_string(path).ok()?;
    let record: gudn_core::RunRecord = serde_json::from_str(&text).ok()?;
    Some(record.config)
}

#[derive(serde::Serialize)]
struct PredictionLine {
    id: u64,
    labels: Vec<gudn_core::LabelId>,
    scores: Vec<f64>,
}

fn predict(a: &Predict) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let samples = gudn_core::corpus::read_samples(&a.input)?;
    let max_len = ckpt.model.encoder.max_input_len;
    let texts = samples
        .iter()
        .map(|s| Ok(gudn_core::tokenize(&s.text, &ckpt.tokens, max_len)?.ids))
        .collect::<Result<Vec<_>>>()?;
    let model = ckpt.into_model()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (chunk_s, chunk_t) in samples.chunks(a.batch.max(1)).zip(texts.chunks(a.batch.max(1))) {
        for (s, r) in chunk_s.iter().zip(model.predict(chunk_t, a.top_k)?) {
            let line = PredictionLine { id: s.id, labels: r.labels, scores: r.scores };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// 2 config, 3 data, 4 divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(is_broken_pipe) {
        return 0;
    }
    match err.downcast_ref::<GudnError>() {
        Some(GudnError::Config(_)) => 2,
        Some(GudnError::Data(_) | GudnError::MissingParams(_) | GudnError::Io(_) | GudnError::Json(_)) => 3,
        Some(GudnError::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    let io = e.downcast_ref::<std::io::Error>().or_else(|| match e.downcast_ref::<GudnError>() {
        Some(GudnError::Io(io)) => Some(io),
        _ => None,
    });
    let kind = io.map(std::io::Error::kind).or_else(|| e.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind));
    kind == Some(std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("gudn") {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if exit_code(&err) == 0 => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}
