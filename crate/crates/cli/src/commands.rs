use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;

use namedis::active::QueryMode;
use namedis::dpgmm::{estimate_hyperparams, Sigma0Scale};
use namedis::eval::{apply_param, run_experiment, sweep, DataSource, Engine, LatentDataset, SweepParam};
use namedis::particle::ResampleScheme;
use namedis::pipeline::{latent_dataset, prepare, LatentRow};
use namedis::records::parse_records;
use namedis::session::{EventLog, Session};

use crate::artifacts;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::service::{self, AppState, ServiceOptions};

#[derive(Debug, Parser)]
#[command(
    name = "namedis",
    version,
    about = "Streaming name disambiguation with Dirichlet process mixtures"
)]
pub struct Cli {
    /// TOML configuration file (overrides the NAMEDIS_CONFIG variable).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split, build the vocabulary, factorize, and embed a dataset.
    Prepare(PrepareArgs),
    /// Classify the prepared stream and write predictions, report and event log.
    Stream(StreamArgs),
    /// Serve a live session over HTTP.
    Serve(ServeArgs),
    /// Repeat experiments over a range of one parameter.
    Sweep(SweepArgs),
    /// Inspect a snapshot, or rebuild one from an event log.
    Snapshot(SnapshotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EngineArg {
    Gibbs,
    Pf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Interactive,
    Oracle,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ResampleArg {
    Systematic,
    Stratified,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Sigma0Arg {
    Pooled,
    ExpectedCovariance,
}

/// Flags shared by the commands that run a model.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub m_offset: Option<f64>,
    #[arg(long, value_enum)]
    pub sigma0: Option<Sigma0Arg>,
    #[arg(long, value_enum)]
    pub engine: Option<EngineArg>,
    /// Number of particles.
    #[arg(long = "particles", short = 'M')]
    pub particles: Option<usize>,
    #[arg(long)]
    pub enp_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub resampling: Option<ResampleArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelArgs {
    fn apply(&self, c: &mut PipelineConfig) {
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.kappa {
            c.kappa = v;
        }
        if let Some(v) = self.m_offset {
            c.m_offset = v;
        }
        if let Some(v) = self.sigma0 {
            c.sigma0_scale = match v {
                Sigma0Arg::Pooled => Sigma0Scale::Pooled,
                Sigma0Arg::ExpectedCovariance => Sigma0Scale::ExpectedCovariance,
            };
        }
        if let Some(v) = self.engine {
            c.engine = match v {
                EngineArg::Gibbs => Engine::Gibbs,
                EngineArg::Pf => Engine::Pf,
            };
        }
        if let Some(v) = self.particles {
            c.particles = v;
        }
        if self.enp_threshold.is_some() {
            c.enp_threshold = self.enp_threshold;
        }
        if let Some(v) = self.resampling {
            c.resampling = match v {
                ResampleArg::Systematic => ResampleScheme::Systematic,
                ResampleArg::Stratified => ResampleScheme::Stratified,
            };
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if self.budget.is_some() {
            c.budget = self.budget;
        }
        if let Some(v) = self.mode {
            c.mode = match v {
                ModeArg::Interactive => QueryMode::Interactive,
                ModeArg::Oracle => QueryMode::Oracle,
                ModeArg::Off => QueryMode::Off,
            };
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Records, one JSON object per line.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// Years moved into the stream.
    #[arg(long)]
    pub t0: Option<u32>,
    /// Latent dimension.
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// Use the synthetic benchmark instead of prepared artifacts.
    #[arg(long)]
    pub synthetic: bool,
    /// Output directory for predictions, report and event log.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Independent runs summarized in the report.
    #[arg(long)]
    pub runs: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Snapshot written on demand and at shutdown.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Resume from this snapshot instead of the training data.
    #[arg(long)]
    pub restore: Option<PathBuf>,
    /// Seconds before a pending query falls back to the model prediction.
    #[arg(long)]
    pub query_timeout: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One of h, alpha, M, tau, T0.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Raw records; required for h and T0 sweeps on real data.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub runs: Option<usize>,
    /// CSV output; printed to stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SnapshotArgs {
    #[command(subcommand)]
    pub action: SnapshotAction,
}

#[derive(Debug, Subcommand)]
pub enum SnapshotAction {
    /// Validate a snapshot and print its summary.
    Show { path: PathBuf },
    /// Rebuild a session from prepared artifacts and an event log.
    Replay {
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&mut config, a),
        Command::Stream(a) => cmd_stream(&mut config, a),
        Command::Serve(a) => cmd_serve(&mut config, a),
        Command::Sweep(a) => cmd_sweep(&mut config, a),
        Command::Snapshot(a) => cmd_snapshot(&config, a),
    }
}

fn read_dataset(path: &Path) -> CliResult<Vec<namedis::records::RawRecord>> {
    let f = File::open(path).map_err(|e| CliError::usage(format!("dataset {}: {e}", path.display())))?;
    parse_records(BufReader::new(f)).map_err(|e| CliError::from(e).context(path.display()))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn cmd_prepare(config: &mut PipelineConfig, a: PrepareArgs) -> CliResult<()> {
    if a.dataset.is_some() {
        config.dataset = a.dataset;
    }
    if let Some(v) = a.artifacts {
        config.artifacts = v;
    }
    if let Some(v) = a.t0 {
        config.t0 = v;
    }
    if let Some(v) = a.h {
        config.h = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;
    let path = config
        .dataset
        .clone()
        .ok_or_else(|| CliError::usage("no dataset given"))?;
    let records = read_dataset(&path)?;
    let prepared = prepare(&records, &config.prepare_options())?;
    let written = artifacts::write(&config.artifacts, &prepared)?;
    println!(
        "prepared {} training and {} stream records (h = {}, vocabulary {})",
        prepared.train.len(),
        prepared.test.len(),
        prepared.basis.rank(),
        prepared.vocabulary.len()
    );
    for p in written {
        println!("  {}", p.display());
    }
    Ok(())
}

fn synthetic_rows(config: &PipelineConfig) -> CliResult<(Vec<LatentRow>, Vec<LatentRow>)> {
    let d = config.synthetic.generate(config.seed)?;
    let rows = |ids: Vec<String>, xs: &[DVector<f64>], labels: &[String]| {
        ids.into_iter()
            .zip(xs.iter().zip(labels))
            .map(|(id, (x, l))| LatentRow {
                id,
                label: Some(l.clone()),
                x: x.as_slice().to_vec(),
            })
            .collect::<Vec<_>>()
    };
    let train_ids = (0..d.train_x.len()).map(|i| format!("t{i}")).collect();
    Ok((
        rows(train_ids, &d.train_x, &d.train_labels),
        rows(d.test_ids.clone(), &d.test_x, &d.test_labels),
    ))
}

fn training(rows: &[LatentRow]) -> CliResult<(Vec<DVector<f64>>, Vec<String>)> {
    let xs = rows.iter().map(LatentRow::vector).collect();
    let labels = rows
        .iter()
        .map(|r| {
            r.label
                .clone()
                .ok_or_else(|| CliError::data(format!("training record `{}` has no label", r.id)))
        })
        .collect::<CliResult<_>>()?;
    Ok((xs, labels))
}

fn new_session(config: &PipelineConfig, train: &[LatentRow]) -> CliResult<Session> {
    let (xs, labels) = training(train)?;
    let hyper = estimate_hyperparams(&xs, &labels, &config.hyper())?;
    Ok(Session::new(config.session(), hyper, &xs, &labels)?)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    index: usize,
    id: &'a str,
    predicted: &'a str,
    label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<&'a str>,
}

pub fn cmd_stream(config: &mut PipelineConfig, a: StreamArgs) -> CliResult<()> {
    if let Some(v) = a.artifacts {
        config.artifacts = v;
    }
    if let Some(v) = a.runs {
        config.runs = v;
    }
    a.model.apply(config);
    config.validate()?;
    if config.mode == QueryMode::Interactive {
        return Err(CliError::usage(
            "`stream` answers queries from the data; use --mode oracle or off, or `serve`",
        ));
    }
    let (train, test) = if a.synthetic {
        synthetic_rows(config)?
    } else {
        let art = artifacts::read(&config.artifacts)?;
        (art.train, art.test)
    };
    let mut session = new_session(config, &train)?;
    for r in &test {
        session.observe(&r.id, &r.vector(), r.label.as_deref())?;
    }

    fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    let mut w = create(&a.out.join("predictions.jsonl"))?;
    for (index, e) in session.entries().iter().enumerate() {
        let row = PredictionRow {
            index,
            id: &e.id,
            predicted: &e.predicted,
            label: &e.label,
            truth: e.truth.as_deref(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = create(&a.out.join("events.jsonl"))?;
    session.log().write(&mut w)?;
    w.flush()?;

    let metrics = session.metrics();
    let mut report = format!(
        "processed {}  queries {}  distinct {}  mean-F1 {}\n",
        metrics.processed,
        metrics.queries,
        metrics.distinct,
        metrics.mean_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
    );
    let labelled = test.iter().all(|r| r.label.is_some()) && !test.is_empty();
    if labelled {
        let source = if a.synthetic {
            DataSource::Synthetic(config.synthetic)
        } else {
            DataSource::Fixed(latent_dataset(&train, &test)?)
        };
        let rep = run_experiment(&source, &config.experiment(), &config.seeds())?;
        report.push_str(&rep.to_table());
        let mut w = create(&a.out.join("report.json"))?;
        serde_json::to_writer_pretty(&mut w, &rep)?;
        w.flush()?;
    }
    fs::write(a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn cmd_serve(config: &mut PipelineConfig, a: ServeArgs) -> CliResult<()> {
    if let Some(v) = a.artifacts {
        config.artifacts = v;
    }
    if a.snapshot.is_some() {
        config.snapshot = a.snapshot;
    }
    if let Some(v) = a.query_timeout {
        config.query_timeout_secs = v;
    }
    if a.model.mode.is_none() && config.mode == QueryMode::Off {
        config.mode = QueryMode::Interactive;
    }
    a.model.apply(config);
    config.validate()?;
    if config.engine != Engine::Pf {
        return Err(CliError::usage("the service runs the particle engine"));
    }
    let art = artifacts::read(&config.artifacts)?;
    let session = match &a.restore {
        Some(p) => Session::load(p).map_err(|e| CliError::from(e).context(p.display()))?,
        None => new_session(config, &art.train)?,
    };
    let options = ServiceOptions {
        query_timeout: Duration::from_secs_f64(config.query_timeout_secs),
        snapshot: config.snapshot.clone(),
    };
    let state = AppState::new(session, art.embedder, options);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(a.addr, state))
        .map_err(|e| CliError::usage(format!("cannot serve on {}: {e}", a.addr)))
}

pub fn cmd_sweep(config: &mut PipelineConfig, a: SweepArgs) -> CliResult<()> {
    let param: SweepParam = a.param.parse()?;
    if let Some(v) = a.runs {
        config.runs = v;
    }
    if let Some(v) = a.artifacts {
        config.artifacts = v;
    }
    if a.dataset.is_some() {
        config.dataset = a.dataset;
    }
    a.model.apply(config);
    config.validate()?;
    let records = match (&config.dataset, a.synthetic) {
        (Some(p), false) => Some(read_dataset(p)?),
        _ => None,
    };
    let base_source = if a.synthetic {
        DataSource::Synthetic(config.synthetic)
    } else if records.is_none() {
        let art = artifacts::read(&config.artifacts)?;
        DataSource::Fixed(latent_dataset(&art.train, &art.test)?)
    } else {
        DataSource::Fixed(LatentDataset {
            train_x: Vec::new(),
            train_labels: Vec::new(),
            test_ids: Vec::new(),
            test_x: Vec::new(),
            test_labels: Vec::new(),
        })
    };
    let base = config.clone();
    let table = sweep(param, &a.values, &config.seeds(), |v| {
        let mut cfg = base.clone();
        let mut exp = cfg.experiment();
        let mut source = base_source.clone();
        match (&records, param) {
            (Some(recs), _) => {
                match param {
                    SweepParam::H if v >= 1.0 && v.fract() == 0.0 => cfg.h = v as usize,
                    SweepParam::T0 if v >= 1.0 && v.fract() == 0.0 => cfg.t0 = v as u32,
                    SweepParam::H | SweepParam::T0 => {
                        return Err(namedis::Error::invalid(format!("{param} must be a positive integer")))
                    }
                    _ => apply_param(param, v, &mut source, &mut exp)?,
                }
                let p = prepare(recs, &cfg.prepare_options())?;
                source = DataSource::Fixed(latent_dataset(&p.train, &p.test)?);
            }
            (None, _) => apply_param(param, v, &mut source, &mut exp)?,
        }
        Ok((source, exp))
    })?;
    let csv = table.to_csv();
    match a.out {
        Some(p) => {
            fs::write(&p, &csv).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn cmd_snapshot(config: &PipelineConfig, a: SnapshotArgs) -> CliResult<()> {
    match a.action {
        SnapshotAction::Show { path } => {
            let s = Session::load(&path).map_err(|e| CliError::from(e).context(path.display()))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "summary": s.summary(),
                    "metrics": s.metrics(),
                    "config": s.config(),
                }))?
            );
            Ok(())
        }
        SnapshotAction::Replay {
            artifacts: dir,
            log,
            out,
        } => {
            let dir = dir.unwrap_or_else(|| config.artifacts.clone());
            let art = artifacts::read(&dir)?;
            let f = File::open(&log).map_err(|e| CliError::usage(format!("{}: {e}", log.display())))?;
            let events = EventLog::read(BufReader::new(f)).map_err(|e| CliError::from(e).context(log.display()))?;
            let mut replay_config = config.clone();
            let c = events.header.config;
            replay_config.engine = c.engine;
            replay_config.particles = c.particles;
            replay_config.enp_threshold = c.enp_threshold;
            replay_config.resampling = c.scheme;
            replay_config.seed = c.seed;
            replay_config.tau = c.active.tau;
            replay_config.budget = c.active.budget;
            replay_config.mode = c.active.mode;
            let mut session = new_session(&replay_config, &art.train)?;
            session.replay(&events)?;
            session.save(&out)?;
            println!("replayed {} records into {}", session.processed(), out.display());
            Ok(())
        }
    }
}
