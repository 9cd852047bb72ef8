//! `rlhaif`: runs the pipeline stages against a run directory and serves
//! the annotation API.

pub mod config;
pub mod error;
pub mod manifest;
pub mod server;
pub mod stages;
pub mod transport;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliError, CliResult};
use stages::{Artifact, RaterChoice, Run};

#[derive(Debug, Parser)]
#[command(name = "rlhaif", version, about = "Preference-feedback training pipeline for a desk-scale physics QA task")]
pub struct Cli {
    /// Directory holding run.json, artifacts and the manifest.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    /// Config file; defaults to <run-dir>/run.json when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the question set and its train/test split.
    GenData,
    /// Build six-answer candidate sets for the training questions.
    Collect,
    /// Rank every candidate set.
    Rank {
        #[arg(long, value_enum)]
        rater: RaterChoice,
    },
    /// Expand rankings into preference pairs.
    BuildPrefs,
    /// Supervised fine-tuning on the gold training answers.
    TrainSft,
    /// Train the reward model on the preference pairs.
    TrainRm,
    /// PPO from the SFT policy against the reward model.
    TrainPpo,
    /// DPO from the SFT policy on the preference pairs.
    TrainDpo,
    /// ReMax from the SFT policy against the reward model.
    TrainRemax,
    /// Decode the test questions with every trained policy.
    Eval,
    /// Score predictions into report.json.
    Report,
    /// Serve the annotation API and UI.
    Serve {
        /// Overrides server.bind
        #[arg(long)]
        bind: Option<String>,
        /// Overrides server.port
        #[arg(long)]
        port: Option<u16>,
    },
    /// Every stage in order.
    Pipeline {
        #[arg(long, value_enum, default_value = "mock")]
        rater: RaterChoice,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let default_path = cli.run_dir.join("run.json");
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if default_path.exists() => RunConfig::load(&default_path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn serve(run: &Run, bind: Option<String>, port: Option<u16>) -> CliResult<()> {
    let s = &run.cfg.server;
    let host = bind.unwrap_or_else(|| s.bind.clone());
    let port = port.unwrap_or(s.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("bad bind address {host}:{port}: {e}")))?;
    let candidates = run.path(Artifact::Candidates);
    if !candidates.exists() {
        return Err(CliError::Missing { artifact: "candidate sets", producer: "collect" });
    }
    let static_dir = resolve(&run.dir, &s.static_dir);
    let state = Arc::new(server::AppState::load(&candidates, &run.path(Artifact::Rankings), &static_dir)?);
    let listener = std::net::TcpListener::bind(addr)?;
    println!("serving on http://{}", listener.local_addr()?);
    server::serve_blocking(state, listener)?;
    Ok(())
}

fn resolve(run_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run_dir.join(p)
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    cfg.validate()?;
    let mut run = Run::open(&cli.run_dir, cfg, cli.force)?;
    match cli.command {
        Command::GenData => run.gen_data(),
        Command::Collect => run.collect(),
        Command::Rank { rater } => run.rank(rater),
        Command::BuildPrefs => run.build_prefs(),
        Command::TrainSft => run.train_sft(),
        Command::TrainRm => run.train_rm(),
        Command::TrainPpo => run.train_ppo(),
        Command::TrainDpo => run.train_dpo(),
        Command::TrainRemax => run.train_remax(),
        Command::Eval => run.eval(),
        Command::Report => run.report(),
        Command::Serve { bind, port } => serve(&run, bind, port),
        Command::Pipeline { rater } => run.pipeline(rater),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 stage failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
