//! `viewplan`: generate data, train, evaluate and export view strategies.
//!
//! Exit codes: 0 success, 1 usage, 2 bad data or config, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use viewplan::config::{Profile, RunConfig};
use viewplan::metrics::{binomial, MAX_SUBSETS};
use viewplan::pipeline;
use viewplan::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const THREADS_VAR: &str = "VIEWPLAN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "viewplan", version, about = "Learned task-specific view sampling for sparse-view CT")]
struct Cli {
    /// TOML file merged over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate every task's dataset.
    GenData,
    /// Train all tasks jointly, then the downstream fine-tune.
    Train,
    /// Score the checkpoint on each task's test split.
    Eval,
    /// Write each task's deterministic view strategy.
    ExportStrategy,
    /// Rank every view subset exhaustively.
    Oracle {
        /// Task to rank; defaults to every task small enough to enumerate.
        #[arg(long)]
        task: Option<String>,
    },
    /// Noise power spectra of the learned and uniform strategies.
    Nps,
    /// Train configured tasks missing from the checkpoint.
    AddTask,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::ExportStrategy => "export-strategy",
            Command::Oracle { .. } => "oracle",
            Command::Nps => "nps",
            Command::AddTask => "add-task",
        }
    }
}

fn load_config(cli: &Cli) -> viewplan::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(cli.profile, path)?,
        None => RunConfig::profile(cli.profile),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> viewplan::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            for p in pipeline::gen_data(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train => {
            let state = pipeline::train(&cfg)?;
            println!("trained {} tasks for {} steps", state.branches.len(), state.step);
        }
        Command::Eval => {
            for r in pipeline::eval(&cfg)? {
                println!("{} {} psnr {:.3} ssim {:.4}", r.task_id, r.method, r.psnr_mean(), r.ssim_mean());
            }
        }
        Command::ExportStrategy => {
            for s in pipeline::export_strategy(&cfg)? {
                println!("{}: {:?}", s.task_id, s.indices);
            }
        }
        Command::Oracle { task } => {
            let views = cfg.geometry()?.views as u64;
            let tasks: Vec<String> = match task {
                Some(t) => vec![t.clone()],
                None => cfg
                    .tasks
                    .keys()
                    .filter(|id| cfg.vs_for(id).is_ok_and(|vs| binomial(views, vs as u64) <= MAX_SUBSETS))
                    .cloned()
                    .collect(),
            };
            if tasks.is_empty() {
                return Err(Error::Config {
                    section: "oracle".into(),
                    msg: format!("no task has at most {MAX_SUBSETS} subsets; pass --task to see the count"),
                });
            }
            for t in &tasks {
                if !cfg.tasks.contains_key(t) {
                    return Err(Error::Config { section: "tasks".into(), msg: format!("unknown task {t:?}") });
                }
                let s = pipeline::oracle(&cfg, t)?;
                let learned = s.learned_rank.map_or("n/a".to_string(), |r| r.to_string());
                println!("{}: {} subsets, uniform rank {}, learned rank {learned}", s.task_id, s.subsets, s.uniform_rank);
            }
        }
        Command::Nps => println!("wrote {}", pipeline::nps_command(&cfg)?.display()),
        Command::AddTask => println!("added {}", pipeline::add_task(&cfg)?.join(", ")),
    }
    pipeline::write_manifest(&pipeline::Layout::new(&cfg.output_dir), cli.command.name(), &cfg, &[("viewplan_cli", env!("CARGO_PKG_VERSION"))])
}

fn configure_threads() -> Result<(), String> {
    let Ok(text) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR}: expected a positive integer, got {text:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("{THREADS_VAR}: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}
