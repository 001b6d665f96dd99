mod steps;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use roadweave::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(
    name = "roadweave",
    version,
    about = "Weak road labels from OpenStreetMap",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs whose content differs
    #[arg(long, global = true)]
    pub force: bool,
    /// Only log errors
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse OSM XML and write one road extract per touched frame
    Extract(steps::ExtractArgs),
    /// Render extracts to binary mask PNGs
    Render(steps::RenderArgs),
    /// Download frame tiles into the cache
    Fetch(steps::FetchArgs),
    /// Stitch cached tiles, render masks and record pairs
    Stitch(steps::StitchArgs),
    /// Road density histogram over a pair manifest
    Density(steps::DensityArgs),
    /// Select a k-scale pool at a target mean density
    Select(steps::SelectArgs),
    /// Export seeded random patches from a pool
    Sample(steps::SampleArgs),
    /// Dice loss and mIoU of predicted masks against ground truth
    Eval(steps::EvalArgs),
    /// extract, fetch, stitch, density, select and sample in one run
    Pipeline(steps::PipelineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Extract(_) => "extract",
            Command::Render(_) => "render",
            Command::Fetch(_) => "fetch",
            Command::Stitch(_) => "stitch",
            Command::Density(_) => "density",
            Command::Select(_) => "select",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

fn load_config(g: &Global) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    let mut cfg = load_config(&cli.global)?;
    let force = cli.global.force;
    match cli.command {
        Command::Extract(a) => steps::extract(&mut cfg, a, force),
        Command::Render(a) => steps::render(&mut cfg, a, force),
        Command::Fetch(a) => steps::fetch(&mut cfg, a),
        Command::Stitch(a) => steps::stitch(&mut cfg, a, force),
        Command::Density(a) => steps::density(&mut cfg, a, force),
        Command::Select(a) => steps::select(&mut cfg, a, force),
        Command::Sample(a) => steps::sample(&mut cfg, a, force),
        Command::Eval(a) => steps::eval(&mut cfg, a, force),
        Command::Pipeline(a) => steps::pipeline(&mut cfg, a, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "level": "error",
                "command": command,
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
