//! `bjmd`: batch front end for generating, fitting, scoring and filtering
//! multi-source data.

mod artifacts;
mod cmd;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bjmd::evaluation::SelectMode;
use bjmd::experiment::{Engine, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bjmd", version, about = "Bayesian joint matrix decomposition")]
struct Cli {
    /// Base RNG seed; overrides the seed in the spec or manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Small,
    Large,
}

#[derive(Debug, Args)]
struct SpecSource {
    /// Generator spec (TOML).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in benchmark spec.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Noise level of the last source for a preset.
    #[arg(long, default_value_t = 4.0)]
    sigma3: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-source dataset with ground truth.
    Synth(SpecSource),
    /// Fit the model to the sources listed in a manifest.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        /// Engine; defaults to the manifest's solver.engine.
        #[arg(long, value_parser = parse_engine)]
        engine: Option<Engine>,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 1)]
        keep_best: usize,
    },
    /// Score fitted coefficients against binary cluster labels.
    Eval {
        #[arg(long)]
        fit_dir: PathBuf,
        /// Manifest providing label files; defaults to the one recorded by `fit`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Label files, one per source, overriding the manifest.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        labels: Vec<PathBuf>,
    },
    /// Sweep the last source's noise level and compare model variants.
    Sweep {
        #[command(flatten)]
        spec: SweepSpec,
        /// Noise levels of the last source.
        #[arg(long, value_delimiter = ',', default_value = "1.5,2,2.5,3,3.5,4,4.5,5,5.5")]
        sigma3: Vec<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_engine, default_value = "map")]
        engines: Vec<Engine>,
        #[arg(long, value_delimiter = ',', value_enum, default_values_t = [VariantArg::Bjmd, VariantArg::Concat])]
        variants: Vec<VariantArg>,
        #[arg(long, default_value_t = 20)]
        restarts: usize,
        #[arg(long, default_value_t = 5)]
        keep_best: usize,
    },
    /// Keep features whose variance exceeds the fitted noise level.
    Select {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fit_dir: PathBuf,
        /// False-discovery level.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Any)]
        select_mode: ModeArg,
    },
}

#[derive(Debug, Args)]
struct SweepSpec {
    /// Base generator spec (TOML); its last sigma is replaced per cell.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Bjmd,
    Concat,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Bjmd => Variant::Bjmd,
            VariantArg::Concat => Variant::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Any,
    All,
}

impl From<ModeArg> for SelectMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Any => SelectMode::Any,
            ModeArg::All => SelectMode::All,
        }
    }
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    s.parse().map_err(|e: bjmd::BjmdError| e.to_string())
}

fn run(cli: Cli) -> Result<cmd::Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    io::ensure_dir(&cli.out)?;
    match cli.command {
        Command::Synth(src) => {
            let spec = cmd::synth::resolve_spec(src.spec.as_deref(), src.preset.map(preset_name), src.sigma3)?;
            cmd::synth::run(spec, cli.seed, &cli.out)
        }
        Command::Fit { manifest, engine, restarts, keep_best } => {
            cmd::fit::run(&manifest, engine, restarts, keep_best, cli.seed, &cli.out)
        }
        Command::Eval { fit_dir, manifest, labels } => {
            cmd::eval::run(&fit_dir, manifest.as_deref(), &labels, &cli.out)
        }
        Command::Sweep { spec, sigma3, engines, variants, restarts, keep_best } => {
            let base = cmd::synth::resolve_spec(spec.spec.as_deref(), spec.preset.map(preset_name), 4.0)?;
            let variants = variants.into_iter().map(Variant::from).collect();
            cmd::sweep::run(cmd::sweep::Request {
                base,
                sigma3,
                engines,
                variants,
                restarts,
                keep_best,
                seed: cli.seed,
                out: cli.out,
            })
        }
        Command::Select { manifest, fit_dir, alpha, select_mode } => {
            cmd::select::run(&manifest, &fit_dir, alpha, select_mode.into(), &cli.out)
        }
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Small => "small",
        Preset::Large => "large",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(cmd::Outcome::Success) => ExitCode::SUCCESS,
        Ok(cmd::Outcome::SolverFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
