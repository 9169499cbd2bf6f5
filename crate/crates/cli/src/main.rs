//! `patchrd`: crop, train, complete and evaluate voxel shapes from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchrd::config::{PipelineConfig, Preset, RetrievalMode};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<patchrd::Error> for Failure {
    fn from(e: patchrd::Error) -> Self {
        use patchrd::Error as E;
        let code = match e {
            E::TrainingDiverged { .. } | E::Optimization { .. } => 3,
            E::EmptyCodebook => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

/// Adds the offending path to an error.
pub fn at(path: &std::path::Path) -> impl FnOnce(patchrd::Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "patchrd", version, about = "Patch-based voxel shape completion")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "PATCHRD_THREADS")]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Delete a random cuboid or cut a random plane from a grid.
    Crop(commands::CropArgs),
    /// Train the coarse and detailed patch embedders on a partial/complete pair.
    TrainEmbed(commands::TrainArgs),
    /// Complete a partial grid.
    Complete(commands::CompleteArgs),
    /// Crop, complete and score a dataset; write a CSV report.
    Eval(commands::EvalArgs),
    /// Write the exposed voxel faces of a grid as an OBJ mesh.
    ExportObj(commands::ExportArgs),
    /// Describe a grid or embedder file.
    Info(commands::InfoArgs),
    /// Write procedural test shapes.
    Synth(commands::SynthArgs),
}

/// Config selection and the overrides shared by pipeline commands. Flags win
/// over the config file, which wins over the preset.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Parameter preset the config file and flags apply to.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// JSON config; missing fields come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_retrieval)]
    retrieval: Option<RetrievalMode>,
    /// Coarse provider: heuristic, gt_downsample, or a path to a coarse grid.
    #[arg(long)]
    coarse: Option<String>,
    /// Disable a pipeline part: no-deform, no-blend or no-smooth. Repeatable.
    #[arg(long, value_name = "PART")]
    ablate: Vec<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "k", value_name = "K")]
    k: Option<usize>,
    #[arg(long = "m", value_name = "M")]
    m: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    opt_iters: Option<usize>,
    /// Trained embedders (PRDB1) for embedding retrieval.
    #[arg(long)]
    embedder: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: patchrd::Error| e.to_string())
}

fn parse_retrieval(s: &str) -> Result<RetrievalMode, String> {
    s.parse().map_err(|e: patchrd::Error| e.to_string())
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<PipelineConfig> {
        use patchrd::coarse::CoarseProvider;
        let base = PipelineConfig::preset(self.preset.unwrap_or(Preset::Paper));
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_json_over(&text, &base).map_err(at(path))?
            }
            None => base,
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.retrieval {
            c.retrieval = v;
        }
        if let Some(v) = &self.coarse {
            c.coarse = match v.as_str() {
                "heuristic" => CoarseProvider::default(),
                "gt_downsample" | "gt" => CoarseProvider::GtDownsample,
                path => CoarseProvider::ExternalFile { path: path.into() },
            };
        }
        for a in &self.ablate {
            match a.as_str() {
                "no-deform" | "no_deform" => c.ablations.no_deform = true,
                "no-blend" | "no_blend" => c.ablations.no_blend = true,
                "no-smooth" | "no_smooth" => c.ablations.no_smooth = true,
                other => {
                    return Err(Failure::input(format!(
                        "unknown ablation '{other}' (expected no-deform, no-blend or no-smooth)"
                    )))
                }
            }
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.m {
            c.m = v;
        }
        if let Some(v) = self.restarts {
            c.restarts = v;
        }
        if let Some(v) = self.opt_iters {
            c.opt_iters = v;
        }
        if let Some(v) = &self.embedder {
            c.paths.embedder = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Crop(a) => commands::crop(a),
        Command::TrainEmbed(a) => commands::train_embed(a),
        Command::Complete(a) => commands::complete(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportObj(a) => commands::export_obj(a),
        Command::Info(a) => commands::info(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
