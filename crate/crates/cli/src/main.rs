use std::path::PathBuf;
use std::process::ExitCode;

use advgps::attack::{param_index, AttackMethod, ParamMask};
use advgps::io::rows_to_csv;
use advgps::pipeline::{cmd_attack, cmd_eval, cmd_generate, select_attacks, EvalMode, PipelineError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advgps", version, about = "Adversarial GPS-pose attacks on a surrogate cooperative perception pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON). Without it the built-in defaults are used and `--seed` is required.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scene suite and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Craft attacks on the saved scenes.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Run only this method (rba, fgsm, ifgsm, pgd, paa, advgps).
        #[arg(long, value_parser = parse_method)]
        method: Option<AttackMethod>,
        /// Parameter mask: xyz, all, or a comma-separated list of x, y, z, roll, pitch, yaw.
        #[arg(long, value_parser = parse_mask)]
        mask: Option<ParamMask>,
    },
    /// Evaluate AP for no-attack, no-fusion and saved attacks, or run a sweep or ablation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Single-parameter AdvGPS sweep over `all` parameters or one named parameter.
        #[arg(long, value_parser = parse_sweep, conflicts_with = "ablate")]
        sweep: Option<SweepTarget>,
        /// AdvGPS loss ablation: each loss alone and all together.
        #[arg(long)]
        ablate: bool,
        /// Evaluation variant, overriding `eval_variant` in the config.
        #[arg(long)]
        variant: Option<String>,
    },
}

fn parse_method(s: &str) -> Result<AttackMethod, String> {
    AttackMethod::parse(s).ok_or_else(|| format!("unknown method {s:?}"))
}

fn parse_mask(s: &str) -> Result<ParamMask, String> {
    ParamMask::parse(s).ok_or_else(|| format!("unknown mask {s:?}"))
}

/// `None` sweeps every parameter.
#[derive(Clone, Copy)]
struct SweepTarget(Option<usize>);

fn parse_sweep(s: &str) -> Result<SweepTarget, String> {
    if s == "all" {
        return Ok(SweepTarget(None));
    }
    param_index(s).map(|i| SweepTarget(Some(i))).ok_or_else(|| format!("unknown pose parameter {s:?}"))
}

fn load_config(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match (&common.config, common.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::new(seed),
        (None, None) => {
            return Err(PipelineError::Config { field: "seed".into(), reason: "is required without --config".into() });
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let manifest = cmd_generate(&cfg)?;
            println!("wrote {} scenes to {} (digest {})", manifest.count, cfg.out_dir.join("scenes").display(), manifest.digest);
        }
        Command::Attack { common, method, mask } => {
            let cfg = load_config(&common)?;
            let specs = select_attacks(&cfg, method, mask);
            for condition in cmd_attack(&cfg, &specs)? {
                println!("wrote {}", cfg.out_dir.join("attacks").join(condition).display());
            }
        }
        Command::Eval { common, sweep, ablate, variant } => {
            let cfg = load_config(&common)?;
            let mode = match (sweep, ablate) {
                (Some(SweepTarget(p)), _) => EvalMode::Sweep(p),
                (None, true) => EvalMode::Ablate,
                (None, false) => EvalMode::Standard,
            };
            let report = cmd_eval(&cfg, mode, variant.as_deref())?;
            print!("{}", rows_to_csv(&report.rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
