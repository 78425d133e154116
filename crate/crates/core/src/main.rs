use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neurodecode::harness::{
    cmd_ablate, cmd_decode, cmd_evaluate, cmd_gen_data, cmd_roi_probe, cmd_train,
    ExperimentConfig, HarnessError, RunManifest,
};

/// Synthetic fMRI decoding experiments.
///
/// Any config field can be overridden with a flag of the same dotted name,
/// e.g. `--diffusion.mix_image 0.6` or `--variant=only_z`.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat the command for N simulated brains (seeds brain.seed..+N),
    /// each under its own `brain_<i>` subdirectory.
    #[arg(long, global = true, default_value_t = 1)]
    brains: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate scenes, captions, images and voxel trials.
    GenData,
    /// Fit codecs, regressors and denoisers.
    Train,
    /// Reconstruct images and captions for the test set.
    Decode,
    /// Score decoded outputs against ground truth.
    Evaluate,
    /// Decode and score every ablation variant.
    Ablate,
    /// Decode synthetic ROI activation patterns.
    RoiProbe,
}

const CONFIG_KEYS: [&str; 9] = [
    "world_seed",
    "data",
    "brain",
    "ridge",
    "diffusion",
    "eval",
    "roi",
    "variant",
    "output_dir",
];

type Overrides = Vec<(String, String)>;

/// Splits config-field flags from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), HarnessError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let head = name.split('.').next().unwrap_or_default();
        if !CONFIG_KEYS.contains(&head) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| HarnessError::Config {
                field: name.clone(),
                message: "missing value".into(),
            })?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn run_one(command: Command, cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    match command {
        Command::GenData => cmd_gen_data(cfg),
        Command::Train => cmd_train(cfg),
        Command::Decode => cmd_decode(cfg),
        Command::Evaluate => cmd_evaluate(cfg),
        Command::Ablate => cmd_ablate(cfg),
        Command::RoiProbe => cmd_roi_probe(cfg),
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<(), HarnessError> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    for b in 0..cli.brains {
        let mut cfg = cfg.clone();
        if cli.brains > 1 {
            cfg.brain.seed = cfg.brain.seed.wrapping_add(b);
            cfg.output_dir = cfg.output_root().join(format!("brain_{b}"));
        } else {
            cfg.output_dir = cfg.output_root();
        }
        let manifest = run_one(cli.command, &cfg)?;
        println!(
            "{}: wrote {} files under {}",
            manifest.command,
            manifest.files.len(),
            cfg.output_dir.display()
        );
        for (k, v) in &manifest.notes {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(args);
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
