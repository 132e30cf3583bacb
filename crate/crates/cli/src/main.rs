use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use noisylab::config::{ExperimentSpec, RawConfig};
use noisylab::experiment::{class_names, prepare_data, run_experiment};
use noisylab::report::emit_noise_heatmap_data;
use noisylab_core::datamodel::{empirical_noise_matrix, NoiseMatrix};
use noisylab_core::numkernel::Matrix;
use noisylab_core::synth::{load_labels, read_truth_file, write_external};
use noisylab_core::Error;

#[derive(Parser)]
#[command(
    name = "noisylab",
    version,
    about = "Train classifiers on noisy soft labels and compare label strategies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, seed) cell of an experiment.
    Run(RunArgs),
    /// Write a synthetic dataset (features, noisy labels, truth) to disk.
    Synth(SynthArgs),
    /// Print the empirical noise matrix of a label file against ground truth.
    InspectNoise(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset providing defaults, e.g. `paper-regime`.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_name = "ensemble|pseudo|clip")]
    label_update: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_name = "forward|reverse")]
    kl_direction: Option<String>,
    #[arg(long, value_name = "aug_only|both_views")]
    denominator: Option<String>,
    /// Fit the KL term on the augmented view.
    #[arg(long)]
    kl_on_aug: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replicate seed added to the data and noise seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also write the full-precision CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_raw(args: &ConfigArgs) -> Result<RawConfig, Error> {
    let mut raw = match &args.config {
        Some(path) => RawConfig::from_file(path)?,
        None => RawConfig::default(),
    };
    if let Some(p) = &args.preset {
        raw.set("preset", p)?;
    }
    for o in &args.overrides {
        raw.apply_override(o)?;
    }
    Ok(raw)
}

fn run_spec(args: &RunArgs) -> Result<ExperimentSpec, Error> {
    let mut raw = load_raw(&args.config)?;
    let flags = [
        ("label_update", args.label_update.clone()),
        ("tau", args.tau.map(|t| t.to_string())),
        ("kl_direction", args.kl_direction.clone()),
        ("denominator", args.denominator.clone()),
        ("kl_on_aug", args.kl_on_aug.then(|| "true".to_string())),
        (
            "output",
            args.output.as_ref().map(|p| p.display().to_string()),
        ),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            raw.set(k, &v)?;
        }
    }
    ExperimentSpec::from_raw(&raw)
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let spec = match run_spec(args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let result = run_experiment(&spec).context("experiment aborted")?;
    print!("{}", result.summary_text);
    println!("outputs in {}", spec.output.display());
    Ok(ExitCode::from(result.exit_code() as u8))
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<ExitCode> {
    let spec = match load_raw(&args.config).and_then(|r| ExperimentSpec::from_raw(&r)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let (dataset, labels) = prepare_data(&spec.data, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    write_external(
        &dataset,
        labels.initial_labels(),
        &dir.join("features.csv"),
        &dir.join("labels.csv"),
        Some(&dir.join("truth.txt")),
    )?;
    if let Some(truth) = dataset.true_labels() {
        let nm = empirical_noise_matrix(&labels.hard_labels(), truth, dataset.num_classes())?;
        let csv = emit_noise_heatmap_data(&nm, &class_names(&dataset))?;
        std::fs::write(dir.join("noise_matrix.csv"), csv.data)?;
        std::fs::write(dir.join("noise_matrix_display.csv"), csv.display)?;
    }
    println!(
        "wrote n={} d={} C={} to {}",
        dataset.len(),
        dataset.dim(),
        dataset.num_classes(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(args: &InspectArgs) -> anyhow::Result<ExitCode> {
    let (labels, names) = load_labels(&args.labels)?;
    let truth = read_truth_file(&args.truth)?;
    if truth.len() != labels.rows() {
        anyhow::bail!(
            "{} label rows but {} truth entries",
            labels.rows(),
            truth.len()
        );
    }
    let c = labels.cols();
    let nm: NoiseMatrix = empirical_noise_matrix(&Matrix::argmax_rows(&labels), &truth, c)?;
    let names = names.unwrap_or_else(|| (0..c).map(|i| i.to_string()).collect());
    let csv = emit_noise_heatmap_data(&nm, &names)?;
    print!("{}", csv.display);
    for (j, flagged) in nm.flagged_rows().iter().enumerate() {
        if *flagged {
            println!(
                "note: class {} has no instances; its row is uniform",
                names[j]
            );
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv.data)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::InspectNoise(a) => cmd_inspect(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
