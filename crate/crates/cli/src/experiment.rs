//! Runs every (variant, seed) cell of an experiment and writes its outputs.
//!
//! Layout of the output directory:
//!
//! ```text
//! runs/<loss>-<strategy>-seed<k>.csv          per-epoch RunReport
//! runs/<loss>-<strategy>-seed<k>.timing.csv   wall-clock seconds per epoch
//! summary.txt, summary.csv                    mean ± std final accuracy per variant
//! curves.csv                                  per-epoch curves, long format
//! noise_matrix.csv, noise_matrix_display.csv  initial empirical noise matrix
//! ```
//!
//! The noise matrix comes from the first seed's data and needs ground truth.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use noisylab_core::datamodel::{empirical_noise_matrix, Dataset, LabelMatrix, RunReport};
use noisylab_core::synth::{generate_gaussian_mixture, inject_noise, load_external, SynthConfig};
use noisylab_core::trainer::run_training;
use noisylab_core::{Error, Result};

use crate::config::{DataSource, ExperimentSpec, Variant};
use crate::report::{
    curves_csv, emit_noise_heatmap_data, run_report_header, run_report_row, summary_csv,
    summary_text, timing_header, timing_row, RunFinal, VariantSummary,
};

/// Dataset and initial labels for one replicate seed.
pub fn prepare_data(source: &DataSource, seed: u64) -> Result<(Dataset, LabelMatrix)> {
    match source {
        DataSource::Synthetic {
            mixture,
            noise,
            confidence,
            noise_seed,
        } => {
            let dataset = generate_gaussian_mixture(&SynthConfig {
                seed: mixture.seed.wrapping_add(seed),
                ..mixture.clone()
            })?;
            let labels = inject_noise(&dataset, noise, *confidence, noise_seed.wrapping_add(seed))?;
            Ok((dataset, labels))
        }
        DataSource::External {
            features,
            labels,
            truth,
        } => load_external(features, labels, truth.as_deref()),
    }
}

/// Class names from the dataset, or `0..C` as strings.
pub fn class_names(dataset: &Dataset) -> Vec<String> {
    dataset
        .class_names()
        .map(<[String]>::to_vec)
        .unwrap_or_else(|| (0..dataset.num_classes()).map(|c| c.to_string()).collect())
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub variant: Variant,
    pub seed: u64,
    /// Every epoch completed, including those before a failure.
    pub report: RunReport,
    pub error: Option<String>,
    pub report_path: PathBuf,
}

impl CellResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<VariantSummary>,
    pub summary_text: String,
}

impl ExperimentResult {
    /// 0 when at least one run finished, 1 when all failed.
    pub fn exit_code(&self) -> i32 {
        if self.cells.iter().any(CellResult::succeeded) {
            0
        } else {
            1
        }
    }

    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}

pub fn run_file_stem(variant: Variant, seed: u64) -> String {
    format!("{}-seed{seed}", variant.slug())
}

/// Trains one cell, streaming report rows to disk as epochs complete.
fn run_cell(
    spec: &ExperimentSpec,
    data: &(Dataset, LabelMatrix),
    variant: Variant,
    seed: u64,
    runs_dir: &Path,
) -> Result<CellResult> {
    let (dataset, labels) = data;
    let c = dataset.num_classes();
    let stem = run_file_stem(variant, seed);
    let report_path = runs_dir.join(format!("{stem}.csv"));
    let mut report_file = BufWriter::new(File::create(&report_path)?);
    let mut timing_file =
        BufWriter::new(File::create(runs_dir.join(format!("{stem}.timing.csv")))?);
    report_file
        .write_all(run_report_header(noisylab_core::datamodel::OBJECTIVE_SCALING, c).as_bytes())?;
    timing_file.write_all(timing_header().as_bytes())?;
    report_file.flush()?;

    let mut io_error = None;
    let cfg = spec.cell_config(variant, seed);
    let outcome = run_training(dataset, labels.clone(), &cfg, |r| {
        let res = report_file
            .write_all(run_report_row(r, c).as_bytes())
            .and_then(|_| report_file.flush())
            .and_then(|_| timing_file.write_all(timing_row(r).as_bytes()))
            .and_then(|_| timing_file.flush());
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let (report, error) = match outcome {
        Ok(done) => (done.report, None),
        Err(failure) => {
            let msg = failure.to_string();
            (failure.partial, Some(msg))
        }
    };
    Ok(CellResult {
        variant,
        seed,
        report,
        error,
        report_path,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let runs_dir = spec.output.join("runs");
    fs::create_dir_all(&runs_dir)?;

    // Data is shared across variants so comparisons are paired by seed.
    let data: Vec<(Dataset, LabelMatrix)> = spec
        .seeds
        .iter()
        .map(|&s| prepare_data(&spec.data, s))
        .collect::<Result<_>>()?;

    let (first_ds, first_labels) = &data[0];
    if let Some(truth) = first_ds.true_labels() {
        let nm =
            empirical_noise_matrix(&first_labels.hard_labels(), truth, first_ds.num_classes())?;
        let csv = emit_noise_heatmap_data(&nm, &class_names(first_ds))?;
        fs::write(spec.output.join("noise_matrix.csv"), csv.data)?;
        fs::write(spec.output.join("noise_matrix_display.csv"), csv.display)?;
    }

    let jobs: Vec<(Variant, usize)> = spec
        .variants
        .iter()
        .flat_map(|&v| (0..spec.seeds.len()).map(move |i| (v, i)))
        .collect();
    let run = |&(variant, i): &(Variant, usize)| {
        run_cell(spec, &data[i], variant, spec.seeds[i], &runs_dir)
    };
    let cells: Vec<CellResult> = if spec.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.threads)
            .build()
            .map_err(|e| {
                Error::Config(format!("cannot start {} worker threads: {e}", spec.threads))
            })?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let summaries: Vec<VariantSummary> = spec
        .variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.variant == variant).collect();
            VariantSummary {
                variant,
                runs: mine.len(),
                failed: mine.iter().filter(|c| !c.succeeded()).count(),
                finals: mine
                    .iter()
                    .filter(|c| c.succeeded())
                    .map(|c| RunFinal::from_report(&c.report))
                    .collect(),
            }
        })
        .collect();
    let failures: Vec<(Variant, u64, String)> = cells
        .iter()
        .filter_map(|c| c.error.clone().map(|e| (c.variant, c.seed, e)))
        .collect();
    let text = summary_text(&summaries, &failures);
    fs::write(spec.output.join("summary.txt"), &text)?;
    fs::write(spec.output.join("summary.csv"), summary_csv(&summaries))?;
    let curves: Vec<(Variant, u64, &RunReport)> = cells
        .iter()
        .map(|c| (c.variant, c.seed, &c.report))
        .collect();
    fs::write(spec.output.join("curves.csv"), curves_csv(&curves))?;

    Ok(ExperimentResult {
        cells,
        summaries,
        summary_text: text,
    })
}
