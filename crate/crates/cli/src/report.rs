//! CSV writers and readers for run reports, summaries, curves and noise
//! matrices.
//!
//! Floats in data files use Rust's shortest round-trip formatting, so a
//! reload reproduces every value bit for bit. Wall-clock time is kept out of
//! the run report and written to a separate timing file; that keeps reports
//! from identical runs byte-identical.

use std::fmt::Write as _;

use noisylab_core::datamodel::{EpochRecord, NoiseMatrix, RunReport};
use noisylab_core::numkernel::Matrix;
use noisylab_core::{Error, Result};

use crate::config::Variant;

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn parse_opt(cell: &str, line: usize) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("line {line}: `{cell}` is not a number")))
}

/// Header for a run report with `num_classes` per-class columns.
pub fn run_report_header(objective_scaling: &str, num_classes: usize) -> String {
    let mut out = format!("# objective_scaling={objective_scaling}\n");
    out.push_str("epoch,accuracy,label_accuracy,mean_kl,mean_contrastive,flip_rate");
    for c in 0..num_classes {
        write!(out, ",class_{c}").unwrap();
    }
    out.push('\n');
    out
}

/// One report row. Missing per-class values (truth unknown, or a class with
/// no instances) are empty cells.
pub fn run_report_row(r: &EpochRecord, num_classes: usize) -> String {
    let mut out = format!(
        "{},{},{},{:?},{},{:?}",
        r.epoch,
        opt(r.accuracy),
        opt(r.label_accuracy),
        r.mean_kl,
        opt(r.mean_contrastive),
        r.flip_rate
    );
    for c in 0..num_classes {
        let v = r
            .per_class_accuracy
            .as_ref()
            .and_then(|pc| pc.get(c).copied().flatten());
        write!(out, ",{}", opt(v)).unwrap();
    }
    out.push('\n');
    out
}

pub fn run_report_to_csv(report: &RunReport, num_classes: usize) -> String {
    let mut out = run_report_header(&report.objective_scaling, num_classes);
    for r in &report.records {
        out.push_str(&run_report_row(r, num_classes));
    }
    out
}

/// Reads a report back. `seconds` is not part of the format and comes back as 0.
pub fn parse_run_report(text: &str) -> Result<RunReport> {
    let mut lines = text.lines().enumerate();
    let scaling = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("# objective_scaling="))
        .ok_or_else(|| Error::Format("missing `# objective_scaling=` line".into()))?;
    let header = lines
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| Error::Format("missing column header".into()))?;
    let fixed = "epoch,accuracy,label_accuracy,mean_kl,mean_contrastive,flip_rate";
    let classes = header
        .strip_prefix(fixed)
        .ok_or_else(|| Error::Format(format!("unexpected column header `{header}`")))?
        .split(',')
        .filter(|c| !c.is_empty())
        .count();

    let mut report = RunReport {
        records: Vec::new(),
        objective_scaling: scaling.to_string(),
    };
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 + classes {
            return Err(Error::Format(format!(
                "line {line_no}: expected {} cells, found {}",
                6 + classes,
                cells.len()
            )));
        }
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Format(format!("line {line_no}: {what} is empty")))
        };
        let per_class = cells[6..]
            .iter()
            .map(|c| parse_opt(c, line_no))
            .collect::<Result<Vec<_>>>()?;
        let accuracy = parse_opt(cells[1], line_no)?;
        report.records.push(EpochRecord {
            epoch: cells[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {line_no}: bad epoch `{}`", cells[0])))?,
            // Per-class accuracy exists exactly when overall accuracy does.
            per_class_accuracy: accuracy.map(|_| per_class),
            accuracy,
            label_accuracy: parse_opt(cells[2], line_no)?,
            mean_kl: need(parse_opt(cells[3], line_no)?, "mean_kl")?,
            mean_contrastive: parse_opt(cells[4], line_no)?,
            flip_rate: need(parse_opt(cells[5], line_no)?, "flip_rate")?,
            seconds: 0.0,
        });
    }
    Ok(report)
}

pub fn timing_header() -> &'static str {
    "epoch,seconds\n"
}

pub fn timing_row(r: &EpochRecord) -> String {
    format!("{},{:.6}\n", r.epoch, r.seconds)
}

/// Full-precision and two-decimal renderings of a noise matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCsv {
    pub data: String,
    pub display: String,
}

fn heatmap(nm: &NoiseMatrix, names: &[String], cell: impl Fn(f64) -> String) -> String {
    let mut out = String::from("true\\label");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (name, row) in names.iter().zip(nm.matrix().row_iter()) {
        out.push_str(name);
        for &v in row {
            write!(out, ",{}", cell(v)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Rows are true classes, columns are assigned labels.
pub fn emit_noise_heatmap_data(nm: &NoiseMatrix, names: &[String]) -> Result<HeatmapCsv> {
    if names.len() != nm.num_classes() {
        return Err(Error::Format(format!(
            "{} class names for a {}-class noise matrix",
            names.len(),
            nm.num_classes()
        )));
    }
    if let Some(bad) = names.iter().find(|n| n.contains(',') || n.contains('\n')) {
        return Err(Error::Format(format!(
            "class name `{bad}` contains a separator"
        )));
    }
    Ok(HeatmapCsv {
        data: heatmap(nm, names, |v| format!("{v:?}")),
        display: heatmap(nm, names, |v| format!("{v:.2}")),
    })
}

/// Parses the data copy written by [`emit_noise_heatmap_data`].
pub fn parse_noise_heatmap(text: &str) -> Result<(NoiseMatrix, Vec<String>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty noise matrix file".into()))?;
    let names: Vec<String> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let c = names.len();
    let mut data = Vec::with_capacity(c * c);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != c + 1 {
            return Err(Error::Format(format!(
                "noise matrix row {}: expected {} cells, found {}",
                i + 1,
                c + 1,
                cells.len()
            )));
        }
        for cell in &cells[1..] {
            data.push(cell.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "noise matrix row {}: `{cell}` is not a number",
                    i + 1
                ))
            })?);
        }
        rows += 1;
    }
    if rows != c {
        return Err(Error::Format(format!(
            "noise matrix has {rows} rows for {c} columns"
        )));
    }
    Ok((NoiseMatrix::new(Matrix::from_vec(c, c, data)?)?, names))
}

/// Final metrics of one finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFinal {
    pub accuracy: Option<f64>,
    pub label_accuracy: Option<f64>,
    /// Mean flip rate over the last ten epochs.
    pub flip_rate_last10: f64,
}

impl RunFinal {
    pub fn from_report(report: &RunReport) -> Self {
        let last = report.last();
        Self {
            accuracy: last.and_then(|r| r.accuracy),
            label_accuracy: last.and_then(|r| r.label_accuracy),
            flip_rate_last10: report.mean_flip_rate_last(10),
        }
    }
}

/// Aggregate over the seeds of one variant. Failed runs are counted but do
/// not enter the statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub finals: Vec<RunFinal>,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; zero for a single value.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

impl VariantSummary {
    pub fn accuracies(&self) -> Vec<f64> {
        self.finals.iter().filter_map(|f| f.accuracy).collect()
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        mean(&self.accuracies())
    }

    pub fn std_accuracy(&self) -> Option<f64> {
        sample_std(&self.accuracies())
    }

    pub fn mean_label_accuracy(&self) -> Option<f64> {
        mean(
            &self
                .finals
                .iter()
                .filter_map(|f| f.label_accuracy)
                .collect::<Vec<_>>(),
        )
    }

    pub fn mean_flip_rate_last10(&self) -> Option<f64> {
        mean(
            &self
                .finals
                .iter()
                .map(|f| f.flip_rate_last10)
                .collect::<Vec<_>>(),
        )
    }
}

pub fn summary_csv(rows: &[VariantSummary]) -> String {
    let mut out = String::from(
        "variant,runs,failed,mean_accuracy,std_accuracy,mean_label_accuracy,mean_flip_rate_last10\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.runs,
            r.failed,
            opt(r.mean_accuracy()),
            opt(r.std_accuracy()),
            opt(r.mean_label_accuracy()),
            opt(r.mean_flip_rate_last10())
        )
        .unwrap();
    }
    out
}

/// Human-readable table; accuracies in percent.
pub fn summary_text(rows: &[VariantSummary], failures: &[(Variant, u64, String)]) -> String {
    let pct = |v: Option<f64>| {
        v.map(|x| format!("{:.2}", 100.0 * x))
            .unwrap_or_else(|| "-".into())
    };
    let mut out = format!(
        "{:<24} {:>5} {:>7} {:>18} {:>10} {:>12}\n",
        "variant", "runs", "failed", "accuracy %", "labels %", "flip(last10)"
    );
    for r in rows {
        let acc = match (r.mean_accuracy(), r.std_accuracy()) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
            _ => "-".into(),
        };
        let flip = r
            .mean_flip_rate_last10()
            .map(|f| format!("{f:.4}"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<24} {:>5} {:>7} {:>18} {:>10} {:>12}",
            r.variant.to_string(),
            r.runs,
            r.failed,
            acc,
            pct(r.mean_label_accuracy()),
            flip
        )
        .unwrap();
    }
    for (variant, seed, err) in failures {
        writeln!(out, "failed: {variant} seed {seed}: {err}").unwrap();
    }
    out
}

/// Long-format per-epoch curves across every successful or partial run.
pub fn curves_csv(runs: &[(Variant, u64, &RunReport)]) -> String {
    let mut out = String::from("variant,seed,epoch,accuracy,label_accuracy,flip_rate\n");
    for (variant, seed, report) in runs {
        for r in &report.records {
            writeln!(
                out,
                "{variant},{seed},{},{},{},{:?}",
                r.epoch,
                opt(r.accuracy),
                opt(r.label_accuracy),
                r.flip_rate
            )
            .unwrap();
        }
    }
    out
}
