//! Synthetic benchmarks with class-conditional label noise, and the plain
//! CSV formats used to exchange features and soft labels with other tools.
//!
//! File formats:
//!
//! * features: header `d=<int>`, then one row of `d` comma-separated floats per instance;
//! * labels: header `C=<int>` optionally followed by `,name` for each class, then one
//!   row of `C` nonnegative floats per instance (renormalized on load);
//! * truth: one integer class index per line.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{simplex_project, Dataset, LabelMatrix, NoiseMatrix};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class_count: usize,
    pub feature_dim: usize,
    /// Distance from the origin to every class center.
    pub class_center_separation: f64,
    pub intra_class_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.per_class_count == 0 {
            return Err(Error::Config("per_class_count must be at least 1".into()));
        }
        if !(self.class_center_separation > 0.0 && self.intra_class_std > 0.0) {
            return Err(Error::Config(format!(
                "separation and std must be positive, got {} and {}",
                self.class_center_separation, self.intra_class_std
            )));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::Config(format!(
                "orthogonal class centers need feature_dim >= num_classes ({} < {})",
                self.feature_dim, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Isotropic Gaussian clusters whose centers sit on random orthonormal
/// directions scaled by the separation, so every pair of centers is
/// `separation·√2` apart. Instances are grouped by class.
pub fn generate_gaussian_mixture(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Gram-Schmidt on random Gaussian vectors.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    while centers.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        for u in &centers {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        centers.push(v.into_iter().map(|x| x / norm).collect());
    }

    let n = c * cfg.per_class_count;
    let mut data = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..cfg.per_class_count {
            for &mu in center {
                data.push(
                    mu * cfg.class_center_separation
                        + cfg.intra_class_std * normal.sample(&mut rng),
                );
            }
            truth.push(class);
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, Some(truth), c, None)
}

/// Description of class-conditional label corruption.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Matrix(NoiseMatrix),
    /// Per-class probability of keeping the true label; the rest is spread
    /// uniformly over the other classes.
    Accuracy(Vec<f64>),
    /// `(from, to, mass)` moves `mass` of class `from` to label `to`; whatever
    /// is left stays on the diagonal.
    ConfusionPairs {
        num_classes: usize,
        pairs: Vec<(usize, usize, f64)>,
    },
}

impl NoiseSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Matrix(m) => m.num_classes(),
            Self::Accuracy(a) => a.len(),
            Self::ConfusionPairs { num_classes, .. } => *num_classes,
        }
    }

    /// Row-stochastic matrix induced by the spec.
    pub fn to_matrix(&self) -> Result<NoiseMatrix> {
        match self {
            Self::Matrix(m) => Ok(m.clone()),
            Self::Accuracy(acc) => {
                let c = acc.len();
                if c < 2 {
                    return Err(Error::Config(
                        "accuracy vector needs at least 2 classes".into(),
                    ));
                }
                let mut m = Matrix::zeros(c, c);
                for (j, &a) in acc.iter().enumerate() {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Config(format!(
                            "class {j} accuracy {a} outside [0, 1]"
                        )));
                    }
                    let off = (1.0 - a) / (c - 1) as f64;
                    m.row_mut(j).fill(off);
                    m[(j, j)] = a;
                }
                NoiseMatrix::new(m)
            }
            Self::ConfusionPairs { num_classes, pairs } => {
                let c = *num_classes;
                let mut m = Matrix::identity(c);
                for &(from, to, mass) in pairs {
                    if from >= c || to >= c || from == to {
                        return Err(Error::Config(format!(
                            "invalid confusion pair {from}->{to}"
                        )));
                    }
                    if !(0.0..=1.0).contains(&mass) {
                        return Err(Error::Config(format!(
                            "confusion mass {mass} outside [0, 1]"
                        )));
                    }
                    m[(from, to)] += mass;
                    m[(from, from)] -= mass;
                }
                if let Some(j) = (0..c).find(|&j| m[(j, j)] < -1e-12) {
                    return Err(Error::Config(format!(
                        "confusion mass out of class {j} exceeds 1"
                    )));
                }
                for j in 0..c {
                    m[(j, j)] = m[(j, j)].max(0.0);
                }
                NoiseMatrix::new(m)
            }
        }
    }
}

/// Samples one corrupted hard label per instance from the row of its true class.
pub fn sample_noisy_labels(
    true_labels: &[usize],
    noise: &NoiseMatrix,
    seed: u64,
) -> Result<Vec<usize>> {
    let c = noise.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    true_labels
        .iter()
        .map(|&t| {
            if t >= c {
                return Err(Error::InvalidInput(format!(
                    "true label {t} outside [0, {c})"
                )));
            }
            let row = noise.matrix().row(t);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(k);
                }
            }
            // u landed in the rounding gap at the top; take the last class with mass.
            Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(c - 1))
        })
        .collect()
}

/// Soft labels with `confidence` on each hard label and the remainder spread
/// uniformly over the other classes.
pub fn soft_labels_from_hard(
    hard: &[usize],
    num_classes: usize,
    confidence: f64,
) -> Result<Matrix> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(Error::Config(format!(
            "confidence must lie in (0, 1], got {confidence}"
        )));
    }
    let off = (1.0 - confidence) / (num_classes - 1) as f64;
    let mut m = Matrix::filled(hard.len(), num_classes, off);
    for (i, &k) in hard.iter().enumerate() {
        m[(i, k)] = confidence;
    }
    Ok(m)
}

/// Corrupts the dataset's true labels according to `spec` and wraps them as
/// an epoch-0 label store.
pub fn inject_noise(
    dataset: &Dataset,
    spec: &NoiseSpec,
    confidence: f64,
    seed: u64,
) -> Result<LabelMatrix> {
    let truth = dataset
        .true_labels()
        .ok_or_else(|| Error::Precondition("inject_noise needs true labels".into()))?;
    if spec.num_classes() != dataset.num_classes() {
        return Err(Error::Config(format!(
            "noise spec has {} classes, dataset has {}",
            spec.num_classes(),
            dataset.num_classes()
        )));
    }
    let noise = spec.to_matrix()?;
    let hard = sample_noisy_labels(truth, &noise, seed)?;
    LabelMatrix::new(soft_labels_from_hard(
        &hard,
        dataset.num_classes(),
        confidence,
    )?)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses `key=<int>[,extra,...]` and returns the integer and the extras.
fn parse_header<'a>(path: &Path, line: &'a str, key: &str) -> Result<(usize, Vec<&'a str>)> {
    let mut cells = line.split(',');
    let first = cells.next().unwrap_or("").trim();
    let value = first
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| {
            parse_err(
                path,
                1,
                format!("expected header `{key}=<int>`, got `{first}`"),
            )
        })?;
    let value = value
        .trim()
        .parse()
        .map_err(|e| parse_err(path, 1, format!("header value `{value}`: {e}")))?;
    Ok((value, cells.map(str::trim).collect()))
}

/// Reads a headed CSV of floats. Returns the header value, header extras and the rows.
fn read_float_table(path: &Path, key: &str) -> Result<(usize, Vec<String>, Matrix)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let (width, extras) = parse_header(path, header, key)?;
    if width == 0 {
        return Err(parse_err(path, 1, format!("{key} must be positive")));
    }
    let extras: Vec<String> = extras.into_iter().map(String::from).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_err(path, line_no, format!("non-numeric cell `{}`", cell.trim()))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("non-finite cell `{}`", cell.trim()),
                ));
            }
            data.push(v);
        }
        if data.len() - before != width {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {width} values, found {}", data.len() - before),
            ));
        }
        rows += 1;
    }
    Ok((width, extras, Matrix::from_vec(rows, width, data)?))
}

pub fn read_truth_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                parse_err(
                    path,
                    i + 1,
                    format!("expected a class index, got `{}`", l.trim()),
                )
            })
        })
        .collect()
}

/// Reads a label file on its own: rows projected onto the simplex, plus any
/// class names from the header.
pub fn load_labels(path: &Path) -> Result<(Matrix, Option<Vec<String>>)> {
    let (c, names, mut labels) = read_float_table(path, "C")?;
    let names = match names.len() {
        0 => None,
        k if k == c => Some(names),
        k => {
            return Err(Error::Format(format!(
                "{}: header lists {k} class names for C={c}",
                path.display()
            )))
        }
    };
    for r in 0..labels.rows() {
        let projected = simplex_project(labels.row(r))?;
        labels.row_mut(r).copy_from_slice(&projected);
    }
    Ok((labels, names))
}

/// Loads features, soft labels and (optionally) ground truth. Label rows are
/// projected onto the simplex.
pub fn load_external(
    features_path: &Path,
    labels_path: &Path,
    truth_path: Option<&Path>,
) -> Result<(Dataset, LabelMatrix)> {
    let (_, _, features) = read_float_table(features_path, "d")?;
    let (labels, names) = load_labels(labels_path)?;
    if features.rows() != labels.rows() {
        return Err(Error::Format(format!(
            "{} has {} rows but {} has {}",
            features_path.display(),
            features.rows(),
            labels_path.display(),
            labels.rows()
        )));
    }
    let truth = truth_path.map(read_truth_file).transpose()?;
    let dataset = Dataset::new(features, truth, labels.cols(), names)?;
    Ok((dataset, LabelMatrix::new(labels)?))
}

fn format_rows(out: &mut String, m: &Matrix) {
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
}

pub fn features_to_string(features: &Matrix) -> String {
    let mut out = format!("d={}\n", features.cols());
    format_rows(&mut out, features);
    out
}

pub fn labels_to_string(labels: &Matrix, class_names: Option<&[String]>) -> String {
    let mut out = format!("C={}", labels.cols());
    if let Some(names) = class_names {
        for n in names {
            write!(out, ",{n}").unwrap();
        }
    }
    out.push('\n');
    format_rows(&mut out, labels);
    out
}

/// Writes the three exchange files; the truth file only when truth is known.
/// Floats use shortest round-trip formatting.
pub fn write_external(
    dataset: &Dataset,
    labels: &Matrix,
    features_path: &Path,
    labels_path: &Path,
    truth_path: Option<&Path>,
) -> Result<()> {
    std::fs::write(features_path, features_to_string(dataset.features()))?;
    std::fs::write(labels_path, labels_to_string(labels, dataset.class_names()))?;
    if let (Some(path), Some(truth)) = (truth_path, dataset.true_labels()) {
        let mut out = String::with_capacity(truth.len() * 3);
        for t in truth {
            writeln!(out, "{t}").unwrap();
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}
