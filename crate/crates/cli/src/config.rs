//! Flat `key = value` configuration.
//!
//! A config file holds one assignment per line; `#` starts a comment. Command
//! line overrides use the same syntax and win over the file, which in turn wins
//! over the named preset (if any).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use noisylab_core::labels::UpdateStrategy;
use noisylab_core::losses::LossKind;
use noisylab_core::synth::{NoiseSpec, SynthConfig};
use noisylab_core::trainer::TrainConfig;
use noisylab_core::{Error, Result};

use crate::preset;
use crate::report::parse_noise_heatmap;

/// Every key the runner understands.
pub const KNOWN_KEYS: &[&str] = &[
    // data
    "preset",
    "source",
    "classes",
    "per_class",
    "dim",
    "separation",
    "std",
    "data_seed",
    "noise_accuracy",
    "noise_pairs",
    "noise_matrix",
    "confidence",
    "noise_seed",
    "features",
    "labels",
    "truth",
    // training
    "epochs",
    "batch_size",
    "lr_backbone",
    "lr_head",
    "momentum",
    "bn_momentum",
    "hidden_dim",
    "loss",
    "label_update",
    "tau",
    "temperature",
    "lambda",
    "prob_floor",
    "kl_direction",
    "denominator",
    "kl_on_aug",
    "aug_sigma",
    "aug_dropout",
    // experiment
    "variants",
    "seeds",
    "output",
    "threads",
];

/// Unvalidated key/value pairs, in the order of precedence they were applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

fn split_assignment(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line).ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `k=v` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_assignment(assignment)
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(k, v)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Fills in preset defaults beneath the explicit entries.
    fn with_preset(&self) -> Result<Self> {
        let Some(name) = self.get("preset") else {
            return Ok(self.clone());
        };
        let defaults = preset::lookup(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset `{name}` (known: {})",
                preset::NAMES.join(", ")
            ))
        })?;
        let mut merged = Self::default();
        for (k, v) in defaults {
            merged.set(k, v)?;
        }
        merged.entries.extend(self.entries.clone());
        Ok(merged)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = `{v}`: {e}")))
            })
            .transpose()
    }

    fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}

/// A `loss:strategy` pair, e.g. `c3l:ensemble`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub loss: LossKind,
    pub strategy: UpdateStrategy,
}

impl Variant {
    pub fn new(loss: LossKind, strategy: UpdateStrategy) -> Self {
        Self { loss, strategy }
    }

    /// File-name friendly form, `c3l-ensemble`.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.loss, self.strategy)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.loss, self.strategy)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (loss, strategy) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("variant `{s}` is not `loss:strategy`")))?;
        Ok(Self {
            loss: loss.trim().parse()?,
            strategy: strategy.trim().parse()?,
        })
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    /// A Gaussian mixture regenerated per replicate seed. The mixture and noise
    /// seeds are offsets added to the replicate seed.
    Synthetic {
        mixture: SynthConfig,
        noise: NoiseSpec,
        confidence: f64,
        noise_seed: u64,
    },
    External {
        features: PathBuf,
        labels: PathBuf,
        truth: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data: DataSource,
    /// Shared settings; each cell overrides loss, strategy and seed.
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub threads: usize,
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("{key}: `{s}`: {e}")))
        })
        .collect()
}

/// `0..5`, `0..=4` or a comma list.
fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let bad = |e: std::num::ParseIntError| Error::Config(format!("seeds = `{value}`: {e}"));
    if let Some((a, b)) = value.split_once("..=") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(bad)?,
            b.trim().parse().map_err(bad)?,
        );
        return Ok((a..=b).collect());
    }
    if let Some((a, b)) = value.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(bad)?,
            b.trim().parse().map_err(bad)?,
        );
        return Ok((a..b).collect());
    }
    parse_list("seeds", value)
}

/// `from>to:mass` entries separated by `;`.
fn parse_pairs(value: &str) -> Result<Vec<(usize, usize, f64)>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let bad =
                || Error::Config(format!("noise_pairs entry `{entry}` is not `from>to:mass`"));
            let (edge, mass) = entry.split_once(':').ok_or_else(bad)?;
            let (from, to) = edge.split_once('>').ok_or_else(bad)?;
            Ok((
                from.trim().parse().map_err(|_| bad())?,
                to.trim().parse().map_err(|_| bad())?,
                mass.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key} = `{other}` is not a boolean"))),
    }
}

fn noise_spec(raw: &RawConfig, classes: usize) -> Result<NoiseSpec> {
    let given = ["noise_accuracy", "noise_pairs", "noise_matrix"]
        .iter()
        .filter(|k| raw.get(k).is_some())
        .count();
    if given > 1 {
        return Err(Error::Config(
            "set at most one of noise_accuracy, noise_pairs, noise_matrix".into(),
        ));
    }
    let spec = if let Some(v) = raw.get("noise_accuracy") {
        NoiseSpec::Accuracy(parse_list("noise_accuracy", v)?)
    } else if let Some(v) = raw.get("noise_pairs") {
        NoiseSpec::ConfusionPairs {
            num_classes: classes,
            pairs: parse_pairs(v)?,
        }
    } else if let Some(path) = raw.get("noise_matrix") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read noise matrix {path}: {e}")))?;
        NoiseSpec::Matrix(parse_noise_heatmap(&text)?.0)
    } else {
        NoiseSpec::Matrix(noisylab_core::datamodel::NoiseMatrix::identity(classes))
    };
    if spec.num_classes() != classes {
        return Err(Error::Config(format!(
            "noise spec has {} classes but classes = {classes}",
            spec.num_classes()
        )));
    }
    spec.to_matrix()?;
    Ok(spec)
}

fn data_source(raw: &RawConfig) -> Result<DataSource> {
    match raw.get("source").unwrap_or("synthetic") {
        "synthetic" => {
            let classes = raw.required("classes")?;
            let mixture = SynthConfig {
                num_classes: classes,
                per_class_count: raw.required("per_class")?,
                feature_dim: raw.required("dim")?,
                class_center_separation: raw.required("separation")?,
                intra_class_std: raw.parsed_or("std", 1.0)?,
                seed: raw.parsed_or("data_seed", 0)?,
            };
            mixture.validate()?;
            let confidence: f64 = raw.parsed_or("confidence", 0.9)?;
            if !(confidence > 0.0 && confidence <= 1.0) {
                return Err(Error::Config(format!(
                    "confidence {confidence} outside (0, 1]"
                )));
            }
            Ok(DataSource::Synthetic {
                noise: noise_spec(raw, classes)?,
                mixture,
                confidence,
                noise_seed: raw.parsed_or("noise_seed", 1)?,
            })
        }
        "external" => Ok(DataSource::External {
            features: raw.required("features")?,
            labels: raw.required("labels")?,
            truth: raw.parsed("truth")?,
        }),
        other => Err(Error::Config(format!(
            "source = `{other}` (expected synthetic|external)"
        ))),
    }
}

fn train_config(raw: &RawConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mut cfg = TrainConfig {
        epochs: raw.parsed_or("epochs", d.epochs)?,
        batch_size: raw.parsed_or("batch_size", d.batch_size)?,
        lr_backbone: raw.parsed_or("lr_backbone", d.lr_backbone)?,
        lr_head: raw.parsed_or("lr_head", d.lr_head)?,
        momentum: raw.parsed_or("momentum", d.momentum)?,
        bn_momentum: raw.parsed_or("bn_momentum", d.bn_momentum)?,
        hidden_dim: raw.parsed_or("hidden_dim", d.hidden_dim)?,
        strategy: raw.parsed_or("label_update", d.strategy)?,
        loss: raw.parsed_or("loss", d.loss)?,
        kl_on_aug: raw
            .get("kl_on_aug")
            .map(|v| parse_bool("kl_on_aug", v))
            .transpose()?
            .unwrap_or(d.kl_on_aug),
        ..d
    };
    cfg.rescale.tau = raw.parsed_or("tau", cfg.rescale.tau)?;
    cfg.loss_cfg.temperature = raw.parsed_or("temperature", cfg.loss_cfg.temperature)?;
    cfg.loss_cfg.lambda = raw.parsed_or("lambda", cfg.loss_cfg.lambda)?;
    cfg.loss_cfg.prob_floor = raw.parsed_or("prob_floor", cfg.loss_cfg.prob_floor)?;
    cfg.loss_cfg.kl_direction = raw.parsed_or("kl_direction", cfg.loss_cfg.kl_direction)?;
    cfg.loss_cfg.denominator = raw.parsed_or("denominator", cfg.loss_cfg.denominator)?;
    cfg.augment.gaussian_sigma = raw.parsed_or("aug_sigma", cfg.augment.gaussian_sigma)?;
    cfg.augment.dropout_prob = raw.parsed_or("aug_dropout", cfg.augment.dropout_prob)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentSpec {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let raw = raw.with_preset()?;
        let data = data_source(&raw)?;
        let train = train_config(&raw)?;
        let variants = match raw.get("variants") {
            Some(v) => parse_list::<Variant>("variants", v)?,
            None => vec![Variant::new(train.loss, train.strategy)],
        };
        if variants.is_empty() {
            return Err(Error::Config("variants is empty".into()));
        }
        let seeds = match raw.get("seeds") {
            Some(v) => parse_seeds(v)?,
            None => vec![train.seed],
        };
        if seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let threads = raw.parsed_or("threads", 1usize)?;
        if threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(Self {
            data,
            train,
            variants,
            seeds,
            output: raw.parsed_or("output", PathBuf::from("noisylab-out"))?,
            threads,
        })
    }

    /// Training config for one (variant, seed) cell.
    pub fn cell_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: variant.loss,
            strategy: variant.strategy,
            seed,
            ..self.train.clone()
        }
    }
}
