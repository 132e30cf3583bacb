//! Two-layer MLP classifier with batch normalization and a softmax head,
//! plus the feature-space augmentation that produces the second view.
//!
//! Layout: `linear(d→h) → batchnorm → ReLU → linear(h→C) → softmax`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape, Var};

pub const BN_EPS: f64 = 1e-5;

const CHECKPOINT_MAGIC: &str = "noisylab-checkpoint v1";

/// Trainable tensors, in checkpoint and optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    W1,
    B1,
    Gamma,
    Beta,
    W2,
    B2,
}

impl ParamId {
    pub const ALL: [ParamId; 6] = [
        Self::W1,
        Self::B1,
        Self::Gamma,
        Self::Beta,
        Self::W2,
        Self::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::W1 => "w1",
            Self::B1 => "b1",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
            Self::W2 => "w2",
            Self::B2 => "b2",
        }
    }

    /// Layer 1 is the "backbone"; everything after it is the head.
    pub fn is_head(self) -> bool {
        !matches!(self, Self::W1 | Self::B1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Glorot-uniform weights, zero biases, identity batchnorm.
pub fn init_params(d: usize, h: usize, c: usize, seed: u64) -> Result<ClassifierParams> {
    if d == 0 || h == 0 || c == 0 {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got d={d} h={h} C={c}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix::from_vec(fan_in, fan_out, data)
    };
    Ok(ClassifierParams {
        w1: glorot(d, h)?,
        b1: Matrix::zeros(1, h),
        gamma: Matrix::filled(1, h, 1.0),
        beta: Matrix::zeros(1, h),
        running_mean: Matrix::zeros(1, h),
        running_var: Matrix::filled(1, h, 1.0),
        w2: glorot(h, c)?,
        b2: Matrix::zeros(1, c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batchnorm uses (and differentiates through) batch statistics.
    Train,
    /// Batchnorm uses the running statistics.
    Infer,
}

/// Tape handles for the trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub w1: Var,
    pub b1: Var,
    pub gamma: Var,
    pub beta: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        match id {
            ParamId::W1 => self.w1,
            ParamId::B1 => self.b1,
            ParamId::Gamma => self.gamma,
            ParamId::Beta => self.beta,
            ParamId::W2 => self.w2,
            ParamId::B2 => self.b2,
        }
    }
}

/// Result of recording a forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub probs: Var,
    /// Post-ReLU hidden features.
    pub feats: Var,
    /// Batch mean and (biased) variance of the pre-norm activations, train mode only.
    pub batch_stats: Option<(Matrix, Matrix)>,
}

/// Result of a plain forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probs: Matrix,
    pub feats: Matrix,
    pub batch_stats: Option<(Matrix, Matrix)>,
}

impl ClassifierParams {
    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::W1 => &self.w1,
            ParamId::B1 => &self.b1,
            ParamId::Gamma => &self.gamma,
            ParamId::Beta => &self.beta,
            ParamId::W2 => &self.w2,
            ParamId::B2 => &self.b2,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::W1 => &mut self.w1,
            ParamId::B1 => &mut self.b1,
            ParamId::Gamma => &mut self.gamma,
            ParamId::Beta => &mut self.beta,
            ParamId::W2 => &mut self.w2,
            ParamId::B2 => &mut self.b2,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamId::ALL.iter().all(|&id| self.get(id).is_finite())
            && self.running_mean.is_finite()
            && self.running_var.is_finite()
    }

    /// Registers every trainable tensor as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            w1: tape.param(self.w1.clone())?,
            b1: tape.param(self.b1.clone())?,
            gamma: tape.param(self.gamma.clone())?,
            beta: tape.param(self.beta.clone())?,
            w2: tape.param(self.w2.clone())?,
            b2: tape.param(self.b2.clone())?,
        })
    }

    /// Registers every trainable tensor as a constant.
    fn register_frozen(&self, tape: &mut Tape) -> Result<ParamVars> {
        Ok(ParamVars {
            w1: tape.constant(self.w1.clone())?,
            b1: tape.constant(self.b1.clone())?,
            gamma: tape.constant(self.gamma.clone())?,
            beta: tape.constant(self.beta.clone())?,
            w2: tape.constant(self.w2.clone())?,
            b2: tape.constant(self.b2.clone())?,
        })
    }

    /// Records the forward pass for `x` on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: &Matrix,
        mode: ForwardMode,
    ) -> Result<TapeForward> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape(),
                right: self.w1.shape(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("forward input"));
        }
        let m = x.rows();
        if mode == ForwardMode::Train && m < 2 {
            return Err(Error::Degenerate(
                "batchnorm in train mode needs at least 2 rows".into(),
            ));
        }
        let xv = tape.constant(x.clone())?;
        let z = tape.matmul(xv, vars.w1)?;
        let z = tape.add_row(z, vars.b1)?;

        let (normalized, batch_stats) = match mode {
            ForwardMode::Train => {
                let mean = tape.col_mean(z)?;
                let mean_b = tape.broadcast_rows(mean, m)?;
                let centered = tape.sub(z, mean_b)?;
                let sq = tape.mul(centered, centered)?;
                let var = tape.col_mean(sq)?;
                let stats = (tape.value(mean).clone(), tape.value(var).clone());
                let var_eps = tape.add_scalar(var, BN_EPS)?;
                let std = tape.sqrt(var_eps)?;
                let std_b = tape.broadcast_rows(std, m)?;
                (tape.div(centered, std_b)?, Some(stats))
            }
            ForwardMode::Infer => {
                let mean = tape.constant(self.running_mean.clone())?;
                let std = tape.constant(self.running_var.map(|v| (v + BN_EPS).sqrt()))?;
                let mean_b = tape.broadcast_rows(mean, m)?;
                let centered = tape.sub(z, mean_b)?;
                let std_b = tape.broadcast_rows(std, m)?;
                (tape.div(centered, std_b)?, None)
            }
        };
        let scaled = tape.mul_row(normalized, vars.gamma)?;
        let shifted = tape.add_row(scaled, vars.beta)?;
        let feats = tape.relu(shifted)?;
        let logits = tape.matmul(feats, vars.w2)?;
        let logits = tape.add_row(logits, vars.b2)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(TapeForward {
            probs,
            feats,
            batch_stats,
        })
    }

    /// Forward pass without gradient tracking. Inference mode is a pure
    /// function of `(self, x)`.
    pub fn forward(&self, x: &Matrix, mode: ForwardMode) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape)?;
        let out = self.forward_on_tape(&mut tape, &vars, x, mode)?;
        Ok(ForwardOutput {
            probs: tape.value(out.probs).clone(),
            feats: tape.value(out.feats).clone(),
            batch_stats: out.batch_stats,
        })
    }

    /// `running ← ρ·running + (1−ρ)·batch` for mean and variance.
    pub fn update_running_stats(
        &mut self,
        batch_mean: &Matrix,
        batch_var: &Matrix,
        rho: f64,
    ) -> Result<()> {
        self.running_mean = self
            .running_mean
            .scale(rho)
            .add(&batch_mean.scale(1.0 - rho))?;
        self.running_var = self
            .running_var
            .scale(rho)
            .add(&batch_var.scale(1.0 - rho))?;
        Ok(())
    }

    /// Plain-text dump of every tensor; floats use Rust's shortest
    /// round-trip formatting so reloads are bit-exact.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        for (name, m) in self.named_tensors() {
            writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", cells.join(",")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: "<checkpoint>".into(),
            line: line + 1,
            msg,
        };
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => {
                return Err(Error::Format(format!(
                    "missing `{CHECKPOINT_MAGIC}` header"
                )))
            }
        }
        let mut tensors: Vec<(String, Matrix)> = Vec::new();
        while let Some((ln, header)) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [kw, name, rows, cols] = parts[..] else {
                return Err(parse_err(
                    ln,
                    format!("expected `tensor <name> <rows> <cols>`, got `{header}`"),
                ));
            };
            if kw != "tensor" {
                return Err(parse_err(ln, format!("expected `tensor`, got `{kw}`")));
            }
            let rows: usize = rows
                .parse()
                .map_err(|e| parse_err(ln, format!("rows: {e}")))?;
            let cols: usize = cols
                .parse()
                .map_err(|e| parse_err(ln, format!("cols: {e}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("tensor {name} truncated")))?;
                for cell in row.split(',') {
                    let v: f64 = cell
                        .trim()
                        .parse()
                        .map_err(|e| parse_err(ln, format!("`{cell}`: {e}")))?;
                    data.push(v);
                }
            }
            tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
        }
        let mut take = |name: &str| {
            tensors
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| tensors.swap_remove(i).1)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
        };
        let params = ClassifierParams {
            w1: take("w1")?,
            b1: take("b1")?,
            gamma: take("gamma")?,
            beta: take("beta")?,
            running_mean: take("running_mean")?,
            running_var: take("running_var")?,
            w2: take("w2")?,
            b2: take("b2")?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    fn named_tensors(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden_dim();
        let c = self.num_classes();
        let expect = [
            (&self.b1, (1, h)),
            (&self.gamma, (1, h)),
            (&self.beta, (1, h)),
            (&self.running_mean, (1, h)),
            (&self.running_var, (1, h)),
            (&self.w2, (h, c)),
            (&self.b2, (1, c)),
        ];
        for (m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    op: "checkpoint",
                    left: m.shape(),
                    right: shape,
                });
            }
        }
        if self.running_var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Format("running variance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Gaussian jitter scale, relative to each feature's dataset std.
    pub gaussian_sigma: f64,
    /// Probability of zeroing each coordinate (no rescaling).
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.1,
            dropout_prob: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "gaussian_sigma must be >= 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// Jitters then drops coordinates of `batch`. The draw is a pure function
/// of `(batch, feature_std, cfg, counter)`; the trainer passes a fresh
/// counter per minibatch.
pub fn augment(
    batch: &Matrix,
    feature_std: &[f64],
    cfg: &AugmentConfig,
    counter: u64,
) -> Result<Matrix> {
    cfg.validate()?;
    if feature_std.len() != batch.cols() {
        return Err(Error::Dimension {
            op: "augment",
            left: batch.shape(),
            right: (1, feature_std.len()),
        });
    }
    if cfg.gaussian_sigma == 0.0 && cfg.dropout_prob == 0.0 {
        return Ok(batch.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(counter);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = batch.clone();
    for r in 0..out.rows() {
        for (v, &std) in out.row_mut(r).iter_mut().zip(feature_std) {
            let noise: f64 = normal.sample(&mut rng);
            let keep = rng.random::<f64>() >= cfg.dropout_prob;
            *v = if keep {
                *v + cfg.gaussian_sigma * std * noise
            } else {
                0.0
            };
        }
    }
    Ok(out)
}
