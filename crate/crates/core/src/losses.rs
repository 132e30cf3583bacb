//! Training objectives.
//!
//! Every loss exists in two forms: a graph builder that records onto a
//! caller-owned [`Tape`] (used by the trainer), and a standalone evaluator
//! over a [`BatchOutputs`] snapshot that returns the value together with
//! gradients for each input matrix.
//!
//! Batch losses are sums over the batch, not means.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape, Var, PROB_FLOOR};

/// Added to squared row norms before normalizing for cosine similarity, so
/// that an all-zero feature row (dead ReLU units) stays finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(model ‖ target)`, model output as the first argument.
    ModelFirst,
    /// `KL(target ‖ model)`, the cross-entropy-style direction.
    TargetFirst,
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "model_first" => Ok(Self::ModelFirst),
            "reverse" | "target_first" => Ok(Self::TargetFirst),
            other => Err(Error::Config(format!(
                "unknown kl direction `{other}` (forward|reverse)"
            ))),
        }
    }
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ModelFirst => "forward",
            Self::TargetFirst => "reverse",
        })
    }
}

/// Which similarities appear in the contrastive denominator for anchor `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    /// `Σ_k exp(sim(a_i, b_k)/T)` over all `m` second views, `k = i` included.
    AugOnly,
    /// `AugOnly` plus `Σ_{k≠i} exp(sim(a_i, a_k)/T)` over the other first views.
    BothViews,
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aug_only" => Ok(Self::AugOnly),
            "both_views" => Ok(Self::BothViews),
            other => Err(Error::Config(format!(
                "unknown denominator `{other}` (aug_only|both_views)"
            ))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AugOnly => "aug_only",
            Self::BothViews => "both_views",
        })
    }
}

/// Objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// KL fitting plus λ × contrastive loss on softmax outputs.
    C3l,
    KlOnly,
    /// KL fitting plus λ × contrastive loss on hidden features.
    FeatContrastive,
    /// KL weighted per instance by the target's largest probability.
    Reweight,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        Self::C3l,
        Self::KlOnly,
        Self::FeatContrastive,
        Self::Reweight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::C3l => "c3l",
            Self::KlOnly => "kl_only",
            Self::FeatContrastive => "feat_contrastive",
            Self::Reweight => "reweight",
        }
    }

    pub fn has_contrastive(self) -> bool {
        matches!(self, Self::C3l | Self::FeatContrastive)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss `{s}` (expected c3l|kl_only|feat_contrastive|reweight)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub temperature: f64,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Probabilities are clamped to `[prob_floor, 1]` before taking logs.
    pub prob_floor: f64,
    pub kl_direction: KlDirection,
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda: 1.0,
            prob_floor: PROB_FLOOR,
            kl_direction: KlDirection::ModelFirst,
            denominator: Denominator::AugOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::Config(format!(
                "prob_floor must lie in (0, 1), got {}",
                self.prob_floor
            )));
        }
        Ok(())
    }
}

/// Per-row `KL(a ‖ b)` as an `m x 1` column, differentiable through
/// whichever argument is on the tape as a parameter.
fn kl_rows(tape: &mut Tape, probs: Var, targets: &Matrix, cfg: &LossConfig) -> Result<Var> {
    let p_shape = tape.value(probs).shape();
    if p_shape != targets.shape() {
        return Err(Error::Dimension {
            op: "kl_loss",
            left: p_shape,
            right: targets.shape(),
        });
    }
    let log_p = tape.log_clamped(probs, cfg.prob_floor)?;
    let log_q = tape.constant(targets.log_clamped(cfg.prob_floor))?;
    let terms = match cfg.kl_direction {
        KlDirection::ModelFirst => {
            // Σ p (log p − log q), weighted by the clamped p as well.
            let diff = tape.sub(log_p, log_q)?;
            let p = clamp_probs(tape, probs, cfg.prob_floor)?;
            tape.mul(p, diff)?
        }
        KlDirection::TargetFirst => {
            let q = tape.constant(targets.map(|v| v.clamp(cfg.prob_floor, 1.0)))?;
            let diff = tape.sub(log_q, log_p)?;
            tape.mul(q, diff)?
        }
    };
    tape.row_sum(terms)
}

/// `clamp(p, floor, 1)` for a probability node, with zero gradient where the
/// floor binds.
fn clamp_probs(tape: &mut Tape, probs: Var, floor: f64) -> Result<Var> {
    let v = tape.value(probs);
    if v.data().iter().all(|&x| x >= floor) {
        return Ok(probs);
    }
    let mask = v.map(|x| if x < floor { 0.0 } else { 1.0 });
    let fill = v.map(|x| if x < floor { floor } else { 0.0 });
    let mask = tape.constant(mask)?;
    let fill = tape.constant(fill)?;
    let kept = tape.mul(probs, mask)?;
    tape.add(kept, fill)
}

/// `Σ_i KL(probs_i ‖ targets_i)` (direction per `cfg`).
pub fn kl_term(tape: &mut Tape, probs: Var, targets: &Matrix, cfg: &LossConfig) -> Result<Var> {
    let rows = kl_rows(tape, probs, targets, cfg)?;
    tape.sum(rows)
}

/// `Σ_i w_i KL(probs_i ‖ targets_i)` with `w_i = max_j targets_ij`, no gradient through `w`.
pub fn reweighted_kl_term(
    tape: &mut Tape,
    probs: Var,
    targets: &Matrix,
    cfg: &LossConfig,
) -> Result<Var> {
    let rows = kl_rows(tape, probs, targets, cfg)?;
    let weights: Vec<f64> = targets
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let w = tape.constant(Matrix::from_vec(weights.len(), 1, weights)?)?;
    let weighted = tape.mul(rows, w)?;
    tape.sum(weighted)
}

fn normalize_rows(tape: &mut Tape, a: Var) -> Result<Var> {
    let k = tape.value(a).cols();
    let sq = tape.mul(a, a)?;
    let ss = tape.row_sum(sq)?;
    let ss = tape.add_scalar(ss, NORM_EPS)?;
    let norm = tape.sqrt(ss)?;
    let norm = tape.broadcast_cols(norm, k)?;
    tape.div(a, norm)
}

/// Per-anchor contrastive terms as an `m x 1` column:
/// `−log( exp(sim(a_i, b_i)/T) / Σ_k exp(sim(a_i, b_k)/T) )`.
pub fn contrastive_rows(
    tape: &mut Tape,
    anchors: Var,
    views: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let a_shape = tape.value(anchors).shape();
    let b_shape = tape.value(views).shape();
    if a_shape != b_shape {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            left: a_shape,
            right: b_shape,
        });
    }
    let m = a_shape.0;
    if m < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: m });
    }
    let inv_t = 1.0 / cfg.temperature;
    let an = normalize_rows(tape, anchors)?;
    let bn = normalize_rows(tape, views)?;
    let bt = tape.transpose(bn)?;
    let sim = tape.matmul(an, bt)?;
    let logits = tape.scale(sim, inv_t)?;

    let eye = tape.constant(Matrix::identity(m))?;
    let diag = tape.mul(logits, eye)?;
    let positive = tape.row_sum(diag)?;

    let log_denom = match cfg.denominator {
        Denominator::AugOnly => tape.logsumexp_rows(logits)?,
        Denominator::BothViews => {
            // Cosines are at most 1, so exp((s − 1)/T) never overflows.
            let at = tape.transpose(an)?;
            let self_sim = tape.matmul(an, at)?;
            let cross = tape.add_scalar(sim, -1.0)?;
            let cross = tape.scale(cross, inv_t)?;
            let cross = tape.exp(cross)?;
            let cross = tape.row_sum(cross)?;
            let own = tape.add_scalar(self_sim, -1.0)?;
            let own = tape.scale(own, inv_t)?;
            let own = tape.exp(own)?;
            let off_diag = tape.constant(Matrix::filled(m, m, 1.0).sub(&Matrix::identity(m))?)?;
            let own = tape.mul(own, off_diag)?;
            let own = tape.row_sum(own)?;
            let total = tape.add(cross, own)?;
            let log_total = tape.ln(total)?;
            tape.add_scalar(log_total, inv_t)?
        }
    };
    tape.sub(log_denom, positive)
}

/// Sum of [`contrastive_rows`].
pub fn contrastive_term(
    tape: &mut Tape,
    anchors: Var,
    views: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let rows = contrastive_rows(tape, anchors, views, cfg)?;
    tape.sum(rows)
}

/// Nodes making up one minibatch objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    /// `fit + λ · contrastive` (or just `fit`).
    pub total: Var,
    /// KL or reweighted-KL term.
    pub fit: Var,
    pub contrastive: Option<Var>,
}

/// Inputs to [`build_objective`], all already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs {
    pub probs: Var,
    pub probs_aug: Var,
    pub feats: Option<Var>,
    pub feats_aug: Option<Var>,
}

/// Records the objective selected by `kind` on `tape`. `fit_on_aug` makes the
/// KL term consume the augmented view instead of the clean one.
pub fn build_objective(
    tape: &mut Tape,
    kind: LossKind,
    cfg: &LossConfig,
    inputs: ObjectiveInputs,
    targets: &Matrix,
    fit_on_aug: bool,
) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let fit_probs = if fit_on_aug {
        inputs.probs_aug
    } else {
        inputs.probs
    };
    let fit = match kind {
        LossKind::Reweight => reweighted_kl_term(tape, fit_probs, targets, cfg)?,
        _ => kl_term(tape, fit_probs, targets, cfg)?,
    };
    let contrastive = match kind {
        LossKind::C3l => Some(contrastive_term(tape, inputs.probs, inputs.probs_aug, cfg)?),
        LossKind::FeatContrastive => {
            let (Some(f), Some(fa)) = (inputs.feats, inputs.feats_aug) else {
                return Err(Error::Config(
                    "feature contrastive loss needs features of both views".into(),
                ));
            };
            Some(contrastive_term(tape, f, fa, cfg)?)
        }
        LossKind::KlOnly | LossKind::Reweight => None,
    };
    let total = match contrastive {
        Some(c) => {
            let weighted = tape.scale(c, cfg.lambda)?;
            tape.add(fit, weighted)?
        }
        None => fit,
    };
    Ok(ObjectiveTerms {
        total,
        fit,
        contrastive,
    })
}

/// Snapshot of model outputs for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs {
    /// Softmax outputs on clean inputs, `m x C`.
    pub probs: Matrix,
    /// Softmax outputs on augmented inputs, `m x C`.
    pub probs_aug: Matrix,
    /// Hidden features on clean inputs, `m x h`.
    pub feats: Option<Matrix>,
    /// Hidden features on augmented inputs, `m x h`.
    pub feats_aug: Option<Matrix>,
    /// Sharpened training labels, `m x C`.
    pub targets: Matrix,
}

/// Loss value with gradients with respect to each [`BatchOutputs`] field.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_probs: Matrix,
    pub grad_probs_aug: Matrix,
    pub grad_feats: Option<Matrix>,
    pub grad_feats_aug: Option<Matrix>,
}

fn evaluate(
    batch: &BatchOutputs,
    build: impl FnOnce(&mut Tape, ObjectiveInputs) -> Result<Var>,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let probs = tape.param(batch.probs.clone())?;
    let probs_aug = tape.param(batch.probs_aug.clone())?;
    let feats = batch.feats.clone().map(|f| tape.param(f)).transpose()?;
    let feats_aug = batch.feats_aug.clone().map(|f| tape.param(f)).transpose()?;
    let inputs = ObjectiveInputs {
        probs,
        probs_aug,
        feats,
        feats_aug,
    };
    let loss = build(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;
    Ok(LossValue {
        value: tape.value(loss).item(),
        grad_probs: grads.wrt(probs),
        grad_probs_aug: grads.wrt(probs_aug),
        grad_feats: feats.map(|f| grads.wrt(f)),
        grad_feats_aug: feats_aug.map(|f| grads.wrt(f)),
    })
}

/// KL fitting loss on `batch.probs` against `batch.targets`.
pub fn kl_loss(batch: &BatchOutputs, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    evaluate(batch, |t, i| kl_term(t, i.probs, &batch.targets, cfg))
}

/// Contrastive loss between clean and augmented softmax outputs.
pub fn c3l_loss(batch: &BatchOutputs, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    evaluate(batch, |t, i| contrastive_term(t, i.probs, i.probs_aug, cfg))
}

/// Per-sample summands of [`c3l_loss`].
pub fn c3l_per_sample(batch: &BatchOutputs, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let a = tape.constant(batch.probs.clone())?;
    let b = tape.constant(batch.probs_aug.clone())?;
    let rows = contrastive_rows(&mut tape, a, b, cfg)?;
    Ok(tape.value(rows).data().to_vec())
}

/// `kl_loss + λ · c3l_loss`.
pub fn total_loss(batch: &BatchOutputs, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    evaluate(batch, |t, i| {
        Ok(build_objective(t, LossKind::C3l, cfg, i, &batch.targets, false)?.total)
    })
}

/// Contrastive loss between clean and augmented hidden features.
pub fn feature_contrastive_loss(batch: &BatchOutputs, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    evaluate(batch, |t, i| {
        let (Some(f), Some(fa)) = (i.feats, i.feats_aug) else {
            return Err(Error::Config(
                "feature contrastive loss needs features of both views".into(),
            ));
        };
        contrastive_term(t, f, fa, cfg)
    })
}

/// KL loss with per-instance weight `max_j targets_ij`.
pub fn reweighted_kl_loss(batch: &BatchOutputs, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    evaluate(batch, |t, i| {
        reweighted_kl_term(t, i.probs, &batch.targets, cfg)
    })
}
