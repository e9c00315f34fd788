//! Training objectives and the supervision-regime switch, the two-stage
//! runner, the optimizer and the ablation harness.
//!
//! The text objective averages next-token cross-entropy over response
//! positions only. The vision objective predicts each visual position's
//! residual codes from the hidden state one slot earlier: `<boi>` predicts
//! position 1, visual slot p-1 predicts position p. Setting
//! `same_position` moves the predictor onto the position's own slot.

pub mod ablate;
pub mod optim;
pub mod stage;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lvlm::{ForwardOutput, LvlmModel, SequenceLayout};
use crate::tensor::Tensor;
use crate::visual_head::VisualHead;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no supervised text positions (s == n == {0})")]
    NoSupervisedPositions(usize),
    #[error("layout carries no {0} visual codes")]
    MissingCodes(&'static str),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("config error: {0}")]
    BadConfig(String),
    #[error("{0} requires a stage-1 checkpoint (or an explicit from-scratch flag)")]
    MissingStage1(&'static str),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("model error: {0}")]
    Lvlm(#[from] crate::lvlm::LvlmError),
    #[error("visual head error: {0}")]
    Head(#[from] crate::visual_head::HeadError),
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoder::EncoderError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which discrete supervision accompanies the text objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    TextOnly,
    Semantic,
    Appearance,
    Dual,
}

impl SupervisionMode {
    pub fn wants_semantic(self) -> bool {
        matches!(self, SupervisionMode::Semantic | SupervisionMode::Dual)
    }

    pub fn wants_appearance(self) -> bool {
        matches!(self, SupervisionMode::Appearance | SupervisionMode::Dual)
    }
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SupervisionMode::TextOnly => "text_only",
            SupervisionMode::Semantic => "semantic",
            SupervisionMode::Appearance => "appearance",
            SupervisionMode::Dual => "dual",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for SupervisionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "text" | "text_only" => Ok(SupervisionMode::TextOnly),
            "semantic" => Ok(SupervisionMode::Semantic),
            "appearance" => Ok(SupervisionMode::Appearance),
            "dual" => Ok(SupervisionMode::Dual),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: SupervisionMode,
    /// Weight on the vision term.
    pub lambda_vision: f64,
    /// Divide each position's depth-summed cross-entropy by D.
    pub average_over_depth: bool,
    /// Predict codes from the position's own hidden slot instead of the
    /// preceding one.
    pub same_position: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: SupervisionMode::Semantic,
            lambda_vision: 1.0,
            average_over_depth: true,
            same_position: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_vision < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "lambda_vision must be >= 0, got {}",
                self.lambda_vision
            )));
        }
        Ok(())
    }

    pub fn with_mode(mode: SupervisionMode) -> LossConfig {
        LossConfig {
            mode,
            ..LossConfig::default()
        }
    }
}

/// Mean next-token cross-entropy over rows of precomputed logits; the
/// numeric core of the text objective.
pub fn masked_ce_mean(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    Ok(logits.cross_entropy_from_logits(&t)?.mean()?)
}

/// Text objective: mean cross-entropy over response positions, each
/// predicted from the hidden state one slot earlier. Prompt positions
/// contribute exactly zero because they are never evaluated.
pub fn text_loss(
    model: &LvlmModel,
    out: &ForwardOutput,
    layout: &SequenceLayout,
) -> Result<Tensor> {
    let s = layout.prompt_end;
    let n = layout.n;
    if s >= n {
        return Err(TrainError::NoSupervisedPositions(n));
    }
    // Predictor slots for targets s..n start one position before the
    // first supervised token: <eoi> when s = 0.
    let start = layout.text_start() + s - 1;
    let hidden = out.hidden.slice(0, start, n - s)?;
    let logits = model.lm_head.forward(&hidden)?;
    masked_ce_mean(&logits, &layout.targets_text[s..n])
}

/// Per-position depth-stacked cross-entropy: sum over depths, optionally
/// averaged by D.
pub fn depth_ce(logits: &Tensor, codes: &[usize], average_over_depth: bool) -> Result<Tensor> {
    let per_depth = logits.cross_entropy_from_logits(codes)?;
    let loss = if average_over_depth {
        per_depth.mean()?
    } else {
        per_depth.sum()?
    };
    Ok(loss)
}

/// Vision objective over all m visual positions of a layout.
pub fn vision_loss(
    out: &ForwardOutput,
    layout: &SequenceLayout,
    head: &VisualHead,
    codes: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<Tensor> {
    if codes.len() != layout.m || layout.m == 0 {
        return Err(TrainError::MissingCodes("matching"));
    }
    let mut acc: Option<Tensor> = None;
    for p in 1..=layout.m {
        // Global slots: <bos>=0, <boi>=1, visual rows 2..2+m. The shifted
        // predictor of position p sits at global index p; the same-position
        // variant reads the position's own row at p+1.
        let slot = if cfg.same_position { p + 1 } else { p };
        let h_p = out.hidden.slice(0, slot, 1)?;
        let logits = head.depth_logits(&h_p, &codes[p - 1])?;
        let loss_p = depth_ce(&logits, &codes[p - 1], cfg.average_over_depth)?;
        acc = Some(match acc {
            Some(a) => a.add(&loss_p)?,
            None => loss_p,
        });
    }
    Ok(acc.expect("m >= 1").scale(1.0 / layout.m as f64)?)
}

/// Combine the per-regime terms. `text` may be absent only for
/// caption-free batches, vision terms only when the mode does not use them.
pub fn total_loss(
    text: Option<&Tensor>,
    vision_sem: Option<&Tensor>,
    vision_app: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<Tensor> {
    let lambda = cfg.lambda_vision;
    let mut vision: Option<Tensor> = None;
    if cfg.mode.wants_semantic() {
        let v = vision_sem.ok_or(TrainError::MissingCodes("semantic"))?;
        vision = Some(v.clone());
    }
    if cfg.mode.wants_appearance() {
        let v = vision_app.ok_or(TrainError::MissingCodes("appearance"))?;
        vision = Some(match vision {
            Some(acc) => acc.add(v)?,
            None => v.clone(),
        });
    }
    match (text, vision) {
        (Some(t), Some(v)) => Ok(t.add(&v.scale(lambda)?)?),
        (Some(t), None) => Ok(t.clone()),
        (None, Some(v)) => Ok(v.scale(lambda)?),
        (None, None) => Err(TrainError::BadConfig(
            "neither text nor vision loss present".into(),
        )),
    }
}
