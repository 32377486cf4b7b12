//! Asynchronous two-stream fusion.
//!
//! A period pairs one anchor input from one stream with five inputs from the
//! other stream spaced Δ frames apart. Each of the five other-stream
//! features is fused with the anchor feature by its own 1×1 convolution over
//! the two features viewed as a 2-channel 1-D map. A five-unit LSTM folds
//! the fused sequence in temporal order and the last unit's softmax is the
//! period's prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, ParamStore, Tensor, TensorError, Var};
use crate::c2f::unit_sequence_loss;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Linear, LstmState, LstmUnit};

/// Number of other-stream inputs per period.
pub const PERIOD_STEPS: usize = 5;

/// Where the anchor sits relative to the five-input window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPlacement {
    /// Anchor at the window centre, `t₀ + 2Δ`.
    #[default]
    Center,
    /// Anchor at the window start, `t₀`.
    Left,
}

/// Which unit heads form a period's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRule {
    #[default]
    Last,
    /// Mean of all five units' softmax outputs.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Output channels of each 1×1 fuser.
    pub out_channels: usize,
    pub lstm_hidden: usize,
    /// Use one fuser for all five steps instead of five.
    pub share_fusers: bool,
    pub anchor: AnchorPlacement,
    pub head: HeadRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            out_channels: 1,
            lstm_hidden: 64,
            share_fusers: false,
            anchor: AnchorPlacement::Center,
            head: HeadRule::Last,
        }
    }
}

/// Temporal layout of a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodTiming {
    /// Spacing Δ between consecutive other-stream inputs.
    pub delta: usize,
    /// Collapse every offset onto the anchor time.
    pub synchronous: bool,
    pub placement: AnchorPlacement,
}

/// Frame indices of one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodIndices {
    pub anchor: usize,
    pub sequence: [usize; PERIOD_STEPS],
}

impl PeriodTiming {
    /// Offsets of the five other-stream inputs from the anchor.
    pub fn offsets(&self) -> [isize; PERIOD_STEPS] {
        if self.synchronous {
            return [0; PERIOD_STEPS];
        }
        let d = self.delta as isize;
        let shift = match self.placement {
            AnchorPlacement::Center => 2,
            AnchorPlacement::Left => 0,
        };
        std::array::from_fn(|j| (j as isize - shift) * d)
    }

    /// Anchor times whose whole window lies inside a video of `frames`
    /// frames, as an inclusive range. Falls back to every frame when the
    /// window is longer than the video; indices are then clamped.
    pub fn anchor_range(&self, frames: usize) -> (usize, usize) {
        let d = self.delta;
        let (before, after) = match self.placement {
            AnchorPlacement::Center => (2 * d, 2 * d),
            AnchorPlacement::Left => (0, 4 * d),
        };
        if before + after < frames {
            (before, frames - 1 - after)
        } else {
            (0, frames - 1)
        }
    }

    pub fn indices(&self, anchor: usize, frames: usize) -> PeriodIndices {
        let last = frames as isize - 1;
        let offsets = self.offsets();
        PeriodIndices {
            anchor: anchor.min(frames - 1),
            sequence: std::array::from_fn(|j| {
                (anchor as isize + offsets[j]).clamp(0, last) as usize
            }),
        }
    }

    /// `count` anchors spread evenly over the anchor range, both ends included.
    pub fn uniform_anchors(&self, frames: usize, count: usize) -> Vec<usize> {
        let (lo, hi) = self.anchor_range(frames);
        match count {
            0 => Vec::new(),
            1 => vec![(lo + hi) / 2],
            _ => (0..count)
                .map(|i| {
                    let pos = lo as f64 + (hi - lo) as f64 * i as f64 / (count - 1) as f64;
                    pos.round() as usize
                })
                .collect(),
        }
    }
}

/// Per-period training outputs.
#[derive(Debug, Clone)]
pub struct FusionOutputs {
    pub fused: Vec<Var>,
    pub unit_logits: Vec<Var>,
}

/// Parameters Ψ_A: fusers K₁..K₅, LSTM units Φ₁..Φ₅ and their heads.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub config: FusionConfig,
    pub feature_dim: usize,
    pub classes: usize,
    pub fusers: Vec<Conv2d>,
    pub units: Vec<LstmUnit>,
    pub heads: Vec<Linear>,
}

impl FusionNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &FusionConfig,
        feature_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.out_channels == 0 || config.lstm_hidden == 0 || feature_dim == 0 || classes < 2 {
            return Err(Error::config(
                "fusion needs positive widths and at least two classes",
            ));
        }
        let n_fusers = if config.share_fusers { 1 } else { PERIOD_STEPS };
        let fusers = (0..n_fusers)
            .map(|t| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.fuser{}", t + 1),
                    2,
                    config.out_channels,
                    1,
                    1,
                    0,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let fused_dim = config.out_channels * feature_dim;
        let mut units = Vec::new();
        let mut heads = Vec::new();
        for t in 0..PERIOD_STEPS {
            units.push(LstmUnit::new(
                store,
                &format!("{prefix}.lstm{}", t + 1),
                fused_dim,
                config.lstm_hidden,
                rng,
            )?);
            heads.push(Linear::new(
                store,
                &format!("{prefix}.head{}", t + 1),
                config.lstm_hidden,
                classes,
                rng,
            )?);
        }
        Ok(FusionNetwork {
            config: config.clone(),
            feature_dim,
            classes,
            fusers,
            units,
            heads,
        })
    }

    fn fuser(&self, step: usize) -> &Conv2d {
        &self.fusers[step.min(self.fusers.len() - 1)]
    }

    /// Fuses the anchor feature with one other-stream feature at `step`.
    pub fn fuse_pair(&self, g: &mut Graph, step: usize, anchor: Var, other: Var) -> Result<Var> {
        fuse_with(g, self.fuser(step), anchor, other)
    }

    /// Runs the five LSTM units over the fused sequence and returns each
    /// unit's logits.
    pub fn integrate(&self, g: &mut Graph, fused: &[Var]) -> Result<Vec<Var>> {
        if fused.len() != PERIOD_STEPS {
            return Err(Error::config(format!(
                "fusion expects {PERIOD_STEPS} fused inputs, got {}",
                fused.len()
            )));
        }
        let mut state = LstmState::zeros(g, self.config.lstm_hidden);
        let mut logits = Vec::with_capacity(PERIOD_STEPS);
        for ((unit, head), &x) in self.units.iter().zip(&self.heads).zip(fused) {
            state = unit.forward(g, x, state)?;
            logits.push(head.forward(g, state.h)?);
        }
        Ok(logits)
    }

    pub fn forward(&self, g: &mut Graph, anchor: Var, sequence: &[Var]) -> Result<FusionOutputs> {
        if sequence.len() != PERIOD_STEPS {
            return Err(Error::config(format!(
                "a period has {PERIOD_STEPS} other-stream inputs, got {}",
                sequence.len()
            )));
        }
        let fused = sequence
            .iter()
            .enumerate()
            .map(|(t, &x)| self.fuse_pair(g, t, anchor, x))
            .collect::<Result<Vec<_>>>()?;
        let unit_logits = self.integrate(g, &fused)?;
        Ok(FusionOutputs { fused, unit_logits })
    }

    /// Period prediction from the unit logits, per the configured head rule.
    pub fn prediction(&self, g: &Graph, unit_logits: &[Var]) -> Vec<f64> {
        match self.config.head {
            HeadRule::Last => softmax(g.value(*unit_logits.last().unwrap()).values()),
            HeadRule::Mean => {
                let mut acc = vec![0.0; self.classes];
                for &z in unit_logits {
                    for (a, p) in acc.iter_mut().zip(softmax(g.value(z).values())) {
                        *a += p;
                    }
                }
                let k = unit_logits.len() as f64;
                acc.iter_mut().for_each(|a| *a /= k);
                acc
            }
        }
    }
}

/// `fused[c·H + j] = Σ_i K[c, i]·[anchor, other]_i[j] + b[c]`.
pub fn fuse_with(g: &mut Graph, fuser: &Conv2d, anchor: Var, other: Var) -> Result<Var> {
    let h = g.value(anchor).numel();
    if g.shape(anchor) != [h] || g.shape(other) != [h] {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_pair",
            lhs: g.shape(anchor).to_vec(),
            rhs: g.shape(other).to_vec(),
        }
        .into());
    }
    let stacked = g.concat(&[anchor, other])?;
    let map = g.reshape(stacked, &[2, 1, h])?;
    let out = fuser.forward(g, map)?;
    let len = g.value(out).numel();
    Ok(g.reshape(out, &[len])?)
}

/// `L_A = −(γ/N)·Σ_t log p̂(n_g | units 1..t)` over the five fusion units.
pub fn async_loss(
    g: &mut Graph,
    unit_logits: &[Var],
    gt: usize,
    gamma: f64,
    classes: usize,
) -> Result<Var> {
    if unit_logits.len() != PERIOD_STEPS {
        return Err(Error::config(format!(
            "fusion loss expects {PERIOD_STEPS} unit outputs, got {}",
            unit_logits.len()
        )));
    }
    unit_sequence_loss(g, unit_logits, gt, gamma, classes)
}

/// Element-wise sum of the two anchor-direction models' period scores.
pub fn build_period_prediction(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "class count mismatch between models: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

/// Feature-level copy of `v` that blocks gradient flow.
pub fn detach(g: &mut Graph, v: Var) -> Var {
    let t: Tensor = g.value(v).clone();
    g.constant(t)
}
