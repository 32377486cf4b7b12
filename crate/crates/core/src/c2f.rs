//! Coarse-to-fine network for one stream.
//!
//! A staged convolutional backbone taps side outputs from several stages.
//! Each side stage emits one map per granularity through a 1×1 convolution;
//! the maps are upsampled to the shallowest side stage's resolution and the
//! k-th map of every side stage is stacked into the k-th side map group.
//! Each group goes through its own FC1 to give the granularity feature x_k.
//! During training each x_k also feeds an FC2→ReLU→FC3 head whose softmax
//! is scored against the class group G_k. A chain of LSTM units then folds
//! the features from coarsest to finest, and the last hidden state is the
//! stream's feature for the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, ParamStore, Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::nn::{upsample_factor, Conv2d, Graph, Linear, LstmState, LstmUnit};

/// Class-group size for each granularity level, coarsest first.
pub const GROUP_SIZES: [usize; 3] = [5, 3, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each stage's 3×3 convolution; the length is the stage count.
    pub stage_channels: Vec<usize>,
    /// One-based indices of the stages that emit side outputs.
    pub side_stages: Vec<usize>,
    /// Width of the FC1 granularity features.
    pub feature_dim: usize,
    /// Hidden width of the FC2 auxiliary head layer.
    pub head_hidden: usize,
    /// Apply ReLU to FC1 outputs.
    pub feature_relu: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            stage_channels: vec![8, 16, 16, 32, 32],
            side_stages: vec![3, 4, 5],
            feature_dim: 64,
            head_hidden: 64,
            feature_relu: true,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial size of stage `s`'s convolution output (one-based).
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        let div = 1 << (s - 1);
        (self.input_height / div, self.input_width / div)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config(
                "backbone needs at least one stage with channels",
            ));
        }
        if self.input_channels == 0 || self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(Error::config("backbone widths must be positive"));
        }
        let div = 1 << (s - 1);
        if !self.input_height.is_multiple_of(div) || !self.input_width.is_multiple_of(div) {
            return Err(Error::config(format!(
                "input {}x{} does not halve cleanly through {s} stages",
                self.input_height, self.input_width
            )));
        }
        if self.side_stages.is_empty() {
            return Err(Error::config("at least one side-output stage is required"));
        }
        let mut sorted = self.side_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.side_stages || sorted.iter().any(|&x| x == 0 || x > s) {
            return Err(Error::config(format!(
                "side stages {:?} must be increasing and within 1..={s}",
                self.side_stages
            )));
        }
        Ok(())
    }

    /// Spatial size of every side map group.
    pub fn group_size(&self) -> (usize, usize) {
        self.stage_size(self.side_stages[0])
    }
}

/// Loss weights of the coarse-to-fine objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2fWeights {
    /// Per-granularity weights α, coarsest first.
    pub alpha: [f64; 3],
    /// Weight β of the integration loss.
    pub beta: f64,
}

impl Default for C2fWeights {
    fn default() -> Self {
        C2fWeights {
            alpha: [0.1, 0.1, 1.0],
            beta: 2.0,
        }
    }
}

/// The granularity features x_k of one input, coarsest first.
#[derive(Debug, Clone)]
pub struct GranularityFeatures {
    pub levels: Vec<usize>,
    pub features: Vec<Var>,
}

/// Conv stages, side-output flows and per-granularity FC1 projections.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Conv2d>,
    pub side: Vec<Conv2d>,
    pub fc1: Vec<Linear>,
}

impl Backbone {
    /// `maps` is the number of granularity maps each side stage emits.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        maps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if maps == 0 {
            return Err(Error::config("a backbone needs at least one granularity"));
        }
        let mut stages = Vec::new();
        let mut cin = config.input_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                &format!("{prefix}.stage{}", i + 1),
                cin,
                cout,
                3,
                1,
                1,
                rng,
            )?);
            cin = cout;
        }
        let side = config
            .side_stages
            .iter()
            .map(|&s| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.side{s}"),
                    config.stage_channels[s - 1],
                    maps,
                    1,
                    1,
                    0,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let (gh, gw) = config.group_size();
        let group_len = config.side_stages.len() * gh * gw;
        let fc1 = (0..maps)
            .map(|k| {
                Linear::new(
                    store,
                    &format!("{prefix}.fc1_{}", k + 1),
                    group_len,
                    config.feature_dim,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(Backbone {
            config: config.clone(),
            stages,
            side,
            fc1,
        })
    }

    pub fn maps(&self) -> usize {
        self.fc1.len()
    }

    /// Side map groups, one `S_side×H×W` tensor per granularity.
    pub fn side_map_groups(&self, g: &mut Graph, input: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let expected = [cfg.input_channels, cfg.input_height, cfg.input_width];
        if g.shape(input) != expected {
            return Err(TensorError::ShapeMismatch {
                op: "backbone input",
                lhs: g.shape(input).to_vec(),
                rhs: expected.to_vec(),
            }
            .into());
        }
        let (gh, gw) = cfg.group_size();
        let last = *cfg.side_stages.last().unwrap();
        let mut x = input;
        let mut side_maps = Vec::new();
        let mut side_iter = cfg.side_stages.iter().zip(&self.side).peekable();
        for (i, stage) in self.stages.iter().enumerate().take(last) {
            let s = i + 1;
            let conv = stage.forward(g, x)?;
            let act = g.relu(conv);
            if let Some((_, side)) = side_iter.next_if(|(ss, _)| **ss == s) {
                let maps = side.forward(g, act)?;
                let (h, _) = cfg.stage_size(s);
                let up = g.upsample_nearest(maps, upsample_factor(h, gh)?)?;
                side_maps.push(up);
            }
            if s < last {
                x = g.maxpool2d(act)?;
            }
        }
        let plane = gh * gw;
        let mut groups = Vec::with_capacity(self.maps());
        for k in 0..self.maps() {
            let slices = side_maps
                .iter()
                .map(|&m| g.narrow(m, k, 1))
                .collect::<Result<Vec<_>, TensorError>>()?;
            let group = g.concat(&slices)?;
            debug_assert_eq!(g.value(group).numel(), side_maps.len() * plane);
            groups.push(group);
        }
        Ok(groups)
    }

    pub fn extract(&self, g: &mut Graph, input: Var) -> Result<Vec<Var>> {
        let groups = self.side_map_groups(g, input)?;
        let mut feats = Vec::with_capacity(groups.len());
        for (group, fc) in groups.into_iter().zip(&self.fc1) {
            let len = g.value(group).numel();
            let flat = g.reshape(group, &[len])?;
            let x = fc.forward(g, flat)?;
            feats.push(if self.config.feature_relu {
                g.relu(x)
            } else {
                x
            });
        }
        Ok(feats)
    }
}

/// FC2 → ReLU → FC3 auxiliary classifier on one granularity feature.
#[derive(Debug, Clone, Copy)]
pub struct GranularityHead {
    pub fc2: Linear,
    pub fc3: Linear,
}

impl GranularityHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GranularityHead {
            fc2: Linear::new(store, &format!("{prefix}.fc2"), feature_dim, hidden, rng)?,
            fc3: Linear::new(store, &format!("{prefix}.fc3"), hidden, classes, rng)?,
        })
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc2.forward(g, x)?;
        let h = g.relu(h);
        Ok(self.fc3.forward(g, h)?)
    }
}

/// Hyper-parameters of one coarse-to-fine network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C2fConfig {
    pub backbone: BackboneConfig,
    pub lstm_hidden: usize,
    /// Active granularity levels from {1, 2, 3}, coarsest first.
    pub levels: Vec<usize>,
}

impl Default for C2fConfig {
    fn default() -> Self {
        C2fConfig {
            backbone: BackboneConfig::default(),
            lstm_hidden: 64,
            levels: vec![1, 2, 3],
        }
    }
}

impl C2fConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let ok = !self.levels.is_empty()
            && self.levels.windows(2).all(|w| w[0] < w[1])
            && self.levels.iter().all(|l| (1..=3).contains(l));
        if !ok {
            return Err(Error::config(format!(
                "granularity levels {:?} must be increasing within 1..=3",
                self.levels
            )));
        }
        if self.lstm_hidden == 0 {
            return Err(Error::config("lstm_hidden must be positive"));
        }
        Ok(())
    }
}

/// Per-input training outputs of a coarse-to-fine network.
#[derive(Debug, Clone)]
pub struct C2fOutputs {
    pub features: GranularityFeatures,
    pub head_logits: Vec<Var>,
    pub unit_logits: Vec<Var>,
    /// Hidden state of the last LSTM unit.
    pub integrated: Var,
}

/// Parameters Ψ_C: backbone, auxiliary heads, LSTM units and per-unit FC1′ heads.
#[derive(Debug, Clone)]
pub struct C2fNetwork {
    pub config: C2fConfig,
    pub classes: usize,
    pub backbone: Backbone,
    pub heads: Vec<GranularityHead>,
    pub units: Vec<LstmUnit>,
    pub unit_heads: Vec<Linear>,
}

impl C2fNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &C2fConfig,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        let levels = config.levels.len();
        let bb = &config.backbone;
        let backbone = Backbone::new(store, prefix, bb, levels, rng)?;
        let heads = (0..levels)
            .map(|k| {
                GranularityHead::new(
                    store,
                    &format!("{prefix}.head{}", config.levels[k]),
                    bb.feature_dim,
                    bb.head_hidden,
                    classes,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut units = Vec::new();
        let mut unit_heads = Vec::new();
        for t in 0..levels {
            units.push(LstmUnit::new(
                store,
                &format!("{prefix}.lstm{}", t + 1),
                bb.feature_dim,
                config.lstm_hidden,
                rng,
            )?);
            unit_heads.push(Linear::new(
                store,
                &format!("{prefix}.fc1p_{}", t + 1),
                config.lstm_hidden,
                classes,
                rng,
            )?);
        }
        Ok(C2fNetwork {
            config: config.clone(),
            classes,
            backbone,
            heads,
            units,
            unit_heads,
        })
    }

    pub fn levels(&self) -> &[usize] {
        &self.config.levels
    }

    pub fn extract_granularity_features(
        &self,
        g: &mut Graph,
        input: Var,
    ) -> Result<GranularityFeatures> {
        Ok(GranularityFeatures {
            levels: self.config.levels.clone(),
            features: self.backbone.extract(g, input)?,
        })
    }

    /// Folds the features coarsest to finest; returns the last hidden state
    /// and each unit's FC1′ logits.
    pub fn integrate(
        &self,
        g: &mut Graph,
        features: &GranularityFeatures,
    ) -> Result<(Var, Vec<Var>)> {
        if features.features.len() != self.units.len() {
            return Err(Error::config(format!(
                "{} granularity features for {} LSTM units",
                features.features.len(),
                self.units.len()
            )));
        }
        let mut state = LstmState::zeros(g, self.config.lstm_hidden);
        let mut logits = Vec::with_capacity(self.units.len());
        for ((unit, head), &x) in self
            .units
            .iter()
            .zip(&self.unit_heads)
            .zip(&features.features)
        {
            state = unit.forward(g, x, state)?;
            logits.push(head.forward(g, state.h)?);
        }
        Ok((state.h, logits))
    }

    /// Hidden state of the last unit only; the training heads are skipped.
    pub fn integrate_features(&self, g: &mut Graph, features: &GranularityFeatures) -> Result<Var> {
        let mut state = LstmState::zeros(g, self.config.lstm_hidden);
        for (unit, &x) in self.units.iter().zip(&features.features) {
            state = unit.forward(g, x, state)?;
        }
        Ok(state.h)
    }

    /// Full training-time forward pass.
    pub fn forward_train(&self, g: &mut Graph, input: Var) -> Result<C2fOutputs> {
        let features = self.extract_granularity_features(g, input)?;
        let head_logits = self
            .heads
            .iter()
            .zip(&features.features)
            .map(|(h, &x)| h.logits(g, x))
            .collect::<Result<Vec<_>>>()?;
        let (integrated, unit_logits) = self.integrate(g, &features)?;
        Ok(C2fOutputs {
            features,
            head_logits,
            unit_logits,
            integrated,
        })
    }

    /// Test-time stream feature: the integrated hidden state, no guidance heads.
    pub fn feature(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let features = self.extract_granularity_features(g, input)?;
        self.integrate_features(g, &features)
    }

    /// Logits of the softmax layer placed directly after the network.
    pub fn standalone_logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let h = self.feature(g, input)?;
        Ok(self.unit_heads.last().unwrap().forward(g, h)?)
    }

    pub fn standalone_predict(&self, store: &ParamStore, input: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(store);
        let x = g.constant(input.clone());
        let logits = self.standalone_logits(&mut g, x)?;
        Ok(softmax(g.value(logits).values()))
    }
}

pub(crate) fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut iter = terms.iter().copied();
    let Some(first) = iter.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for t in iter {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Multi-granularity guidance loss
/// `L_v = −(1/N)·Σ_k α_k Σ_{n∈G_k} log p̂(n | k)`.
///
/// `head_logits[k]`, `groups[k]` and `alpha[k]` are aligned, coarsest first.
pub fn granularity_loss(
    g: &mut Graph,
    head_logits: &[Var],
    groups: &[Vec<usize>],
    alpha: &[f64],
    classes: usize,
) -> Result<Var> {
    if head_logits.len() != groups.len() || groups.len() != alpha.len() {
        return Err(Error::config(format!(
            "granularity loss: {} heads, {} groups, {} weights",
            head_logits.len(),
            groups.len(),
            alpha.len()
        )));
    }
    let terms = head_logits
        .iter()
        .zip(groups)
        .zip(alpha)
        .map(|((&z, grp), &a)| g.softmax_cross_entropy(z, grp, a / classes as f64))
        .collect::<Result<Vec<_>, TensorError>>()?;
    sum_scalars(g, &terms)
}

/// Integration loss over the LSTM units' heads,
/// `−(weight/N)·Σ_t log p̂(n_g | units 1..t)`. Serves both the coarse-to-fine
/// network (weight β) and the fusion network (weight γ).
pub fn unit_sequence_loss(
    g: &mut Graph,
    unit_logits: &[Var],
    gt: usize,
    weight: f64,
    classes: usize,
) -> Result<Var> {
    if gt >= classes {
        return Err(TensorError::TargetOutOfRange { index: gt, classes }.into());
    }
    let terms = unit_logits
        .iter()
        .map(|&z| g.softmax_cross_entropy(z, &[gt], weight / classes as f64))
        .collect::<Result<Vec<_>, TensorError>>()?;
    sum_scalars(g, &terms)
}

/// `L_l` of the coarse-to-fine LSTM.
pub fn c2f_lstm_loss(
    g: &mut Graph,
    unit_logits: &[Var],
    gt: usize,
    beta: f64,
    classes: usize,
) -> Result<Var> {
    unit_sequence_loss(g, unit_logits, gt, beta, classes)
}

/// `L_C = L_v + L_l`; without groups the guidance term is dropped.
pub fn c2f_total_loss(
    g: &mut Graph,
    net: &C2fNetwork,
    outputs: &C2fOutputs,
    groups: Option<&[Vec<usize>]>,
    gt: usize,
    weights: &C2fWeights,
) -> Result<Var> {
    let lstm = c2f_lstm_loss(g, &outputs.unit_logits, gt, weights.beta, net.classes)?;
    let Some(groups) = groups else {
        return Ok(lstm);
    };
    let alpha: Vec<f64> = net.levels().iter().map(|&l| weights.alpha[l - 1]).collect();
    let guide = granularity_loss(g, &outputs.head_logits, groups, &alpha, net.classes)?;
    Ok(g.add(guide, lstm)?)
}

/// Single-granularity stream network: backbone, finest FC1 feature and one
/// softmax head, with no grouping and no LSTM integration.
#[derive(Debug, Clone)]
pub struct BaselineNetwork {
    pub classes: usize,
    pub backbone: Backbone,
    pub head: GranularityHead,
}

impl BaselineNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &BackboneConfig,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        let backbone = Backbone::new(store, prefix, config, 1, rng)?;
        let head = GranularityHead::new(
            store,
            &format!("{prefix}.head"),
            config.feature_dim,
            config.head_hidden,
            classes,
            rng,
        )?;
        Ok(BaselineNetwork {
            classes,
            backbone,
            head,
        })
    }

    /// Returns `(feature, logits)`.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, Var)> {
        let x = self.backbone.extract(g, input)?[0];
        let logits = self.head.logits(g, x)?;
        Ok((x, logits))
    }

    pub fn feature(&self, g: &mut Graph, input: Var) -> Result<Var> {
        Ok(self.backbone.extract(g, input)?[0])
    }
}
