//! Joint training of the stream networks and the fusion network.
//!
//! A fusion model is built for one anchor direction: the anchor stream's
//! network sees the anchor input, the other stream's single network sees all
//! five period inputs, and the objective is the sum of the six per-input
//! stream losses and the fusion loss. Non-fusion modes train both stream
//! networks on same-time frame pairs.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{softmax, Gradients, ParamStore, Sgd, Tensor, Var};
use crate::c2f::{c2f_total_loss, BaselineNetwork, C2fConfig, C2fNetwork, C2fWeights};
use crate::data::{Dataset, Split, Stream};
use crate::error::{Error, Result};
use crate::fusion::{async_loss, detach, FusionConfig, FusionNetwork, PeriodTiming, PERIOD_STEPS};
use crate::grouper::{hex_digest, ClassGroupSet, GrouperModel};
use crate::nn::{Checkpoint, Graph};

pub const LOG_SCHEMA: u32 = 1;
pub const MODEL_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum C2fVariant {
    Complete,
    /// No guidance loss; the integration loss alone.
    NoClassGrouping,
    /// Coarsest granularity removed.
    TwoGranularities,
    /// Every class group reduced to the ground truth.
    NoCoarseness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    /// Finest-granularity feature with one softmax head, no grouping, no LSTM.
    Baseline,
    C2f(C2fVariant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Syn,
    Asyn(usize),
}

/// A training/evaluation configuration of the framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mode {
    pub stream: StreamKind,
    pub fusion: Option<FusionKind>,
}

impl Mode {
    pub fn needs_grouper(&self) -> bool {
        matches!(
            self.stream,
            StreamKind::C2f(C2fVariant::Complete | C2fVariant::TwoGranularities)
        )
    }

    pub fn levels(&self) -> Vec<usize> {
        match self.stream {
            StreamKind::C2f(C2fVariant::TwoGranularities) => vec![2, 3],
            _ => vec![1, 2, 3],
        }
    }

    /// Period layout for fusion modes; non-fusion modes use `nominal_delta`
    /// to place their evaluation frames.
    pub fn timing(&self, nominal_delta: usize, cfg: &FusionConfig) -> PeriodTiming {
        let (delta, synchronous) = match self.fusion {
            Some(FusionKind::Asyn(d)) => (d, false),
            Some(FusionKind::Syn) => (nominal_delta, true),
            None => (nominal_delta, false),
        };
        PeriodTiming {
            delta,
            synchronous,
            placement: cfg.anchor,
        }
    }

    /// Modes included in the standard ablation grid.
    pub fn standard_grid() -> Vec<Mode> {
        [
            "baseline",
            "co2fi-no-class-grouping",
            "co2fi-two-granularities",
            "co2fi-no-coarseness",
            "co2fi-complete",
            "baseline+syn",
            "baseline+asyn1",
            "baseline+asyn5",
            "co2fi+asyn5",
        ]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stream = match (self.stream, self.fusion.is_some()) {
            (StreamKind::Baseline, _) => "baseline",
            (StreamKind::C2f(C2fVariant::Complete), true) => "co2fi",
            (StreamKind::C2f(C2fVariant::Complete), false) => "co2fi-complete",
            (StreamKind::C2f(C2fVariant::NoClassGrouping), _) => "co2fi-no-class-grouping",
            (StreamKind::C2f(C2fVariant::TwoGranularities), _) => "co2fi-two-granularities",
            (StreamKind::C2f(C2fVariant::NoCoarseness), _) => "co2fi-no-coarseness",
        };
        match self.fusion {
            None => write!(f, "{stream}"),
            Some(FusionKind::Syn) => write!(f, "{stream}+syn"),
            Some(FusionKind::Asyn(d)) => write!(f, "{stream}+asyn{d}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownMode(s.to_string());
        let (head, tail) = match s.split_once('+') {
            Some((h, t)) => (h, Some(t)),
            None => (s, None),
        };
        let stream = match head {
            "baseline" => StreamKind::Baseline,
            "co2fi" | "co2fi-complete" => StreamKind::C2f(C2fVariant::Complete),
            "co2fi-no-class-grouping" => StreamKind::C2f(C2fVariant::NoClassGrouping),
            "co2fi-two-granularities" => StreamKind::C2f(C2fVariant::TwoGranularities),
            "co2fi-no-coarseness" => StreamKind::C2f(C2fVariant::NoCoarseness),
            _ => return Err(unknown()),
        };
        let fusion = match tail {
            None => None,
            Some("syn") => Some(FusionKind::Syn),
            Some(t) => {
                let d = t
                    .strip_prefix("asyn")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(unknown)?;
                Some(FusionKind::Asyn(d))
            }
        };
        Ok(Mode { stream, fusion })
    }
}

impl Serialize for Mode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Factor applied to the learning rate every `decay_interval` iterations.
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Nominal period spacing Δ; fixes the anchor range of synchronous and
    /// non-fusion modes.
    pub delta: usize,
    /// Block the fusion loss from reaching the stream networks.
    pub stop_gradient: bool,
    /// Held-out check every this many iterations; 0 disables it.
    pub eval_every: usize,
    pub eval_videos: usize,
    pub eval_periods: usize,
    pub weights: C2fWeights,
    /// Weight γ of the fusion loss.
    pub gamma: f64,
    /// Cross-entropy weight of the baseline stream head.
    pub baseline_weight: f64,
    pub c2f: C2fConfig,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            momentum: 0.9,
            learning_rate: 1e-2,
            lr_decay: 0.1,
            decay_interval: 1125,
            iterations: 1500,
            seed: 0,
            delta: 5,
            stop_gradient: false,
            eval_every: 0,
            eval_videos: 32,
            eval_periods: 4,
            weights: C2fWeights::default(),
            gamma: 2.0,
            baseline_weight: 1.0,
            c2f: C2fConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_interval == 0 {
            return Err(Error::config("decay interval must be positive"));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::config("batch size and iterations must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "learning rate must be positive and momentum in [0, 1)",
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr decay must lie in (0, 1]"));
        }
        self.c2f.validate()
    }

    /// Learning rate of one-based iteration `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let steps = iteration.saturating_sub(1) / self.decay_interval;
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }
}

/// Frozen groupers, one per stream or one shared by both.
#[derive(Debug, Clone)]
pub struct Groupers {
    models: Vec<GrouperModel>,
}

impl Groupers {
    pub fn per_stream(appearance: GrouperModel, motion: GrouperModel) -> Result<Self> {
        Self::check(&[appearance, motion])
    }

    pub fn shared(model: GrouperModel) -> Result<Self> {
        Self::check(&[model])
    }

    fn check(models: &[GrouperModel]) -> Result<Self> {
        if models.iter().any(|m| !m.is_frozen()) {
            return Err(Error::Grouper(
                "groupers must be frozen before training".into(),
            ));
        }
        Ok(Groupers {
            models: models.to_vec(),
        })
    }

    pub fn get(&self, stream: Stream) -> &GrouperModel {
        &self.models[stream.index().min(self.models.len() - 1)]
    }

    pub fn hashes(&self) -> Vec<String> {
        self.models.iter().map(GrouperModel::hash).collect()
    }
}

#[derive(Debug, Clone)]
pub enum StreamNet {
    Baseline(BaselineNetwork),
    C2f(C2fNetwork),
}

impl StreamNet {
    /// Width of the feature passed to fusion.
    pub fn feature_dim(&self) -> usize {
        match self {
            StreamNet::Baseline(b) => b.backbone.config.feature_dim,
            StreamNet::C2f(c) => c.config.lstm_hidden,
        }
    }

    pub fn feature(&self, g: &mut Graph, input: Var) -> Result<Var> {
        match self {
            StreamNet::Baseline(b) => b.feature(g, input),
            StreamNet::C2f(c) => c.feature(g, input),
        }
    }

    pub fn standalone_logits(&self, g: &mut Graph, input: Var) -> Result<Var> {
        match self {
            StreamNet::Baseline(b) => Ok(b.forward(g, input)?.1),
            StreamNet::C2f(c) => c.standalone_logits(g, input),
        }
    }
}

/// Loss terms of one training sample, already summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Stream losses of the five other-stream inputs (fusion) or of the
    /// appearance frame (frame pairs).
    pub stream_a: f64,
    /// Stream loss of the anchor input (fusion) or of the motion frame.
    pub stream_b: f64,
    pub fusion: f64,
}

/// The six-input objective of one period, with its loss terms.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Var,
    pub sequence: Var,
    pub anchor: Var,
    pub fusion: Var,
    pub prediction: Vec<f64>,
}

/// Parameters of one trained configuration.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub mode: Mode,
    /// Anchor stream of a fusion model; `None` for non-fusion modes.
    pub anchor: Option<Stream>,
    pub classes: usize,
    pub frame_shape: [usize; 3],
    pub config: TrainConfig,
    pub store: ParamStore,
    /// Stream networks indexed by [`Stream::index`].
    pub nets: Vec<StreamNet>,
    pub fusion: Option<FusionNetwork>,
}

impl JointModel {
    pub fn new(
        mode: Mode,
        anchor: Option<Stream>,
        classes: usize,
        frame_shape: [usize; 3],
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if mode.fusion.is_some() != anchor.is_some() {
            return Err(Error::config(format!(
                "mode {mode} {} an anchor direction",
                if anchor.is_some() {
                    "does not take"
                } else {
                    "needs"
                }
            )));
        }
        let mut c2f = config.c2f.clone();
        c2f.levels = mode.levels();
        let [ch, h, w] = frame_shape;
        c2f.backbone.input_channels = ch;
        c2f.backbone.input_height = h;
        c2f.backbone.input_width = w;
        let dir = anchor.map_or(7, |a| a.index() as u64);
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(dir));
        let mut store = ParamStore::new();
        let mut nets = Vec::new();
        for s in Stream::BOTH {
            nets.push(match mode.stream {
                StreamKind::Baseline => StreamNet::Baseline(BaselineNetwork::new(
                    &mut store,
                    s.name(),
                    &c2f.backbone,
                    classes,
                    &mut rng,
                )?),
                StreamKind::C2f(_) => StreamNet::C2f(C2fNetwork::new(
                    &mut store,
                    s.name(),
                    &c2f,
                    classes,
                    &mut rng,
                )?),
            });
        }
        let fusion = match mode.fusion {
            Some(_) => Some(FusionNetwork::new(
                &mut store,
                "fusion",
                &config.fusion,
                nets[0].feature_dim(),
                classes,
                &mut rng,
            )?),
            None => None,
        };
        let mut config = config.clone();
        config.c2f = c2f;
        Ok(JointModel {
            mode,
            anchor,
            classes,
            frame_shape,
            config,
            store,
            nets,
            fusion,
        })
    }

    pub fn net(&self, stream: Stream) -> &StreamNet {
        &self.nets[stream.index()]
    }

    pub fn timing(&self) -> PeriodTiming {
        self.mode.timing(self.config.delta, &self.config.fusion)
    }

    pub fn fingerprint(&self) -> String {
        let desc = serde_json::json!({
            "mode": self.mode.to_string(),
            "anchor": self.anchor,
            "classes": self.classes,
            "frame_shape": self.frame_shape,
            "c2f": self.config.c2f,
            "fusion": self.config.fusion,
        });
        hex_digest(desc.to_string().as_bytes())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.fingerprint())
    }

    /// Stream loss of one input and the feature passed on to fusion.
    pub fn stream_loss(
        &self,
        g: &mut Graph,
        stream: Stream,
        input: Var,
        gt: usize,
        groups: Option<&ClassGroupSet>,
    ) -> Result<(Var, Var)> {
        match self.net(stream) {
            StreamNet::Baseline(b) => {
                let (x, logits) = b.forward(g, input)?;
                let loss = g.softmax_cross_entropy(logits, &[gt], self.config.baseline_weight)?;
                Ok((loss, x))
            }
            StreamNet::C2f(net) => {
                let StreamKind::C2f(variant) = self.mode.stream else {
                    unreachable!()
                };
                let out = net.forward_train(g, input)?;
                let selected = match variant {
                    C2fVariant::NoClassGrouping => None,
                    C2fVariant::NoCoarseness => {
                        Some(ClassGroupSet::singleton(gt).select(net.levels()))
                    }
                    C2fVariant::Complete | C2fVariant::TwoGranularities => {
                        let set =
                            groups.ok_or_else(|| Error::Grouper("missing class groups".into()))?;
                        if set.groups.iter().any(|grp| !grp.contains(&gt)) {
                            return Err(Error::Grouper(format!(
                                "groups do not contain ground truth {gt}"
                            )));
                        }
                        Some(set.select(net.levels()))
                    }
                };
                let loss =
                    c2f_total_loss(g, net, &out, selected.as_deref(), gt, &self.config.weights)?;
                Ok((loss, out.integrated))
            }
        }
    }

    /// Objective of one period: five sequence-stream losses through the
    /// shared sequence network, the anchor loss, and the fusion loss.
    ///
    /// `groups` holds the five sequence inputs' groups followed by the
    /// anchor's; it may be `None` only for modes without a grouper.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        anchor_input: &Tensor,
        sequence: &[Tensor],
        groups: Option<&[ClassGroupSet]>,
        gt: usize,
    ) -> Result<JointLoss> {
        let (Some(anchor), Some(fusion)) = (self.anchor, &self.fusion) else {
            return Err(Error::config(format!(
                "mode {} has no fusion network",
                self.mode
            )));
        };
        if sequence.len() != PERIOD_STEPS {
            return Err(Error::config(format!(
                "a period has {PERIOD_STEPS} sequence inputs, got {}",
                sequence.len()
            )));
        }
        if let Some(gs) = groups {
            if gs.len() != PERIOD_STEPS + 1 {
                return Err(Error::Grouper(format!(
                    "{} group sets for 6 inputs",
                    gs.len()
                )));
            }
        } else if self.mode.needs_grouper() {
            return Err(Error::Grouper("missing class groups".into()));
        }
        let group = |i: usize| groups.map(|gs| &gs[i]);
        let other = anchor.other();
        let mut seq_losses = Vec::with_capacity(PERIOD_STEPS);
        let mut seq_feats = Vec::with_capacity(PERIOD_STEPS);
        for (i, x) in sequence.iter().enumerate() {
            // Repeated inputs (synchronous or clamped periods) reuse one
            // subgraph; the shared weights receive the same summed gradient.
            let (l, f) = match (0..i).find(|&j| sequence[j] == *x && group(j) == group(i)) {
                Some(j) => (seq_losses[j], seq_feats[j]),
                None => {
                    let v = g.constant(x.clone());
                    self.stream_loss(g, other, v, gt, group(i))?
                }
            };
            seq_losses.push(l);
            seq_feats.push(f);
        }
        let a = g.constant(anchor_input.clone());
        let (anchor_loss, mut anchor_feat) =
            self.stream_loss(g, anchor, a, gt, group(PERIOD_STEPS))?;
        if self.config.stop_gradient {
            anchor_feat = detach(g, anchor_feat);
            for f in seq_feats.iter_mut() {
                *f = detach(g, *f);
            }
        }
        let out = fusion.forward(g, anchor_feat, &seq_feats)?;
        let fusion_loss = async_loss(g, &out.unit_logits, gt, self.config.gamma, self.classes)?;
        let prediction = fusion.prediction(g, &out.unit_logits);
        let sequence_loss = crate::c2f::sum_scalars(g, &seq_losses)?;
        let total = g.add(sequence_loss, anchor_loss)?;
        let total = g.add(total, fusion_loss)?;
        Ok(JointLoss {
            total,
            sequence: sequence_loss,
            anchor: anchor_loss,
            fusion: fusion_loss,
            prediction,
        })
    }

    /// Fusion prediction for the period anchored at `anchor_time`.
    pub fn period_prediction(
        &self,
        ds: &Dataset,
        video: usize,
        anchor_time: usize,
    ) -> Result<Vec<f64>> {
        let (Some(anchor), Some(fusion)) = (self.anchor, &self.fusion) else {
            return Err(Error::config(format!(
                "mode {} has no fusion network",
                self.mode
            )));
        };
        let idx = self.timing().indices(anchor_time, ds.frames());
        let other = anchor.other();
        let mut g = Graph::frozen(&self.store);
        let mut cache: Vec<(usize, Var)> = Vec::new();
        let mut seq = Vec::with_capacity(PERIOD_STEPS);
        for &t in &idx.sequence {
            let f = match cache.iter().find(|(ct, _)| *ct == t) {
                Some(&(_, f)) => f,
                None => {
                    let x = g.constant(ds.frame(video, other, t)?);
                    let f = self.net(other).feature(&mut g, x)?;
                    cache.push((t, f));
                    f
                }
            };
            seq.push(f);
        }
        let a = g.constant(ds.frame(video, anchor, idx.anchor)?);
        let af = self.net(anchor).feature(&mut g, a)?;
        let out = fusion.forward(&mut g, af, &seq)?;
        Ok(fusion.prediction(&g, &out.unit_logits))
    }

    /// Softmax of a stream network's standalone head on one frame.
    pub fn frame_prediction(&self, stream: Stream, frame: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(&self.store);
        let x = g.constant(frame.clone());
        let z = self.net(stream).standalone_logits(&mut g, x)?;
        Ok(softmax(g.value(z).values()))
    }

    /// Score of this model alone for the period at `anchor_time`: the fusion
    /// prediction, or for non-fusion modes the summed standalone softmax of
    /// both streams over the period's five frames.
    pub fn period_scores(
        &self,
        ds: &Dataset,
        video: usize,
        anchor_time: usize,
    ) -> Result<Vec<f64>> {
        if self.fusion.is_some() {
            return self.period_prediction(ds, video, anchor_time);
        }
        let idx = self.timing().indices(anchor_time, ds.frames());
        let mut acc = vec![0.0; self.classes];
        for s in Stream::BOTH {
            for &t in &idx.sequence {
                for (a, p) in acc
                    .iter_mut()
                    .zip(self.frame_prediction(s, &ds.frame(video, s, t)?)?)
                {
                    *a += p;
                }
            }
        }
        Ok(acc)
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join(format!("{name}.ckpt")))?;
        let meta = ModelMeta {
            schema_version: MODEL_SCHEMA,
            mode: self.mode,
            anchor: self.anchor,
            classes: self.classes,
            frame_shape: self.frame_shape,
            fingerprint: self.fingerprint(),
            config: self.config.clone(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a model from `model.json` and `<name>.ckpt` in `dir`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        if meta.schema_version != MODEL_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "model schema {} is not supported",
                meta.schema_version
            )));
        }
        let mut model = JointModel::new(
            meta.mode,
            meta.anchor,
            meta.classes,
            meta.frame_shape,
            &meta.config,
        )?;
        let fp = model.fingerprint();
        if fp != meta.fingerprint {
            return Err(Error::Checkpoint(
                "model.json fingerprint does not match its config".into(),
            ));
        }
        Checkpoint::load(&dir.join(format!("{name}.ckpt")))?.restore_into(&mut model.store, &fp)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    schema_version: u32,
    mode: Mode,
    anchor: Option<Stream>,
    classes: usize,
    frame_shape: [usize; 3],
    fingerprint: String,
    config: TrainConfig,
}

/// One training sample: a video and the anchor (or frame) time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub video: usize,
    pub time: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: LossParts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: JointModel,
    pub log: Vec<LogRecord>,
    pub best_accuracy: Option<f64>,
}

/// Draws videos without replacement, reshuffling once all are used, and
/// picks a uniform random time for each.
struct Sampler {
    rng: ChaCha8Rng,
    ids: Vec<usize>,
    queue: Vec<usize>,
    range: (usize, usize),
}

impl Sampler {
    fn next(&mut self) -> Draw {
        if self.queue.is_empty() {
            self.queue = self.ids.clone();
            self.queue.shuffle(&mut self.rng);
        }
        let video = self.queue.pop().unwrap();
        let time = self.rng.random_range(self.range.0..=self.range.1);
        Draw { video, time }
    }
}

fn sample_loss(
    model: &JointModel,
    ds: &Dataset,
    groupers: Option<&Groupers>,
    draw: Draw,
) -> Result<(f64, LossParts, Gradients)> {
    let gt = ds.info(draw.video)?.label;
    let groups_for = |s: Stream, x: &Tensor| -> Result<Option<ClassGroupSet>> {
        match (model.mode.needs_grouper(), groupers) {
            (false, _) => Ok(None),
            (true, Some(gr)) => gr.get(s).form_groups(x, gt).map(Some),
            (true, None) => Err(Error::Grouper(format!(
                "mode {} needs a grouper",
                model.mode
            ))),
        }
    };
    let mut g = Graph::new(&model.store);
    let (total, parts) = match model.anchor {
        Some(anchor) => {
            let idx = model.timing().indices(draw.time, ds.frames());
            let other = anchor.other();
            let seq = idx
                .sequence
                .iter()
                .map(|&t| ds.frame(draw.video, other, t))
                .collect::<Result<Vec<_>>>()?;
            let a = ds.frame(draw.video, anchor, idx.anchor)?;
            let groups = if model.mode.needs_grouper() {
                let mut gs = Vec::with_capacity(PERIOD_STEPS + 1);
                for x in &seq {
                    gs.push(groups_for(other, x)?.unwrap());
                }
                gs.push(groups_for(anchor, &a)?.unwrap());
                Some(gs)
            } else {
                None
            };
            let jl = model.joint_loss(&mut g, &a, &seq, groups.as_deref(), gt)?;
            let parts = LossParts {
                stream_a: g.value(jl.sequence).item()?,
                stream_b: g.value(jl.anchor).item()?,
                fusion: g.value(jl.fusion).item()?,
            };
            (jl.total, parts)
        }
        None => {
            let mut losses = [0.0; 2];
            let mut vars = Vec::new();
            for s in Stream::BOTH {
                let frame = ds.frame(draw.video, s, draw.time)?;
                let groups = groups_for(s, &frame)?;
                let x = g.constant(frame);
                let (l, _) = model.stream_loss(&mut g, s, x, gt, groups.as_ref())?;
                losses[s.index()] = g.value(l).item()?;
                vars.push(l);
            }
            let total = g.add(vars[0], vars[1])?;
            (
                total,
                LossParts {
                    stream_a: losses[0],
                    stream_b: losses[1],
                    fusion: 0.0,
                },
            )
        }
    };
    let value = g.value(total).item()?;
    let grads = g.backward(total)?;
    Ok((value, parts, grads))
}

/// Quick single-model accuracy on a spread of test videos.
pub fn heldout_accuracy(
    model: &JointModel,
    ds: &Dataset,
    videos: usize,
    periods: usize,
) -> Result<f64> {
    let test = ds.ids(Split::Test);
    if test.is_empty() || videos == 0 || periods == 0 {
        return Err(Error::config(
            "held-out check needs test videos and periods",
        ));
    }
    let take = videos.min(test.len());
    let chosen: Vec<usize> = (0..take).map(|i| test[i * test.len() / take]).collect();
    let anchors = model.timing().uniform_anchors(ds.frames(), periods);
    let hits = chosen
        .par_iter()
        .map(|&v| {
            let mut acc = vec![0.0; model.classes];
            for &t in &anchors {
                for (a, p) in acc.iter_mut().zip(model.period_scores(ds, v, t)?) {
                    *a += p;
                }
            }
            Ok((crate::autodiff::argmax(&acc) == ds.info(v)?.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / take as f64)
}

/// Trains one model. With `out_dir`, the log is written to
/// `train_log.jsonl` as it grows and `final.ckpt` (plus `best.ckpt` when
/// held-out checks run) are saved next to `model.json`.
pub fn train(
    ds: &Dataset,
    groupers: Option<&Groupers>,
    mode: Mode,
    anchor: Option<Stream>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut model = JointModel::new(
        mode,
        anchor,
        ds.classes(),
        ds.config().frame_shape(),
        config,
    )?;
    if mode.needs_grouper() && groupers.is_none() {
        return Err(Error::Grouper(format!(
            "mode {mode} needs a frozen grouper"
        )));
    }
    let train_ids = ds.ids(Split::Train);
    if config.batch_size > train_ids.len() {
        return Err(Error::config(format!(
            "batch size {} exceeds {} training videos",
            config.batch_size,
            train_ids.len()
        )));
    }
    let range = if anchor.is_some() {
        model.timing().anchor_range(ds.frames())
    } else {
        (0, ds.frames() - 1)
    };
    let dir_tag = anchor.map_or(2, |a| a.index() as u64);
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ (0x5A3C_0000 + dir_tag)),
        ids: train_ids,
        queue: Vec::new(),
        range,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((
                BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?),
                path,
            ))
        }
        None => None,
    };
    let mut sgd = Sgd::new(&model.store, config.momentum);
    let mut log = Vec::with_capacity(config.iterations);
    let mut best: Option<f64> = None;
    for iteration in 1..=config.iterations {
        let draws: Vec<Draw> = (0..config.batch_size).map(|_| sampler.next()).collect();
        let results = draws
            .par_iter()
            .map(|&d| sample_loss(&model, ds, groupers, d))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / draws.len() as f64;
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        let mut parts = LossParts::default();
        for (l, p, gr) in &results {
            loss += l;
            parts.stream_a += p.stream_a;
            parts.stream_b += p.stream_b;
            parts.fusion += p.fusion;
            grads.merge(gr);
        }
        loss *= scale;
        parts.stream_a *= scale;
        parts.stream_b *= scale;
        parts.fusion *= scale;
        if !loss.is_finite() || !grads.is_finite() {
            let detail = dump_batch(out_dir, iteration, &draws, &results)?;
            return Err(Error::NonFiniteLoss { iteration, detail });
        }
        grads.scale(scale);
        model.store.clear_grads();
        model.store.accumulate(&grads)?;
        let lr = config.lr_at(iteration);
        sgd.step(&mut model.store, lr)?;
        model.store.clear_grads();

        let eval_accuracy = if config.eval_every > 0 && iteration % config.eval_every == 0 {
            let acc = heldout_accuracy(&model, ds, config.eval_videos, config.eval_periods)?;
            if best.is_none_or(|b| acc > b) {
                best = Some(acc);
                if let Some(dir) = out_dir {
                    model.save(dir, "best")?;
                }
            }
            Some(acc)
        } else {
            None
        };
        let record = LogRecord {
            schema_version: LOG_SCHEMA,
            iteration,
            lr,
            loss,
            components: parts,
            eval_accuracy,
        };
        if let Some((w, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(record);
    }
    if let Some((mut w, path)) = log_file {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        model.save(dir, "final")?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_accuracy: best,
    })
}

fn dump_batch(
    out_dir: Option<&Path>,
    iteration: usize,
    draws: &[Draw],
    results: &[(f64, LossParts, Gradients)],
) -> Result<String> {
    let samples: Vec<_> = draws
        .iter()
        .zip(results)
        .map(|(d, (l, p, g))| {
            serde_json::json!({
                "video": d.video,
                "time": d.time,
                "loss": format!("{l}"),
                "components": [format!("{}", p.stream_a), format!("{}", p.stream_b), format!("{}", p.fusion)],
                "finite_gradients": g.is_finite(),
            })
        })
        .collect();
    let dump = serde_json::json!({ "iteration": iteration, "batch": samples });
    let text = serde_json::to_string_pretty(&dump)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("nan_dump.json");
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            Ok(format!("batch dumped to {}", path.display()))
        }
        None => Ok(text),
    }
}

/// The two anchor-direction models of a fusion mode, or the single model of
/// a non-fusion mode.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub mode: Mode,
    pub models: Vec<JointModel>,
}

impl ModelSet {
    pub fn anchors(mode: Mode) -> Vec<Option<Stream>> {
        if mode.fusion.is_some() {
            vec![Some(Stream::Appearance), Some(Stream::Motion)]
        } else {
            vec![None]
        }
    }

    pub fn dir_name(anchor: Option<Stream>) -> &'static str {
        match anchor {
            Some(Stream::Appearance) => "anchor_appearance",
            Some(Stream::Motion) => "anchor_motion",
            None => "streams",
        }
    }
}

/// Trains every model a mode needs, each into its own subdirectory.
pub fn train_mode(
    ds: &Dataset,
    groupers: Option<&Groupers>,
    mode: Mode,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelSet, Vec<Vec<LogRecord>>)> {
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for anchor in ModelSet::anchors(mode) {
        let dir = out_dir.map(|d| d.join(ModelSet::dir_name(anchor)));
        let out = train(ds, groupers, mode, anchor, config, dir.as_deref())?;
        models.push(out.model);
        logs.push(out.log);
    }
    Ok((ModelSet { mode, models }, logs))
}
