//! Adaptive class groups from a small, separately trained classifier.
//!
//! The grouper ranks all classes for an input; the top 5, top 3 and top 1
//! classes become the groups G₁, G₂, G₃. The ground-truth class is always
//! made a member. Once trained the grouper is frozen, so the groups an input
//! receives never change while the main networks train.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{argmax, softmax, Gradients, ParamStore, Sgd, Tensor, Var};
use crate::c2f::GROUP_SIZES;
use crate::data::{Dataset, Split, Stream};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Conv2d, Graph, Linear};

/// How a ground-truth class missing from a top-k list is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    /// Replace the lowest-ranked member, keeping the group size fixed.
    #[default]
    Replace,
    /// Append the ground truth, growing the group by one.
    Append,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrouperConfig {
    /// Output channels of the two 3×3 conv blocks.
    pub channels: [usize; 2],
    /// Share of each class's training videos used for pre-training.
    pub fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub inclusion: Inclusion,
}

impl Default for GrouperConfig {
    fn default() -> Self {
        GrouperConfig {
            channels: [8, 16],
            fraction: 0.125,
            iterations: 300,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            inclusion: Inclusion::Replace,
        }
    }
}

/// The class groups of one input, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroupSet {
    pub groups: [Vec<usize>; 3],
}

impl ClassGroupSet {
    /// Ranks classes by probability (ties to the lower index) and forms the
    /// three groups with mandatory ground-truth membership.
    pub fn from_probabilities(probs: &[f64], gt: usize, inclusion: Inclusion) -> Result<Self> {
        let n = probs.len();
        if gt >= n {
            return Err(Error::Grouper(format!(
                "ground truth {gt} outside {n} classes"
            )));
        }
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let groups = GROUP_SIZES.map(|size| {
            let mut g = ranking[..size.min(n)].to_vec();
            if !g.contains(&gt) {
                match inclusion {
                    Inclusion::Replace => *g.last_mut().unwrap() = gt,
                    Inclusion::Append => g.push(gt),
                }
            }
            g
        });
        Ok(ClassGroupSet { groups })
    }

    /// Every group reduced to the ground truth alone.
    pub fn singleton(gt: usize) -> Self {
        ClassGroupSet {
            groups: [vec![gt], vec![gt], vec![gt]],
        }
    }

    /// Groups of the given one-based granularity levels, in order.
    pub fn select(&self, levels: &[usize]) -> Vec<Vec<usize>> {
        levels.iter().map(|&l| self.groups[l - 1].clone()).collect()
    }
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over the three granularities of the groups' Jaccard similarity.
pub fn group_similarity(a: &ClassGroupSet, b: &ClassGroupSet) -> f64 {
    a.groups
        .iter()
        .zip(&b.groups)
        .map(|(x, y)| jaccard(x, y))
        .sum::<f64>()
        / 3.0
}

/// Two conv blocks and a linear head.
#[derive(Debug, Clone)]
pub struct GrouperModel {
    pub config: GrouperConfig,
    pub input_shape: [usize; 3],
    pub classes: usize,
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    frozen: bool,
}

impl GrouperModel {
    pub fn new(
        input_shape: [usize; 3],
        classes: usize,
        config: &GrouperConfig,
        seed: u64,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        if classes < 2 || h % 4 != 0 || w % 4 != 0 || c == 0 || h == 0 {
            return Err(Error::config(format!(
                "grouper needs ≥ 2 classes and spatial sizes divisible by 4, got {classes} and {input_shape:?}"
            )));
        }
        if config.channels.contains(&0) {
            return Err(Error::config("grouper channels must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2] = config.channels;
        let conv1 = Conv2d::new(&mut store, "grouper.conv1", c, c1, 3, 1, 1, &mut rng)?;
        let conv2 = Conv2d::new(&mut store, "grouper.conv2", c1, c2, 3, 1, 1, &mut rng)?;
        let fc = Linear::new(
            &mut store,
            "grouper.fc",
            c2 * (h / 4) * (w / 4),
            classes,
            &mut rng,
        )?;
        Ok(GrouperModel {
            config: config.clone(),
            input_shape,
            classes,
            store,
            conv1,
            conv2,
            fc,
            frozen: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = g.relu(y);
        let y = g.maxpool2d(y)?;
        let y = self.conv2.forward(g, y)?;
        let y = g.relu(y);
        let y = g.maxpool2d(y)?;
        let len = g.value(y).numel();
        let y = g.reshape(y, &[len])?;
        Ok(self.fc.forward(g, y)?)
    }

    pub fn probabilities(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::frozen(&self.store);
        let x = g.constant(input.clone());
        let z = self.logits(&mut g, x)?;
        Ok(softmax(g.value(z).values()))
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.probabilities(input)?))
    }

    pub fn accuracy(&self, samples: &[(Tensor, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Grouper("no samples to score".into()));
        }
        let hits = samples
            .par_iter()
            .map(|(x, y)| self.predict(x).map(|p| (p == *y) as usize))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
    }

    /// Mini-batch momentum SGD on softmax cross-entropy. Rejected once frozen.
    pub fn fit(
        &mut self,
        samples: &[(Tensor, usize)],
        iterations: usize,
        seed: u64,
    ) -> Result<f64> {
        if self.frozen {
            return Err(Error::Grouper("a frozen grouper cannot be trained".into()));
        }
        if samples.is_empty() {
            return Err(Error::Grouper("empty training subset".into()));
        }
        if iterations == 0 || self.config.batch_size == 0 {
            return Err(Error::config(
                "grouper iterations and batch size must be positive",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sgd = Sgd::new(&self.store, self.config.momentum);
        let mut order: Vec<usize> = Vec::new();
        let mut last = 0.0;
        for _ in 0..iterations {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().unwrap());
            }
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = &samples[i];
                    let mut g = Graph::new(&self.store);
                    let x = g.constant(x.clone());
                    let z = self.logits(&mut g, x)?;
                    let loss = g.softmax_cross_entropy(z, &[*y], 1.0)?;
                    Ok((g.value(loss).item()?, g.backward(loss)?))
                })
                .collect::<Result<Vec<(f64, Gradients)>>>()?;
            let mut grads = Gradients::default();
            let mut total = 0.0;
            for (l, gr) in &parts {
                total += l;
                grads.merge(gr);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            last = total * scale;
            if !last.is_finite() || !grads.is_finite() {
                return Err(Error::Grouper(format!(
                    "non-finite pre-training loss {last}"
                )));
            }
            self.store.clear_grads();
            self.store.accumulate(&grads)?;
            sgd.step(&mut self.store, self.config.learning_rate)?;
        }
        self.store.clear_grads();
        Ok(last)
    }

    pub fn fingerprint(&self) -> String {
        let desc = serde_json::json!({
            "kind": "grouper",
            "input_shape": self.input_shape,
            "classes": self.classes,
            "channels": self.config.channels,
        });
        hex_digest(desc.to_string().as_bytes())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.fingerprint())
    }

    /// SHA-256 of the encoded checkpoint.
    pub fn hash(&self) -> String {
        hex_digest(&self.checkpoint().encode())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Loads a checkpoint into a fresh model; the result is frozen.
    pub fn load(
        path: &Path,
        input_shape: [usize; 3],
        classes: usize,
        config: &GrouperConfig,
    ) -> Result<Self> {
        let mut model = GrouperModel::new(input_shape, classes, config, 0)?;
        let fp = model.fingerprint();
        Checkpoint::load(path)?.restore_into(&mut model.store, &fp)?;
        model.frozen = true;
        Ok(model)
    }

    /// Forms the class groups of `input`; the grouper must be frozen.
    pub fn form_groups(&self, input: &Tensor, gt: usize) -> Result<ClassGroupSet> {
        if !self.frozen {
            return Err(Error::Grouper("groups require a frozen grouper".into()));
        }
        if gt >= self.classes {
            return Err(Error::Grouper(format!(
                "ground truth {gt} outside {} classes",
                self.classes
            )));
        }
        ClassGroupSet::from_probabilities(&self.probabilities(input)?, gt, self.config.inclusion)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Signature-window frames of `stream` from the given videos.
pub fn window_frames(ds: &Dataset, ids: &[usize], stream: Stream) -> Result<Vec<(Tensor, usize)>> {
    let width = ds.config().signature_width;
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        let info = ds.info(id)?;
        let on = info.onset(stream);
        for t in on..on + width {
            out.push((ds.frame(id, stream, t)?, info.label));
        }
    }
    Ok(out)
}

/// Per class, the first `ceil(fraction · n_c)` of a seeded shuffle of its
/// training videos.
pub fn pretraining_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "grouper fraction {fraction} outside (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = ds.ids(Split::Train);
    let mut subset = Vec::new();
    for c in 0..ds.classes() {
        let mut ids: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| ds.videos()[i].label == c)
            .collect();
        ids.shuffle(&mut rng);
        let take = (fraction * ids.len() as f64).ceil() as usize;
        subset.extend_from_slice(&ids[..take.min(ids.len())]);
    }
    if subset.is_empty() {
        return Err(Error::Grouper("empty pre-training subset".into()));
    }
    Ok(subset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub stream: Stream,
    pub videos: usize,
    pub samples: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub hash: String,
}

/// Trains and freezes a grouper for one stream on a fraction of the
/// training videos. Held-out accuracy is measured on the test videos'
/// signature frames.
pub fn pretrain_grouper(
    ds: &Dataset,
    stream: Stream,
    config: &GrouperConfig,
    seed: u64,
) -> Result<(GrouperModel, PretrainReport)> {
    let subset = pretraining_subset(ds, config.fraction, seed)?;
    let samples = window_frames(ds, &subset, stream)?;
    let shape = ds.config().frame_shape();
    let mut model = GrouperModel::new(shape, ds.classes(), config, seed ^ 0x0067_726f_7570_6572)?;
    let final_loss = model.fit(&samples, config.iterations, seed)?;
    model.freeze();
    let train_accuracy = model.accuracy(&samples)?;
    let heldout = window_frames(ds, &ds.ids(Split::Test), stream)?;
    let heldout_accuracy = model.accuracy(&heldout)?;
    let report = PretrainReport {
        stream,
        videos: subset.len(),
        samples: samples.len(),
        final_loss,
        train_accuracy,
        heldout_accuracy,
        hash: model.hash(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_top_k_when_gt_leads() {
        let p = [0.4, 0.2, 0.15, 0.1, 0.1, 0.05];
        let s = ClassGroupSet::from_probabilities(&p, 0, Inclusion::Replace).unwrap();
        assert_eq!(s.groups, [vec![0, 1, 2, 3, 4], vec![0, 1, 2], vec![0]]);
    }

    #[test]
    fn replacement_swaps_out_lowest_ranked() {
        let p = [0.4, 0.2, 0.15, 0.1, 0.1, 0.05];
        let s = ClassGroupSet::from_probabilities(&p, 5, Inclusion::Replace).unwrap();
        assert_eq!(s.groups, [vec![0, 1, 2, 3, 5], vec![0, 1, 5], vec![5]]);
        let s = ClassGroupSet::from_probabilities(&p, 5, Inclusion::Append).unwrap();
        assert_eq!(
            s.groups,
            [vec![0, 1, 2, 3, 4, 5], vec![0, 1, 2, 5], vec![0, 5]]
        );
    }

    #[test]
    fn sizes_clamp_to_class_count() {
        let s = ClassGroupSet::from_probabilities(&[0.2, 0.5, 0.3], 0, Inclusion::Replace).unwrap();
        assert_eq!(s.groups[0].len(), 3);
        assert_eq!(s.groups[1].len(), 3);
        assert_eq!(s.groups[2], vec![0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = ClassGroupSet::from_probabilities(&[0.25; 4], 3, Inclusion::Replace).unwrap();
        assert_eq!(s.groups, [vec![0, 1, 2, 3], vec![0, 1, 3], vec![3]]);
    }

    #[test]
    fn jaccard_basics() {
        assert_eq!(jaccard(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(jaccard(&[4], &[4]), 1.0);
        assert_eq!(jaccard(&[0], &[1]), 0.0);
    }

    #[test]
    fn unfrozen_grouper_refuses_groups_and_frozen_refuses_training() {
        let mut m = GrouperModel::new([1, 4, 4], 3, &GrouperConfig::default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(m.form_groups(&x, 0).is_err());
        m.freeze();
        assert!(m.form_groups(&x, 0).is_ok());
        assert!(m.form_groups(&x, 3).is_err());
        assert!(m.fit(&[(x, 0)], 1, 0).is_err());
    }
}
