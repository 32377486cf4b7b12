mod common;

use std::fs;

use common::{random_tensor, rng, tiny_c2f, tiny_data, CLASSES};
use rand::Rng;
use twostream_core::autodiff::gradcheck::{
    check_params, loss_floor, relative_error_floored, FD_STEP, FD_TOLERANCE,
};
use twostream_core::autodiff::{ParamStore, Tensor};
use twostream_core::c2f::{c2f_lstm_loss, c2f_total_loss};
use twostream_core::data::{Dataset, Stream, SyntheticConfig};
use twostream_core::fusion::{async_loss, FusionConfig, PERIOD_STEPS};
use twostream_core::grouper::{ClassGroupSet, GrouperConfig, GrouperModel};
use twostream_core::nn::Graph;
use twostream_core::trainer::{
    train, train_mode, FusionKind, Groupers, JointModel, Mode, ModelSet, StreamNet, TrainConfig,
};
use twostream_core::Error;

const SHAPE: [usize; 3] = [2, 16, 16];

fn tiny_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        iterations: 3,
        decay_interval: 2,
        c2f: tiny_c2f(),
        fusion: FusionConfig {
            lstm_hidden: 4,
            ..FusionConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn model(mode: &str, anchor: Option<Stream>, seed: u64) -> JointModel {
    let cfg = TrainConfig {
        seed,
        ..tiny_train()
    };
    JointModel::new(mode.parse().unwrap(), anchor, CLASSES, SHAPE, &cfg).unwrap()
}

/// Random biases keep ReLU and max-pool inputs off their kinks.
fn generic(mut m: JointModel, seed: u64) -> JointModel {
    let mut r = rng(seed ^ 0xB1A5);
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, n, _)| n.ends_with(".bias"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        m.store
            .get_mut(id)
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(-0.2..0.2));
    }
    m
}

fn group_set(gt: usize) -> ClassGroupSet {
    let mut coarse: Vec<usize> = (0..CLASSES).collect();
    coarse.rotate_left(gt);
    ClassGroupSet {
        groups: [coarse.clone(), coarse[..3].to_vec(), vec![gt]],
    }
}

fn period_inputs(seed: u64) -> (Tensor, Vec<Tensor>) {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &SHAPE);
    (
        a,
        (0..PERIOD_STEPS)
            .map(|_| random_tensor(&mut r, &SHAPE))
            .collect(),
    )
}

fn frozen_grouper(ds: &Dataset) -> GrouperModel {
    let mut m = GrouperModel::new(
        ds.config().frame_shape(),
        ds.classes(),
        &GrouperConfig::default(),
        3,
    )
    .unwrap();
    m.freeze();
    m
}

#[test]
fn uniform_heads_give_the_joint_oracle() {
    let mut m = model("co2fi+asyn5", Some(Stream::Motion), 0);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store.get_mut(id).values_mut().fill(0.0);
    }
    let (a, seq) = period_inputs(1);
    let groups = vec![group_set(2); PERIOD_STEPS + 1];
    let mut g = Graph::new(&m.store);
    let jl = m.joint_loss(&mut g, &a, &seq, Some(&groups), 2).unwrap();
    let ln4 = 4f64.ln();
    let stream = 0.25 * (0.1 * 4.0 + 0.1 * 3.0 + 1.0) * ln4 + 0.5 * 3.0 * ln4;
    let fusion = 0.5 * 5.0 * ln4;
    let oracle = 6.0 * stream + fusion;
    assert!((g.value(jl.total).item().unwrap() - oracle).abs() <= 1e-10);
    assert!((g.value(jl.sequence).item().unwrap() - 5.0 * stream).abs() <= 1e-10);
    assert!((g.value(jl.fusion).item().unwrap() - fusion).abs() <= 1e-10);
    // 19.4767 is built from four-decimal roundings of the parts.
    assert!((oracle - 19.477436).abs() < 1e-6);
    assert!((oracle - 19.4767).abs() < 1e-3);
}

#[test]
fn joint_objective_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let anchor = if seed % 2 == 0 {
            Stream::Appearance
        } else {
            Stream::Motion
        };
        let m = generic(model("co2fi+asyn5", Some(anchor), seed), seed);
        let (a, seq) = period_inputs(100 + seed);
        let gt = (seed % CLASSES as u64) as usize;
        let groups = vec![group_set(gt); PERIOD_STEPS + 1];
        let loss = |store: &ParamStore| {
            let mut probe = m.clone();
            probe.store = store.clone();
            let mut g = Graph::new(&probe.store);
            let jl = probe
                .joint_loss(&mut g, &a, &seq, Some(&groups), gt)
                .unwrap();
            g.value(jl.total).item().unwrap()
        };
        let mut g = Graph::new(&m.store);
        let jl = m.joint_loss(&mut g, &a, &seq, Some(&groups), gt).unwrap();
        let grads = g.backward(jl.total).unwrap();
        let report = check_params(&m.store, &grads, Some(3), loss);
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

/// Value of the period objective when each of the five sequence inputs reads
/// its own copy of the sequence-stream parameters.
fn untied_objective(
    m: &JointModel,
    copies: &[ParamStore],
    a: &Tensor,
    seq: &[Tensor],
    groups: &[ClassGroupSet],
    gt: usize,
) -> f64 {
    let anchor = m.anchor.unwrap();
    let mut total = 0.0;
    let mut feats = Vec::new();
    for (t, x) in seq.iter().enumerate() {
        let mut probe = m.clone();
        probe.store = copies[t].clone();
        let mut g = Graph::new(&probe.store);
        let v = g.constant(x.clone());
        let (l, f) = probe
            .stream_loss(&mut g, anchor.other(), v, gt, Some(&groups[t]))
            .unwrap();
        total += g.value(l).item().unwrap();
        feats.push(g.value(f).clone());
    }
    let mut g = Graph::new(&m.store);
    let v = g.constant(a.clone());
    let (l, af) = m
        .stream_loss(&mut g, anchor, v, gt, Some(&groups[PERIOD_STEPS]))
        .unwrap();
    total += g.value(l).item().unwrap();
    let fusion = m.fusion.as_ref().unwrap();
    let seq_vars: Vec<_> = feats.into_iter().map(|f| g.constant(f)).collect();
    let out = fusion.forward(&mut g, af, &seq_vars).unwrap();
    let la = async_loss(&mut g, &out.unit_logits, gt, m.config.gamma, CLASSES).unwrap();
    total + g.value(la).item().unwrap()
}

#[test]
fn shared_parameters_receive_the_sum_of_five_per_input_gradients() {
    for seed in 0..20 {
        let m = generic(model("co2fi+asyn5", Some(Stream::Appearance), seed), seed);
        let (a, seq) = period_inputs(200 + seed);
        let gt = (seed % CLASSES as u64) as usize;
        let groups = vec![group_set(gt); PERIOD_STEPS + 1];
        let mut g = Graph::new(&m.store);
        let jl = m.joint_loss(&mut g, &a, &seq, Some(&groups), gt).unwrap();
        let grads = g.backward(jl.total).unwrap();
        let copies = vec![m.store.clone(); PERIOD_STEPS];
        let floor = loss_floor(g.value(jl.total).item().unwrap());
        let shared: Vec<_> = m
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("motion."))
            .map(|(id, _, t)| (id, t.numel()))
            .collect();
        let mut worst: f64 = 0.0;
        for (id, len) in shared.iter().step_by(3) {
            let i = (seed as usize * 7) % len;
            let analytic = grads.param(*id).map_or(0.0, |gr| gr[i]);
            let mut numeric = 0.0;
            for t in 0..PERIOD_STEPS {
                let at = |h: f64| {
                    let mut c = copies.clone();
                    c[t].get_mut(*id).values_mut()[i] += h;
                    untied_objective(&m, &c, &a, &seq, &groups, gt)
                };
                numeric += (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            }
            worst = worst.max(relative_error_floored(analytic, numeric, floor));
        }
        assert!(worst <= FD_TOLERANCE, "seed {seed}: {worst}");
    }
}

#[test]
fn repeated_inputs_reuse_subgraphs_without_changing_gradients() {
    let m = generic(model("co2fi+syn", Some(Stream::Motion), 4), 4);
    let (a, seq) = period_inputs(5);
    let repeated = vec![seq[0].clone(); PERIOD_STEPS];
    let groups = vec![group_set(1); PERIOD_STEPS + 1];
    let mut g = Graph::new(&m.store);
    let jl = m
        .joint_loss(&mut g, &a, &repeated, Some(&groups), 1)
        .unwrap();
    let total = g.value(jl.total).item().unwrap();
    let grads = g.backward(jl.total).unwrap();

    // Same objective assembled with five separate subgraphs.
    let mut g = Graph::new(&m.store);
    let mut losses = Vec::new();
    let mut feats = Vec::new();
    for x in &repeated {
        let v = g.constant(x.clone());
        let (l, f) = m
            .stream_loss(&mut g, Stream::Appearance, v, 1, Some(&groups[0]))
            .unwrap();
        losses.push(l);
        feats.push(f);
    }
    let v = g.constant(a.clone());
    let (la, af) = m
        .stream_loss(&mut g, Stream::Motion, v, 1, Some(&groups[5]))
        .unwrap();
    losses.push(la);
    let out = m
        .fusion
        .as_ref()
        .unwrap()
        .forward(&mut g, af, &feats)
        .unwrap();
    losses.push(async_loss(&mut g, &out.unit_logits, 1, m.config.gamma, CLASSES).unwrap());
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = g.add(sum, l).unwrap();
    }
    assert!((g.value(sum).item().unwrap() - total).abs() <= 1e-12);
    let reference = g.backward(sum).unwrap();
    for (id, name, _) in m.store.iter() {
        let (x, y) = (
            grads.param(id).unwrap_or(&[]),
            reference.param(id).unwrap_or(&[]),
        );
        assert_eq!(x.len(), y.len(), "{name}");
        for (p, q) in x.iter().zip(y) {
            assert!(
                (p - q).abs() <= 1e-12 * (1.0 + q.abs()),
                "{name}: {p} vs {q}"
            );
        }
    }
}

#[test]
fn one_parameter_set_per_stream() {
    let fused = model("co2fi+asyn5", Some(Stream::Appearance), 0);
    let single = model("co2fi-complete", None, 0);
    let count = |m: &JointModel, prefix: &str| {
        m.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .count()
    };
    for prefix in ["appearance.", "motion."] {
        assert_eq!(count(&fused, prefix), count(&single, prefix));
        assert!(count(&fused, prefix) > 0);
    }
    assert_eq!(
        count(&fused, "appearance.") + count(&fused, "motion.") + count(&fused, "fusion."),
        fused.store.len()
    );
}

#[test]
fn mode_semantics() {
    assert!(matches!(
        "resnet+syn".parse::<Mode>(),
        Err(Error::UnknownMode(_))
    ));
    assert!("baseline+asyn".parse::<Mode>().is_err());
    let syn: Mode = "baseline+syn".parse().unwrap();
    let asyn0: Mode = "baseline+asyn0".parse().unwrap();
    let (ts, t0) = (
        syn.timing(5, &FusionConfig::default()),
        asyn0.timing(5, &FusionConfig::default()),
    );
    for anchor in 0..30 {
        assert_eq!(
            ts.indices(anchor, 30).sequence,
            t0.indices(anchor, 30).sequence
        );
    }
    let asyn1: Mode = "baseline+asyn1".parse().unwrap();
    assert_eq!(asyn1.fusion, Some(FusionKind::Asyn(1)));
    assert_eq!(
        asyn1
            .timing(5, &FusionConfig::default())
            .indices(20, 30)
            .sequence,
        [18, 19, 20, 21, 22]
    );

    let two = model("co2fi-two-granularities", None, 0);
    let StreamNet::C2f(net) = two.net(Stream::Appearance) else {
        panic!()
    };
    assert_eq!(net.levels(), &[2, 3]);
    assert!("co2fi-two-granularities"
        .parse::<Mode>()
        .unwrap()
        .needs_grouper());
    assert!(!"co2fi-no-coarseness"
        .parse::<Mode>()
        .unwrap()
        .needs_grouper());
    assert!(matches!(
        model("baseline", None, 0).net(Stream::Motion),
        StreamNet::Baseline(_)
    ));
    assert!(JointModel::new(syn, None, CLASSES, SHAPE, &tiny_train()).is_err());
    assert!(JointModel::new(
        "baseline".parse().unwrap(),
        Some(Stream::Motion),
        CLASSES,
        SHAPE,
        &tiny_train()
    )
    .is_err());
}

#[test]
fn ablated_stream_losses_follow_their_definitions() {
    let x = random_tensor(&mut rng(8), &SHAPE);
    let gt = 3;
    for (mode, groups) in [
        ("co2fi-no-class-grouping", None),
        ("co2fi-no-coarseness", Some(vec![vec![gt]; 3])),
    ] {
        let m = generic(model(mode, None, 1), 1);
        let StreamNet::C2f(net) = m.net(Stream::Appearance) else {
            panic!()
        };
        let mut g = Graph::new(&m.store);
        let v = g.constant(x.clone());
        let (l, _) = m
            .stream_loss(&mut g, Stream::Appearance, v, gt, None)
            .unwrap();
        let out = net.forward_train(&mut g, v).unwrap();
        let expected = match &groups {
            None => {
                c2f_lstm_loss(&mut g, &out.unit_logits, gt, m.config.weights.beta, CLASSES).unwrap()
            }
            Some(grp) => {
                c2f_total_loss(&mut g, net, &out, Some(grp), gt, &m.config.weights).unwrap()
            }
        };
        assert_eq!(
            g.value(l).item().unwrap(),
            g.value(expected).item().unwrap(),
            "{mode}"
        );
    }
    let complete = model("co2fi-complete", None, 1);
    let mut g = Graph::new(&complete.store);
    let v = g.constant(x);
    assert!(complete
        .stream_loss(&mut g, Stream::Appearance, v, gt, None)
        .is_err());
    let wrong = group_set(0);
    assert!(complete
        .stream_loss(&mut g, Stream::Appearance, v, gt, Some(&wrong))
        .is_err());
}

#[test]
fn stream_only_modes_have_no_fusion_term() {
    let ds = Dataset::generate(&tiny_data()).unwrap();
    let out = train(
        &ds,
        None,
        "co2fi-no-coarseness".parse().unwrap(),
        None,
        &tiny_train(),
        None,
    )
    .unwrap();
    assert!(out.model.fusion.is_none());
    assert!(out.log.iter().all(|r| r.components.fusion == 0.0));
    let out = train(
        &ds,
        None,
        "baseline+asyn5".parse().unwrap(),
        Some(Stream::Motion),
        &tiny_train(),
        None,
    )
    .unwrap();
    assert!(out.log.iter().all(|r| r.components.fusion > 0.0));
}

#[test]
fn learning_rate_schedule_is_a_function_of_the_iteration() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(cfg.decay_interval), 1e-2);
    assert!((cfg.lr_at(cfg.decay_interval + 1) - 1e-3).abs() < 1e-18);
    let ds = Dataset::generate(&tiny_data()).unwrap();
    let out = train(
        &ds,
        None,
        "baseline".parse().unwrap(),
        None,
        &tiny_train(),
        None,
    )
    .unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-2, 1e-2, tiny_train().lr_at(3)]);
    assert!(TrainConfig {
        decay_interval: 0,
        ..tiny_train()
    }
    .validate()
    .is_err());
    let big = TrainConfig {
        batch_size: 1000,
        ..tiny_train()
    };
    assert!(train(&ds, None, "baseline".parse().unwrap(), None, &big, None).is_err());
}

#[test]
fn training_is_bit_reproducible_and_keeps_the_grouper_frozen() {
    let ds = Dataset::generate(&tiny_data()).unwrap();
    let groupers = Groupers::shared(frozen_grouper(&ds)).unwrap();
    let before = groupers.hashes();
    let cfg = TrainConfig {
        eval_every: 2,
        eval_videos: 4,
        eval_periods: 2,
        ..tiny_train()
    };
    let mode: Mode = "co2fi+asyn5".parse().unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_mode(&ds, Some(&groupers), mode, &cfg, Some(d1.path())).unwrap();
    train_mode(&ds, Some(&groupers), mode, &cfg, Some(d2.path())).unwrap();
    assert_eq!(groupers.hashes(), before);
    for anchor in ModelSet::anchors(mode) {
        let sub = ModelSet::dir_name(anchor);
        for file in ["train_log.jsonl", "final.ckpt", "best.ckpt", "model.json"] {
            let (x, y) = (
                fs::read(d1.path().join(sub).join(file)).unwrap(),
                fs::read(d2.path().join(sub).join(file)).unwrap(),
            );
            assert_eq!(x, y, "{sub}/{file}");
        }
        let log = fs::read_to_string(d1.path().join(sub).join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.lines().all(|l| l.contains("\"schema_version\":1")));
        let loaded = JointModel::load(&d1.path().join(sub), "final").unwrap();
        assert_eq!(loaded.mode, mode);
    }
    let unfrozen =
        GrouperModel::new(ds.config().frame_shape(), 4, &GrouperConfig::default(), 0).unwrap();
    assert!(Groupers::shared(unfrozen).is_err());
    assert!(train(&ds, None, mode, Some(Stream::Motion), &cfg, None).is_err());
}

#[test]
fn non_finite_loss_aborts_with_a_batch_dump() {
    let cfg = SyntheticConfig {
        noise: 1e300,
        ..tiny_data()
    };
    let ds = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(
        &ds,
        None,
        "baseline".parse().unwrap(),
        None,
        &tiny_train(),
        Some(dir.path()),
    )
    .unwrap_err();
    let Error::NonFiniteLoss { iteration, detail } = err else {
        panic!("{err}")
    };
    assert_eq!(iteration, 1);
    assert!(detail.contains("nan_dump.json"));
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("nan_dump.json")).unwrap())
            .unwrap();
    assert_eq!(dump["batch"].as_array().unwrap().len(), 4);
}

#[test]
fn two_class_noiseless_loss_falls_below_a_tenth() {
    // Signatures span all but one frame, so almost every draw is informative.
    let data = SyntheticConfig {
        classes: 2,
        frames: 40,
        lag: 0,
        signature_width: 39,
        onset_margin: 0,
        noise: 0.0,
        confusable_pairs: vec![],
        ..tiny_data()
    };
    let ds = Dataset::generate(&data).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        iterations: 200,
        decay_interval: 1000,
        ..tiny_train()
    };
    let out = train(&ds, None, "baseline".parse().unwrap(), None, &cfg, None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let block = 40;
    let means: Vec<f64> = losses
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    let initial = losses[0];
    assert!(
        *means.last().unwrap() < 0.1 * initial,
        "{means:?} from {initial}"
    );
}
