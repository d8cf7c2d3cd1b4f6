use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{cross_entropy, grad_check, softmax, Tensor};
use crate::pretrain::init_checkpoint;
use crate::signal::BandTag;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        conv_kernel: 3,
        subjects: 2,
        ..ModelConfig::default()
    }
}

fn features(g: &mut Graph, nseg: usize, c: usize, n: usize, d: usize, seed: u64) -> (Var, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..nseg * c * n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let t = Tensor::from_vec(nseg * c * n, d, data).unwrap();
    (g.constant(t.clone()), t)
}

fn head(kind: ClassifierKind, classes: usize) -> StClassifierConfig {
    StClassifierConfig {
        classifier_kind: kind,
        num_classes: classes,
        ..StClassifierConfig::default()
    }
}

const KINDS: [ClassifierKind; 3] = [
    ClassifierKind::Linear,
    ClassifierKind::Convolutional,
    ClassifierKind::SpatioTemporal,
];

#[test]
fn probabilities_sum_to_one() {
    let m = tiny_model();
    for kind in KINDS {
        for classes in [6, 24] {
            let h = head(kind, classes);
            let store = init_classifier(&h, &m, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut g = Graph::new();
            let (x, _) = features(&mut g, 2, 3, 10, 8, 2);
            let logits = classifier_logits(&mut g, &h, &store, x, 2, 3, 10).unwrap();
            let v = g.value(logits);
            assert_eq!((v.rows, v.cols), (2, classes));
            for r in 0..2 {
                let p = softmax(v.row(r));
                assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                // shifting every logit leaves probabilities unchanged
                let shifted: Vec<f64> = v.row(r).iter().map(|x| x + 37.5).collect();
                let q = softmax(&shifted);
                assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-9));
                assert_eq!(argmax(&p), argmax(&q));
            }
        }
    }
}

#[test]
fn cross_entropy_anchors() {
    assert!((cross_entropy(&[1.0 / 6.0; 6], 2).unwrap() - 6f64.ln()).abs() <= 1e-9);
    assert!((cross_entropy(&[1.0 / 24.0; 24], 23).unwrap() - 24f64.ln()).abs() <= 1e-9);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(3, 24));
    let l = g.softmax_xent(z, vec![0, 5, 23]);
    assert!((g.value(l).item() - 24f64.ln()).abs() <= 1e-9);
    let mut p = vec![1e-12; 6];
    p[4] = 1.0 - 5e-12;
    assert!(cross_entropy(&p, 4).unwrap() < 1e-10);
    assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(LblmError::Label { .. })));
}

#[test]
fn spatial_convolution_sees_channel_positions() {
    let m = tiny_model();
    let h = head(ClassifierKind::SpatioTemporal, 6);
    let store = init_classifier(&h, &m, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g = Graph::new();
    let (x, t) = features(&mut g, 1, 3, 12, 8, 5);
    let base = classifier_logits(&mut g, &h, &store, x, 1, 3, 12).unwrap();
    let mut perm = Tensor::zeros(t.rows, t.cols);
    for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
        for i in 0..12 {
            perm.row_mut(dst * 12 + i).copy_from_slice(t.row(src * 12 + i));
        }
    }
    let xp = g.constant(perm);
    let other = classifier_logits(&mut g, &h, &store, xp, 1, 3, 12).unwrap();
    assert!(g.value(base).max_abs_diff(g.value(other)) > 1e-6);
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let m = tiny_model();
    for kind in [ClassifierKind::Convolutional, ClassifierKind::SpatioTemporal] {
        let h = head(kind, 6);
        let store = init_classifier(&h, &m, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut g = Graph::new();
        let (x, _) = features(&mut g, 1, 4, 12, 8, 5);
        assert!(matches!(
            classifier_logits(&mut g, &h, &store, x, 1, 4, 12),
            Err(LblmError::Shape(_))
        ));
    }
}

#[test]
fn linear_head_is_pooled_affine() {
    let m = tiny_model();
    let h = head(ClassifierKind::Linear, 6);
    let store = init_classifier(&h, &m, 3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut g = Graph::new();
    let (x, t) = features(&mut g, 2, 3, 5, 8, 7);
    let logits = classifier_logits(&mut g, &h, &store, x, 2, 3, 5).unwrap();
    let w = store.by_name("cls.out.w").unwrap();
    let b = store.by_name("cls.out.b").unwrap();
    for s in 0..2 {
        let mut mean = [0.0; 8];
        for r in 0..15 {
            for (k, v) in t.row(s * 15 + r).iter().enumerate() {
                mean[k] += v / 15.0;
            }
        }
        for c in 0..6 {
            let want = b.values[c] + (0..8).map(|k| mean[k] * w.values[k * 6 + c]).sum::<f64>();
            assert!((g.value(logits).get(s, c) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let m = tiny_model();
    for kind in KINDS {
        let h = StClassifierConfig {
            classifier_kind: kind,
            num_classes: 6,
            spatial_out_channels: 3,
            temporal_channels: 2,
            ..StClassifierConfig::default()
        };
        let store = init_classifier(&h, &m, 2, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut g0 = Graph::new();
        let (_, t) = features(&mut g0, 2, 2, 6, 8, 9);
        let report = grad_check(&store, 1e-6, 1e-4, |g, st| {
            let x = g.constant(t.clone());
            let logits = classifier_logits(g, &h, st, x, 2, 2, 6)?;
            Ok(g.softmax_xent(logits, vec![1, 4]))
        })
        .unwrap();
        assert!(report.passed(), "{kind:?}: {}", report.max_rel_err());
    }
}

#[test]
fn report_arithmetic() {
    let labels = [0, 1, 2, 3, 4, 5, 6, 7];
    let preds = [0, 2, 2, 3, 9, 5, 6, 7];
    let r = EvalReport::from_predictions(Task::Word24, &labels, &preds, "x".into()).unwrap();
    let trace: usize = (0..24).map(|c| r.confusion[c][c]).sum();
    assert_eq!(r.accuracy, trace as f64 / r.n_trials as f64);
    assert_eq!(r.accuracy, 0.75);
    for (c, row) in r.confusion.iter().enumerate() {
        let count = labels.iter().filter(|y| **y == c).count();
        assert_eq!(row.iter().sum::<usize>(), count);
    }
    assert_eq!(r.per_class[1], Some(0.0));
    assert_eq!(r.per_class[20], None);
    // 1 and 2 share a group, 4 and 9 do not
    assert_eq!(r.semantic_remap_accuracy, Some(7.0 / 8.0));
    let oracle = EvalReport::from_predictions(Task::Semantic6, &[0, 3, 5], &[0, 3, 5], "x".into()).unwrap();
    assert_eq!(oracle.accuracy, 1.0);
    assert!(EvalReport::from_predictions(Task::Semantic6, &[6], &[0], "x".into()).is_err());
}

#[test]
fn split_validation() {
    let p = SplitPlan::holdout_last_two(4);
    assert_eq!(p.default.train_sessions, vec![0, 1]);
    p.validate().unwrap();
    let mut bad = p.clone();
    bad.default.val_session = 1;
    assert!(bad.validate().is_err());
    bad.default.val_session = 3;
    assert!(bad.validate().is_err());
    let mut over = p.clone();
    over.overrides.insert(
        1,
        SessionSplit {
            train_sessions: vec![1, 2],
            val_session: 3,
            test_session: 0,
        },
    );
    over.validate().unwrap();
    let seg = |subject, session| TrialSegment {
        data: vec![vec![0.0]],
        fs: 250.0,
        word: 0,
        semantic: 0,
        subject_id: subject,
        session_id: session,
        band: BandTag::Raw,
        condition: None,
    };
    assert_eq!(over.role(&seg(0, 0)), Some(Role::Train));
    assert_eq!(over.role(&seg(1, 0)), Some(Role::Test));
    assert_eq!(over.role(&seg(0, 7)), None);
    let json = serde_json::to_string(&over).unwrap();
    assert_eq!(serde_json::from_str::<SplitPlan>(&json).unwrap(), over);
}

/// Four sessions of trials whose word shows up as a tone on one channel.
fn toy_trials(seed: u64) -> Vec<TrialSegment> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for session in 0..4u16 {
        for i in 0..12u8 {
            let word = (i % 6) * 4;
            let f = 0.02 + 0.015 * (word / 4) as f64;
            let data = (0..2)
                .map(|c| {
                    (0..120)
                        .map(|t| {
                            let tone = if c == 0 { (2.0 * std::f64::consts::PI * f * t as f64).sin() } else { 0.0 };
                            tone + 0.3 * r.gen_range(-1.0..1.0)
                        })
                        .collect()
                })
                .collect();
            out.push(TrialSegment {
                data,
                fs: 250.0,
                word,
                semantic: group(word),
                subject_id: 0,
                session_id: session,
                band: BandTag::Raw,
                condition: None,
            });
        }
    }
    out
}

fn toy_finetune(task: Task) -> FinetuneConfig {
    FinetuneConfig {
        task,
        epochs: 4,
        batch: 8,
        hyper: TrainHyper {
            lr_base: 3e-3,
            ..TrainHyper::default()
        },
        classifier: StClassifierConfig {
            spatial_out_channels: 4,
            temporal_channels: 2,
            ..StClassifierConfig::default()
        },
        ..FinetuneConfig::default()
    }
}

#[test]
fn finetune_keeps_best_validation_epoch() {
    let init = init_checkpoint(&tiny_model(), 0).unwrap();
    let trials = toy_trials(1);
    let cfg = toy_finetune(Task::Semantic6);
    let a = finetune(&init, &trials, &cfg).unwrap();
    let best = a.log.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    assert_eq!(a.log[a.best_epoch].val_accuracy, best);
    assert_eq!(a.val_report.accuracy, best);
    assert_eq!(a.checkpoint.stage, Stage::Finetuned);
    let b = finetune(&init, &trials, &cfg).unwrap();
    assert_eq!(a.checkpoint.hash().unwrap(), b.checkpoint.hash().unwrap());
    // evaluation is repeatable
    let e1 = evaluate(&a.checkpoint, &trials, &cfg.split, Task::Semantic6).unwrap();
    let e2 = evaluate(&a.checkpoint, &trials, &cfg.split, Task::Semantic6).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.n_trials, 12);
    assert!(evaluate(&a.checkpoint, &trials, &cfg.split, Task::Word24).is_err());
}

#[test]
fn frozen_backbone_only_moves_the_classifier() {
    let init = init_checkpoint(&tiny_model(), 0).unwrap();
    let cfg = FinetuneConfig {
        freeze_backbone: true,
        epochs: 1,
        ..toy_finetune(Task::Word24)
    };
    let out = finetune(&init, &toy_trials(2), &cfg).unwrap();
    for p in init.params.iter() {
        assert_eq!(out.checkpoint.params.by_name(&p.name).unwrap().values, p.values, "{}", p.name);
    }
    let moved = out
        .checkpoint
        .params
        .iter()
        .filter(|p| p.name.starts_with(CLS_PREFIX))
        .count();
    assert!(moved > 0);
    let rep = evaluate(&out.checkpoint, &toy_trials(2), &cfg.split, Task::Semantic6).unwrap();
    assert_eq!(rep.task, Task::Semantic6);
}

#[test]
fn empty_split_is_rejected() {
    let init = init_checkpoint(&tiny_model(), 0).unwrap();
    let trials: Vec<TrialSegment> = toy_trials(3).into_iter().filter(|s| s.session_id != 2).collect();
    assert!(matches!(
        finetune(&init, &trials, &toy_finetune(Task::Word24)),
        Err(LblmError::Config(_))
    ));
}
