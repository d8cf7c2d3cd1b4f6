use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::ModelConfig;
use crate::signal::{patchify, BandTag};

fn tiny() -> Lblm {
    let cfg = ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        conv_kernel: 3,
        subjects: 1,
        ..ModelConfig::default()
    };
    Lblm::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn sine(len: usize, f: f64, ph: f64) -> Vec<f64> {
    (0..len).map(|t| (2.0 * std::f64::consts::PI * f * t as f64 + ph).sin()).collect()
}

#[test]
fn merge_hand_case() {
    let m = merge_overlaps(&[vec![1.0; 4], vec![3.0; 4]], 2).unwrap();
    assert_eq!(m, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    let cat = merge_overlaps(&[vec![1.0, 2.0], vec![3.0, 4.0]], 2).unwrap();
    assert_eq!(cat, vec![1.0, 2.0, 3.0, 4.0]);
    let flat = merge_overlaps(&vec![vec![7.5; 25]; 9], 6).unwrap();
    assert!(flat.iter().all(|v| *v == 7.5));
    assert!(merge_overlaps(&[], 2).is_err());
}

proptest! {
    #[test]
    fn merging_true_patches_reconstructs(len in 30usize..200, p in 1usize..25, s in 1usize..25, seed in any::<u64>()) {
        prop_assume!(s <= p && p <= len);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..len).map(|_| r.gen_range(-5.0..5.0)).collect();
        let ps = patchify(&x, p, s).unwrap();
        let patches: Vec<Vec<f64>> = (0..ps.len()).map(|i| ps.patch(i).to_vec()).collect();
        let m = merge_overlaps(&patches, s).unwrap();
        for (a, b) in m.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn metrics_anchors() {
    let t = vec![vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 4.0]];
    assert_eq!(forecast_metrics(&t, &t).unwrap(), (0.0, 0.0));
    let p: Vec<Vec<f64>> = t.iter().map(|c| c.iter().map(|v| v + 1.0).collect()).collect();
    let (mse, mae) = forecast_metrics(&p, &t).unwrap();
    assert!((mse - 1.0).abs() < 1e-15 && (mae - 1.0).abs() < 1e-15);
    assert!(forecast_metrics(&p[..1], &t).is_err());
}

#[test]
fn persistence_anchors() {
    let ctx = vec![vec![3.0; 10], vec![1.0, 2.0, 5.0]];
    let p = persistence_baseline(&ctx, 4).unwrap();
    assert_eq!(p[0], vec![3.0; 4]);
    assert_eq!(p[1], vec![5.0; 4]);
    assert_eq!(forecast_metrics(&p[..1], &[vec![3.0; 4]]).unwrap(), (0.0, 0.0));
    assert!(persistence_baseline(&[vec![]], 3).is_err());
}

#[test]
fn persistence_error_on_a_sine_grows_with_horizon() {
    // period 50 samples, context ends at a zero crossing; error rises over
    // the first quarter period
    let f = 1.0 / 50.0;
    let x = sine(300, f, 0.0);
    let ctx = &x[..200];
    let last = ctx[199];
    let mut prev = 0.0;
    for t in [3usize, 6, 9, 12] {
        let pred = persistence_baseline(&[ctx.to_vec()], t).unwrap();
        let (_, mae) = forecast_metrics(&pred, &[x[200..200 + t].to_vec()]).unwrap();
        let closed: f64 = (1..=t)
            .map(|k| ((2.0 * std::f64::consts::PI * f * (199 + k) as f64).sin() - last).abs())
            .sum::<f64>()
            / t as f64;
        assert!((mae - closed).abs() < 1e-12);
        assert!(mae > prev);
        prev = mae;
    }
    // saturation: whole periods average to the mean absolute sine offset
    let pred = persistence_baseline(&[ctx.to_vec()], 100).unwrap();
    let (_, mae) = forecast_metrics(&pred, &[x[200..300].to_vec()]).unwrap();
    assert!((mae - 2.0 / std::f64::consts::PI).abs() < 0.01);
}

#[test]
fn rollout_call_counts_and_trimming() {
    let m = tiny();
    let ctx = vec![sine(100, 0.03, 0.0), sine(100, 0.05, 1.0)];
    let one = rollout(&m, &ctx, 0, 6, RolloutMode::LastPatch).unwrap();
    assert_eq!(one.model_calls, 1);
    assert_eq!(one.prediction[0].len(), 6);
    let r = rollout(&m, &ctx, 0, 46, RolloutMode::LastPatch).unwrap();
    assert_eq!(r.model_calls, 8);
    assert!(r.prediction.iter().all(|c| c.len() == 46));
    assert_eq!(r, rollout(&m, &ctx, 0, 46, RolloutMode::LastPatch).unwrap());
    // the first stride comes from the same model call in both runs
    assert_eq!(one.prediction[1], r.prediction[1][..6].to_vec());
    let merged = rollout(&m, &ctx, 0, 46, RolloutMode::Merged).unwrap();
    assert_eq!(merged.model_calls, 8);
    assert!(merged.prediction.iter().all(|c| c.len() == 46));
    assert!(matches!(
        rollout(&m, &[vec![0.0; 20]], 0, 6, RolloutMode::LastPatch),
        Err(LblmError::InputTooShort { len: 20, required: 25 })
    ));
}

#[test]
fn rollout_respects_the_token_budget() {
    let mut m = tiny();
    m.cfg.n_max = 12;
    let ctx = vec![sine(400, 0.02, 0.0)];
    let r = rollout(&m, &ctx, 0, 30, RolloutMode::LastPatch).unwrap();
    assert_eq!(r.prediction[0].len(), 30);
}

#[test]
fn ladder_parsing() {
    let l = parse_ladder("204:46,180:70,156:94,132:118,114:136").unwrap();
    assert_eq!(l, HORIZON_LADDER.to_vec());
    assert!(l.iter().all(|(c, t)| c + t == 250));
    assert_eq!(format_ladder(&l), "204:46,180:70,156:94,132:118,114:136");
    assert!(parse_ladder("204-46").is_err());
    assert!(parse_ladder("0:5").is_err());
    assert!(parse_ladder("a:5").is_err());
}

#[test]
fn spearman_reference_values() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    // x = 1..5, y = (2, 1, 4, 3, 5): 1 - 6 * 4 / 120
    let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
    assert!((r - 0.8).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
}

#[test]
fn evaluation_rows_and_overlays() {
    let m = tiny();
    let seg = TrialSegment {
        data: vec![sine(260, 0.04, 0.0), sine(260, 0.02, 0.5)],
        fs: 250.0,
        word: 0,
        semantic: 0,
        subject_id: 0,
        session_id: 0,
        band: BandTag::Raw,
        condition: None,
    };
    let cfg = ForecastConfig {
        ladder: vec![(204, 46), (114, 136)],
        overlays: 1,
        ..ForecastConfig::default()
    };
    let ev = evaluate_forecasts(&m, &[seg.clone()], &cfg).unwrap();
    assert_eq!(ev.rows.len(), 2 * 2 * 2);
    assert_eq!(ev.overlays.len(), 2);
    assert_eq!(ev.overlays[0].points.len(), 250);
    assert!(ev.overlays[0].points[..204].iter().all(|p| p.prediction.is_none()));
    let csv = forecast_csv(&ev.rows);
    assert_eq!(csv.lines().count(), 9);
    assert_eq!(csv, forecast_csv(&evaluate_forecasts(&m, &[seg.clone()], &cfg).unwrap().rows));
    let means = mean_mse_by_horizon(&ev.rows);
    assert_eq!(means.len(), 4);
    let long = ForecastConfig {
        offset: 20,
        ..cfg
    };
    assert!(matches!(
        evaluate_forecasts(&m, &[seg], &long),
        Err(LblmError::Truncation { .. })
    ));
}
