use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{Graph, SeqLayout, Tensor};
use crate::error::LblmError;

fn tiny(kind: BackboneKind) -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 12,
        conv_kernel: 3,
        patch_len: 5,
        stride: 2,
        subjects: 3,
        n_max: 64,
        backbone_kind: kind,
        ln_eps: 1e-5,
    }
}

fn model(kind: BackboneKind, seed: u64) -> Lblm {
    Lblm::new(tiny(kind), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_segment(c: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..c).map(|_| (0..l).map(|_| r.gen_range(-2.0..2.0)).collect()).collect()
}

fn batch_of(segs: &[Vec<Vec<f64>>], subjects: &[usize], cfg: &ModelConfig) -> TokenBatch {
    let refs: Vec<&[Vec<f64>]> = segs.iter().map(|s| s.as_slice()).collect();
    TokenBatch::from_segments(&refs, subjects, cfg.patch_len, cfg.stride, false).unwrap()
}

fn run(m: &Lblm, b: &TokenBatch, opts: &ForwardOptions) -> Tensor {
    let mut g = Graph::new();
    let tr = m.forward(&mut g, b, opts).unwrap();
    g.value(tr.features).clone()
}

#[test]
fn positional_row_zero() {
    let pe = positional_table(4, 6);
    for i in 0..6 {
        assert_eq!(pe.get(0, i), if i % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((pe.get(3, 3) - (3.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
}

#[test]
fn embedding_with_unit_subject_table() {
    let m = model(BackboneKind::GatedConformer, 1);
    let cfg = &m.cfg;
    let b = batch_of(&[random_segment(2, 21, 2)], &[1], cfg);
    let mut g = Graph::new();
    let p = Params { store: &m.params };
    let e = embed(&mut g, cfg, &p, &b, None).unwrap();
    let w = m.params.by_name("embed.proj.w").unwrap();
    let bias = m.params.by_name("embed.proj.b").unwrap();
    let pe = positional_table(b.n(), cfg.d);
    for r in 0..b.rows() {
        let patch = b.patches.row(r);
        for j in 0..cfg.d {
            let mut v = bias.values[j];
            for (i, x) in patch.iter().enumerate() {
                v += x * w.values[i * cfg.d + j];
            }
            v += pe.get(r % b.n(), j);
            assert!((g.value(e).get(r, j) - v).abs() < 1e-12);
        }
    }
}

#[test]
fn subject_rows_change_tokens() {
    let mut m = model(BackboneKind::GatedConformer, 1);
    let cfg = m.cfg.clone();
    let seg = random_segment(2, 21, 2);
    let b0 = batch_of(&[seg.clone()], &[0], &cfg);
    let b1 = batch_of(&[seg], &[1], &cfg);
    let emb = |m: &Lblm, b: &TokenBatch| {
        let mut g = Graph::new();
        let e = embed(&mut g, &cfg, &Params { store: &m.params }, b, None).unwrap();
        g.value(e).clone()
    };
    assert_eq!(emb(&m, &b0), emb(&m, &b1));
    let id = m.params.id("embed.subject").unwrap();
    m.params.get_mut(id).values[cfg.d + 3] = 1.7;
    assert_ne!(emb(&m, &b0), emb(&m, &b1));
    let bad = batch_of(&[random_segment(2, 21, 2)], &[3], &cfg);
    let mut g = Graph::new();
    assert!(matches!(
        m.forward(&mut g, &bad, &ForwardOptions::default()),
        Err(LblmError::SubjectRange { subject: 3, count: 3 })
    ));
}

#[test]
fn gates_are_half_at_init() {
    let m = model(BackboneKind::GatedConformer, 3);
    for seed in 0..3 {
        let b = batch_of(&[random_segment(3, 30, seed), random_segment(3, 30, seed + 9)], &[0, 2], &m.cfg);
        let mut g = Graph::new();
        let tr = m.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
        assert_eq!(tr.gates.len(), 2);
        for (l, gate) in tr.gates.iter().enumerate() {
            assert!(g.value(*gate).data.iter().all(|v| *v == 0.5));
            let inner = g.value(tr.block_inners[l]);
            let input = g.value(tr.block_inputs[l]);
            let out = if l + 1 < tr.block_inputs.len() {
                g.value(tr.block_inputs[l + 1])
            } else {
                g.value(tr.features)
            };
            for i in 0..out.data.len() {
                assert_eq!(out.data[i], 0.5 * inner.data[i] + 0.5 * input.data[i]);
            }
        }
    }
}

#[test]
fn zero_gate_is_identity() {
    let m = model(BackboneKind::GatedConformer, 4);
    let b = batch_of(&[random_segment(2, 30, 5)], &[0], &m.cfg);
    let opts = ForwardOptions {
        gate_override: Some(0.0),
        ..Default::default()
    };
    let mut g = Graph::new();
    let tr = m.forward(&mut g, &b, &opts).unwrap();
    assert_eq!(g.value(tr.features), g.value(tr.block_inputs[0]));
}

#[test]
fn gates_stay_inside_unit_interval_after_training_noise() {
    let mut m = model(BackboneKind::GatedConformer, 5);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for p in m.params.iter_mut() {
        if p.name.contains("gate") {
            p.values.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
    }
    let b = batch_of(&[random_segment(2, 30, 6)], &[0], &m.cfg);
    let mut g = Graph::new();
    let tr = m.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
    for gate in &tr.gates {
        let v = &g.value(*gate).data;
        assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
        assert!(v.iter().any(|x| (x - v[0]).abs() > 1e-6));
    }
}

#[test]
fn causal_prefix_is_stable() {
    for kind in [BackboneKind::Transformer, BackboneKind::Conformer, BackboneKind::GatedConformer] {
        let mut m = model(kind, 7);
        // push gates away from the constant initial value
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for p in m.params.iter_mut() {
            p.values.iter_mut().for_each(|v| *v += 0.1 * r.gen_range(-1.0..1.0));
        }
        let b = batch_of(&[random_segment(2, 41, 8)], &[1], &m.cfg);
        let opts = ForwardOptions {
            causal: true,
            ..Default::default()
        };
        let base = run(&m, &b, &opts);
        let n = b.n();
        for cut in [0, 3, n - 2] {
            let mut pb = b.clone();
            for s in 0..pb.layout.nseq {
                for i in cut + 1..n {
                    pb.patches.row_mut(s * n + i).iter_mut().for_each(|v| *v = r.gen_range(-50.0..50.0));
                }
            }
            let out = run(&m, &pb, &opts);
            for s in 0..pb.layout.nseq {
                for i in 0..=cut {
                    let row = s * n + i;
                    for (a, c) in out.row(row).iter().zip(base.row(row)) {
                        assert!((a - c).abs() <= 1e-12, "{kind:?} cut {cut} row {row}");
                    }
                }
            }
            assert!(out.max_abs_diff(&base) > 1e-6);
        }
    }
}

#[test]
fn conv_module_receptive_field() {
    let m = model(BackboneKind::Conformer, 9);
    let layout = SeqLayout { nseq: 1, n: 12 };
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..12 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eval = |x: &[f64], causal: bool| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(12, 8, x.to_vec()).unwrap());
        let o = conv_module(&mut g, &Params { store: &m.params }, "block0.conv", v, layout, causal);
        g.value(o).clone()
    };
    let radius = m.cfg.conv_kernel / 2;
    let j = 6;
    let mut xp = x.clone();
    xp[j * 8..(j + 1) * 8].iter_mut().for_each(|v| *v += 3.0);
    let (a, b) = (eval(&x, false), eval(&xp, false));
    assert_eq!((a.rows, a.cols), (12, 8));
    for i in 0..12 {
        let diff: f64 = a.row(i).iter().zip(b.row(i)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        if i.abs_diff(j) > radius {
            assert!(diff <= 1e-12);
        } else {
            assert!(diff > 0.0);
        }
    }
    let (a, b) = (eval(&x, true), eval(&xp, true));
    for i in 0..j {
        assert_eq!(a.row(i), b.row(i));
    }
}

#[test]
fn channel_equivariance_and_shapes() {
    let m = model(BackboneKind::GatedConformer, 10);
    let seg = random_segment(3, 25, 11);
    let perm = vec![seg[2].clone(), seg[0].clone(), seg[1].clone()];
    let f = m.features(&batch_of(&[seg], &[0], &m.cfg), false).unwrap();
    let fp = m.features(&batch_of(&[perm], &[0], &m.cfg), false).unwrap();
    assert_eq!(fp[0][0], f[0][2]);
    assert_eq!(fp[0][1], f[0][0]);
    assert_eq!(fp[0][2], f[0][1]);
    assert_eq!(f[0].len(), 3);
    assert_eq!(f[0][0].len(), 11);
    assert_eq!(f[0][0][0].len(), 8);
}

#[test]
fn default_geometry_output_shape() {
    let cfg = ModelConfig {
        layers: 1,
        ..ModelConfig::default()
    };
    let m = Lblm::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let seg = random_segment(2, 500, 1);
    let b = batch_of(&[seg], &[0], &m.cfg);
    let f = m.features(&b, false).unwrap();
    assert_eq!((f[0].len(), f[0][0].len(), f[0][0][0].len()), (2, 80, 64));
    let mut g = Graph::new();
    let tr = m.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
    let h = m.heads(&mut g, tr.features);
    assert_eq!(g.value(h.wave).cols, 25);
    assert_eq!(g.value(h.amp).cols, 13);
    assert_eq!(g.value(h.phase).cols, 13);
}

#[test]
fn heads_are_token_wise() {
    let m = model(BackboneKind::GatedConformer, 12);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let feats: Vec<f64> = (0..5 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut perm = Vec::new();
    for i in [3, 0, 4, 1, 2] {
        perm.extend_from_slice(&feats[i * 8..(i + 1) * 8]);
    }
    let eval = |x: Vec<f64>, store: &crate::diffcore::ParamStore| {
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(5, 8, x).unwrap());
        let h = heads(&mut g, store, v);
        (g.value(h.wave).clone(), g.value(h.amp).clone(), g.value(h.phase).clone())
    };
    let (w, a, p) = eval(feats, &m.params);
    let (wp, ap, pp) = eval(perm, &m.params);
    for (k, i) in [3, 0, 4, 1, 2].iter().enumerate() {
        assert_eq!(wp.row(k), w.row(*i));
        assert_eq!(ap.row(k), a.row(*i));
        assert_eq!(pp.row(k), p.row(*i));
    }
    assert!(p.data.iter().all(|v| v.abs() < std::f64::consts::PI));
    let mut zeroed = m.params.clone();
    for t in zeroed.iter_mut() {
        if t.name.starts_with("head.") {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (w, a, p) = eval(vec![1.0; 40], &zeroed);
    assert!(w.data.iter().chain(&a.data).chain(&p.data).all(|v| *v == 0.0));
}

#[test]
fn parameter_census_by_kind() {
    let names = |k| model(k, 0).params.names().map(String::from).collect::<Vec<_>>();
    let t = names(BackboneKind::Transformer);
    let c = names(BackboneKind::Conformer);
    let gc = names(BackboneKind::GatedConformer);
    assert!(!t.iter().any(|n| n.contains(".conv.") || n.contains(".gate.")));
    assert!(c.iter().any(|n| n.contains(".conv.")) && !c.iter().any(|n| n.contains(".gate.")));
    assert!(gc.iter().any(|n| n.contains(".conv.")) && gc.iter().any(|n| n.contains(".gate.")));
}

#[test]
fn parameter_count_is_closed_form_and_geometry_free() {
    for kind in [BackboneKind::Transformer, BackboneKind::Conformer, BackboneKind::GatedConformer] {
        let cfg = ModelConfig {
            backbone_kind: kind,
            ..ModelConfig::default()
        };
        let m = Lblm::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.params.numel(), param_count(&cfg));
    }
    // d=64, 4 layers, ffn 64, kernel 7, P=25, 2 subjects
    let cfg = ModelConfig::default();
    let by_hand = 25 * 64 + 64 + 64 + 2 * 64
        + 4 * (2 * (128 + 64 * 64 + 64 + 64 * 64 + 64)
            + (128 + 4 * (64 * 64 + 64))
            + (128 + 64 * 128 + 128 + 7 * 64 + 64 + 64 * 64 + 64)
            + 128
            + (64 * 64 + 64 + 64 + 1))
        + (64 * 25 + 25 + 2 * (64 * 13 + 13));
    assert_eq!(param_count(&cfg), by_hand);
}

#[test]
fn single_token_attention_is_value_projection() {
    let m = model(BackboneKind::Transformer, 13);
    let layout = SeqLayout { nseq: 1, n: 1 };
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
    let p = Params { store: &m.params };
    let o = mhsa(&mut g, &m.cfg, &p, "block0.mhsa", x, layout, false);
    let v = p.linear(&mut g, "block0.mhsa.v", x);
    let expect = p.linear(&mut g, "block0.mhsa.o", v);
    assert!(g.value(o).max_abs_diff(g.value(expect)) <= 1e-15);
}

#[test]
fn checkpoint_roundtrip_and_integrity() {
    let m = model(BackboneKind::GatedConformer, 14);
    let mut ck = Checkpoint::from_model(Stage::Mstp, &m, serde_json::json!({"seed": 14}));
    ck.optim = Some(crate::diffcore::OptimState::new(&ck.params));
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.hash().unwrap(), ck.hash().unwrap());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(LblmError::Format { offset: 0, .. })));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(Checkpoint::decode(&flipped).is_err());
    let seg = random_segment(2, 21, 15);
    let b = batch_of(&[seg], &[0], &m.cfg);
    assert_eq!(run(&m, &b, &ForwardOptions::default()), run(&back.model(), &b, &ForwardOptions::default()));
}
