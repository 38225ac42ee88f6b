use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dynamics::ChannelStats;
use crate::model::Params;
use crate::testing::{gradient_error, weighted_sum};

fn small(cfg: BackboneConfig) -> BackboneConfig {
    BackboneConfig {
        spatial: vec![12],
        hidden_dim: 8,
        n_blocks: 3,
        stencil_radius: 1,
        ..cfg
    }
}

fn stats(c: usize) -> ChannelStats {
    ChannelStats {
        mean: vec![0.0; c],
        std: vec![1.0; c],
    }
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn history(cfg: &BackboneConfig, b: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![b, cfg.history_len, cfg.channels];
    shape.extend_from_slice(&cfg.spatial);
    random_tensor(&shape, rng)
}

/// Replaces every parameter (including the zero head) with random values.
fn randomise(model: &mut ModelBundle, rng: &mut impl Rng) {
    for (_, t) in model.params.iter_mut() {
        *t = random_tensor(t.shape(), rng).map(|v| 0.5 * v);
    }
}

#[test]
fn zero_head_gives_persistence() {
    let cfg = small(BackboneConfig::default());
    let model = ModelBundle::init_deterministic(cfg.clone(), stats(1), 1, String::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = history(&cfg, 3, &mut rng);
    let out = model.forward_deterministic(&h).unwrap();
    assert_eq!(out, last_frame(&h).unwrap());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small(BackboneConfig::default());
    let mut model = ModelBundle::init_deterministic(cfg.clone(), stats(1), 1, String::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomise(&mut model, &mut rng);
    let h = history(&cfg, 2, &mut rng);
    let a = model.forward_deterministic(&h).unwrap();
    let b = model.forward_deterministic(&h).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a, last_frame(&h).unwrap());
}

#[test]
fn encode_identity_projection_pads_channels() {
    let cfg = small(BackboneConfig {
        history_len: 1,
        channels: 3,
        ..BackboneConfig::default()
    });
    let tape = Tape::new();
    let mut w = vec![0.0; 3 * 8];
    for c in 0..3 {
        w[c * 8 + c] = 1.0;
    }
    let p = ParamVars::from_pairs([
        ("encoder.weight".to_string(), tape.constant(Tensor::new(vec![3, 8], w).unwrap())),
        ("encoder.bias".to_string(), tape.constant(Tensor::zeros(&[8]))),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = history(&cfg, 2, &mut rng);
    let e = encode(&cfg, &p, &tape, &h).unwrap().value();
    assert_eq!(e.shape(), &[2, 12, 8]);
    for b in 0..2 {
        for s in 0..12 {
            for f in 0..8 {
                let expect = if f < 3 { h.data()[(b * 3 + f) * 12 + s] } else { 0.0 };
                assert_eq!(e.data()[(b * 12 + s) * 8 + f], expect);
            }
        }
    }
    let z = encode(&cfg, &p, &tape, &Tensor::zeros(&[1, 1, 3, 12])).unwrap().value();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_rejects_wrong_history() {
    let cfg = small(BackboneConfig::default());
    let model = ModelBundle::init_deterministic(cfg, stats(1), 1, String::new()).unwrap();
    let err = model.forward_deterministic(&Tensor::zeros(&[1, 3, 1, 12])).unwrap_err();
    assert!(err.to_string().contains("encode"), "{err}");
    assert!(model.forward_deterministic(&Tensor::zeros(&[1, 2, 2, 12])).is_err());
}

#[test]
fn encode_shape_follows_config() {
    let cfg = BackboneConfig {
        spatial: vec![6, 5],
        history_len: 3,
        channels: 2,
        hidden_dim: 7,
        ..BackboneConfig::default()
    };
    let model = ModelBundle::init_deterministic(cfg.clone(), stats(2), 1, String::new()).unwrap();
    let tape = Tape::new();
    let p = model.params.to_vars(&tape, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = encode(&cfg, &p, &tape, &history(&cfg, 4, &mut rng)).unwrap();
    assert_eq!(e.shape(), vec![4, 30, 7]);
    let out = model.forward_deterministic(&history(&cfg, 4, &mut rng)).unwrap();
    assert_eq!(out.shape(), &[4, 2, 6, 5]);
}

fn mix_once(x: &Tensor, w: &Tensor, spatial: &[usize], radius: usize) -> Tensor {
    let tape = Tape::new();
    let table = std::rc::Rc::new(stencil_table(spatial, radius));
    let out = spatial_mix(&tape.constant(x.clone()), &tape.constant(w.clone()), &table).unwrap();
    (*out.value()).clone()
}

#[test]
fn identity_stencil_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[2, 20, 3], &mut rng);
    let mut w = Tensor::zeros(&[5, 3]);
    w.data_mut()[..3].copy_from_slice(&[1.0; 3]);
    assert_eq!(mix_once(&x, &w, &[4, 5], 1), x);
}

#[test]
fn constant_field_scales_by_tap_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random_tensor(&[5, 2], &mut rng);
    let x = Tensor::full(&[1, 16, 2], 1.5);
    let out = mix_once(&x, &w, &[16], 2);
    for d in 0..2 {
        let sum: f64 = (0..5).map(|k| w.data()[k * 2 + d]).sum();
        for s in 0..16 {
            assert!((out.data()[s * 2 + d] - 1.5 * sum).abs() < 1e-14);
        }
    }
}

/// Shifts a `[B, sites, D]` field by `shift` sites along axis `axis` of `spatial`.
fn shift_field(x: &Tensor, spatial: &[usize], axis: usize, shift: usize) -> Tensor {
    let (b, d) = (x.shape()[0], x.shape()[2]);
    let sites: usize = spatial.iter().product();
    let stride: usize = spatial[axis + 1..].iter().product();
    let n = spatial[axis];
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        for s in 0..sites {
            let c = (s / stride) % n;
            let t = s - c * stride + ((c + shift) % n) * stride;
            for j in 0..d {
                out[(bi * sites + t) * d + j] = x.data()[(bi * sites + s) * d + j];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[test]
fn stencil_is_shift_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spatial = [6, 7];
    let x = random_tensor(&[2, 42, 3], &mut rng);
    let w = random_tensor(&[9, 3], &mut rng);
    for axis in 0..2 {
        let direct = shift_field(&mix_once(&x, &w, &spatial, 2), &spatial, axis, 3);
        let shifted = mix_once(&shift_field(&x, &spatial, axis, 3), &w, &spatial, 2);
        assert!(direct.max_abs_diff(&shifted) < 1e-14);
    }
}

#[test]
fn stencil_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = std::rc::Rc::new(stencil_table(&[3, 4], 1));
    for _ in 0..5 {
        let x = random_tensor(&[2, 12, 3], &mut rng);
        let w = random_tensor(&[5, 3], &mut rng);
        let err = gradient_error(
            |t, v| {
                let y = spatial_mix(&v[0], &v[1], &table).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                weighted_sum(t, &y)
            },
            &[x, w],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

fn forward_with(cfg: &BackboneConfig, params: &Params, h: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = params.to_vars(&tape, |_| false);
    (*forward(cfg, &p, &tape, h, &[]).unwrap().value()).clone()
}

#[test]
fn pre_and_post_norm_agree_with_identity_norms() {
    let pre = small(BackboneConfig {
        norm: NormKind::Identity,
        ..BackboneConfig::default()
    });
    let post = BackboneConfig {
        norm_placement: NormPlacement::Post,
        ..pre.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut a = ModelBundle::init_deterministic(pre.clone(), stats(1), 3, String::new()).unwrap();
    randomise(&mut a, &mut rng);
    let mut b = ModelBundle::init_deterministic(post.clone(), stats(1), 3, String::new()).unwrap();
    for (name, t) in b.params.iter_mut() {
        if let Some(src) = a.params.get(name) {
            *t = src.clone();
        }
    }
    let h = history(&pre, 3, &mut rng);
    assert_eq!(forward_with(&pre, &a.params, &h), forward_with(&post, &b.params, &h));
    // with real layer norms the two layouts differ
    let pre_ln = BackboneConfig { norm: NormKind::Layer, ..pre };
    let post_ln = BackboneConfig { norm: NormKind::Layer, ..post };
    assert_ne!(forward_with(&pre_ln, &a.params, &h), forward_with(&post_ln, &b.params, &h));
}

#[test]
fn long_skips_with_zero_gate_match_plain_network() {
    let plain = BackboneConfig {
        n_blocks: 4,
        ..small(BackboneConfig::default())
    };
    let skipped = BackboneConfig {
        long_skips: true,
        ..plain.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut a = ModelBundle::init_deterministic(plain.clone(), stats(1), 3, String::new()).unwrap();
    randomise(&mut a, &mut rng);
    let mut b = ModelBundle::init_deterministic(skipped.clone(), stats(1), 3, String::new()).unwrap();
    let gates: Vec<String> = b.params.names().filter(|n| n.ends_with("skip_gate")).cloned().collect();
    assert_eq!(gates, vec!["blocks.2.skip_gate", "blocks.3.skip_gate"]);
    for (name, t) in b.params.iter_mut() {
        if let Some(src) = a.params.get(name) {
            *t = src.clone();
        }
    }
    let h = history(&plain, 2, &mut rng);
    assert_eq!(forward_with(&plain, &a.params, &h), forward_with(&skipped, &b.params, &h));
    b.params.get_mut("blocks.3.skip_gate").unwrap().data_mut()[0] = 0.7;
    assert_ne!(forward_with(&plain, &a.params, &h), forward_with(&skipped, &b.params, &h));
}

#[test]
fn full_forward_gradient_matches_finite_differences() {
    let cfg = BackboneConfig {
        spatial: vec![3, 4],
        hidden_dim: 4,
        n_blocks: 4,
        stencil_radius: 1,
        long_skips: true,
        norm_placement: NormPlacement::Post,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = ModelBundle::init_deterministic(cfg.clone(), stats(1), 3, String::new()).unwrap();
    randomise(&mut model, &mut rng);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let h = history(&cfg, 2, &mut rng);
    let err = gradient_error(
        |t, v| {
            let p = ParamVars::from_pairs(names.iter().cloned().zip(v.iter().cloned()));
            let y = forward(&cfg, &p, t, &h, &[]).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            weighted_sum(t, &y)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn poisoned_parameters_are_refused() {
    let cfg = small(BackboneConfig::default());
    let mut model = ModelBundle::init_deterministic(cfg.clone(), stats(1), 1, String::new()).unwrap();
    model.params.get_mut("blocks.1.fc1.weight").unwrap().data_mut()[2] = f64::NAN;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = model.forward_deterministic(&history(&cfg, 1, &mut rng)).unwrap_err();
    assert!(matches!(err, ModelError::Poisoned(ref n) if n == "blocks.1.fc1.weight"));
}

#[test]
fn config_validation() {
    let ok = BackboneConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        BackboneConfig { periodic: false, ..ok.clone() },
        BackboneConfig { long_skips: true, n_blocks: 1, ..ok.clone() },
        BackboneConfig { history_len: 0, ..ok.clone() },
        BackboneConfig { activation: "tanh".into(), ..ok.clone() },
        BackboneConfig { stencil_radius: 20, ..ok.clone() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))), "{cfg:?}");
    }
    let err = BackboneConfig { periodic: false, ..ok }.validate().unwrap_err();
    assert!(err.to_string().contains("periodic"));
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let cfg = small(BackboneConfig {
        long_skips: true,
        ..BackboneConfig::default()
    });
    let mut model = ModelBundle::init_deterministic(cfg, stats(1), 5, "h".into()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    randomise(&mut model, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let bytes = model.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[3] = b'X';
    assert!(matches!(ModelBundle::from_bytes(&bad), Err(ModelError::Checkpoint(m)) if m.contains("magic")));
    assert!(ModelBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());

    let mut wrong = model.clone();
    wrong.params.insert("head.bias".into(), Tensor::zeros(&[2]));
    let err = ModelBundle::from_bytes(&wrong.to_bytes().unwrap()).unwrap_err();
    assert!(err.to_string().contains("head.bias"), "{err}");

    let mut other = model.clone();
    other.backbone.hidden_dim = 9;
    assert!(ModelBundle::from_bytes(&other.to_bytes().unwrap()).is_err());
}
