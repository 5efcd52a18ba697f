use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsb_core::model::*;
use tsb_core::params::{Binding, ParamKind};
use tsb_core::tensor::grad_check;
use tsb_core::training::{mse_l2_loss, regularized_weights, train_from, OptimizerKind, TrainConfig, WindowSet};
use tsb_core::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy() -> ModelConfig {
    ModelConfig {
        channels: 2,
        input_len: 4,
        horizon: 2,
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        bilstm_layers: 1,
        positional_encoding: true,
        causal_decoder: false,
    }
}

fn small(horizon: usize) -> ModelConfig {
    ModelConfig {
        channels: 3,
        input_len: 6,
        horizon,
        d_model: 8,
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        bilstm_layers: 1,
        positional_encoding: true,
        causal_decoder: false,
    }
}

#[test]
fn positional_encoding_fixtures() {
    let pe = positional_encoding(3, 4);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
    assert!((pe.at(&[1, 1]) - 1f64.cos()).abs() < 1e-15);
    assert!((pe.at(&[1, 2]) - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    assert!((pe.at(&[1, 0]) - 0.8415).abs() < 1e-4);
    assert!((pe.at(&[1, 1]) - 0.5403).abs() < 1e-4);
}

#[test]
fn embedding_shape_and_position_wiring() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for pe_on in [true, false] {
        let cfg = ModelConfig {
            positional_encoding: pe_on,
            ..small(2)
        };
        let params = TsbParams::init(&cfg, 1).unwrap();
        for len in 1..6 {
            let mut g = Graph::new();
            let p = params.store.bind(&mut g, false);
            let x = g.constant(random(&mut rng, &[1, len, 3]));
            let e = embed_with_positional_encoding(&mut g, &params, &p, x).unwrap();
            assert_eq!(g.shape(e), &[1, len, 8]);
        }
        // reversing the rows reverses the embedding only without the position table
        let x = random(&mut rng, &[1, 4, 3]);
        let rows: Vec<Vec<f64>> = (0..4).rev().map(|r| x.data()[r * 3..r * 3 + 3].to_vec()).collect();
        let xr = Tensor::from_rows(&rows).unwrap().reshape(&[1, 4, 3]).unwrap();
        let mut g = Graph::new();
        let p = params.store.bind(&mut g, false);
        let (a, b) = (g.constant(x), g.constant(xr));
        let ea = embed_with_positional_encoding(&mut g, &params, &p, a).unwrap();
        let eb = embed_with_positional_encoding(&mut g, &params, &p, b).unwrap();
        let (va, vb) = (g.value(ea).data(), g.value(eb).data());
        let mirrored = (0..4).all(|r| (0..8).all(|c| (va[r * 8 + c] - vb[(3 - r) * 8 + c]).abs() < 1e-12));
        assert_eq!(mirrored, !pe_on);
    }
}

fn layer_norm_rows(x: &[f64], width: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            row.iter()
                .enumerate()
                .map(move |(i, v)| gamma[i] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[i])
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn encoder_with_zero_sublayers_is_two_norms() {
    let cfg = ModelConfig {
        d_model: 4,
        heads: 2,
        ..small(2)
    };
    let mut params = TsbParams::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = params.encoders[0].clone();
    for id in params.store.ids().collect::<Vec<_>>() {
        let name = params.store.name(id).to_string();
        if name.starts_with("enc.0.") && !name.contains("norm") {
            let shape = params.store.get(id).shape().to_vec();
            params.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        if name.starts_with("enc.0.norm") {
            let shape = params.store.get(id).shape().to_vec();
            params.store.set(id, random(&mut rng, &shape)).unwrap();
        }
    }
    let x = Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, 3.0, 1.0, -2.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let xv = g.constant(x.clone().reshape(&[1, 2, 4]).unwrap());
    let out = encoder_layer_forward(&mut g, &p, &layer, &cfg.attention(), xv).unwrap();
    let s = &params.store;
    let n1 = layer_norm_rows(x.data(), 4, s.get(layer.norm1.gamma).data(), s.get(layer.norm1.beta).data());
    let n2 = layer_norm_rows(&n1, 4, s.get(layer.norm2.gamma).data(), s.get(layer.norm2.beta).data());
    for (a, b) in g.value(out).data().iter().zip(&n2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_self_attention_sublayer_is_causal() {
    let cfg = small(5);
    let params = TsbParams::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let att = cfg.attention();
    for _ in 0..10 {
        let q = random(&mut rng, &[1, 5, 8]);
        let enc = random(&mut rng, &[1, 6, 8]);
        let i = rng.random_range(0..4);
        let mut q2 = q.clone();
        for v in &mut q2.data_mut()[(i + 1) * 8..] {
            *v += rng.random_range(-2.0..2.0);
        }
        let s1 = |q: &Tensor| {
            let mut g = Graph::new();
            let p = params.store.bind(&mut g, false);
            let (qv, ev) = (g.constant(q.clone()), g.constant(enc.clone()));
            let t = decoder_layer_trace(&mut g, &p, &params.decoders[0], &att, qv, ev, false).unwrap();
            assert_eq!(g.shape(t.out), &[1, 5, 8]);
            g.value(t.s1).clone()
        };
        let (a, b) = (s1(&q), s1(&q2));
        for r in 0..=i {
            for c in 0..8 {
                assert!((a.at(&[0, r, c]) - b.at(&[0, r, c])).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn default_stack_depths() {
    let params = TsbParams::init(&ModelConfig::default(), 0).unwrap();
    assert_eq!(params.encoders.len(), 3);
    assert_eq!(params.decoders.len(), 3);
    assert_eq!(params.config.heads, 8);
    assert_eq!(params.encoders[0].bilstm.layers.len(), 2);
}

#[test]
fn forward_shapes_and_determinism() {
    let cfg = small(4);
    let params = TsbParams::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let enc = random(&mut rng, &[6, 3]);
    let tgt = random(&mut rng, &[4, 3]);
    let dec = decoder_input(&enc, &tgt).unwrap();
    let a = model_forward_teacher_forced(&params, &enc, &dec).unwrap();
    let b = model_forward_teacher_forced(&params, &enc, &dec).unwrap();
    assert_eq!(a.shape(), &[4, 3]);
    assert_eq!(a, b);
    let ar = predict_autoregressive(&params, &enc).unwrap();
    assert_eq!(ar.shape(), &[4, 3]);
    assert_eq!(ar, predict_autoregressive(&params, &enc).unwrap());
}

#[test]
fn batched_and_single_forecasts_agree() {
    let cfg = small(3);
    let params = TsbParams::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = random(&mut rng, &[3, 6, 3]);
    let all = predict_autoregressive(&params, &batch).unwrap();
    for b in 0..3 {
        let one = predict_autoregressive(&params, &batch.index_outer(b)).unwrap();
        assert!(one.max_abs_diff(&all.index_outer(b)) < 1e-12);
    }
}

#[test]
fn single_step_forecast_equals_teacher_forcing_on_the_start_row() {
    let params = TsbParams::init(&small(1), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = random(&mut rng, &[6, 3]);
    let start = Tensor::new(vec![1, 3], enc.row(5).to_vec()).unwrap();
    let tf = model_forward_teacher_forced(&params, &enc, &start).unwrap();
    let ar = predict_autoregressive(&params, &enc).unwrap();
    assert_eq!(tf, ar);
}

#[test]
fn hard_decision_fixtures() {
    let p = Tensor::new(vec![1, 3], vec![-60.0, -50.0, -40.0]).unwrap();
    assert_eq!(hard_decision(&p, -50.0).data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn toy_model_loss_gradient_check() {
    let cfg = toy();
    let params = TsbParams::init(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let enc = random(&mut rng, &[1, 4, 2]);
    let tgt = random(&mut rng, &[1, 2, 2]);
    let dec = decoder_input(&enc, &tgt).unwrap();
    let report = grad_check(
        |g, vars| {
            let p = Binding::from_vars(vars.to_vec());
            let (e, d, t) = (g.constant(enc.clone()), g.constant(dec.clone()), g.constant(tgt.clone()));
            let pred = forward_teacher_forced(g, &params, &p, e, d)?;
            let w = regularized_weights(&params, &p);
            mse_l2_loss(g, pred, t, &w, 0.01)
        },
        params.store.tensors(),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.checked, cfg.param_count());
    assert!(report.passed, "{report:?}");
}

#[test]
fn weights_only_are_regularized() {
    let params = TsbParams::init(&toy(), 1).unwrap();
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, true);
    let w = regularized_weights(&params, &p);
    let expected = params.store.ids().filter(|&id| params.store.kind(id) == ParamKind::Weight).count();
    assert_eq!(w.len(), expected);
    assert!(expected > 0 && expected < params.store.len());
}

#[test]
fn learns_a_constant_sequence() {
    let cfg = ModelConfig {
        channels: 2,
        input_len: 8,
        horizon: 4,
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        bilstm_layers: 1,
        positional_encoding: true,
        causal_decoder: false,
    };
    let level = 0.7;
    let series = Tensor::full(&[40, 2], level);
    let set = WindowSet::new(series, (0..28).collect(), 8, 4).unwrap();
    let tc = TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.01,
        l2: 0.0,
        batch_size: 28,
        max_epochs: 300,
        patience: 300,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_from(TsbParams::init(&cfg, 3).unwrap(), &set, &set, &tc, &mut |_| {}).unwrap();
    let (enc, _) = set.sample(0);
    let pred = predict_autoregressive(&out.params, &enc).unwrap();
    for v in pred.data() {
        assert!((v - level).abs() < 0.05, "{v}");
    }
}
