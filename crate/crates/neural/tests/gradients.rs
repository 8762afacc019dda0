use anableps_neural::{
    grad_check, Checkpoint, LayerSpec, Network, NetworkBuilder, Padding,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// One small network exercising a single layer kind (plus a dense read-out).
fn single_layer_net(kind: &LayerSpec, rng: &mut ChaCha8Rng) -> (Network, (usize, usize)) {
    let channels = rng.random_range(1..4);
    let len = rng.random_range(3..8);
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (channels, len));
    let y = match kind {
        LayerSpec::Dense { .. } => b.dense("layer", x, rng.random_range(1..6)),
        LayerSpec::Conv1d { .. } => {
            let kernel = rng.random_range(1..=len);
            let stride = rng.random_range(1..3);
            let padding = if rng.random_bool(0.5) { Padding::Valid } else { Padding::Same };
            b.conv1d("layer", x, rng.random_range(1..5), kernel, stride, padding)
        }
        LayerSpec::Gru { .. } => b.gru("layer", x, rng.random_range(1..6)),
        LayerSpec::Relu => {
            let d = b.dense("pre", x, 6);
            b.relu(d)
        }
        LayerSpec::Softmax => {
            let d = b.dense("pre", x, 5);
            b.softmax(d)
        }
    };
    let out = b.dense("readout", y, 2);
    b.output("y", out);
    b.output("raw", y);
    (b.build(rng.random()).unwrap(), (channels, len))
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    let kinds = [
        LayerSpec::Dense { units: 0 },
        LayerSpec::Conv1d {
            filters: 0,
            kernel: 0,
            stride: 0,
            padding: Padding::Valid,
        },
        LayerSpec::Gru { hidden: 0 },
        LayerSpec::Relu,
        LayerSpec::Softmax,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in &kinds {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (net, (c, l)) = single_layer_net(kind, &mut rng);
            let x = random_vec(&mut rng, c * l);
            worst = worst.max(grad_check(&net, &[("x", &x)], 1e-5).unwrap());
        }
        assert!(worst < 1e-4, "{kind:?}: max relative error {worst:e}");
    }
}

#[test]
fn three_layer_net_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (7, 1));
    let h = b.dense("l1", x, 9);
    let h = b.relu(h);
    let h = b.dense("l2", h, 6);
    let h = b.relu(h);
    let y = b.dense("l3", h, 3);
    b.output("y", y);
    let net = b.build(9).unwrap();
    let input = random_vec(&mut rng, 7);
    assert!(grad_check(&net, &[("x", &input)], 1e-5).unwrap() < 1e-4);
}

#[test]
fn identity_net_has_exact_gradients() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (2, 1));
    let y = b.dense("id", x, 2);
    b.output("y", y);
    let mut net = b.build(0).unwrap();
    net.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let err = grad_check(&net, &[("x", &[0.5, -0.25])], 1e-5).unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn squared_error_at_target_has_zero_gradient() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (4, 1));
    let y = b.dense("d", x, 3);
    b.output("y", y);
    let net = b.build(2).unwrap();
    let acts = net.forward(&[("x", &[0.1, 0.2, -0.3, 0.4])]).unwrap();
    let out = net.output(&acts, "y").unwrap().to_vec();
    // loss = 0.5 * |y - target|^2 with target = y.
    let dy: Vec<f64> = out.iter().map(|v| v - v).collect();
    let mut g = vec![0.0; net.num_params()];
    net.backward(&acts, &[("y", &dy)], &mut g).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (4, 1));
    let logits = b.dense("d", x, 6);
    let p = b.softmax(logits);
    b.output("p", p);
    b.output("logits", logits);
    let net = b.build(4).unwrap();
    let acts = net.forward(&[("x", &[0.3, -0.9, 0.2, 0.7])]).unwrap();
    let probs = net.output(&acts, "p").unwrap().to_vec();
    let target = 2;
    // d(-log p_target)/dp_i = -1/p_target at i = target, 0 elsewhere.
    let mut dp = vec![0.0; 6];
    dp[target] = -1.0 / probs[target];
    let mut g = vec![0.0; net.num_params()];
    net.backward(&acts, &[("p", &dp)], &mut g).unwrap();

    // The bias gradient of the logit layer equals dL/dlogits.
    let view = net.view("d").unwrap();
    let bias_grad = &g[view.offset + view.len - 6..view.offset + view.len];
    for i in 0..6 {
        let onehot = if i == target { 1.0 } else { 0.0 };
        assert!((bias_grad[i] - (probs[i] - onehot)).abs() < 1e-12);
    }
}

#[test]
fn input_gradients_are_reported() {
    let mut b = NetworkBuilder::new();
    let x = b.input("x", (2, 1));
    let y = b.dense("d", x, 1);
    b.output("y", y);
    let mut net = b.build(0).unwrap();
    net.params_mut().copy_from_slice(&[2.0, -3.0, 0.5]);
    let acts = net.forward(&[("x", &[1.0, 1.0])]).unwrap();
    let mut g = vec![0.0; 3];
    let ig = net.backward(&acts, &[("y", &[1.0])], &mut g).unwrap();
    assert_eq!(ig.get("x").unwrap(), &[2.0, -3.0]);
    assert_eq!(g, vec![1.0, 1.0, 1.0]);
}

#[test]
fn forward_is_deterministic_and_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (net, (c, l)) = single_layer_net(&LayerSpec::Gru { hidden: 0 }, &mut rng);
    let x = random_vec(&mut rng, c * l);
    let before = net.params().to_vec();
    let a = net.forward(&[("x", &x)]).unwrap();
    let b = net.forward(&[("x", &x)]).unwrap();
    assert_eq!(net.output(&a, "y").unwrap(), net.output(&b, "y").unwrap());
    assert_eq!(net.params(), before.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut net, _) = single_layer_net(&LayerSpec::Conv1d {
            filters: 0, kernel: 0, stride: 0, padding: Padding::Same
        }, &mut rng);
        for p in net.params_mut() {
            *p *= scale * rng.random::<f64>();
        }
        let json = net.to_checkpoint().to_json();
        let mut other = net.clone();
        other.params_mut().fill(0.0);
        other.load_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = other.params().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_rejects_wrong_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut net, _) = single_layer_net(&LayerSpec::Dense { units: 0 }, &mut rng);
    let mut ckpt = net.to_checkpoint();
    ckpt.tensors[0].values.pop();
    assert!(net.load_checkpoint(&ckpt).is_err());
    let mut ckpt = net.to_checkpoint();
    ckpt.version = 99;
    assert!(net.load_checkpoint(&ckpt).is_err());
}
