use anableps_core::abrn::*;
use anableps_core::cbpn::BitrateRange;
use anableps_core::netsim::ReceiverObservation;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn obs(second: u64) -> ReceiverObservation {
    ReceiverObservation {
        second,
        s: 2000.0,
        r: 1900.0,
        d: 0.1,
        p: 0.02,
        n: 4.0,
        f: 0.2,
        h: 0.0,
        played_fps: 25.0,
    }
}

fn random_state(rng: &mut ChaCha8Rng) -> AbrnState {
    let mut arr = || std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let (d, p, n, f, h) = (arr(), arr(), arr(), arr(), arr());
    AbrnState {
        v: rng.random_range(0.0..1.0),
        e: rng.random_range(0.0..0.3),
        s: rng.random_range(0.0..1.0),
        r: rng.random_range(0.0..1.0),
        d,
        p,
        n,
        f,
        h,
        padded: 0,
    }
}

const RANGE: BitrateRange = BitrateRange { v: 3050.0, e: 610.0 };

#[test]
fn idle_warm_up_leaves_only_the_range() {
    let st = assemble_abrn_state(RANGE, &[], Ablation::Full.mask());
    assert!((st.v - 0.5).abs() < 1e-12);
    assert!((st.e - 0.1).abs() < 1e-12);
    assert_eq!((st.s, st.r), (0.0, 0.0));
    for hist in [st.d, st.p, st.n, st.f, st.h] {
        assert_eq!(hist, [0.0; HISTORY]);
    }
    assert_eq!(st.padded, HISTORY);
}

#[test]
fn normalization_clamps_and_scales() {
    let mut o = obs(0);
    o.d = 3.0;
    o.s = 6100.0;
    o.n = 200.0;
    let st = assemble_abrn_state(RANGE, &[o], Ablation::Full.mask());
    assert_eq!(st.d[HISTORY - 1], 1.0);
    assert_eq!(st.s, 1.0);
    assert_eq!(st.n[HISTORY - 1], 1.0);
    assert_eq!(st.padded, HISTORY - 1);
    assert_eq!(st.d[..HISTORY - 1], [0.0; HISTORY - 1]);
}

#[test]
fn history_keeps_the_latest_reports_in_order() {
    let reports: Vec<_> = (0..10)
        .map(|i| ReceiverObservation {
            p: i as f64 / 100.0,
            ..obs(i)
        })
        .collect();
    let st = assemble_abrn_state(RANGE, &reports, Ablation::Full.mask());
    assert_eq!(st.padded, 0);
    let expected: Vec<f64> = (4..10).map(|i| i as f64 / 100.0).collect();
    assert_eq!(st.p.to_vec(), expected);
}

#[test]
fn ablation_masks() {
    let reports = [obs(0), obs(1)];
    let full = assemble_abrn_state(RANGE, &reports, ablation_config("full").unwrap());
    let c = assemble_abrn_state(RANGE, &reports, ablation_config("c").unwrap());
    let s = assemble_abrn_state(RANGE, &reports, ablation_config("s").unwrap());
    assert_eq!((full.v, full.e), (RANGE.v / 6100.0, RANGE.e / 6100.0));
    assert_eq!((c.v, c.e), (RANGE.v / 6100.0, 0.0));
    assert_eq!((s.v, s.e), (0.0, 0.0));
    for st in [&c, &s] {
        assert_eq!((st.s, st.r, st.d, st.p, st.f), (full.s, full.r, full.d, full.p, full.f));
    }
    assert!(ablation_config("x").is_err());
    assert!(!Ablation::S.uses_predictor());
}

#[test]
fn zeroed_final_layer_is_uniform() {
    let mut actor = build_actor(&AbrnNetConfig::default(), 3).unwrap();
    actor.zero_layer("logits").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs = policy_forward(&actor, &random_state(&mut rng)).unwrap();
    for p in probs {
        assert!((p - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn actor_outputs_are_distributions() {
    let cfg = AbrnNetConfig {
        width: 16,
        ..AbrnNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..50 {
        let mut actor = build_actor(&cfg, seed).unwrap();
        actor.scale_weights("logits", 300.0).unwrap();
        for _ in 0..20 {
            let probs = policy_forward(&actor, &random_state(&mut rng)).unwrap();
            assert!(probs.iter().all(|&p| p >= 0.0 && p <= 1.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn frame_loss_history_moves_the_policy() {
    let cfg = AbrnNetConfig {
        final_init_scale: 1.0,
        ..AbrnNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..5 {
        let actor = build_actor(&cfg, seed).unwrap();
        let st = random_state(&mut rng);
        let base = policy_forward(&actor, &st).unwrap();
        let mut bumped = st.clone();
        bumped.h[HISTORY - 1] += 1e-3;
        let moved = policy_forward(&actor, &bumped).unwrap();
        let diff: f64 = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "seed {seed}: {diff}");
    }
}

#[test]
fn action_selection_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let one_hot = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    assert_eq!(select_action(&one_hot, SelectMode::Argmax, &mut rng).unwrap(), 2);
    assert_eq!(select_action(&one_hot, SelectMode::Sample, &mut rng).unwrap(), 2);
    let uniform = [1.0 / 6.0; 6];
    assert_eq!(select_action(&uniform, SelectMode::Argmax, &mut rng).unwrap(), 0);
    assert!(select_action(&[0.5, 0.5], SelectMode::Sample, &mut rng).is_err());

    let half = [0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
    let mut counts = [0usize; 6];
    for _ in 0..100_000 {
        counts[select_action(&half, SelectMode::Sample, &mut rng).unwrap()] += 1;
    }
    assert_eq!(counts[2..], [0; 4]);
    let share = counts[0] as f64 / 1e5;
    assert!((share - 0.5).abs() < 0.01, "{share}");
}

#[test]
fn bandit_is_solved_and_entropy_falls() {
    let cfg = A3cConfig {
        workers: 1,
        updates: 500,
        seed: 1,
        ..A3cConfig::default()
    };
    let out = train_a3c(|_| Ok(BanditEnv::new(5, 20)), &AbrnNetConfig::default(), &cfg).unwrap();
    let probs = policy_forward(&out.actor, BanditEnv::new(5, 20).state()).unwrap();
    assert!(probs[5] >= 0.9, "{probs:?}");

    let window = 100;
    let smoothed: Vec<f64> = out
        .curve
        .chunks(window)
        .map(|c| c.iter().map(|p| p.entropy).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{smoothed:?}");
    assert!(smoothed.last().unwrap() < &(0.5 * smoothed[0]));
}

#[test]
fn training_is_deterministic_with_one_worker() {
    let cfg = A3cConfig {
        workers: 1,
        updates: 30,
        seed: 2,
        ..A3cConfig::default()
    };
    let net = AbrnNetConfig {
        width: 16,
        ..AbrnNetConfig::default()
    };
    let a = train_a3c(|_| Ok(BanditEnv::new(1, 10)), &net, &cfg).unwrap();
    let b = train_a3c(|_| Ok(BanditEnv::new(1, 10)), &net, &cfg).unwrap();
    assert_eq!(a.actor.params(), b.actor.params());
    assert_eq!(a.curve, b.curve);
}

#[test]
fn checkpoint_round_trip_preserves_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("abrn.json");
    let ctl = ControllerConfig {
        ablation: Ablation::C,
        ..ControllerConfig::default()
    };
    let model = AbrnModel::new(AbrnNetConfig::default(), ctl, 8).unwrap();
    model.save(&path).unwrap();
    let back = AbrnModel::load(&path).unwrap();
    assert_eq!(back.controller, ctl);
    assert_eq!(back.net, model.net);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let st = random_state(&mut rng);
        assert_eq!(policy_forward(&model.actor, &st).unwrap(), policy_forward(&back.actor, &st).unwrap());
        assert_eq!(value_forward(&model.critic, &st).unwrap(), value_forward(&back.critic, &st).unwrap());
    }

    let text = std::fs::read_to_string(&path).unwrap().replace("-400.0", "-300.0");
    std::fs::write(&path, text).unwrap();
    assert!(AbrnModel::load(&path).is_err());
}

proptest! {
    #[test]
    fn reward_is_bounded(m in 0.0..=1.0f64, prev in 0.0..=1.0f64, h in 0.0..=1.0f64, f in 0.0..100.0f64) {
        let p = RewardParams::default();
        let r = reward(m, prev, h, f, &p);
        prop_assert!(r.abs() <= p.alpha + p.gamma + 2.0 * p.delta + p.lambda);
    }

    #[test]
    fn decisions_stay_in_range(prev in 0.0..10_000.0f64, action in 0usize..6, loss in -1.0..2.0f64) {
        let next = apply_action(prev, action, loss).unwrap();
        prop_assert!((MIN_BITRATE..=MAX_BITRATE).contains(&next));
    }
}
