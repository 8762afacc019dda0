//! End-to-end acceptance checks. Each test prints one PASS/FAIL line for its
//! criterion before asserting. Trained controllers for the end-to-end
//! comparison are cached under the cargo target directory, keyed by a hash of
//! the configuration and predictor checkpoint.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use anableps_core::abrn::*;
use anableps_core::baselines::{fixed_policy, GccConfig, GccPolicy};
use anableps_core::cbpn::*;
use anableps_core::harness::*;
use anableps_core::media::{EncoderConfig, Fluctuation};
use anableps_core::netsim::{
    run_session, BitrateController, LinkConfig, PacketEventKind, Session, SessionLog, SimConfig,
};
use anableps_core::trace_io::*;
use anableps_neural::{grad_check, grad_check_sampled, NetworkBuilder, Padding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn quiet_encoder() -> EncoderConfig {
    EncoderConfig {
        fluct: Fluctuation {
            sigma: 0.0,
            beta_ti: 0.0,
            ..Fluctuation::default()
        },
        ..EncoderConfig::default()
    }
}

fn flat_video(seconds: usize, iframes: bool) -> ComplexityTrace {
    let mut body = String::from("time_s,si,ti\n");
    for i in 0..seconds * 4 {
        body.push_str(&format!("{},40,20\n", i as f64 * 0.25));
    }
    let times: Vec<String> = if iframes {
        (0..seconds).step_by(5).map(|t| t.to_string()).collect()
    } else {
        Vec::new()
    };
    let mut sidecar = String::from("iframe_times_s\n");
    for t in times {
        sidecar.push_str(&t);
        sidecar.push('\n');
    }
    sidecar.push_str("[meta]\nfps,25\ngop_frames,125\n");
    parse_complexity_trace(&body, Some(&sidecar)).unwrap()
}

#[test]
fn criterion_01_reward_formula() {
    let p = RewardParams::default();
    let a = reward(0.8, 0.8, 0.0, 0.0, &p);
    let b = reward(1.0, 0.5, 0.2, 0.3, &p);
    let pass = close(a, 6.4, 1e-9) && close(b, 6.35, 1e-9) && (p.alpha, p.lambda, p.gamma, p.delta) == (8.0, 0.5, 4.0, 2.0);
    verdict(1, "reward formula", pass, &format!("{a} and {b}"));
    assert!(pass);
}

#[test]
fn criterion_02_action_table() {
    let deltas = [None, Some(-400.0), Some(0.0), Some(200.0), Some(400.0), Some(600.0)];
    let mut mismatches = Vec::new();
    let mut rows = 0;
    for (action, delta) in deltas.iter().enumerate() {
        for prev in [300.0, 500.0, 4000.0, 6000.0, 6100.0] {
            for p in [0.0, 0.25, 1.0] {
                let raw: f64 = match delta {
                    Some(d) => prev + d,
                    None => prev * (1.0 - p),
                };
                let expected = raw.max(300.0).min(6100.0);
                let got = apply_action(prev, action, p).unwrap();
                rows += 1;
                if got != expected {
                    mismatches.push((action, prev, p, got, expected));
                }
            }
        }
    }
    let pass = mismatches.is_empty() && rows == 90 && ACTION_DELTAS == deltas;
    verdict(2, "action semantics", pass, &format!("{rows} rows, mismatches {mismatches:?}"));
    assert!(pass);
}

#[test]
fn criterion_03_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<BitrateRange> = (0..1000)
        .map(|_| BitrateRange {
            v: rng.random_range(300.0..6100.0),
            e: rng.random_range(0.0..1000.0),
        })
        .collect();
    let actual: Vec<f64> = (0..1000).map(|_| rng.random_range(300.0..6100.0)).collect();
    let got = range_metrics(&preds, &actual).unwrap();

    let n = actual.len() as f64;
    let (mut mad, mut inside, mut sv, mut sa) = (0.0, 0.0, 0.0, 0.0);
    for (p, &a) in preds.iter().zip(&actual) {
        mad += (p.v - a).abs() / 6100.0;
        if p.v - p.e <= a && a <= p.v + p.e {
            inside += 1.0;
        }
        sv += p.v;
        sa += a;
    }
    let (mv, ma) = (sv / n, sa / n);
    let (mut cov, mut vv, mut va) = (0.0, 0.0, 0.0);
    for (p, &a) in preds.iter().zip(&actual) {
        cov += (p.v - mv) * (a - ma);
        vv += (p.v - mv) * (p.v - mv);
        va += (a - ma) * (a - ma);
    }
    let pcc = cov / (vv * va).sqrt();
    let example = range_metrics(&[BitrateRange { v: 5.0, e: 1.0 }; 4], &[5.5, 6.5, 4.2, 4.8]).unwrap().cr;
    let pass = close(got.mad, mad / n, 1e-12)
        && close(got.cr, inside / n, 1e-12)
        && got.pcc.is_some_and(|x| close(x, pcc, 1e-12))
        && example == 0.75;
    verdict(3, "metric oracle", pass, &format!("mad {} cr {} pcc {:?}, example cr {example}", got.mad, got.cr, got.pcc));
    assert!(pass);
}

fn random_inputs(net: &anableps_neural::Network, rng: &mut ChaCha8Rng) -> Vec<(String, Vec<f64>)> {
    net.inputs()
        .into_iter()
        .map(|(name, (c, l))| (name.to_string(), (0..c * l).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect()
}

#[test]
fn criterion_04_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let kinds = ["dense", "conv1d", "gru", "relu", "softmax"];
    for _ in 0..100 {
        for kind in kinds {
            let channels = rng.random_range(1..4);
            let len = rng.random_range(3..8);
            let mut b = NetworkBuilder::new();
            let x = b.input("x", (channels, len));
            let y = match kind {
                "dense" => b.dense("layer", x, rng.random_range(1..6)),
                "conv1d" => {
                    let kernel = rng.random_range(1..=len);
                    let padding = if rng.random_bool(0.5) { Padding::Valid } else { Padding::Same };
                    b.conv1d("layer", x, rng.random_range(1..5), kernel, rng.random_range(1..3), padding)
                }
                "gru" => b.gru("layer", x, rng.random_range(1..6)),
                "relu" => {
                    let d = b.dense("pre", x, 6);
                    b.relu(d)
                }
                _ => {
                    let d = b.dense("pre", x, 5);
                    b.softmax(d)
                }
            };
            let out = b.dense("readout", y, 2);
            b.output("y", out);
            b.output("raw", y);
            let net = b.build(rng.random()).unwrap();
            let input: Vec<f64> = (0..channels * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = grad_check(&net, &[("x", &input)], 1e-5).unwrap();
            let w = worst.entry(kind).or_insert(0.0);
            *w = w.max(err);
        }
    }

    let abrn_cfg = AbrnNetConfig::default();
    for i in 0..100u64 {
        let model = CbpnModel::new(CbpnConfig::default(), i).unwrap();
        let net = model.network();
        let inputs = random_inputs(net, &mut rng);
        let refs: Vec<(&str, &[f64])> = inputs.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        let err = grad_check_sampled(net, &refs, 1e-5, 40, i).unwrap();
        let w = worst.entry("cbpn").or_insert(0.0);
        *w = w.max(err);

        for (label, net) in [
            ("actor", build_actor(&abrn_cfg, i).unwrap()),
            ("critic", build_critic(&abrn_cfg, i).unwrap()),
        ] {
            let inputs = random_inputs(&net, &mut rng);
            let refs: Vec<(&str, &[f64])> = inputs.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            let err = grad_check_sampled(&net, &refs, 1e-5, 20, i).unwrap();
            let w = worst.entry(label).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let pass = worst.values().all(|&e| e < 1e-4);
    verdict(4, "gradient correctness", pass, &format!("max relative errors {worst:?}"));
    assert!(pass);
}

#[test]
fn criterion_05_policy_distribution() {
    let cfg = AbrnNetConfig {
        final_init_scale: 1.0,
        ..AbrnNetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut draws, mut bad, mut worst_sum): (usize, usize, f64) = (0, 0, 0.0);
    for seed in 0..100 {
        let mut actor = build_actor(&cfg, seed).unwrap();
        actor.scale_weights("logits", rng.random_range(0.1..10.0)).unwrap();
        for _ in 0..100 {
            let mut arr = || -> [f64; HISTORY] { std::array::from_fn(|_| rng.random_range(0.0..1.0)) };
            let (d, p, n, f, h) = (arr(), arr(), arr(), arr(), arr());
            let st = AbrnState {
                v: rng.random_range(0.0..1.0),
                e: rng.random_range(0.0..1.0),
                s: rng.random_range(0.0..1.0),
                r: rng.random_range(0.0..1.0),
                d,
                p,
                n,
                f,
                h,
                padded: 0,
            };
            let probs = policy_forward(&actor, &st).unwrap();
            let sum: f64 = probs.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            if !probs.iter().all(|&x| x > 0.0) || (sum - 1.0).abs() > 1e-6 {
                bad += 1;
            }
            draws += 1;
        }
    }
    let pass = bad == 0 && draws == 10_000;
    verdict(5, "policy distribution", pass, &format!("{draws} draws, {bad} invalid, worst |sum-1| {worst_sum:e}"));
    assert!(pass);
}

/// Byte accounting and delay bounds of one recorded session; returns a
/// description of the first violation.
fn physics_violation(log: &SessionLog, link: &LinkConfig, capacity: u64, max_kbps: f64, duration: u64) -> Option<String> {
    let mut open: BTreeMap<(u64, u32), (f64, u32)> = BTreeMap::new();
    let (mut sent, mut dropped, mut arrived) = (0u64, 0u64, 0u64);
    for e in &log.events {
        match e.kind {
            PacketEventKind::Send { attempt } => {
                sent += e.size as u64;
                if open.insert((e.seq, attempt), (e.time, e.size)).is_some() {
                    return Some(format!("duplicate send {e:?}"));
                }
            }
            PacketEventKind::Drop { attempt } | PacketEventKind::Arrive { attempt } => {
                let Some((t0, size)) = open.remove(&(e.seq, attempt)) else {
                    return Some(format!("{e:?} without a matching send"));
                };
                if size != e.size {
                    return Some(format!("size changed for {e:?}"));
                }
                if matches!(e.kind, PacketEventKind::Drop { .. }) {
                    dropped += size as u64;
                } else {
                    arrived += size as u64;
                    let floor = link.base_owd + size as f64 * 8.0 / (max_kbps * 1000.0);
                    if e.time - t0 < floor - 1e-9 {
                        return Some(format!("arrival after {} s, floor {floor}", e.time - t0));
                    }
                }
            }
            PacketEventKind::Nack | PacketEventKind::Abandon => {}
        }
    }
    let pending: u64 = open.values().map(|&(_, s)| s as u64).sum();
    if sent != dropped + arrived + pending {
        return Some(format!("sent {sent} != dropped {dropped} + arrived {arrived} + pending {pending}"));
    }
    let in_flight = (max_kbps * 1000.0 / 8.0 * link.base_owd).ceil() as u64 + 2 * link.mtu as u64;
    if pending > capacity + in_flight {
        return Some(format!("{pending} bytes outstanding, bound {}", capacity + in_flight));
    }
    let windowed = |pred: &dyn Fn(&PacketEventKind) -> bool| -> u64 {
        log.events
            .iter()
            .filter(|e| e.time < duration as f64 && pred(&e.kind))
            .map(|e| e.size as u64)
            .sum()
    };
    let send_bytes: f64 = log.seconds.iter().map(|r| r.send_kbps * 125.0).sum();
    let recv_bytes: f64 = log.seconds.iter().map(|r| r.recv_kbps * 125.0).sum();
    let ev_send = windowed(&|k| matches!(k, PacketEventKind::Send { .. })) as f64;
    let ev_recv = windowed(&|k| matches!(k, PacketEventKind::Arrive { .. })) as f64;
    if (send_bytes - ev_send).abs() > 1e-6 * ev_send.max(1.0) || (recv_bytes - ev_recv).abs() > 1e-6 * ev_recv.max(1.0) {
        return Some(format!("per-second totals {send_bytes}/{recv_bytes} vs events {ev_send}/{ev_recv}"));
    }
    for r in &log.seconds {
        if r.rtt_s < 2.0 * link.base_owd - 1e-9 || r.frame_delay_s < link.base_owd - 1e-9 {
            return Some(format!("second {} has rtt {} and frame delay {}", r.second, r.rtt_s, r.frame_delay_s));
        }
        if !(0.0..=1.0).contains(&r.loss) || !(0.0..=1.0).contains(&r.lost_frame_rate) {
            return Some(format!("second {} has a rate outside [0, 1]", r.second));
        }
    }
    None
}

#[test]
fn criterion_06_simulator_physics() {
    // (a) Under-loaded clean link.
    let video = flat_video(30, true);
    let trace = NetworkTrace::constant(6500.0, 30.0).unwrap();
    let sim = SimConfig {
        encoder: quiet_encoder(),
        ..SimConfig::default()
    };
    let log = run_session(&mut fixed_policy(6000.0).unwrap(), &video, &trace, &sim, 30, 6).unwrap();
    let clean = log.seconds.iter().all(|r| r.loss == 0.0 && r.lost_frame_rate == 0.0)
        && log.observations.iter().all(|o| o.p == 0.0 && o.h == 0.0)
        && log.summary().stalling_ratio == 0.0;

    // (b) Over-loaded link: first drop against the fluid fill time.
    let enc = EncoderConfig {
        max_bitrate: 10_000.0,
        ..quiet_encoder()
    };
    let link = LinkConfig::default();
    let mut s = Session::new(&video, &trace, link, enc, Default::default(), Default::default(), 20, 1).unwrap();
    s.record_events(true);
    let oracle = s.queue_capacity() as f64 * 8.0 / 1000.0 / (8000.0 - 6500.0);
    while !s.is_done() {
        s.step(8000.0).unwrap();
    }
    let first = s
        .log()
        .events
        .iter()
        .find(|e| matches!(e.kind, PacketEventKind::Drop { .. }))
        .map(|e| e.time);
    let fill_ok = first.is_some_and(|t| (t - oracle).abs() <= link.tick + 1e-9);

    // (c) Fuzzed sessions.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let models = [TraceModel::MarkovStep, TraceModel::Ar1, TraceModel::SquareWave];
    let mut violation = None;
    for seed in 0..1000u64 {
        let duration = 20;
        let mean = rng.random_range(500.0..6000.0);
        let trace = generate_synthetic_network_trace(&TraceGenSpec {
            duration: duration as f64,
            mean_bw: mean,
            std_bw: rng.random_range(0.0..0.5) * mean,
            model: models[seed as usize % 3],
            seed,
        })
        .unwrap();
        let video = generate_synthetic_complexity_trace(duration as f64, 25, 125, seed).unwrap();
        let link = LinkConfig {
            random_loss: if rng.random_bool(0.5) { rng.random_range(0.0..0.05) } else { 0.0 },
            queue_capacity: if rng.random_bool(0.3) { Some(rng.random_range(5_000..400_000)) } else { None },
            ..LinkConfig::default()
        };
        let mut policy: Box<dyn BitrateController> = match seed % 3 {
            0 => Box::new(GccPolicy::new(GccConfig::default())),
            1 => Box::new(fixed_policy(rng.random_range(300.0..6100.0)).unwrap()),
            _ => Box::new(RandomActionPolicy::new(ControllerConfig::default(), seed)),
        };
        let mut s = Session::new(&video, &trace, link, EncoderConfig::default(), Default::default(), Default::default(), duration, seed)
            .unwrap();
        s.record_events(true);
        while !s.is_done() {
            let target = policy.decide(&s.context()).unwrap();
            s.step(target).unwrap();
        }
        let capacity = s.queue_capacity();
        let max_kbps = trace.samples().iter().cloned().fold(0.0, f64::max);
        if let Some(v) = physics_violation(s.log(), &link, capacity, max_kbps, duration) {
            violation = Some(format!("seed {seed}: {v}"));
            break;
        }
    }
    let pass = clean && fill_ok && violation.is_none();
    verdict(
        6,
        "simulator physics",
        pass,
        &format!("clean link {clean}, first drop {first:?} vs {oracle:.4}, fuzz {}", violation.as_deref().unwrap_or("1000 sessions ok")),
    );
    assert!(pass);
}

#[test]
fn criterion_07_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.paths = PathsConfig {
        traces_dir: dir.path().join("traces"),
        videos_dir: dir.path().join("videos"),
        checkpoints_dir: dir.path().join("ckpt"),
        output_dir: dir.path().join("out"),
    };
    cfg.corpus.traces = 5;
    cfg.corpus.videos = 5;
    cfg.corpus.train_videos = 3;
    cfg.corpus.trace_duration = 30.0;
    cfg.corpus.video_duration = 30.0;
    cfg.session.duration = 30;
    cfg.link.random_loss = 0.01;
    cfg.policy.names = vec!["gcc".into(), "random".into(), "oracle".into()];
    run_experiment(Mode::GenTraces, &cfg).unwrap();
    let read_all = |cfg: &ExperimentConfig| {
        let out = &cfg.paths.output_dir;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(out.join("sessions")).unwrap() {
            let p = entry.unwrap().path();
            files.insert(p.clone(), std::fs::read(&p).unwrap());
        }
        files.insert(out.join("summary.json"), std::fs::read(out.join("summary.json")).unwrap());
        files
    };
    run_experiment(Mode::Compare, &cfg).unwrap();
    let first = read_all(&cfg);
    std::fs::remove_dir_all(&cfg.paths.output_dir).unwrap();
    run_experiment(Mode::Compare, &cfg).unwrap();
    let second = read_all(&cfg);
    let pass = first == second && first.len() > 1;
    verdict(7, "determinism", pass, &format!("{} files compared", first.len()));
    assert!(pass);
}

/// Configuration of the end-to-end corpus and models.
fn e2e_config(root: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.paths = PathsConfig {
        traces_dir: root.join("traces"),
        videos_dir: root.join("videos"),
        checkpoints_dir: root.join("checkpoints"),
        output_dir: root.join("out"),
    };
    cfg.a3c.workers = 1;
    cfg
}

fn cache_root() -> PathBuf {
    let cfg = e2e_config(std::path::Path::new(""));
    let mut h = DefaultHasher::new();
    cfg.to_toml().hash(&mut h);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{:016x}", h.finish()))
}

struct Predictor {
    model: CbpnModel,
    test: RangeMetrics,
    test_last_target_mad: f64,
    frozen: bool,
}

/// Generates the corpus (once) and trains the predictor (once per process).
fn predictor() -> &'static Predictor {
    static CELL: OnceLock<Predictor> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = cache_root();
        let cfg = e2e_config(&root);
        if !cfg.paths.traces_dir.join("test").is_dir() || !cfg.paths.videos_dir.join("test").is_dir() {
            run_experiment(Mode::GenTraces, &cfg).unwrap();
        }
        let corpus = Corpus::load(&cfg).unwrap();
        let items: Vec<ComplexityTrace> = corpus.train_videos.iter().map(|v| v.item.clone()).collect();
        let data = build_dataset(&items, &cfg.encoder, &cfg.cbpn, &cfg.cbpn_dataset).unwrap();
        let (train, _) = data.split_by_session(0.1, cfg.seed);
        let mut model = CbpnModel::new(cfg.cbpn, cfg.seed).unwrap();
        train_baseline(&mut model, &train, &cfg.cbpn_train).unwrap();
        let before: Vec<u64> = model.baseline_params().iter().map(|p| p.to_bits()).collect();
        train_error(&mut model, &train, &cfg.cbpn_train).unwrap();
        let after: Vec<u64> = model.baseline_params().iter().map(|p| p.to_bits()).collect();

        let test_items: Vec<ComplexityTrace> = corpus.test_videos.iter().map(|v| v.item.clone()).collect();
        let test = build_dataset(
            &test_items,
            &cfg.encoder,
            &cfg.cbpn,
            &DatasetConfig {
                seed: cfg.cbpn_dataset.seed.wrapping_add(1),
                ..cfg.cbpn_dataset
            },
        )
        .unwrap();
        std::fs::create_dir_all(&cfg.paths.checkpoints_dir).unwrap();
        model.save(cfg.cbpn_path()).unwrap();
        Predictor {
            test: eval_metrics(&model, &test).unwrap(),
            test_last_target_mad: last_target_mad(&test),
            frozen: before == after,
            model,
        }
    })
}

#[test]
fn criterion_08_cbpn_training() {
    let p = predictor();
    let gain = 1.0 - p.test.mad / p.test_last_target_mad;
    let pass = (0.80..=0.90).contains(&p.test.cr) && gain >= 0.30 && p.frozen;
    verdict(
        8,
        "predictor training",
        pass,
        &format!(
            "held-out CR {:.4}, MAD {:.4} vs last-target {:.4} ({:.1}% better), baseline frozen {}",
            p.test.cr,
            p.test.mad,
            p.test_last_target_mad,
            100.0 * gain,
            p.frozen
        ),
    );
    assert!(pass);
}

fn tiny_suite() -> (Vec<NetworkTrace>, Vec<ComplexityTrace>) {
    let traces = (0..2)
        .map(|i| {
            generate_synthetic_network_trace(&TraceGenSpec {
                duration: 60.0,
                mean_bw: [2000.0, 4000.0][i],
                std_bw: [600.0, 1200.0][i],
                model: [TraceModel::MarkovStep, TraceModel::Ar1][i],
                seed: 1 + i as u64,
            })
            .unwrap()
        })
        .collect();
    let videos = (0..2).map(|i| generate_synthetic_complexity_trace(60.0, 25, 125, 1 + i).unwrap()).collect();
    (traces, videos)
}

/// Mean per-second reward over every (trace, video) pair of the suite.
fn suite_reward(policy: &mut dyn FnMut(u64) -> Box<dyn BitrateController>, traces: &[NetworkTrace], videos: &[ComplexityTrace]) -> f64 {
    let sim = SimConfig::default();
    let mut total = 0.0;
    let mut n = 0.0;
    for (ti, t) in traces.iter().enumerate() {
        for (vi, v) in videos.iter().enumerate() {
            for rep in 0..3u64 {
                let seed = cell_seed(1, ti, vi) + 1000 * rep;
                let log = run_session(policy(seed).as_mut(), v, t, &sim, 60, seed).unwrap();
                total += log.summary().mean_reward;
                n += 1.0;
            }
        }
    }
    total / n
}

#[test]
fn criterion_09_abrn_training_smoke() {
    let cfg = A3cConfig {
        workers: 1,
        updates: 500,
        seed: 1,
        ..A3cConfig::default()
    };
    let bandit = train_a3c(|_| Ok(BanditEnv::new(5, 20)), &AbrnNetConfig::default(), &cfg).unwrap();
    let p5 = policy_forward(&bandit.actor, BanditEnv::new(5, 20).state()).unwrap()[5];

    let (traces, videos) = tiny_suite();
    let ctl = ControllerConfig {
        ablation: Ablation::S,
        ..ControllerConfig::default()
    };
    let random = suite_reward(&mut |s| Box::new(RandomActionPolicy::new(ctl, s)), &traces, &videos);
    let defaults = ExperimentConfig::default();
    let select = defaults.policy.select;
    let a3c = A3cConfig {
        workers: 1,
        seed: 1,
        updates: 400,
        ..defaults.a3c
    };
    let sim = SimConfig::default();
    let out = train_a3c(
        |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let t = &traces[r.random_range(0..traces.len())];
            let v = &videos[r.random_range(0..videos.len())];
            SessionEnv::new(v, t, &sim, 60, seed, None, ctl)
        },
        &AbrnNetConfig::default(),
        &a3c,
    )
    .unwrap();
    let trained = suite_reward(
        &mut |s| Box::new(AbrnPolicy::new(out.actor.clone(), None, ctl, select, s).unwrap()),
        &traces,
        &videos,
    );
    let pass = p5 >= 0.9 && trained >= 1.3 * random;
    verdict(
        9,
        "controller training smoke",
        pass,
        &format!("bandit p[5] {p5:.4}; suite reward trained {trained:.3} vs random {random:.3} ({:.2}x)", trained / random),
    );
    assert!(pass);
}

static TRAINING: Mutex<()> = Mutex::new(());

/// Trains (or loads from the cache) the controller for `ablation`.
fn controller(ablation: Ablation) -> AbrnModel {
    let p = predictor();
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = e2e_config(&cache_root());
    let mut h = DefaultHasher::new();
    p.model.to_checkpoint().to_json().hash(&mut h);
    let path = cfg.paths.checkpoints_dir.join(format!("abrn-{ablation}-{:016x}.json", h.finish()));
    if let Ok(model) = AbrnModel::load(&path) {
        return model;
    }
    let corpus = Corpus::load(&cfg).unwrap();
    let report = train_abrn_on(&cfg, ablation, Some(&p.model), &corpus.train_traces, &corpus.train_videos).unwrap();
    println!("  {ablation}: validation {:?}, kept seed {}", report.validation, report.seed);
    report.model.save(&path).unwrap();
    report.model
}

#[test]
fn criterion_10_end_to_end_ordering() {
    let p = predictor();
    let root = cache_root();
    let mut cfg = e2e_config(&root);
    let dir = tempfile::tempdir().unwrap();
    cfg.paths.checkpoints_dir = dir.path().join("checkpoints");
    cfg.paths.output_dir = dir.path().join("out");
    std::fs::create_dir_all(&cfg.paths.checkpoints_dir).unwrap();
    p.model.save(cfg.cbpn_path()).unwrap();
    for ablation in Ablation::ALL {
        controller(ablation).save(cfg.abrn_path(ablation)).unwrap();
    }
    cfg.policy.names = ["gcc", "anableps", "anableps-c", "anableps-s"].map(String::from).to_vec();
    cfg.policy.anchor = "gcc".into();
    let Outcome::Report(report) = run_experiment(Mode::Compare, &cfg).unwrap() else {
        panic!("compare returns a report");
    };
    let traces: std::collections::BTreeSet<_> = report.cells.iter().map(|c| c.trace.clone()).collect();
    let videos: std::collections::BTreeSet<_> = report.cells.iter().map(|c| c.video.clone()).collect();
    let gcc = report.policy("gcc").unwrap();
    let full = report.policy("anableps").unwrap();
    let c = report.policy("anableps-c").unwrap();
    let s = report.policy("anableps-s").unwrap();
    for agg in [gcc, full, c, s] {
        println!(
            "  {:<11} quality {:.4} send {:7.1} kbps stall {:.4} delay {:.4} s reward {:.4}",
            agg.policy, agg.quality.mean, agg.send_kbps.mean, agg.stalling_ratio.mean, agg.frame_delay_s.mean, agg.reward.mean
        );
    }
    let directional = full.stalling_ratio.mean < gcc.stalling_ratio.mean
        && full.send_kbps.mean < gcc.send_kbps.mean
        && full.frame_delay_s.mean < gcc.frame_delay_s.mean
        && full.quality.mean >= 0.95 * gcc.quality.mean;
    let geq = |a: f64, b: f64| a >= b - 0.02 * b.abs();
    let ordering = geq(full.reward.mean, c.reward.mean) && geq(c.reward.mean, s.reward.mean);
    let pass = directional && ordering && traces.len() == 6 && videos.len() == 10;
    verdict(
        10,
        "end-to-end ordering",
        pass,
        &format!(
            "{}x{} cells; vs gcc: {}; rewards full {:.3} c {:.3} s {:.3}",
            traces.len(),
            videos.len(),
            report.relative_table().lines().nth(2).unwrap_or_default(),
            full.reward.mean,
            c.reward.mean,
            s.reward.mean
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_gcc_behavior() {
    let video = generate_synthetic_complexity_trace(60.0, 25, 125, 11).unwrap();
    let step_at = 30usize;
    let mut body = String::from("time_s,bandwidth_kbps\n");
    for i in 0..120 {
        let kbps = if i < step_at * 2 { 6000 } else { 2000 };
        body.push_str(&format!("{},{kbps}\n", i as f64 * 0.5));
    }
    let step = parse_network_trace(&body).unwrap();
    let sim = SimConfig::default();
    let log = run_session(&mut GccPolicy::new(GccConfig::default()), &video, &step, &sim, 60, 11).unwrap();
    let decisions: Vec<f64> = log.seconds.iter().map(|r| r.decision_kbps).collect();
    let within = decisions[step_at + 1..=step_at + 3].iter().any(|&d| d < 2600.0);

    let clean = NetworkTrace::constant(20_000.0, 60.0).unwrap();
    let sim_clean = SimConfig {
        encoder: quiet_encoder(),
        ..SimConfig::default()
    };
    let log = run_session(&mut GccPolicy::new(GccConfig::default()), &flat_video(60, false), &clean, &sim_clean, 60, 11).unwrap();
    let grow: Vec<f64> = log.seconds.iter().map(|r| r.decision_kbps).collect();
    let monotone = grow.windows(2).all(|w| w[1] >= w[0]);
    let capped = *grow.last().unwrap() == 6100.0;
    let pass = within && monotone && capped;
    verdict(
        11,
        "GCC behavior",
        pass,
        &format!(
            "decisions after the step {:?}; clean link monotone {monotone}, final {}",
            &decisions[step_at..=step_at + 3],
            grow.last().unwrap()
        ),
    );
    assert!(pass);
}
