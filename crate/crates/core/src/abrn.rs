//! Actor-critic bitrate controller: state assembly, networks, action
//! semantics, reward, and A3C training.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use anableps_neural::{clip_grad_norm, Activations, AdamConfig, AdamState, Checkpoint, Network, NetworkBuilder, Padding};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbpn::{assemble_cbpn_state, BitrateRange, CbpnModel};
use crate::netsim::{BitrateController, DecisionContext, ReceiverObservation, Session, SimConfig};
use crate::trace_io::{ComplexityTrace, NetworkTrace};
use crate::Error;

/// Weights of the per-second reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha: 8.0,
            lambda: 0.5,
            gamma: 4.0,
            delta: 2.0,
        }
    }
}

/// Frame-delay ceiling applied before weighting, seconds.
pub const REWARD_DELAY_CAP: f64 = 2.0;

/// `alpha*m - lambda*|m - m_prev| - gamma*h - delta*min(f, 2)`.
pub fn reward(m: f64, m_prev: f64, h: f64, f: f64, params: &RewardParams) -> f64 {
    params.alpha * m
        - params.lambda * (m - m_prev).abs()
        - params.gamma * h
        - params.delta * f.min(REWARD_DELAY_CAP)
}

/// Relative bitrate actions, in checkpoint order. Index 0 is the
/// loss-proportional back-off.
pub const ACTION_DELTAS: [Option<f64>; 6] = [None, Some(-400.0), Some(0.0), Some(200.0), Some(400.0), Some(600.0)];
pub const NUM_ACTIONS: usize = ACTION_DELTAS.len();

pub const MIN_BITRATE: f64 = 300.0;
pub const MAX_BITRATE: f64 = 6100.0;

/// Next target for `action` given the previous target and the latest
/// reported loss rate.
pub fn apply_action(prev: f64, action: usize, p_latest: f64) -> Result<f64, Error> {
    let next = match ACTION_DELTAS.get(action) {
        Some(Some(delta)) => prev + delta,
        Some(None) => prev * (1.0 - p_latest.clamp(0.0, 1.0)),
        None => return Err(Error::Validation(format!("action index {action} out of range"))),
    };
    Ok(next.clamp(MIN_BITRATE, MAX_BITRATE))
}

/// Length of every history vector in the state.
pub const HISTORY: usize = 6;
/// NACK count mapped to 1.0.
pub const NACK_SCALE: f64 = 50.0;
/// Ceiling for RTT and frame delay before normalization, seconds.
pub const DELAY_CAP: f64 = 2.0;
const KBPS_SCALE: f64 = MAX_BITRATE;

/// Which CBPN outputs the controller sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Both `v` and `e`.
    #[default]
    Full,
    /// Neither: the predictor is disabled.
    S,
    /// `v` only.
    C,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::C, Ablation::S];

    pub fn mask(self) -> StateMask {
        match self {
            Ablation::Full => StateMask { keep_v: true, keep_e: true },
            Ablation::S => StateMask { keep_v: false, keep_e: false },
            Ablation::C => StateMask { keep_v: true, keep_e: false },
        }
    }

    /// Whether the predictor has to be queried at all.
    pub fn uses_predictor(self) -> bool {
        self != Ablation::S
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::S => "s",
            Ablation::C => "c",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "s" => Ok(Ablation::S),
            "c" => Ok(Ablation::C),
            other => Err(Error::Config(format!("unknown ablation `{other}` (expected full, s or c)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMask {
    pub keep_v: bool,
    pub keep_e: bool,
}

pub fn ablation_config(kind: &str) -> Result<StateMask, Error> {
    Ok(kind.parse::<Ablation>()?.mask())
}

/// Normalized controller observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbrnState {
    pub v: f64,
    pub e: f64,
    pub s: f64,
    pub r: f64,
    pub d: [f64; HISTORY],
    pub p: [f64; HISTORY],
    pub n: [f64; HISTORY],
    pub f: [f64; HISTORY],
    pub h: [f64; HISTORY],
    /// Number of leading history entries that are zero padding.
    pub padded: usize,
}

impl AbrnState {
    pub fn zeros() -> Self {
        Self {
            v: 0.0,
            e: 0.0,
            s: 0.0,
            r: 0.0,
            d: [0.0; HISTORY],
            p: [0.0; HISTORY],
            n: [0.0; HISTORY],
            f: [0.0; HISTORY],
            h: [0.0; HISTORY],
            padded: HISTORY,
        }
    }

    fn inputs(&self) -> [(&'static str, Vec<f64>); 6] {
        let mut fh = self.f.to_vec();
        fh.extend_from_slice(&self.h);
        [
            ("ve", vec![self.v, self.e]),
            ("sr", vec![self.s, self.r]),
            ("d", self.d.to_vec()),
            ("p", self.p.to_vec()),
            ("n", self.n.to_vec()),
            ("fh", fh),
        ]
    }

    fn is_finite(&self) -> bool {
        [self.v, self.e, self.s, self.r]
            .iter()
            .chain(self.d.iter())
            .chain(self.p.iter())
            .chain(self.n.iter())
            .chain(self.f.iter())
            .chain(self.h.iter())
            .all(|x| x.is_finite())
    }
}

/// Builds the normalized state from the predicted range and the receiver
/// reports seen so far (the last [`HISTORY`] are used, zero-padded at the
/// front when fewer exist).
pub fn assemble_abrn_state(range: BitrateRange, obs: &[ReceiverObservation], mask: StateMask) -> AbrnState {
    let mut st = AbrnState::zeros();
    if mask.keep_v {
        st.v = range.v / KBPS_SCALE;
    }
    if mask.keep_e {
        st.e = range.e / KBPS_SCALE;
    }
    let recent = &obs[obs.len().saturating_sub(HISTORY)..];
    st.padded = HISTORY - recent.len();
    if let Some(last) = recent.last() {
        st.s = last.s / KBPS_SCALE;
        st.r = last.r / KBPS_SCALE;
    }
    for (i, o) in recent.iter().enumerate() {
        let j = st.padded + i;
        st.d[j] = o.d.clamp(0.0, DELAY_CAP) / DELAY_CAP;
        st.p[j] = o.p;
        st.n[j] = (o.n / NACK_SCALE).min(1.0);
        st.f[j] = o.f.clamp(0.0, DELAY_CAP) / DELAY_CAP;
        st.h[j] = o.h;
    }
    st
}

/// Layer widths of the actor and critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbrnNetConfig {
    pub width: usize,
    pub kernel: usize,
    /// Scale applied to the initial weights of the final actor layer.
    pub final_init_scale: f64,
}

impl Default for AbrnNetConfig {
    fn default() -> Self {
        Self {
            width: 128,
            kernel: 3,
            final_init_scale: 0.01,
        }
    }
}

impl AbrnNetConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.width == 0 || self.kernel == 0 || self.kernel > HISTORY {
            return Err(Error::Config(format!("invalid controller network config {self:?}")));
        }
        Ok(())
    }
}

fn trunk(b: &mut NetworkBuilder, cfg: &AbrnNetConfig) -> usize {
    let w = cfg.width;
    let ve = b.input("ve", (2, 1));
    let sr = b.input("sr", (2, 1));
    let d = b.input("d", (1, HISTORY));
    let p = b.input("p", (1, HISTORY));
    let n = b.input("n", (1, HISTORY));
    let fh = b.input("fh", (2, HISTORY));
    let mut branches = Vec::new();
    for (name, x) in [("ve_dense", ve), ("sr_dense", sr)] {
        let y = b.dense(name, x, w);
        branches.push(b.relu(y));
    }
    for (name, x) in [("d_conv", d), ("p_conv", p), ("n_conv", n)] {
        let y = b.conv1d(name, x, w, cfg.kernel, 1, Padding::Valid);
        branches.push(b.relu(y));
    }
    branches.push(b.gru("fh_gru", fh, w));
    let merged = b.concat(&branches);
    let hidden = b.dense("hidden", merged, w);
    b.relu(hidden)
}

/// Policy network: six action probabilities under output `probs`.
pub fn build_actor(cfg: &AbrnNetConfig, seed: u64) -> Result<Network, Error> {
    cfg.validate()?;
    let mut b = NetworkBuilder::new();
    let h = trunk(&mut b, cfg);
    let logits = b.dense("logits", h, NUM_ACTIONS);
    let probs = b.softmax(logits);
    b.output("probs", probs);
    let mut net = b.build(seed)?;
    net.scale_weights("logits", cfg.final_init_scale)?;
    Ok(net)
}

/// Value network: one linear output under `value`.
pub fn build_critic(cfg: &AbrnNetConfig, seed: u64) -> Result<Network, Error> {
    cfg.validate()?;
    let mut b = NetworkBuilder::new();
    let h = trunk(&mut b, cfg);
    let v = b.dense("value", h, 1);
    b.output("value", v);
    Ok(b.build(seed)?)
}

fn run(net: &Network, state: &AbrnState) -> Result<Activations, Error> {
    if !state.is_finite() {
        return Err(Error::Validation("non-finite controller state".into()));
    }
    let inputs = state.inputs();
    let refs: Vec<(&str, &[f64])> = inputs.iter().map(|(n, v)| (*n, v.as_slice())).collect();
    Ok(net.forward(&refs)?)
}

pub fn policy_forward(actor: &Network, state: &AbrnState) -> Result<[f64; NUM_ACTIONS], Error> {
    let acts = run(actor, state)?;
    probs_of(actor, &acts)
}

fn probs_of(actor: &Network, acts: &Activations) -> Result<[f64; NUM_ACTIONS], Error> {
    let out = actor.output(acts, "probs")?;
    out.try_into()
        .map_err(|_| Error::Validation(format!("actor has {} outputs, expected {NUM_ACTIONS}", out.len())))
}

pub fn value_forward(critic: &Network, state: &AbrnState) -> Result<f64, Error> {
    let acts = run(critic, state)?;
    Ok(critic.output(&acts, "value")?[0])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Sample,
    Argmax,
}

/// Picks an action index; argmax ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(probs: &[f64], mode: SelectMode, rng: &mut R) -> Result<usize, Error> {
    if probs.len() != NUM_ACTIONS || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!("invalid action distribution {probs:?}")));
    }
    match mode {
        SelectMode::Argmax => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectMode::Sample => {
            let dist = WeightedIndex::new(probs).map_err(|e| Error::Validation(format!("action distribution: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: AbrnState,
    pub reward: f64,
    pub done: bool,
}

/// An episodic environment driven by action indices.
pub trait Env {
    /// Starts the episode and returns the first state.
    fn reset(&mut self) -> Result<AbrnState, Error>;
    fn step(&mut self, action: usize) -> Result<Transition, Error>;
}

/// Constant-state bandit: `rewarded` pays 1, every other action 0.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub rewarded: usize,
    pub episode_len: usize,
    state: AbrnState,
    t: usize,
}

impl BanditEnv {
    pub fn new(rewarded: usize, episode_len: usize) -> Self {
        Self {
            rewarded,
            episode_len: episode_len.max(1),
            state: AbrnState {
                v: 0.5,
                e: 0.05,
                s: 0.5,
                r: 0.5,
                d: [0.05; HISTORY],
                p: [0.0; HISTORY],
                n: [0.0; HISTORY],
                f: [0.05; HISTORY],
                h: [0.0; HISTORY],
                padded: 0,
            },
            t: 0,
        }
    }

    pub fn state(&self) -> &AbrnState {
        &self.state
    }
}

impl Env for BanditEnv {
    fn reset(&mut self) -> Result<AbrnState, Error> {
        self.t = 0;
        Ok(self.state.clone())
    }

    fn step(&mut self, action: usize) -> Result<Transition, Error> {
        if action >= NUM_ACTIONS {
            return Err(Error::Validation(format!("action index {action} out of range")));
        }
        self.t += 1;
        Ok(Transition {
            state: self.state.clone(),
            reward: if action == self.rewarded { 1.0 } else { 0.0 },
            done: self.t >= self.episode_len,
        })
    }
}

/// How a learned controller starts a session and what it observes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Target used before the predictor has enough history.
    pub start_bitrate: f64,
    /// Seconds at `start_bitrate`; at least the predictor window.
    pub warmup: u64,
    pub ablation: Ablation,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            start_bitrate: 1000.0,
            warmup: crate::cbpn::DEFAULT_WINDOW as u64,
            ablation: Ablation::Full,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, cbpn: Option<&CbpnModel>) -> Result<(), Error> {
        if !(MIN_BITRATE..=MAX_BITRATE).contains(&self.start_bitrate) {
            return Err(Error::Config(format!("start bitrate {} outside [{MIN_BITRATE}, {MAX_BITRATE}]", self.start_bitrate)));
        }
        if self.ablation.uses_predictor() {
            let model = cbpn.ok_or_else(|| Error::Config(format!("ablation `{}` needs a predictor model", self.ablation)))?;
            if (self.warmup as usize) < model.cfg.window_length {
                return Err(Error::Config(format!(
                    "warm-up of {} s is shorter than the predictor window {}",
                    self.warmup, model.cfg.window_length
                )));
            }
        }
        Ok(())
    }
}

/// Controller state for the slot about to be decided, querying the predictor
/// with the current target as the candidate.
pub fn observe_context(ctx: &DecisionContext<'_>, cbpn: Option<&CbpnModel>, ablation: Ablation) -> Result<AbrnState, Error> {
    let mut range = BitrateRange { v: 0.0, e: 0.0 };
    if let (Some(model), true) = (cbpn, ablation.uses_predictor()) {
        if let Some(current) = ctx.last_target() {
            let mut targets: Vec<f64> = ctx.slots.iter().map(|s| s.target).collect();
            targets.push(current);
            let actuals: Vec<f64> = ctx.slots.iter().map(|s| s.actual).collect();
            if targets.len() > model.cfg.window_length {
                let st = assemble_cbpn_state(&targets, &actuals, ctx.video, &model.cfg)?;
                range = model.predict_range(&st)?;
            }
        }
    }
    Ok(assemble_abrn_state(range, ctx.observations, ablation.mask()))
}

/// Next target after applying `action` in the given context.
pub fn act_in_context(ctx: &DecisionContext<'_>, action: usize, start_bitrate: f64) -> Result<f64, Error> {
    let prev = ctx.last_target().unwrap_or(start_bitrate);
    let p = ctx.latest_observation().map_or(0.0, |o| o.p);
    apply_action(prev, action, p)
}

/// One simulated session seen through the controller's state and actions.
pub struct SessionEnv<'a> {
    session: Session<'a>,
    cbpn: Option<&'a CbpnModel>,
    ctl: ControllerConfig,
}

impl<'a> SessionEnv<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        video: &'a ComplexityTrace,
        trace: &NetworkTrace,
        sim: &SimConfig,
        duration: u64,
        seed: u64,
        cbpn: Option<&'a CbpnModel>,
        ctl: ControllerConfig,
    ) -> Result<Self, Error> {
        ctl.validate(cbpn)?;
        if ctl.warmup >= duration {
            return Err(Error::Config(format!("warm-up of {} s leaves no decisions in a {duration} s session", ctl.warmup)));
        }
        let session = Session::new(video, trace, sim.link, sim.encoder, sim.quality, sim.reward, duration, seed)?;
        Ok(Self { session, cbpn, ctl })
    }

    pub fn session(&self) -> &Session<'a> {
        &self.session
    }

    fn state(&self) -> Result<AbrnState, Error> {
        observe_context(&self.session.context(), self.cbpn, self.ctl.ablation)
    }
}

impl Env for SessionEnv<'_> {
    fn reset(&mut self) -> Result<AbrnState, Error> {
        if self.session.second() > 0 {
            return Err(Error::Validation("session environments cannot be restarted".into()));
        }
        while self.session.second() < self.ctl.warmup {
            self.session.step(self.ctl.start_bitrate)?;
        }
        self.state()
    }

    fn step(&mut self, action: usize) -> Result<Transition, Error> {
        let target = act_in_context(&self.session.context(), action, self.ctl.start_bitrate)?;
        let rec = self.session.step(target)?;
        Ok(Transition {
            state: self.state()?,
            reward: rec.reward,
            done: self.session.is_done(),
        })
    }
}

/// A3C hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A3cConfig {
    pub workers: usize,
    pub discount: f64,
    /// Entropy bonus at the first update; decays linearly to `entropy_final`.
    pub entropy_weight: f64,
    pub entropy_final: f64,
    pub n_step: usize,
    /// Generalized advantage estimation weight; 1 gives plain n-step returns.
    pub gae_lambda: f64,
    /// Environments each worker steps before every update.
    pub envs_per_worker: usize,
    pub updates: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    /// Factor applied to rewards before computing returns.
    pub reward_scale: f64,
    /// Weight of the newest episode in the smoothed reward.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for A3cConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            discount: 0.99,
            entropy_weight: 0.01,
            entropy_final: 0.0,
            n_step: 5,
            gae_lambda: 1.0,
            envs_per_worker: 1,
            updates: 20_000,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            max_grad_norm: 10.0,
            reward_scale: 0.1,
            smoothing: 0.05,
            seed: 0,
        }
    }
}

impl A3cConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.workers >= 1
            && self.discount > 0.0
            && self.discount < 1.0
            && self.n_step >= 1
            && self.envs_per_worker >= 1
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.entropy_weight >= 0.0
            && self.entropy_final >= 0.0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.max_grad_norm > 0.0
            && self.reward_scale > 0.0
            && self.smoothing > 0.0
            && self.smoothing <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid A3C config {self:?}")))
        }
    }

    fn entropy_at(&self, update: usize) -> f64 {
        let progress = if self.updates > 1 {
            update as f64 / (self.updates - 1) as f64
        } else {
            0.0
        };
        self.entropy_weight + (self.entropy_final - self.entropy_weight) * progress.min(1.0)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    /// Smoothed mean per-step reward of finished episodes.
    pub mean_reward: f64,
    /// Mean policy entropy over the states of this update.
    pub entropy: f64,
    pub critic_loss: f64,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("update,mean_reward,entropy,critic_loss\n");
    for c in curve {
        out.push_str(&format!("{},{},{},{}\n", c.update, c.mean_reward, c.entropy, c.critic_loss));
    }
    out
}

#[derive(Debug, Clone)]
pub struct A3cOutput {
    pub actor: Network,
    pub critic: Network,
    pub curve: Vec<CurvePoint>,
}

struct Shared {
    actor: Network,
    critic: Network,
    actor_adam: AdamState,
    critic_adam: AdamState,
    updates: usize,
    smoothed: Option<f64>,
    curve: Vec<CurvePoint>,
    failed: bool,
}

struct Rollout {
    actor_acts: Vec<Activations>,
    critic_acts: Vec<Activations>,
    probs: Vec<[f64; NUM_ACTIONS]>,
    values: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

/// Trains actor and critic with advantage actor-critic on environments
/// produced by `factory(episode_seed)`. One worker is fully deterministic.
pub fn train_a3c<E, F>(factory: F, net_cfg: &AbrnNetConfig, cfg: &A3cConfig) -> Result<A3cOutput, Error>
where
    E: Env,
    F: Fn(u64) -> Result<E, Error> + Sync,
{
    cfg.validate()?;
    let actor = build_actor(net_cfg, cfg.seed)?;
    let critic = build_critic(net_cfg, cfg.seed.wrapping_add(1))?;
    let shared = Mutex::new(Shared {
        actor_adam: AdamState::new(actor.num_params()),
        critic_adam: AdamState::new(critic.num_params()),
        actor,
        critic,
        updates: 0,
        smoothed: None,
        curve: Vec::with_capacity(cfg.updates),
        failed: false,
    });
    let results: Vec<Result<(), Error>> = if cfg.workers == 1 {
        vec![worker(0, &factory, cfg, &shared)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.workers)
                .map(|w| {
                    let (factory, shared) = (&factory, &shared);
                    scope.spawn(move || worker(w, factory, cfg, shared))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Diverged("training worker panicked".into()))))
                .collect()
        })
    };
    for r in results {
        r?;
    }
    let s = shared.into_inner().map_err(|_| Error::Diverged("training state poisoned".into()))?;
    Ok(A3cOutput {
        actor: s.actor,
        critic: s.critic,
        curve: s.curve,
    })
}

struct Lane<E> {
    env: E,
    state: AbrnState,
    ep_reward: f64,
    ep_len: usize,
}

impl<E: Env> Lane<E> {
    fn new<F: Fn(u64) -> Result<E, Error>>(factory: &F, rng: &mut ChaCha8Rng) -> Result<Self, Error> {
        let mut env = factory(rng.random())?;
        let state = env.reset()?;
        Ok(Self {
            env,
            state,
            ep_reward: 0.0,
            ep_len: 0,
        })
    }

    /// Runs up to `n_step` steps; returns the rollout, whether the episode
    /// ended, and the mean reward of a finished episode.
    fn collect(
        &mut self,
        actor: &Network,
        critic: &Network,
        n_step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Rollout, bool, Option<f64>), Error> {
        let mut ro = Rollout {
            actor_acts: Vec::with_capacity(n_step),
            critic_acts: Vec::with_capacity(n_step),
            probs: Vec::with_capacity(n_step),
            values: Vec::with_capacity(n_step),
            actions: Vec::with_capacity(n_step),
            rewards: Vec::with_capacity(n_step),
        };
        for _ in 0..n_step {
            let aa = run(actor, &self.state)?;
            let ca = run(critic, &self.state)?;
            let probs = probs_of(actor, &aa)?;
            let action = select_action(&probs, SelectMode::Sample, rng)?;
            let tr = self.env.step(action)?;
            ro.values.push(critic.output(&ca, "value")?[0]);
            ro.actor_acts.push(aa);
            ro.critic_acts.push(ca);
            ro.probs.push(probs);
            ro.actions.push(action);
            ro.rewards.push(tr.reward);
            self.ep_reward += tr.reward;
            self.ep_len += 1;
            self.state = tr.state;
            if tr.done {
                let mean = self.ep_reward / self.ep_len as f64;
                (self.ep_reward, self.ep_len) = (0.0, 0);
                return Ok((ro, true, Some(mean)));
            }
        }
        Ok((ro, false, None))
    }
}

fn worker<E, F>(id: usize, factory: &F, cfg: &A3cConfig, shared: &Mutex<Shared>) -> Result<(), Error>
where
    E: Env,
    F: Fn(u64) -> Result<E, Error>,
{
    let lock = || shared.lock().map_err(|_| Error::Diverged("training state poisoned".into()));
    let (mut actor, mut critic) = {
        let s = lock()?;
        (s.actor.clone(), s.critic.clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);
    let mut actor_grads = vec![0.0; actor.num_params()];
    let mut critic_grads = vec![0.0; critic.num_params()];
    let mut lanes = (0..cfg.envs_per_worker)
        .map(|_| Lane::new(factory, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let lanes_n = lanes.len() as f64;

    loop {
        let update = lock()?.updates;
        if update >= cfg.updates {
            return Ok(());
        }
        let beta = cfg.entropy_at(update);
        actor_grads.fill(0.0);
        critic_grads.fill(0.0);
        let (mut critic_loss, mut ent, mut steps, mut reward_sum) = (0.0, 0.0, 0usize, 0.0);
        let mut finished = Vec::new();
        for lane in lanes.iter_mut() {
            let (ro, done, episode) = lane.collect(&actor, &critic, cfg.n_step, &mut rng)?;
            let mut next_value = if done { 0.0 } else { value_forward(&critic, &lane.state)? };
            let mut gae = 0.0;
            let scale = 1.0 / (ro.rewards.len() as f64 * lanes_n);
            for t in (0..ro.rewards.len()).rev() {
                let td = cfg.reward_scale * ro.rewards[t] + cfg.discount * next_value - ro.values[t];
                gae = td + cfg.discount * cfg.gae_lambda * gae;
                next_value = ro.values[t];
                let adv = gae;
                critic_loss += adv * adv * scale;
                let probs = &ro.probs[t];
                ent += entropy(probs) * scale;
                let a = ro.actions[t];
                // Loss: -adv * ln pi(a) - beta * H(pi).
                let g: Vec<f64> = (0..NUM_ACTIONS)
                    .map(|i| {
                        let pg = if i == a { -adv / probs[a].max(1e-12) } else { 0.0 };
                        (pg + beta * (probs[i].max(1e-12).ln() + 1.0)) * scale
                    })
                    .collect();
                actor.backward(&ro.actor_acts[t], &[("probs", &g)], &mut actor_grads)?;
                critic.backward(&ro.critic_acts[t], &[("value", &[-adv * scale])], &mut critic_grads)?;
            }
            steps += ro.rewards.len();
            reward_sum += ro.rewards.iter().sum::<f64>();
            finished.extend(episode);
            if done {
                *lane = Lane::new(factory, &mut rng)?;
            }
        }
        clip_grad_norm(&mut actor_grads, cfg.max_grad_norm);
        clip_grad_norm(&mut critic_grads, cfg.max_grad_norm);
        if !(actor_grads.iter().all(|g| g.is_finite()) && critic_grads.iter().all(|g| g.is_finite())) {
            lock()?.failed = true;
            return Err(Error::Diverged(format!("non-finite gradient at update {update}")));
        }

        let mut s = lock()?;
        if s.failed || s.updates >= cfg.updates {
            return Ok(());
        }
        let actor_cfg = AdamConfig {
            lr: cfg.actor_lr,
            ..AdamConfig::default()
        };
        let critic_cfg = AdamConfig {
            lr: cfg.critic_lr,
            ..AdamConfig::default()
        };
        let s = &mut *s;
        s.actor_adam.update(&actor_cfg, s.actor.params_mut(), &actor_grads);
        s.critic_adam.update(&critic_cfg, s.critic.params_mut(), &critic_grads);
        for x in finished {
            s.smoothed = Some(match s.smoothed {
                Some(m) => m + cfg.smoothing * (x - m),
                None => x,
            });
        }
        s.curve.push(CurvePoint {
            update: s.updates,
            mean_reward: s.smoothed.unwrap_or(reward_sum / steps as f64),
            entropy: ent,
            critic_loss,
        });
        s.updates += 1;
        actor.params_mut().copy_from_slice(s.actor.params());
        critic.params_mut().copy_from_slice(s.critic.params());
    }
}

/// Trained controller networks with the settings they were trained under.
#[derive(Debug, Clone)]
pub struct AbrnModel {
    pub net: AbrnNetConfig,
    pub controller: ControllerConfig,
    pub actor: Network,
    pub critic: Network,
}

impl AbrnModel {
    pub fn new(net: AbrnNetConfig, controller: ControllerConfig, seed: u64) -> Result<Self, Error> {
        Ok(Self {
            actor: build_actor(&net, seed)?,
            critic: build_critic(&net, seed.wrapping_add(1))?,
            net,
            controller,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.actor
            .to_checkpoint()
            .prefixed("actor/")
            .merge(self.critic.to_checkpoint().prefixed("critic/"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        let network: serde_json::Value =
            serde_json::from_str(&self.to_checkpoint().to_json()).map_err(|e| Error::Parse(e.to_string()))?;
        let doc = serde_json::json!({
            "net": self.net,
            "controller": self.controller,
            "actions": ACTION_DELTAS,
            "network": network,
        });
        std::fs::write(path, doc.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: serde_json::Error| Error::Parse(format!("{}: {e}", path.display()));
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        let net: AbrnNetConfig = serde_json::from_value(doc["net"].clone()).map_err(bad)?;
        let controller: ControllerConfig = serde_json::from_value(doc["controller"].clone()).map_err(bad)?;
        let actions: Vec<Option<f64>> = serde_json::from_value(doc["actions"].clone()).map_err(bad)?;
        if actions != ACTION_DELTAS {
            return Err(Error::Parse(format!("{}: checkpoint uses a different action set", path.display())));
        }
        let ckpt = Checkpoint::from_json(&doc["network"].to_string())?;
        let mut model = Self::new(net, controller, 0)?;
        model.actor.load_checkpoint(&ckpt.strip_prefix("actor/"))?;
        model.critic.load_checkpoint(&ckpt.strip_prefix("critic/"))?;
        Ok(model)
    }
}

/// Learned controller driving a session.
#[derive(Debug, Clone)]
pub struct AbrnPolicy {
    actor: Network,
    cbpn: Option<CbpnModel>,
    ctl: ControllerConfig,
    mode: SelectMode,
    rng: ChaCha8Rng,
}

impl AbrnPolicy {
    pub fn new(
        actor: Network,
        cbpn: Option<CbpnModel>,
        ctl: ControllerConfig,
        mode: SelectMode,
        seed: u64,
    ) -> Result<Self, Error> {
        ctl.validate(cbpn.as_ref())?;
        Ok(Self {
            actor,
            cbpn,
            ctl,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl BitrateController for AbrnPolicy {
    fn name(&self) -> String {
        match self.ctl.ablation {
            Ablation::Full => "anableps".into(),
            other => format!("anableps-{other}"),
        }
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, Error> {
        if ctx.second < self.ctl.warmup {
            return Ok(self.ctl.start_bitrate);
        }
        let state = observe_context(ctx, self.cbpn.as_ref(), self.ctl.ablation)?;
        let probs = policy_forward(&self.actor, &state)?;
        let action = select_action(&probs, self.mode, &mut self.rng)?;
        act_in_context(ctx, action, self.ctl.start_bitrate)
    }
}

/// Uniformly random actions with the learned controller's warm-up.
#[derive(Debug, Clone)]
pub struct RandomActionPolicy {
    ctl: ControllerConfig,
    rng: ChaCha8Rng,
}

impl RandomActionPolicy {
    pub fn new(ctl: ControllerConfig, seed: u64) -> Self {
        Self {
            ctl,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl BitrateController for RandomActionPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, Error> {
        if ctx.second < self.ctl.warmup {
            return Ok(self.ctl.start_bitrate);
        }
        let action = self.rng.random_range(0..NUM_ACTIONS);
        act_in_context(ctx, action, self.ctl.start_bitrate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let p = RewardParams::default();
        assert!((reward(0.8, 0.8, 0.0, 0.0, &p) - 6.4).abs() < 1e-9);
        assert!((reward(1.0, 0.5, 0.2, 0.3, &p) - 6.35).abs() < 1e-9);
        assert_eq!(reward(0.0, 0.0, 0.0, 0.0, &p), 0.0);
        assert_eq!(reward(0.0, 0.0, 0.0, 5.0, &p), -4.0);
    }

    #[test]
    fn action_examples() {
        assert_eq!(apply_action(4000.0, 0, 0.25).unwrap(), 3000.0);
        assert_eq!(apply_action(6000.0, 5, 0.0).unwrap(), 6100.0);
        assert_eq!(apply_action(500.0, 1, 0.0).unwrap(), 300.0);
        assert!(apply_action(500.0, 6, 0.0).is_err());
    }
}
