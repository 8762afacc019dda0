//! Non-learned reference controllers.

use serde::{Deserialize, Serialize};

use crate::abrn::{MAX_BITRATE, MIN_BITRATE};
use crate::netsim::{BitrateController, DecisionContext, ReceiverObservation};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GccConfig {
    pub start_bitrate: f64,
    pub increase: f64,
    pub overuse_backoff: f64,
    pub loss_high: f64,
    pub loss_low: f64,
    /// RTT samples in the trendline fit.
    pub trend_window: usize,
    pub initial_threshold: f64,
    pub threshold_gain: f64,
    pub threshold_min: f64,
    pub threshold_max: f64,
}

impl Default for GccConfig {
    fn default() -> Self {
        Self {
            start_bitrate: 1000.0,
            increase: 1.05,
            overuse_backoff: 0.85,
            loss_high: 0.10,
            loss_low: 0.02,
            trend_window: 6,
            initial_threshold: 0.0125,
            threshold_gain: 0.05,
            threshold_min: 0.006,
            threshold_max: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorState {
    Increase,
    Hold,
    Decrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GccState {
    pub delay_rate: f64,
    pub loss_rate: f64,
    pub threshold: f64,
    pub trend: f64,
    pub detector: DetectorState,
    pub rtts: Vec<f64>,
}

impl GccState {
    pub fn new(cfg: &GccConfig) -> Self {
        Self {
            delay_rate: cfg.start_bitrate,
            loss_rate: cfg.start_bitrate,
            threshold: cfg.initial_threshold,
            trend: 0.0,
            detector: DetectorState::Hold,
            rtts: Vec::new(),
        }
    }
}

/// Least-squares slope of `ys` against their index.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}

/// One update of the delay and loss branches; returns the new target.
pub fn gcc_step(state: &mut GccState, obs: &ReceiverObservation, cfg: &GccConfig) -> f64 {
    if obs.p > cfg.loss_high {
        state.loss_rate *= 1.0 - 0.5 * obs.p;
    } else if obs.p < cfg.loss_low {
        state.loss_rate *= cfg.increase;
    }

    state.rtts.push(obs.d);
    if state.rtts.len() > cfg.trend_window {
        state.rtts.remove(0);
    }
    let slope = trend_slope(&state.rtts);
    state.trend = slope;
    if slope > state.threshold {
        state.detector = DetectorState::Decrease;
        state.delay_rate = cfg.overuse_backoff * obs.r;
    } else {
        state.detector = DetectorState::Increase;
        state.delay_rate *= cfg.increase;
    }
    state.threshold = (state.threshold + cfg.threshold_gain * (slope.abs() - state.threshold))
        .clamp(cfg.threshold_min, cfg.threshold_max);

    let target = state.delay_rate.min(state.loss_rate).clamp(MIN_BITRATE, MAX_BITRATE);
    state.delay_rate = target;
    state.loss_rate = target;
    target
}

/// GCC-style controller; updates only when a new receiver report arrives.
#[derive(Debug, Clone)]
pub struct GccPolicy {
    cfg: GccConfig,
    state: GccState,
    seen: usize,
}

impl GccPolicy {
    pub fn new(cfg: GccConfig) -> Self {
        Self {
            state: GccState::new(&cfg),
            cfg,
            seen: 0,
        }
    }

    pub fn state(&self) -> &GccState {
        &self.state
    }
}

impl BitrateController for GccPolicy {
    fn name(&self) -> String {
        "gcc".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, Error> {
        for obs in &ctx.observations[self.seen.min(ctx.observations.len())..] {
            gcc_step(&mut self.state, obs, &self.cfg);
        }
        self.seen = ctx.observations.len();
        Ok(self.state.delay_rate.min(self.state.loss_rate).clamp(MIN_BITRATE, MAX_BITRATE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPolicy {
    kbps: f64,
}

pub fn fixed_policy(kbps: f64) -> Result<FixedPolicy, Error> {
    if !(MIN_BITRATE..=MAX_BITRATE).contains(&kbps) {
        return Err(Error::Config(format!(
            "fixed bitrate {kbps} outside [{MIN_BITRATE}, {MAX_BITRATE}]"
        )));
    }
    Ok(FixedPolicy { kbps })
}

impl BitrateController for FixedPolicy {
    fn name(&self) -> String {
        format!("fixed-{}", self.kbps)
    }

    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Result<f64, Error> {
        Ok(self.kbps)
    }
}

/// Lookahead reference: a safety fraction of the worst bandwidth in the coming second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePolicy {
    safety: f64,
}

pub const DEFAULT_ORACLE_SAFETY: f64 = 0.85;

pub fn oracle_policy(safety: f64) -> Result<OraclePolicy, Error> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Config(format!("oracle safety {safety} outside (0, 1]")));
    }
    Ok(OraclePolicy { safety })
}

impl OraclePolicy {
    pub fn target_at(&self, trace: &crate::trace_io::NetworkTrace, t: f64) -> f64 {
        (self.safety * trace.min_over(t, t + 1.0)).clamp(MIN_BITRATE, MAX_BITRATE)
    }
}

impl BitrateController for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, Error> {
        Ok(self.target_at(ctx.trace, ctx.second as f64))
    }
}
