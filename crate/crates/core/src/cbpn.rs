//! Bitrate-range predictor: state assembly, the two-headed network, two-phase
//! training, and range metrics.
//!
//! A sample describes slot `k` whose target is already chosen. The state is a
//! `5 × L` matrix (rows `b, I, si, ti, dif`, oldest column first):
//!
//! * `b`: targets of slots `k-L+1 ..= k` (the last entry is the slot being predicted);
//! * `I`: I-frame presence in slots `k-L+1 .. k` plus slot `k`;
//! * `si`, `ti`: every other 4 Hz sample over the `L/2` seconds before `k`;
//! * `dif`: target minus actual of slots `k-L .. k-1`.
//!
//! The label is the actual bitrate of slot `k`. A controller that has not
//! picked the next target yet queries the model with the current target
//! repeated as the candidate.

use std::fmt::Write as _;
use std::path::Path;

use anableps_neural::{AdamConfig, AdamState, Checkpoint, Network, NetworkBuilder, Padding};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abrn::{MAX_BITRATE, MIN_BITRATE};
use crate::media::{encode_slot, EncoderConfig, EncoderState};
use crate::trace_io::{ComplexityTrace, COMPLEXITY_PERIOD};
use crate::Error;

/// Divisor applied to every bitrate-valued input and output.
pub const BITRATE_SCALE: f64 = 6100.0;
pub const STATE_ROWS: usize = 5;
pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbpnConfig {
    pub window_length: usize,
    pub si_max: f64,
    pub ti_max: f64,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for CbpnConfig {
    fn default() -> Self {
        Self {
            window_length: DEFAULT_WINDOW,
            si_max: 120.0,
            ti_max: 80.0,
            filters: 32,
            kernel: 5,
            hidden: 32,
        }
    }
}

impl CbpnConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.window_length < 2 || self.window_length % 2 != 0 {
            return Err(Error::Config(format!(
                "window_length must be an even number >= 2, got {}",
                self.window_length
            )));
        }
        if self.si_max <= 0.0 || self.ti_max <= 0.0 || self.filters == 0 || self.kernel == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid predictor config {self:?}")));
        }
        Ok(())
    }
}

/// Normalized `5 × L` state, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CbpnState {
    pub window: usize,
    pub values: Vec<f64>,
}

impl CbpnState {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.window..(r + 1) * self.window]
    }

    pub fn dif(&self) -> &[f64] {
        self.row(4)
    }
}

/// Builds the state for slot `k = targets.len() - 1`.
///
/// `targets` holds slots `0 ..= k` (the last one is the candidate for slot
/// `k`), `actuals` holds at least slots `0 .. k`.
pub fn assemble_cbpn_state(
    targets: &[f64],
    actuals: &[f64],
    video: &ComplexityTrace,
    cfg: &CbpnConfig,
) -> Result<CbpnState, Error> {
    let l = cfg.window_length;
    let k = targets
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Validation("no target for the predicted slot".into()))?;
    if k < l || actuals.len() < k {
        return Err(Error::Validation(format!(
            "need {l} s of history before the predicted slot, have {k} s of targets and {} s of actuals",
            actuals.len()
        )));
    }
    let mut values = Vec::with_capacity(STATE_ROWS * l);
    values.extend(targets[k + 1 - l..=k].iter().map(|b| b / BITRATE_SCALE));
    values.extend((k + 1 - l..=k).map(|s| if video.slot_has_iframe(s as u64) { 1.0 } else { 0.0 }));
    // Every other 4 Hz sample over the last l/2 seconds, ending with the newest.
    let per_second = (1.0 / COMPLEXITY_PERIOD).round() as usize;
    let samples = video.samples();
    let idx: Vec<usize> = (0..l)
        .map(|j| (k * per_second + 1 + 2 * j).saturating_sub(l * 2).min(samples.len() - 1))
        .collect();
    values.extend(idx.iter().map(|&i| samples[i].0 / cfg.si_max));
    values.extend(idx.iter().map(|&i| samples[i].1 / cfg.ti_max));
    values.extend((k - l..k).map(|s| (targets[s] - actuals[s]) / BITRATE_SCALE));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite predictor state".into()));
    }
    Ok(CbpnState { window: l, values })
}

/// Predicted interval `[v - e, v + e]`, kbps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitrateRange {
    pub v: f64,
    pub e: f64,
}

impl BitrateRange {
    pub fn contains(&self, x: f64) -> bool {
        self.v - self.e <= x && x <= self.v + self.e
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Baseline and error heads in one network. Baseline parameters occupy the
/// prefix `[0, baseline_len)` of the parameter vector.
#[derive(Debug, Clone)]
pub struct CbpnModel {
    pub cfg: CbpnConfig,
    net: Network,
    baseline_len: usize,
}

impl CbpnModel {
    pub fn new(cfg: CbpnConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let l = cfg.window_length;
        let mut b = NetworkBuilder::new();
        let state = b.input("state", (STATE_ROWS, l));
        let conv = b.conv1d("base_conv", state, cfg.filters, cfg.kernel, 1, Padding::Same);
        let conv = b.relu(conv);
        let gru = b.gru("base_gru", state, cfg.hidden);
        let merged = b.concat(&[conv, gru]);
        let hidden = b.dense("base_hidden", merged, cfg.hidden);
        let hidden = b.relu(hidden);
        let v = b.dense("base_out", hidden, 1);
        b.output("v", v);

        let dif = b.input("dif", (1, l));
        let econv = b.conv1d("err_conv", dif, cfg.filters, cfg.kernel, 1, Padding::Same);
        let econv = b.relu(econv);
        let emerged = b.concat(&[econv, merged]);
        let ehidden = b.dense("err_hidden", emerged, cfg.hidden);
        let ehidden = b.relu(ehidden);
        let e = b.dense("err_out", ehidden, 1);
        b.output("e", e);
        let mut net = b.build(seed)?;
        net.scale_weights("base_out", 0.1)?;
        net.scale_weights("err_out", 0.1)?;
        net.bias_mut("err_out")?[0] = -3.0;
        let baseline_len = net.view("err_conv").map(|v| v.offset).unwrap_or(net.num_params());
        Ok(Self { cfg, net, baseline_len })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn baseline_params(&self) -> &[f64] {
        &self.net.params()[..self.baseline_len]
    }

    pub fn error_params(&self) -> &[f64] {
        &self.net.params()[self.baseline_len..]
    }

    fn check(&self, state: &CbpnState) -> Result<(), Error> {
        if state.window != self.cfg.window_length || state.values.len() != STATE_ROWS * state.window {
            return Err(Error::Validation(format!(
                "state of window {} does not fit a model of window {}",
                state.window, self.cfg.window_length
            )));
        }
        Ok(())
    }

    /// Raw head outputs on the normalized scale: `(v, e_pre_softplus)`.
    fn raw(&self, state: &CbpnState) -> Result<(f64, f64, anableps_neural::Activations), Error> {
        self.check(state)?;
        let acts = self.net.forward(&[("state", &state.values), ("dif", state.dif())])?;
        let v = self.net.output(&acts, "v")?[0];
        let e = self.net.output(&acts, "e")?[0];
        Ok((v, e, acts))
    }

    pub fn predict_range(&self, state: &CbpnState) -> Result<BitrateRange, Error> {
        let (v, e, _) = self.raw(state)?;
        Ok(BitrateRange {
            v: v * BITRATE_SCALE,
            e: softplus(e) * BITRATE_SCALE,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.net.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), Error> {
        Ok(self.net.load_checkpoint(ckpt)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        let doc = serde_json::json!({ "config": self.cfg, "network": serde_json::from_str::<serde_json::Value>(&self.to_checkpoint().to_json()).map_err(|e| Error::Parse(e.to_string()))? });
        std::fs::write(path, doc.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let cfg: CbpnConfig = serde_json::from_value(doc["config"].clone()).map_err(|e| Error::Parse(e.to_string()))?;
        let ckpt = Checkpoint::from_json(&doc["network"].to_string())?;
        let mut model = Self::new(cfg, 0)?;
        model.load_checkpoint(&ckpt)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: CbpnState,
    pub actual: f64,
    /// Generating walk; used to split without leaking overlapping windows.
    pub session: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Random target walks used to generate training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub walks_per_video: usize,
    /// Probability the target is unchanged from one second to the next.
    pub hold_prob: f64,
    /// Probability of a jump to a uniformly random target.
    pub jump_prob: f64,
    /// Replace the encoder with `actual = target`.
    pub identity_encoder: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            walks_per_video: 8,
            hold_prob: 0.6,
            jump_prob: 0.1,
            identity_encoder: false,
            seed: 0,
        }
    }
}

const WALK_STEPS: [f64; 4] = [-400.0, 200.0, 400.0, 600.0];

fn next_target<R: Rng>(prev: f64, cfg: &DatasetConfig, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let next = if u < cfg.hold_prob {
        prev
    } else if u < cfg.hold_prob + cfg.jump_prob {
        rng.random_range(MIN_BITRATE..=MAX_BITRATE)
    } else if rng.random_bool(0.2) {
        prev * (1.0 - rng.random_range(0.05..0.5))
    } else {
        prev + WALK_STEPS[rng.random_range(0..WALK_STEPS.len())]
    };
    next.clamp(MIN_BITRATE, MAX_BITRATE)
}

/// Encodes random target walks over each video and cuts them into samples.
pub fn build_dataset(
    videos: &[ComplexityTrace],
    enc: &EncoderConfig,
    pcfg: &CbpnConfig,
    dcfg: &DatasetConfig,
) -> Result<Dataset, Error> {
    enc.validate()?;
    pcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let mut samples = Vec::new();
    let mut session = 0;
    for video in videos {
        let secs = video.duration().floor() as u64;
        let fps = enc.fps as u64;
        for _ in 0..dcfg.walks_per_video {
            let mut enc_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut state = EncoderState::default();
            let mut targets = Vec::with_capacity(secs as usize);
            let mut actuals = Vec::with_capacity(secs as usize);
            let mut target = rng.random_range(MIN_BITRATE..=MAX_BITRATE);
            for k in 0..secs {
                if k > 0 {
                    target = next_target(target, dcfg, &mut rng);
                }
                let flags: Vec<bool> = (0..fps).map(|i| video.is_iframe(k * fps + i)).collect();
                let ti_n = enc.normalize_ti(video.slot_mean(k).1);
                let (slot, next) = encode_slot(k, target, ti_n, &flags, state, enc, &mut enc_rng)?;
                state = next;
                targets.push(target);
                actuals.push(if dcfg.identity_encoder { target } else { slot.actual });
                if k as usize >= pcfg.window_length {
                    samples.push(Sample {
                        state: assemble_cbpn_state(&targets, &actuals, video, pcfg)?,
                        actual: *actuals.last().unwrap(),
                        session,
                    });
                }
            }
            session += 1;
        }
    }
    Ok(Dataset { samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits by session: the last `holdout` fraction of sessions (after a
    /// seeded shuffle) form the second part.
    pub fn split_by_session(&self, holdout: f64, seed: u64) -> (Dataset, Dataset) {
        let mut sessions: Vec<usize> = self.samples.iter().map(|s| s.session).collect();
        sessions.dedup();
        sessions.sort_unstable();
        sessions.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sessions.shuffle(&mut rng);
        let n_hold = ((sessions.len() as f64 * holdout).round() as usize).clamp(1.min(sessions.len()), sessions.len());
        let held: std::collections::BTreeSet<usize> = sessions[sessions.len() - n_hold..].iter().copied().collect();
        let (mut a, mut b) = (Dataset::default(), Dataset::default());
        for s in &self.samples {
            if held.contains(&s.session) {
                b.samples.push(s.clone());
            } else {
                a.samples.push(s.clone());
            }
        }
        (a, b)
    }

    pub fn to_csv(&self) -> String {
        let l = self.samples.first().map_or(DEFAULT_WINDOW, |s| s.state.window);
        let mut out = String::from("session");
        for row in ["b", "i", "si", "ti", "dif"] {
            for j in 0..l {
                write!(out, ",{row}{j}").unwrap();
            }
        }
        out.push_str(",actual_kbps\n");
        for s in &self.samples {
            write!(out, "{}", s.session).unwrap();
            for v in &s.state.values {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", s.actual).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, Error> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let width = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.len();
        if width < 2 + STATE_ROWS || (width - 2) % STATE_ROWS != 0 {
            return Err(Error::Parse(format!("dataset header has {width} columns")));
        }
        let l = (width - 2) / STATE_ROWS;
        let mut samples = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            let nums = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            samples.push(Sample {
                session: nums[0] as usize,
                state: CbpnState {
                    window: l,
                    values: nums[1..width - 1].to_vec(),
                },
                actual: nums[width - 1],
            });
        }
        Ok(Self { samples })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last epoch as a fraction of the initial one (linear decay).
    pub final_lr_fraction: f64,
    /// Target cover ratio of the error head.
    pub coverage: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn adam_at(&self, epoch: usize) -> AdamConfig {
        let progress = if self.epochs > 1 {
            epoch as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        AdamConfig {
            lr: self.adam.lr * (1.0 - (1.0 - self.final_lr_fraction) * progress),
            ..self.adam
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.1,
            coverage: 0.85,
            seed: 0,
        }
    }
}

/// Mean loss per epoch.
pub type TrainingCurve = Vec<f64>;

fn check_loss(loss: f64, epoch: usize) -> Result<(), Error> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")))
    }
}

/// Fits the baseline head by mean squared error on the normalized scale.
pub fn train_baseline(model: &mut CbpnModel, data: &Dataset, tc: &TrainConfig) -> Result<TrainingCurve, Error> {
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    for s in &data.samples {
        model.check(&s.state)?;
    }
    let mean_label = data.samples.iter().map(|s| s.actual).sum::<f64>() / data.len() as f64 / BITRATE_SCALE;
    model.net.bias_mut("base_out")?[0] = mean_label;
    let n_base = model.baseline_len;
    let mut adam = AdamState::new(n_base);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut grads = vec![0.0; model.net.num_params()];
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let adam_cfg = tc.adam_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size.max(1)) {
            grads.fill(0.0);
            for &i in batch {
                let s = &data.samples[i];
                let (v, _, acts) = model.raw(&s.state)?;
                let err = v - s.actual / BITRATE_SCALE;
                total += err * err;
                let g = [2.0 * err / batch.len() as f64];
                model.net.backward(&acts, &[("v", &g)], &mut grads)?;
            }
            let mut params = model.net.params()[..n_base].to_vec();
            adam.update(&adam_cfg, &mut params, &grads[..n_base]);
            model.net.params_mut()[..n_base].copy_from_slice(&params);
        }
        let loss = total / data.len() as f64;
        check_loss(loss, epoch)?;
        curve.push(loss);
    }
    Ok(curve)
}

/// Fits the error head by pinball loss at the coverage quantile of
/// `|actual - v|`, leaving the baseline parameters untouched.
pub fn train_error(model: &mut CbpnModel, data: &Dataset, tc: &TrainConfig) -> Result<TrainingCurve, Error> {
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    if !(0.0 < tc.coverage && tc.coverage < 1.0) {
        return Err(Error::Config(format!("coverage {} outside (0, 1)", tc.coverage)));
    }
    let c = tc.coverage;
    let n_base = model.baseline_len;
    let n = model.net.num_params();
    let mut adam = AdamState::new(n - n_base);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut grads = vec![0.0; n];
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let adam_cfg = tc.adam_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size.max(1)) {
            grads.fill(0.0);
            for &i in batch {
                let s = &data.samples[i];
                let (v, raw_e, acts) = model.raw(&s.state)?;
                let rho = (s.actual / BITRATE_SCALE - v).abs();
                let e = softplus(raw_e);
                let (loss, de) = if rho > e {
                    (c * (rho - e), -c)
                } else {
                    ((1.0 - c) * (e - rho), 1.0 - c)
                };
                total += loss;
                let g = [de * sigmoid(raw_e) / batch.len() as f64];
                model.net.backward(&acts, &[("e", &g)], &mut grads)?;
            }
            let mut params = model.net.params()[n_base..].to_vec();
            adam.update(&adam_cfg, &mut params, &grads[n_base..]);
            model.net.params_mut()[n_base..].copy_from_slice(&params);
        }
        let loss = total / data.len() as f64;
        check_loss(loss, epoch)?;
        curve.push(loss);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMetrics {
    /// Mean absolute difference on the `÷6100` scale.
    pub mad: f64,
    /// Pearson correlation of `v` and actual; `None` when either has zero variance.
    pub pcc: Option<f64>,
    /// Share of actuals inside `[v - e, v + e]`.
    pub cr: f64,
}

/// MAD, PCC and cover ratio of predicted ranges against actual bitrates (kbps).
pub fn range_metrics(preds: &[BitrateRange], actual: &[f64]) -> Result<RangeMetrics, Error> {
    if preds.is_empty() || preds.len() != actual.len() {
        return Err(Error::Validation(format!(
            "need equal non-empty series, got {} predictions and {} actuals",
            preds.len(),
            actual.len()
        )));
    }
    let n = preds.len() as f64;
    let mad = preds.iter().zip(actual).map(|(p, a)| (p.v - a).abs()).sum::<f64>() / n / BITRATE_SCALE;
    let cr = preds.iter().zip(actual).filter(|(p, a)| p.contains(**a)).count() as f64 / n;
    let mv = preds.iter().map(|p| p.v).sum::<f64>() / n;
    let ma = actual.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, a) in preds.iter().zip(actual) {
        let (dx, dy) = (p.v - mv, a - ma);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let pcc = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    Ok(RangeMetrics { mad, pcc, cr })
}

pub fn predict_all(model: &CbpnModel, data: &Dataset) -> Result<Vec<BitrateRange>, Error> {
    data.samples.iter().map(|s| model.predict_range(&s.state)).collect()
}

pub fn eval_metrics(model: &CbpnModel, data: &Dataset) -> Result<RangeMetrics, Error> {
    let preds = predict_all(model, data)?;
    let actual: Vec<f64> = data.samples.iter().map(|s| s.actual).collect();
    range_metrics(&preds, &actual)
}

/// MAD of predicting each slot's actual bitrate by its own target.
pub fn last_target_mad(data: &Dataset) -> f64 {
    let n = data.len().max(1) as f64;
    data.samples
        .iter()
        .map(|s| (s.state.row(0)[s.state.window - 1] * BITRATE_SCALE - s.actual).abs())
        .sum::<f64>()
        / n
        / BITRATE_SCALE
}
