//! Stochastic VBR encoder model, packetization, and the quality proxy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Error;

/// AR(1) log-multiplier parameters of the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fluctuation {
    pub phi: f64,
    pub sigma: f64,
    pub beta_ti: f64,
}

impl Default for Fluctuation {
    fn default() -> Self {
        Self {
            phi: 0.6,
            sigma: 0.15,
            beta_ti: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub fps: u32,
    pub gop_frames: u32,
    pub vbv_multiplier: f64,
    pub min_bitrate: f64,
    pub max_bitrate: f64,
    pub iframe_weight: f64,
    pub fluct: Fluctuation,
    pub rate_lag: bool,
    /// Normalizers mapping raw TI (and SI) onto `[0, 1]`.
    pub si_max: f64,
    pub ti_max: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            fps: 25,
            gop_frames: 125,
            vbv_multiplier: 2.0,
            min_bitrate: 300.0,
            max_bitrate: 6100.0,
            iframe_weight: 6.0,
            fluct: Fluctuation::default(),
            rate_lag: true,
            si_max: 120.0,
            ti_max: 80.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let f = &self.fluct;
        let ok = self.fps > 0
            && self.gop_frames > 0
            && 0.0 < self.min_bitrate
            && self.min_bitrate < self.max_bitrate
            && self.iframe_weight >= 1.0
            && (0.0..1.0).contains(&f.phi)
            && f.sigma >= 0.0
            && self.vbv_multiplier >= 1.0
            && self.si_max > 0.0
            && self.ti_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid encoder config {self:?}")))
        }
    }

    pub fn clamp_bitrate(&self, kbps: f64) -> f64 {
        kbps.clamp(self.min_bitrate, self.max_bitrate)
    }

    pub fn normalize_si(&self, si: f64) -> f64 {
        (si / self.si_max).clamp(0.0, 1.0)
    }

    pub fn normalize_ti(&self, ti: f64) -> f64 {
        (ti / self.ti_max).clamp(0.0, 1.0)
    }
}

/// Encoder memory carried between slots.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EncoderState {
    /// Target of the previous slot, `None` before the first slot.
    pub prev_target: Option<f64>,
    /// AR(1) log-multiplier.
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub capture_time: f64,
    pub size: u32,
    pub is_iframe: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSlot {
    pub slot_index: u64,
    pub target: f64,
    pub effective_target: f64,
    pub actual: f64,
    pub frames: Vec<Frame>,
}

impl EncodedSlot {
    pub fn total_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.size as u64).sum()
    }

    pub fn has_iframe(&self) -> bool {
        self.frames.iter().any(|f| f.is_iframe)
    }
}

/// Encodes one 1 s slot.
///
/// `ti_n` is the slot's normalized temporal complexity and `iframes[i]` marks
/// frame `i` of the slot as an I frame. Exactly one standard normal is drawn
/// from `rng` per call, so two runs sharing a seed see identical noise even
/// when their targets differ.
pub fn encode_slot<R: Rng + ?Sized>(
    slot_index: u64,
    target: f64,
    ti_n: f64,
    iframes: &[bool],
    state: EncoderState,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<(EncodedSlot, EncoderState), Error> {
    if !(cfg.min_bitrate..=cfg.max_bitrate).contains(&target) {
        return Err(Error::Validation(format!(
            "target {target} kbps outside [{}, {}]",
            cfg.min_bitrate, cfg.max_bitrate
        )));
    }
    if iframes.len() != cfg.fps as usize {
        return Err(Error::Validation(format!(
            "expected {} frame flags, got {}",
            cfg.fps,
            iframes.len()
        )));
    }
    let ti_n = ti_n.clamp(0.0, 1.0);
    let f = &cfg.fluct;
    let eps: f64 = rng.sample(StandardNormal);
    let z = f.phi * state.z + f.sigma * (1.0 + ti_n) * eps;
    let b_eff = match (cfg.rate_lag, state.prev_target) {
        (true, Some(prev)) => 0.5 * (target + prev),
        _ => target,
    };
    let g = z.exp() * (1.0 + f.beta_ti * (ti_n - 0.5));
    let actual_raw = (b_eff * g).clamp(0.5 * b_eff, cfg.vbv_multiplier * b_eff);
    let lo = (0.5 * b_eff * 125.0).ceil();
    let hi = (cfg.vbv_multiplier * b_eff * 125.0).floor();
    let total = (actual_raw * 125.0).round().clamp(lo, hi) as u64;
    let actual = total as f64 / 125.0;

    let weights: Vec<f64> = iframes
        .iter()
        .map(|&i| if i { cfg.iframe_weight } else { 1.0 })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut frames = Vec::with_capacity(weights.len());
    let mut cum = 0.0;
    let mut emitted = 0u64;
    for (i, (&w, &is_iframe)) in weights.iter().zip(iframes).enumerate() {
        cum += w;
        let upto = if i + 1 == weights.len() {
            total
        } else {
            (total as f64 * cum / wsum).round() as u64
        };
        frames.push(Frame {
            capture_time: slot_index as f64 + i as f64 / cfg.fps as f64,
            size: (upto - emitted) as u32,
            is_iframe,
        });
        emitted = upto;
    }
    let slot = EncodedSlot {
        slot_index,
        target,
        effective_target: b_eff,
        actual,
        frames,
    };
    Ok((
        slot,
        EncoderState {
            prev_target: Some(target),
            z,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityModel {
    pub theta0: f64,
    pub si_max: f64,
    pub ti_max: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self {
            theta0: 500.0,
            si_max: 120.0,
            ti_max: 80.0,
        }
    }
}

/// Bitrate at which the quality proxy saturates.
pub const QUALITY_REFERENCE_KBPS: f64 = 6100.0;

/// Normalized quality of one played second. Concave in `played`, lower for
/// complex content, clamped to `[0, 1]`.
pub fn quality_score(played_kbps: f64, si_n: f64, ti_n: f64, qm: &QualityModel) -> f64 {
    if played_kbps <= 0.0 {
        return 0.0;
    }
    let theta = qm.theta0 * (1.0 + (si_n + ti_n) / 2.0);
    ((1.0 + played_kbps / theta).ln() / (1.0 + QUALITY_REFERENCE_KBPS / theta).ln()).clamp(0.0, 1.0)
}

pub const DEFAULT_MTU: u32 = 1200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub frame_id: u64,
    pub index: u32,
    pub count: u32,
    pub size: u32,
    pub capture_time: f64,
}

/// Splits a frame into MTU-sized packets; the last carries the remainder.
pub fn packetize(frame_id: u64, size: u32, capture_time: f64, mtu: u32) -> Vec<Packet> {
    let mtu = mtu.max(1);
    let count = size.div_ceil(mtu).max(1);
    (0..count)
        .map(|index| Packet {
            frame_id,
            index,
            count,
            size: if index + 1 == count { size - mtu * index } else { mtu },
            capture_time,
        })
        .collect()
}
