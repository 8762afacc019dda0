//! Network bandwidth traces, video complexity traces, and SI/TI extraction.
//!
//! File formats (UTF-8 CSV):
//!
//! * network trace: header `time_s,bandwidth_kbps`, one sample per row;
//! * complexity trace: header `time_s,si,ti`, one sample every 0.25 s;
//! * I-frame sidecar (`<name>.iframes.csv`): header `iframe_times_s`, one
//!   capture timestamp per row, then a `[meta]` line followed by `fps,<n>`
//!   and `gop_frames,<n>` rows.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Fixed spacing of network trace samples, seconds.
pub const TRACE_GRANULARITY: f64 = 0.5;
/// Spacing of complexity samples, seconds (4 samples per second).
pub const COMPLEXITY_PERIOD: f64 = 0.25;
/// Floor applied to synthetic bandwidth values, kbps.
pub const MIN_SYNTHETIC_KBPS: f64 = 100.0;

const GRID_TOL: f64 = 1e-6;

/// Available bandwidth sampled every [`TRACE_GRANULARITY`] seconds. Sample `i`
/// holds over `[start + i * 0.5, start + (i + 1) * 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTrace {
    start: f64,
    kbps: Vec<f64>,
}

impl NetworkTrace {
    pub fn new(start: f64, kbps: Vec<f64>) -> Result<Self, Error> {
        if kbps.len() < 2 {
            return Err(Error::Validation("network trace needs at least 2 samples".into()));
        }
        if let Some((i, v)) = kbps.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Validation(format!(
                "bandwidth must be positive, sample {i} is {v}"
            )));
        }
        if !start.is_finite() {
            return Err(Error::Validation("non-finite trace start".into()));
        }
        Ok(Self { start, kbps })
    }

    /// Constant-bandwidth trace covering `duration` seconds.
    pub fn constant(kbps: f64, duration: f64) -> Result<Self, Error> {
        let n = ((duration / TRACE_GRANULARITY).ceil() as usize).max(2);
        Self::new(0.0, vec![kbps; n])
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn samples(&self) -> &[f64] {
        &self.kbps
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.kbps.len()).map(|i| self.start + i as f64 * TRACE_GRANULARITY)
    }

    /// Seconds of bandwidth described by the trace.
    pub fn duration(&self) -> f64 {
        self.kbps.len() as f64 * TRACE_GRANULARITY
    }

    fn index_at(&self, t: f64) -> usize {
        let rel = ((t - self.start) / TRACE_GRANULARITY + 1e-9).floor();
        if rel <= 0.0 {
            0
        } else {
            (rel as usize).min(self.kbps.len() - 1)
        }
    }

    /// Bandwidth in effect at time `t` (held constant past either end).
    pub fn kbps_at(&self, t: f64) -> f64 {
        self.kbps[self.index_at(t)]
    }

    /// End of the sample interval containing `t`, or `None` past the last sample.
    pub fn next_change_after(&self, t: f64) -> Option<f64> {
        let i = self.index_at(t);
        (i + 1 < self.kbps.len()).then(|| self.start + (i + 1) as f64 * TRACE_GRANULARITY)
    }

    /// Same samples with the first one moved to time zero.
    pub fn rebased(&self) -> Self {
        Self {
            start: 0.0,
            kbps: self.kbps.clone(),
        }
    }

    /// Minimum bandwidth over the samples overlapping `[t0, t1)`.
    pub fn min_over(&self, t0: f64, t1: f64) -> f64 {
        let i0 = self.index_at(t0);
        let i1 = self.index_at((t1 - 1e-9).max(t0));
        self.kbps[i0..=i1].iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.kbps.iter().sum::<f64>() / self.kbps.len() as f64
    }

    /// Population standard deviation of the samples.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.kbps.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.kbps.len() as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_s,bandwidth_kbps\n");
        for (t, v) in self.times().zip(&self.kbps) {
            writeln!(s, "{t},{v}").unwrap();
        }
        s
    }
}

fn parse_f64(field: Option<&str>, line: usize, what: &str) -> Result<f64, Error> {
    let raw = field.ok_or_else(|| Error::Parse(format!("line {line}: missing {what}")))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} `{raw}`")))
}

fn read_rows(text: &str, header: &[&str]) -> Result<Vec<Vec<f64>>, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let hdr = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
    let got: Vec<&str> = hdr.iter().collect();
    if got != header {
        return Err(Error::Parse(format!(
            "expected header `{}`, found `{}`",
            header.join(","),
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, got {}",
                header.len(),
                rec.len()
            )));
        }
        let row = header
            .iter()
            .enumerate()
            .map(|(j, name)| parse_f64(rec.get(j), line, name))
            .collect::<Result<Vec<_>, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {line}: non-finite value")));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parses network-trace CSV text, resampling onto the 0.5 s grid when the
/// source spacing differs.
pub fn parse_network_trace(text: &str) -> Result<NetworkTrace, Error> {
    let rows = read_rows(text, &["time_s", "bandwidth_kbps"])?;
    if rows.len() < 2 {
        return Err(Error::Validation("network trace needs at least 2 samples".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r[1] <= 0.0 {
            return Err(Error::Validation(format!(
                "row {}: bandwidth {} is not positive",
                i + 1,
                r[1]
            )));
        }
        if i > 0 && r[0] <= rows[i - 1][0] {
            return Err(Error::Validation(format!(
                "row {}: time {} does not increase",
                i + 1,
                r[0]
            )));
        }
    }
    let on_grid = rows
        .windows(2)
        .all(|w| ((w[1][0] - w[0][0]) - TRACE_GRANULARITY).abs() < GRID_TOL);
    let start = rows[0][0];
    if on_grid {
        return NetworkTrace::new(start, rows.iter().map(|r| r[1]).collect());
    }
    let end = rows[rows.len() - 1][0];
    let n = ((end - start) / TRACE_GRANULARITY + GRID_TOL).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let t = start + i as f64 * TRACE_GRANULARITY;
        while j + 1 < rows.len() - 1 && rows[j + 1][0] <= t {
            j += 1;
        }
        let (t0, v0, t1, v1) = (rows[j][0], rows[j][1], rows[j + 1][0], rows[j + 1][1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        out.push(v0 + (v1 - v0) * w);
    }
    NetworkTrace::new(start, out)
}

pub fn load_network_trace(path: impl AsRef<Path>) -> Result<NetworkTrace, Error> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_network_trace(&text)
}

pub fn save_network_trace(trace: &NetworkTrace, path: impl AsRef<Path>) -> Result<(), Error> {
    fs::write(path.as_ref(), trace.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceModel {
    /// Two-state Markov chain switching between `mean ± std`.
    MarkovStep,
    /// First-order autoregressive process around the mean.
    Ar1,
    /// Deterministic toggle between `mean ± std` every 5 s.
    SquareWave,
}

impl std::str::FromStr for TraceModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "markov-step" => Ok(Self::MarkovStep),
            "ar1" => Ok(Self::Ar1),
            "square-wave" => Ok(Self::SquareWave),
            other => Err(Error::Config(format!("unknown trace model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceGenSpec {
    pub duration: f64,
    pub mean_bw: f64,
    pub std_bw: f64,
    pub model: TraceModel,
    pub seed: u64,
}

const MARKOV_SWITCH_PROB: f64 = 0.08;
const AR1_COEF: f64 = 0.9;
const SQUARE_HALF_PERIOD: usize = 10;

/// Generates a synthetic bandwidth trace. The raw process is affinely
/// rescaled to the requested sample mean and standard deviation, then
/// floored at [`MIN_SYNTHETIC_KBPS`].
pub fn generate_synthetic_network_trace(spec: &TraceGenSpec) -> Result<NetworkTrace, Error> {
    if !(spec.duration > 0.0) {
        return Err(Error::Validation("duration must be positive".into()));
    }
    if !(spec.std_bw >= 0.0 && spec.mean_bw > spec.std_bw) {
        return Err(Error::Validation(format!(
            "need mean_bw > std_bw >= 0, got mean {} std {}",
            spec.mean_bw, spec.std_bw
        )));
    }
    let n = ((spec.duration / TRACE_GRANULARITY).ceil() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut raw: Vec<f64> = match spec.model {
        TraceModel::SquareWave => (0..n)
            .map(|i| if (i / SQUARE_HALF_PERIOD) % 2 == 0 { 1.0 } else { -1.0 })
            .collect(),
        TraceModel::MarkovStep => {
            let mut state = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (0..n)
                .map(|_| {
                    if rng.random_bool(MARKOV_SWITCH_PROB) {
                        state = -state;
                    }
                    state
                })
                .collect()
        }
        TraceModel::Ar1 => {
            let mut x: f64 = rng.sample(StandardNormal);
            (0..n)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    x = AR1_COEF * x + (1.0 - AR1_COEF * AR1_COEF).sqrt() * e;
                    x
                })
                .collect()
        }
    };
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    if s == 0.0 {
        // A chain that never switched: fall back to alternating halves.
        raw = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    }
    let m = raw.iter().sum::<f64>() / n as f64;
    let s = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    let kbps = raw
        .iter()
        .map(|v| {
            let z = if s > 0.0 { (v - m) / s } else { 0.0 };
            (spec.mean_bw + spec.std_bw * z).max(MIN_SYNTHETIC_KBPS)
        })
        .collect();
    NetworkTrace::new(0.0, kbps)
}

/// Per-sample content complexity and the I-frame schedule of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityTrace {
    start: f64,
    /// `(si, ti)` every [`COMPLEXITY_PERIOD`] seconds.
    samples: Vec<(f64, f64)>,
    fps: u32,
    gop_frames: u32,
    /// Frame indices (relative to `start`) carrying an I frame.
    iframes: BTreeSet<u64>,
}

impl ComplexityTrace {
    /// Builds a trace with I frames every `gop_frames` starting at frame 0.
    pub fn with_regular_gop(samples: Vec<(f64, f64)>, fps: u32, gop_frames: u32) -> Result<Self, Error> {
        let frames = Self::frame_count(samples.len(), fps);
        let iframes = (0..frames).step_by(gop_frames.max(1) as usize).collect();
        Self::new(0.0, samples, fps, gop_frames, iframes)
    }

    fn frame_count(n_samples: usize, fps: u32) -> u64 {
        (n_samples as f64 * COMPLEXITY_PERIOD * fps as f64).round() as u64
    }

    fn new(
        start: f64,
        samples: Vec<(f64, f64)>,
        fps: u32,
        gop_frames: u32,
        iframes: BTreeSet<u64>,
    ) -> Result<Self, Error> {
        if samples.is_empty() {
            return Err(Error::Validation("complexity trace is empty".into()));
        }
        if fps == 0 || gop_frames == 0 {
            return Err(Error::Validation("fps and gop_frames must be positive".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, (si, ti))| !(si.is_finite() && ti.is_finite() && *si >= 0.0 && *ti >= 0.0))
        {
            return Err(Error::Validation(format!(
                "sample {i}: si/ti must be finite and non-negative, got {s:?}"
            )));
        }
        let frames = Self::frame_count(samples.len(), fps);
        if let Some(&f) = iframes.iter().next_back() {
            if f >= frames {
                return Err(Error::Validation(format!(
                    "I frame {f} beyond the last frame {}",
                    frames.saturating_sub(1)
                )));
            }
        }
        let v: Vec<u64> = iframes.iter().copied().collect();
        if let Some(w) = v.windows(2).find(|w| w[1] - w[0] != gop_frames as u64) {
            return Err(Error::Validation(format!(
                "I frames at frames {} and {} are not one GoP ({gop_frames} frames) apart",
                w[0], w[1]
            )));
        }
        Ok(Self {
            start,
            samples,
            fps,
            gop_frames,
            iframes,
        })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn gop_frames(&self) -> u32 {
        self.gop_frames
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * COMPLEXITY_PERIOD
    }

    pub fn iframe_times(&self) -> Vec<f64> {
        self.iframes
            .iter()
            .map(|&f| self.start + f as f64 / self.fps as f64)
            .collect()
    }

    pub fn is_iframe(&self, frame: u64) -> bool {
        self.iframes.contains(&frame)
    }

    /// Whether any frame captured during second `slot` is an I frame.
    pub fn slot_has_iframe(&self, slot: u64) -> bool {
        let f0 = slot * self.fps as u64;
        self.iframes.range(f0..f0 + self.fps as u64).next().is_some()
    }

    /// Samples whose timestamps fall in `[t0, t1)`.
    pub fn samples_between(&self, t0: f64, t1: f64) -> &[(f64, f64)] {
        let idx = |t: f64| {
            (((t - self.start) / COMPLEXITY_PERIOD - 1e-9).ceil().max(0.0) as usize).min(self.samples.len())
        };
        let (a, b) = (idx(t0), idx(t1));
        &self.samples[a..b.max(a)]
    }

    /// Mean `(si, ti)` over second `slot`; clamps to the last sample past the end.
    pub fn slot_mean(&self, slot: u64) -> (f64, f64) {
        let s = self.samples_between(slot as f64, slot as f64 + 1.0);
        if s.is_empty() {
            return *self.samples.last().unwrap();
        }
        let n = s.len() as f64;
        (
            s.iter().map(|v| v.0).sum::<f64>() / n,
            s.iter().map(|v| v.1).sum::<f64>() / n,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_s,si,ti\n");
        for (i, (si, ti)) in self.samples.iter().enumerate() {
            writeln!(s, "{},{si},{ti}", self.start + i as f64 * COMPLEXITY_PERIOD).unwrap();
        }
        s
    }

    pub fn sidecar_csv(&self) -> String {
        let mut s = String::from("iframe_times_s\n");
        for t in self.iframe_times() {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "[meta]\nfps,{}\ngop_frames,{}", self.fps, self.gop_frames).unwrap();
        s
    }
}

/// Frames per second and GoP length assumed when no sidecar is present.
pub const DEFAULT_FPS: u32 = 25;
pub const DEFAULT_GOP_FRAMES: u32 = 125;

struct Sidecar {
    times: Vec<f64>,
    fps: u32,
    gop_frames: u32,
}

fn parse_sidecar(text: &str) -> Result<Sidecar, Error> {
    let mut lines = text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "iframe_times_s")) => {}
        _ => return Err(Error::Parse("sidecar must start with `iframe_times_s`".into())),
    }
    let mut times = Vec::new();
    let mut in_meta = false;
    let (mut fps, mut gop) = (None, None);
    for (i, line) in lines {
        if line == "[meta]" {
            in_meta = true;
            continue;
        }
        if !in_meta {
            times.push(parse_f64(Some(line), i + 1, "iframe time")?);
            continue;
        }
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key,value", i + 1)))?;
        let v: u32 = v
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad integer `{v}`", i + 1)))?;
        match k.trim() {
            "fps" => fps = Some(v),
            "gop_frames" => gop = Some(v),
            other => return Err(Error::Parse(format!("line {}: unknown meta key `{other}`", i + 1))),
        }
    }
    Ok(Sidecar {
        times,
        fps: fps.ok_or_else(|| Error::Parse("sidecar meta lacks fps".into()))?,
        gop_frames: gop.ok_or_else(|| Error::Parse("sidecar meta lacks gop_frames".into()))?,
    })
}

/// Parses a complexity CSV plus an optional I-frame sidecar.
pub fn parse_complexity_trace(text: &str, sidecar: Option<&str>) -> Result<ComplexityTrace, Error> {
    let rows = read_rows(text, &["time_s", "si", "ti"])?;
    if rows.is_empty() {
        return Err(Error::Validation("complexity trace is empty".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r[1] < 0.0 || r[2] < 0.0 {
            return Err(Error::Validation(format!("row {}: negative si/ti", i + 1)));
        }
        if i > 0 && ((r[0] - rows[i - 1][0]) - COMPLEXITY_PERIOD).abs() > GRID_TOL {
            return Err(Error::Validation(format!(
                "row {}: samples must be spaced {COMPLEXITY_PERIOD} s apart",
                i + 1
            )));
        }
    }
    let start = rows[0][0];
    let samples: Vec<(f64, f64)> = rows.iter().map(|r| (r[1], r[2])).collect();
    let Some(sidecar) = sidecar else {
        let mut t = ComplexityTrace::with_regular_gop(samples, DEFAULT_FPS, DEFAULT_GOP_FRAMES)?;
        t.start = start;
        return Ok(t);
    };
    let sc = parse_sidecar(sidecar)?;
    let mut iframes = BTreeSet::new();
    for t in sc.times {
        let f = (t - start) * sc.fps as f64;
        if f < -GRID_TOL || (f - f.round()).abs() > GRID_TOL {
            return Err(Error::Validation(format!(
                "I frame at {t} s is not on the {} fps frame grid",
                sc.fps
            )));
        }
        iframes.insert(f.round() as u64);
    }
    ComplexityTrace::new(start, samples, sc.fps, sc.gop_frames, iframes)
}

/// Sidecar path for a complexity file: `clip.csv` → `clip.iframes.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.iframes.csv"))
}

/// Loads a complexity trace; a sibling `.iframes.csv` sidecar is used when present.
pub fn load_complexity_trace(path: impl AsRef<Path>) -> Result<ComplexityTrace, Error> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sc_path = sidecar_path(path);
    let sidecar = if sc_path.exists() {
        Some(fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?)
    } else {
        None
    };
    parse_complexity_trace(&text, sidecar.as_deref())
}

pub fn save_complexity_trace(trace: &ComplexityTrace, path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))?;
    let sc = sidecar_path(path);
    fs::write(&sc, trace.sidecar_csv()).map_err(|e| Error::io(&sc, e))
}

/// Synthetic video: scenes of 3–10 s with their own SI/TI levels plus
/// per-sample jitter, I frames every GoP.
pub fn generate_synthetic_complexity_trace(
    duration: f64,
    fps: u32,
    gop_frames: u32,
    seed: u64,
) -> Result<ComplexityTrace, Error> {
    if !(duration > 0.0) {
        return Err(Error::Validation("duration must be positive".into()));
    }
    let n = (duration / COMPLEXITY_PERIOD).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per-video motion level, skewed toward static talking-head content.
    let activity: f64 = rng.random_range(0.0f64..1.0).powi(2);
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let scene_len = rng.random_range(12..=40usize);
        let si_level = rng.random_range(15.0..110.0);
        let ti_level: f64 = (activity * 60.0 + rng.random_range(-12.0..20.0)).clamp(2.0, 78.0);
        for _ in 0..scene_len {
            let si: f64 = si_level + 4.0 * rng.sample::<f64, _>(StandardNormal);
            let ti: f64 = ti_level + 3.0 * rng.sample::<f64, _>(StandardNormal);
            samples.push((si.max(0.0), ti.max(0.0)));
        }
    }
    samples.truncate(n);
    ComplexityTrace::with_regular_gop(samples, fps, gop_frames)
}

/// Raw 8-bit luminance frames.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub frames: Vec<Vec<u8>>,
}

impl FrameSequence {
    /// Splits a concatenation of `width * height` luminance planes.
    pub fn from_raw(bytes: &[u8], width: usize, height: usize, fps: f64) -> Result<Self, Error> {
        let plane = width * height;
        if plane == 0 || bytes.len() % plane != 0 {
            return Err(Error::Validation(format!(
                "raw file of {} bytes is not a whole number of {width}x{height} planes",
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            fps,
            frames: bytes.chunks(plane).map(<[u8]>::to_vec).collect(),
        })
    }
}

/// Analysis resolution for SI/TI.
pub const SITI_WIDTH: usize = 192;
pub const SITI_HEIGHT: usize = 108;
/// Analysis frame rate for SI/TI.
pub const SITI_FPS: f64 = 4.0;

/// Box-filter resampling with fractional pixel coverage.
fn area_resample(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let spans = |o: usize, scale: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
        let mut v = Vec::new();
        let mut i = a.floor() as usize;
        while (i as f64) < b && i < n {
            let cover = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
            if cover > 0.0 {
                v.push((i, cover));
            }
            i += 1;
        }
        v
    };
    let xs: Vec<_> = (0..ow).map(|x| spans(x, sx, w)).collect();
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        let ys = spans(y, sy, h);
        for x in 0..ow {
            let mut acc = 0.0;
            for &(iy, wy) in &ys {
                for &(ix, wx) in &xs[x] {
                    acc += src[iy * w + ix] * wx * wy;
                }
            }
            out[y * ow + x] = acc / (sx * sy);
        }
    }
    out
}

fn population_std(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = v.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        return 0.0;
    }
    let m = sum / n as f64;
    (v.map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Standard deviation of the Sobel gradient magnitude over interior pixels.
pub fn sobel_si(plane: &[f64], w: usize, h: usize) -> f64 {
    if w < 3 || h < 3 {
        return 0.0;
    }
    let p = |x: usize, y: usize| plane[y * w + x];
    let mut mags = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (p(x + 1, y - 1) + 2.0 * p(x + 1, y) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x - 1, y) + p(x - 1, y + 1));
            let gy = (p(x - 1, y + 1) + 2.0 * p(x, y + 1) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x, y - 1) + p(x + 1, y - 1));
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    population_std(mags.iter().copied())
}

/// Per-sample SI/TI at 4 samples per second.
///
/// Frames larger than 192×108 are area-averaged down to that size (smaller
/// frames are analysed at native size); frames are then decimated to 4 FPS by
/// dropping. Each retained frame yields `(time, si, ti)` where `time` is the
/// nominal sample time `j * 0.25` and `ti` is the standard deviation of the
/// difference with the previous retained frame (0 for the first).
pub fn compute_si_ti(seq: &FrameSequence) -> Result<Vec<(f64, f64, f64)>, Error> {
    if seq.frames.is_empty() {
        return Err(Error::Validation("frame sequence is empty".into()));
    }
    if !(seq.fps > 0.0) {
        return Err(Error::Validation("fps must be positive".into()));
    }
    let plane = seq.width * seq.height;
    if let Some((i, f)) = seq.frames.iter().enumerate().find(|(_, f)| f.len() != plane) {
        return Err(Error::Validation(format!(
            "frame {i} has {} pixels, expected {}x{}",
            f.len(),
            seq.width,
            seq.height
        )));
    }
    let downsample = seq.width > SITI_WIDTH && seq.height > SITI_HEIGHT;
    let (ow, oh) = if downsample {
        (SITI_WIDTH, SITI_HEIGHT)
    } else {
        (seq.width, seq.height)
    };
    let count = (seq.frames.len() as f64 * SITI_FPS / seq.fps - 1e-9).ceil() as usize;
    let mut out = Vec::with_capacity(count);
    let mut prev: Option<Vec<f64>> = None;
    for j in 0..count {
        let idx = ((j as f64 * seq.fps / SITI_FPS) + 1e-9).floor() as usize;
        let raw: Vec<f64> = seq.frames[idx.min(seq.frames.len() - 1)].iter().map(|&v| v as f64).collect();
        let img = if downsample {
            area_resample(&raw, seq.width, seq.height, ow, oh)
        } else {
            raw
        };
        let si = sobel_si(&img, ow, oh);
        let ti = match &prev {
            Some(p) => population_std(img.iter().zip(p).map(|(a, b)| a - b)),
            None => 0.0,
        };
        out.push((j as f64 * COMPLEXITY_PERIOD, si, ti));
        prev = Some(img);
    }
    Ok(out)
}
