//! Experiment configuration and orchestration: corpus generation, training,
//! evaluation, policy comparison and plot-data emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abrn::{
    curve_to_csv, train_a3c, A3cConfig, AbrnModel, AbrnNetConfig, AbrnPolicy, Ablation, ControllerConfig,
    RandomActionPolicy, RewardParams, SelectMode, SessionEnv,
};
use crate::baselines::{fixed_policy, oracle_policy, GccConfig, GccPolicy, DEFAULT_ORACLE_SAFETY};
use crate::cbpn::{
    build_dataset, eval_metrics, last_target_mad, train_baseline, train_error, CbpnConfig, CbpnModel, DatasetConfig,
    RangeMetrics, TrainConfig,
};
use crate::media::{EncoderConfig, QualityModel};
use crate::netsim::{run_session, BitrateController, LinkConfig, SessionLog, SessionSummary, SimConfig};
use crate::trace_io::{
    generate_synthetic_complexity_trace, generate_synthetic_network_trace, load_complexity_trace, load_network_trace,
    save_complexity_trace, save_network_trace, sidecar_path, ComplexityTrace, NetworkTrace, TraceGenSpec, TraceModel,
};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    TrainCbpn,
    TrainAbrn,
    Evaluate,
    Compare,
    GenTraces,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "simulate" => Mode::Simulate,
            "train-cbpn" => Mode::TrainCbpn,
            "train-abrn" => Mode::TrainAbrn,
            "evaluate" => Mode::Evaluate,
            "compare" => Mode::Compare,
            "gen-traces" => Mode::GenTraces,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub traces_dir: PathBuf,
    pub videos_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            traces_dir: "data/traces".into(),
            videos_dir: "data/videos".into(),
            checkpoints_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Policies run by `simulate` (first entry), `evaluate` and `compare`.
    pub names: Vec<String>,
    /// Reference policy for relative deltas in `compare`.
    pub anchor: String,
    /// Controller variant used by `train-abrn` and by the plain `anableps` name.
    pub ablation: Ablation,
    pub fixed_kbps: f64,
    pub oracle_safety: f64,
    pub select: SelectMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            names: vec!["gcc".into(), "anableps".into()],
            anchor: "gcc".into(),
            ablation: Ablation::Full,
            fixed_kbps: 1500.0,
            oracle_safety: DEFAULT_ORACLE_SAFETY,
            select: SelectMode::Argmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Seconds per session.
    pub duration: u64,
    /// Cap on the number of held-out traces and videos (0 = all).
    pub max_traces: usize,
    pub max_videos: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            duration: 60,
            max_traces: 0,
            max_videos: 0,
        }
    }
}

/// Synthetic corpus written by `gen-traces`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub traces: usize,
    pub trace_duration: f64,
    pub min_mean_kbps: f64,
    pub max_mean_kbps: f64,
    /// Standard deviation as a fraction of the mean.
    pub relative_std: f64,
    pub models: Vec<TraceModel>,
    pub videos: usize,
    pub video_duration: f64,
    pub train_trace_fraction: f64,
    pub train_videos: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            traces: 30,
            trace_duration: 60.0,
            min_mean_kbps: 1500.0,
            max_mean_kbps: 5000.0,
            relative_std: 0.3,
            models: vec![TraceModel::MarkovStep, TraceModel::Ar1, TraceModel::SquareWave],
            videos: 57,
            video_duration: 60.0,
            train_trace_fraction: 0.8,
            train_videos: 47,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ok = self.traces >= 2
            && self.videos >= 2
            && self.trace_duration > 0.0
            && self.video_duration > 0.0
            && self.min_mean_kbps > 0.0
            && self.max_mean_kbps >= self.min_mean_kbps
            && self.relative_std >= 0.0
            && !self.models.is_empty()
            && self.train_trace_fraction > 0.0
            && self.train_trace_fraction < 1.0
            && self.train_videos >= 1
            && self.train_videos < self.videos;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corpus config {self:?}")))
        }
    }
}

/// Controller training runs `candidates` seeds and keeps the one with the
/// highest mean reward on the first `traces` x `videos` of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub candidates: usize,
    pub traces: usize,
    pub videos: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            candidates: 2,
            traces: 6,
            videos: 10,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.candidates == 0 || self.traces == 0 || self.videos == 0 {
            return Err(Error::Config(format!("invalid selection config {self:?}")));
        }
        Ok(())
    }
}

/// Everything an experiment needs; every field has a printed default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub policy: PolicyConfig,
    pub session: SessionConfig,
    pub corpus: CorpusConfig,
    pub link: LinkConfig,
    pub encoder: EncoderConfig,
    pub quality: QualityModel,
    pub reward: RewardParams,
    pub gcc: GccConfig,
    pub cbpn: CbpnConfig,
    pub cbpn_dataset: DatasetConfig,
    pub cbpn_train: TrainConfig,
    pub abrn: AbrnNetConfig,
    pub controller: ControllerConfig,
    pub a3c: A3cConfig,
    pub selection: SelectionConfig,
}

/// Synchronous, batched schedule used by the experiment pipeline; trains in
/// minutes on one core.
pub fn experiment_a3c() -> A3cConfig {
    A3cConfig {
        workers: 1,
        discount: 0.9,
        n_step: 20,
        envs_per_worker: 8,
        gae_lambda: 0.95,
        actor_lr: 3e-4,
        updates: 1500,
        ..A3cConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: PathsConfig::default(),
            policy: PolicyConfig::default(),
            session: SessionConfig::default(),
            corpus: CorpusConfig::default(),
            link: LinkConfig::default(),
            encoder: EncoderConfig::default(),
            quality: QualityModel::default(),
            reward: RewardParams::default(),
            gcc: GccConfig::default(),
            cbpn: CbpnConfig::default(),
            cbpn_dataset: DatasetConfig::default(),
            cbpn_train: TrainConfig::default(),
            abrn: AbrnNetConfig::default(),
            controller: ControllerConfig::default(),
            a3c: experiment_a3c(),
            selection: SelectionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            link: self.link,
            encoder: self.encoder,
            quality: self.quality,
            reward: self.reward,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.link.validate()?;
        self.encoder.validate()?;
        self.cbpn.validate()?;
        self.a3c.validate()?;
        self.selection.validate()?;
        self.abrn.validate()?;
        self.corpus.validate()?;
        if self.session.duration == 0 {
            return Err(Error::Config("session duration must be positive".into()));
        }
        if self.policy.names.is_empty() {
            return Err(Error::Config("no policies selected".into()));
        }
        for name in &self.policy.names {
            name.parse::<PolicyKind>()?;
        }
        self.policy.anchor.parse::<PolicyKind>()?;
        Ok(())
    }

    pub fn cbpn_path(&self) -> PathBuf {
        self.paths.checkpoints_dir.join("cbpn.json")
    }

    pub fn abrn_path(&self, ablation: Ablation) -> PathBuf {
        self.paths.checkpoints_dir.join(format!("abrn-{ablation}.json"))
    }
}

/// A policy selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    Gcc,
    /// `fixed` uses the configured bitrate, `fixed-<kbps>` its own.
    Fixed(Option<f64>),
    Oracle,
    Random,
    Anableps(Option<Ablation>),
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "gcc" => PolicyKind::Gcc,
            "fixed" => PolicyKind::Fixed(None),
            "oracle" => PolicyKind::Oracle,
            "random" => PolicyKind::Random,
            "anableps" => PolicyKind::Anableps(None),
            "anableps-full" => PolicyKind::Anableps(Some(Ablation::Full)),
            "anableps-s" => PolicyKind::Anableps(Some(Ablation::S)),
            "anableps-c" => PolicyKind::Anableps(Some(Ablation::C)),
            other => match other.strip_prefix("fixed-").map(str::parse::<f64>) {
                Some(Ok(kbps)) => PolicyKind::Fixed(Some(kbps)),
                _ => return Err(Error::Config(format!("unknown policy `{other}`"))),
            },
        })
    }
}

/// Trained models shared by every session of a run.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub cbpn: Option<CbpnModel>,
    pub abrn: BTreeMap<Ablation, AbrnModel>,
}

impl Models {
    /// Loads the checkpoints the named policies need; errors if one is missing.
    pub fn load_for(cfg: &ExperimentConfig, names: &[String]) -> Result<Self, Error> {
        let mut models = Models::default();
        for name in names {
            if let PolicyKind::Anableps(a) = name.parse()? {
                let ablation = a.unwrap_or(cfg.policy.ablation);
                if models.abrn.contains_key(&ablation) {
                    continue;
                }
                let path = cfg.abrn_path(ablation);
                if !path.exists() {
                    return Err(Error::Config(format!("missing controller checkpoint {}", path.display())));
                }
                let model = AbrnModel::load(&path)?;
                if model.controller.ablation != ablation {
                    return Err(Error::Config(format!(
                        "{} holds a `{}` controller, expected `{ablation}`",
                        path.display(),
                        model.controller.ablation
                    )));
                }
                if ablation.uses_predictor() && models.cbpn.is_none() {
                    let cpath = cfg.cbpn_path();
                    if !cpath.exists() {
                        return Err(Error::Config(format!("missing predictor checkpoint {}", cpath.display())));
                    }
                    models.cbpn = Some(CbpnModel::load(&cpath)?);
                }
                models.abrn.insert(ablation, model);
            }
        }
        Ok(models)
    }
}

pub fn make_policy(
    name: &str,
    cfg: &ExperimentConfig,
    models: &Models,
    seed: u64,
) -> Result<Box<dyn BitrateController>, Error> {
    Ok(match name.parse::<PolicyKind>()? {
        PolicyKind::Gcc => Box::new(GccPolicy::new(cfg.gcc)),
        PolicyKind::Fixed(kbps) => Box::new(fixed_policy(kbps.unwrap_or(cfg.policy.fixed_kbps))?),
        PolicyKind::Oracle => Box::new(oracle_policy(cfg.policy.oracle_safety)?),
        PolicyKind::Random => Box::new(RandomActionPolicy::new(cfg.controller, seed)),
        PolicyKind::Anableps(a) => {
            let ablation = a.unwrap_or(cfg.policy.ablation);
            let model = models
                .abrn
                .get(&ablation)
                .ok_or_else(|| Error::Config(format!("no controller loaded for `{ablation}`")))?;
            let cbpn = if ablation.uses_predictor() { models.cbpn.clone() } else { None };
            Box::new(AbrnPolicy::new(model.actor.clone(), cbpn, model.controller, cfg.policy.select, seed)?)
        }
    })
}

/// A named trace or video.
#[derive(Debug, Clone)]
pub struct Named<T> {
    pub id: String,
    pub item: T,
}

/// Train and test partitions of the network and video corpora.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train_traces: Vec<Named<NetworkTrace>>,
    pub test_traces: Vec<Named<NetworkTrace>>,
    pub train_videos: Vec<Named<ComplexityTrace>>,
    pub test_videos: Vec<Named<ComplexityTrace>>,
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if path.is_file() && name.ends_with(".csv") && !name.ends_with(".iframes.csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("item").to_string()
}

fn load_dir<T>(dir: &Path, load: impl Fn(&Path) -> Result<T, Error>) -> Result<Vec<Named<T>>, Error> {
    csv_files(dir)?
        .iter()
        .map(|p| Ok(Named { id: stem(p), item: load(p)? }))
        .collect()
}

/// `dir/train` and `dir/test` when present, otherwise a seeded split of `dir`
/// keeping `n_train` items for training.
fn load_split<T: Clone>(
    dir: &Path,
    load: impl Fn(&Path) -> Result<T, Error> + Copy,
    n_train: impl Fn(usize) -> usize,
    seed: u64,
) -> Result<(Vec<Named<T>>, Vec<Named<T>>), Error> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("directory {} does not exist", dir.display())));
    }
    let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
    if train_dir.is_dir() && test_dir.is_dir() {
        return Ok((load_dir(&train_dir, load)?, load_dir(&test_dir, load)?));
    }
    let mut all = load_dir(dir, load)?;
    if all.len() < 2 {
        return Err(Error::Config(format!("{} holds fewer than two items", dir.display())));
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = n_train(all.len()).clamp(1, all.len() - 1);
    let test = all.split_off(k);
    Ok((all, test))
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, Error> {
        let frac = cfg.corpus.train_trace_fraction;
        let (train_traces, test_traces) = load_split(
            &cfg.paths.traces_dir,
            |p| load_network_trace(p),
            |n| (n as f64 * frac).round() as usize,
            cfg.seed,
        )?;
        let share = cfg.corpus.train_videos as f64 / cfg.corpus.videos as f64;
        let (train_videos, test_videos) = load_split(
            &cfg.paths.videos_dir,
            |p| load_complexity_trace(p),
            |n| (n as f64 * share).round() as usize,
            cfg.seed.wrapping_add(1),
        )?;
        Ok(Self {
            train_traces,
            test_traces,
            train_videos,
            test_videos,
        })
    }
}

/// Writes a synthetic corpus, already split, under the configured directories.
pub fn generate_corpus(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, Error> {
    let c = &cfg.corpus;
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut written = Vec::new();
    let mut trace_order: Vec<usize> = (0..c.traces).collect();
    trace_order.shuffle(&mut rng);
    let n_train = ((c.traces as f64 * c.train_trace_fraction).round() as usize).clamp(1, c.traces - 1);
    for (rank, &i) in trace_order.iter().enumerate() {
        let mean = rng.random_range(c.min_mean_kbps..=c.max_mean_kbps);
        let spec = TraceGenSpec {
            duration: c.trace_duration,
            mean_bw: mean,
            std_bw: c.relative_std * mean,
            model: c.models[i % c.models.len()],
            seed: rng.random(),
        };
        let part = if rank < n_train { "train" } else { "test" };
        let dir = cfg.paths.traces_dir.join(part);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("trace_{i:03}.csv"));
        save_network_trace(&generate_synthetic_network_trace(&spec)?, &path)?;
        written.push(path);
    }
    let mut video_order: Vec<usize> = (0..c.videos).collect();
    video_order.shuffle(&mut rng);
    for (rank, &i) in video_order.iter().enumerate() {
        let video = generate_synthetic_complexity_trace(c.video_duration, cfg.encoder.fps, cfg.encoder.gop_frames, rng.random())?;
        let part = if rank < c.train_videos { "train" } else { "test" };
        let dir = cfg.paths.videos_dir.join(part);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("video_{i:03}.csv"));
        save_complexity_trace(&video, &path)?;
        written.push(sidecar_path(&path));
        written.push(path);
    }
    Ok(written)
}

/// Seed shared by every policy in one (trace, video) cell.
pub fn cell_seed(base: u64, trace: usize, video: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add((trace as u64) << 20)
        .wrapping_add(video as u64)
}

/// Per-session metrics of one policy on one trace and video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub policy: String,
    pub trace: String,
    pub video: String,
    pub seed: u64,
    pub mean_quality: f64,
    pub mean_send_kbps: f64,
    pub stalling_ratio: f64,
    pub mean_frame_delay_s: f64,
    pub mean_reward: f64,
}

impl Cell {
    fn from_summary(policy: &str, trace: &str, video: &str, seed: u64, s: &SessionSummary) -> Self {
        Self {
            policy: policy.into(),
            trace: trace.into(),
            video: video.into(),
            seed,
            mean_quality: s.mean_quality,
            mean_send_kbps: s.mean_send_kbps,
            stalling_ratio: s.stalling_ratio,
            mean_frame_delay_s: s.mean_frame_delay_s,
            mean_reward: s.mean_reward,
        }
    }

    pub fn session_id(&self) -> String {
        format!("{}__{}__{}", self.policy, self.trace, self.video)
    }

    fn metrics(&self) -> [f64; 5] {
        [
            self.mean_quality,
            self.mean_send_kbps,
            self.stalling_ratio,
            self.mean_frame_delay_s,
            self.mean_reward,
        ]
    }
}

/// Mean and standard deviation across videos (each video averaged over traces).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: String,
    pub quality: Stat,
    pub send_kbps: Stat,
    pub stalling_ratio: Stat,
    pub frame_delay_s: Stat,
    pub reward: Stat,
}

/// Percent change of each metric relative to the anchor policy; `None` when
/// the anchor value is zero and the policy's is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRow {
    pub policy: String,
    pub anchor: String,
    pub quality_pct: Option<f64>,
    pub send_kbps_pct: Option<f64>,
    pub stalling_ratio_pct: Option<f64>,
    pub frame_delay_pct: Option<f64>,
    pub reward_pct: Option<f64>,
}

/// Preferred direction of each metric: quality up, bitrate down, stalls down, delay down.
pub const METRIC_DIRECTIONS: [(&str, &str); 5] = [
    ("quality", "higher"),
    ("send_kbps", "lower"),
    ("stalling_ratio", "lower"),
    ("frame_delay_s", "lower"),
    ("reward", "higher"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cells: Vec<Cell>,
    pub policies: Vec<PolicyAggregate>,
    pub anchor: Option<String>,
    pub relative: Vec<RelativeRow>,
}

fn stat(xs: &[f64]) -> Stat {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

fn pct(x: f64, anchor: f64) -> Option<f64> {
    if anchor == 0.0 {
        (x == 0.0).then_some(0.0)
    } else {
        Some((x - anchor) / anchor.abs() * 100.0)
    }
}

impl ComparisonReport {
    /// Aggregates cells; the policy order is the order of first appearance.
    pub fn from_cells(cells: Vec<Cell>, anchor: Option<&str>) -> Result<Self, Error> {
        let mut order: Vec<String> = Vec::new();
        for c in &cells {
            if !order.contains(&c.policy) {
                order.push(c.policy.clone());
            }
        }
        let mut policies = Vec::new();
        for p in &order {
            let mut per_video: BTreeMap<&str, Vec<[f64; 5]>> = BTreeMap::new();
            for c in cells.iter().filter(|c| &c.policy == p) {
                per_video.entry(c.video.as_str()).or_default().push(c.metrics());
            }
            let means: Vec<[f64; 5]> = per_video
                .values()
                .map(|rows| {
                    let mut m = [0.0; 5];
                    for r in rows {
                        for (a, b) in m.iter_mut().zip(r) {
                            *a += b / rows.len() as f64;
                        }
                    }
                    m
                })
                .collect();
            let col = |i: usize| stat(&means.iter().map(|m| m[i]).collect::<Vec<_>>());
            policies.push(PolicyAggregate {
                policy: p.clone(),
                quality: col(0),
                send_kbps: col(1),
                stalling_ratio: col(2),
                frame_delay_s: col(3),
                reward: col(4),
            });
        }
        let mut relative = Vec::new();
        if let Some(a) = anchor {
            let base = policies
                .iter()
                .find(|p| p.policy == a)
                .ok_or_else(|| Error::Config(format!("anchor policy `{a}` was not run")))?
                .clone();
            for p in &policies {
                relative.push(RelativeRow {
                    policy: p.policy.clone(),
                    anchor: a.to_string(),
                    quality_pct: pct(p.quality.mean, base.quality.mean),
                    send_kbps_pct: pct(p.send_kbps.mean, base.send_kbps.mean),
                    stalling_ratio_pct: pct(p.stalling_ratio.mean, base.stalling_ratio.mean),
                    frame_delay_pct: pct(p.frame_delay_s.mean, base.frame_delay_s.mean),
                    reward_pct: pct(p.reward.mean, base.reward.mean),
                });
            }
        }
        Ok(Self {
            cells,
            policies,
            anchor: anchor.map(str::to_string),
            relative,
        })
    }

    pub fn policy(&self, name: &str) -> Option<&PolicyAggregate> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("policy,trace,video,seed,mean_quality,mean_send_kbps,stalling_ratio,mean_frame_delay_s,mean_reward\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.policy,
                c.trace,
                c.video,
                c.seed,
                c.mean_quality,
                c.mean_send_kbps,
                c.stalling_ratio,
                c.mean_frame_delay_s,
                c.mean_reward
            )
            .unwrap();
        }
        out
    }

    /// Table of relative changes against the anchor.
    pub fn relative_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}%"));
        let mut out = String::from("policy,quality(up),send_kbps(down),stalling_ratio(down),frame_delay(down),reward(up)\n");
        for r in &self.relative {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.policy,
                fmt(r.quality_pct),
                fmt(r.send_kbps_pct),
                fmt(r.stalling_ratio_pct),
                fmt(r.frame_delay_pct),
                fmt(r.reward_pct)
            )
            .unwrap();
        }
        out
    }
}

/// Session of one cell, kept for plot data.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: Cell,
    pub log: SessionLog,
    pub bandwidth: Vec<f64>,
}

/// Runs every policy on every (trace, video) pair with paired seeds.
pub fn compare_policies(
    cfg: &ExperimentConfig,
    models: &Models,
    policies: &[String],
    traces: &[Named<NetworkTrace>],
    videos: &[Named<ComplexityTrace>],
) -> Result<Vec<CellRun>, Error> {
    if policies.is_empty() || traces.is_empty() || videos.is_empty() {
        return Err(Error::Config("comparison needs at least one policy, trace and video".into()));
    }
    let sim = cfg.sim();
    let mut runs = Vec::new();
    for name in policies {
        for (ti, t) in traces.iter().enumerate() {
            for (vi, v) in videos.iter().enumerate() {
                let seed = cell_seed(cfg.seed, ti, vi);
                let mut policy = make_policy(name, cfg, models, seed)?;
                let log = run_session(policy.as_mut(), &v.item, &t.item, &sim, cfg.session.duration, seed)?;
                let rebased = t.item.rebased();
                let bandwidth = (0..cfg.session.duration)
                    .map(|k| mean_over(&rebased, k as f64, k as f64 + 1.0))
                    .collect();
                runs.push(CellRun {
                    cell: Cell::from_summary(name, &t.id, &v.id, seed, &log.summary()),
                    log,
                    bandwidth,
                });
            }
        }
    }
    Ok(runs)
}

fn mean_over(trace: &NetworkTrace, t0: f64, t1: f64) -> f64 {
    let n = 20;
    (0..n).map(|i| trace.kbps_at(t0 + (t1 - t0) * (i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64
}

/// Column layout of `plots/timeseries.csv`.
pub const TIMESERIES_HEADER: &str =
    "policy,trace,video,second,bandwidth_kbps,decision_kbps,actual_kbps,send_kbps,recv_kbps,frame_delay_s,played_fps,quality";
/// Column layout of `plots/scatter.csv`.
pub const SCATTER_HEADER: &str = "policy,video,mean_quality,mean_send_kbps,stalling_ratio,mean_frame_delay_s,mean_reward";

/// Writes `plots/timeseries.csv` (one row per session second) and
/// `plots/scatter.csv` (one row per policy and video).
pub fn emit_plot_data(runs: &[CellRun], report: &ComparisonReport, out_dir: &Path) -> Result<(), Error> {
    let dir = out_dir.join("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ts = format!("{TIMESERIES_HEADER}\n");
    for run in runs {
        let c = &run.cell;
        for (r, bw) in run.log.seconds.iter().zip(&run.bandwidth) {
            writeln!(
                ts,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                c.policy,
                c.trace,
                c.video,
                r.second,
                bw,
                r.decision_kbps,
                r.actual_kbps,
                r.send_kbps,
                r.recv_kbps,
                r.frame_delay_s,
                r.played_fps,
                r.quality
            )
            .unwrap();
        }
    }
    write(&dir.join("timeseries.csv"), &ts)?;

    let mut groups: Vec<((String, String), Vec<[f64; 5]>)> = Vec::new();
    for c in &report.cells {
        let key = (c.policy.clone(), c.video.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(c.metrics()),
            None => groups.push((key, vec![c.metrics()])),
        }
    }
    let mut sc = format!("{SCATTER_HEADER}\n");
    for ((policy, video), rows) in &groups {
        let n = rows.len() as f64;
        let m: Vec<f64> = (0..5).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        writeln!(sc, "{policy},{video},{},{},{},{},{}", m[0], m[1], m[2], m[3], m[4]).unwrap();
    }
    write(&dir.join("scatter.csv"), &sc)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(runs: &[CellRun], report: &ComparisonReport, out_dir: &Path) -> Result<(), Error> {
    let sessions = out_dir.join("sessions");
    fs::create_dir_all(&sessions).map_err(|e| Error::io(&sessions, e))?;
    for run in runs {
        run.log.save_csv(sessions.join(format!("{}.csv", run.cell.session_id())))?;
    }
    write(&out_dir.join("summary.json"), &report.to_json())?;
    write(&out_dir.join("report.csv"), &report.to_csv())?;
    if report.anchor.is_some() {
        write(&out_dir.join("relative.csv"), &report.relative_table())?;
    }
    emit_plot_data(runs, report, out_dir)
}

fn take<T: Clone>(items: &[Named<T>], max: usize) -> Vec<Named<T>> {
    let n = if max == 0 { items.len() } else { max.min(items.len()) };
    items[..n].to_vec()
}

/// Trains the range predictor on the training videos.
pub fn train_cbpn_on(cfg: &ExperimentConfig, videos: &[Named<ComplexityTrace>]) -> Result<(CbpnModel, CbpnTrainReport), Error> {
    let items: Vec<ComplexityTrace> = videos.iter().map(|v| v.item.clone()).collect();
    let data = build_dataset(&items, &cfg.encoder, &cfg.cbpn, &cfg.cbpn_dataset)?;
    let (train, val) = data.split_by_session(0.1, cfg.seed);
    let mut model = CbpnModel::new(cfg.cbpn, cfg.seed)?;
    let baseline_curve = train_baseline(&mut model, &train, &cfg.cbpn_train)?;
    let error_curve = train_error(&mut model, &train, &cfg.cbpn_train)?;
    let report = CbpnTrainReport {
        train_samples: train.len(),
        validation_samples: val.len(),
        validation: eval_metrics(&model, &val)?,
        validation_last_target_mad: last_target_mad(&val),
        baseline_curve,
        error_curve,
        test: None,
        test_last_target_mad: None,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbpnTrainReport {
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validation: RangeMetrics,
    pub validation_last_target_mad: f64,
    pub test: Option<RangeMetrics>,
    pub test_last_target_mad: Option<f64>,
    pub baseline_curve: Vec<f64>,
    pub error_curve: Vec<f64>,
}

/// Trains a controller variant on the training traces and videos.
pub fn train_abrn_on(
    cfg: &ExperimentConfig,
    ablation: Ablation,
    cbpn: Option<&CbpnModel>,
    traces: &[Named<NetworkTrace>],
    videos: &[Named<ComplexityTrace>],
) -> Result<AbrnTrainReport, Error> {
    if traces.is_empty() || videos.is_empty() {
        return Err(Error::Config("training needs at least one trace and one video".into()));
    }
    let ctl = ControllerConfig {
        ablation,
        ..cfg.controller
    };
    let cbpn = if ablation.uses_predictor() { cbpn } else { None };
    ctl.validate(cbpn)?;
    let sim = cfg.sim();
    let duration = cfg.session.duration;
    let factory = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = &videos[rng.random_range(0..videos.len())].item;
        let t = &traces[rng.random_range(0..traces.len())].item;
        SessionEnv::new(v, t, &sim, duration, seed, cbpn, ctl)
    };
    let val_traces = take(traces, cfg.selection.traces);
    let val_videos = take(videos, cfg.selection.videos);
    let name = format!("anableps-{ablation}");
    let mut best: Option<AbrnTrainReport> = None;
    let mut validation = Vec::with_capacity(cfg.selection.candidates);
    for i in 0..cfg.selection.candidates {
        let a3c = A3cConfig {
            seed: cfg.a3c.seed + i as u64,
            ..cfg.a3c
        };
        let out = train_a3c(factory, &cfg.abrn, &a3c)?;
        let model = AbrnModel {
            net: cfg.abrn,
            controller: ctl,
            actor: out.actor,
            critic: out.critic,
        };
        let score = if cfg.selection.candidates == 1 {
            f64::NAN
        } else {
            let models = Models {
                cbpn: cbpn.cloned(),
                abrn: BTreeMap::from([(ablation, model.clone())]),
            };
            let runs = compare_policies(cfg, &models, std::slice::from_ref(&name), &val_traces, &val_videos)?;
            runs.iter().map(|r| r.cell.mean_reward).sum::<f64>() / runs.len() as f64
        };
        validation.push(score);
        if best.as_ref().is_none_or(|b| score > b.validation_reward) {
            best = Some(AbrnTrainReport {
                model,
                curve: out.curve,
                seed: a3c.seed,
                validation_reward: score,
                validation: Vec::new(),
            });
        }
    }
    let mut report = best.expect("at least one candidate");
    report.validation = validation;
    Ok(report)
}

/// The kept controller and how every candidate scored on the validation slice.
#[derive(Debug, Clone)]
pub struct AbrnTrainReport {
    pub model: AbrnModel,
    pub curve: Vec<crate::abrn::CurvePoint>,
    pub seed: u64,
    pub validation_reward: f64,
    pub validation: Vec<f64>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub enum Outcome {
    Report(ComparisonReport),
    Cbpn(Box<CbpnTrainReport>),
    Abrn {
        updates: usize,
        final_reward: f64,
        seed: u64,
        validation: Vec<f64>,
    },
    Corpus(Vec<PathBuf>),
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Executes `mode`. Inputs are validated before anything is written.
pub fn run_experiment(mode: Mode, cfg: &ExperimentConfig) -> Result<Outcome, Error> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    match mode {
        Mode::GenTraces => Ok(Outcome::Corpus(generate_corpus(cfg)?)),
        Mode::TrainCbpn => {
            let corpus = Corpus::load(cfg)?;
            let (model, mut report) = train_cbpn_on(cfg, &corpus.train_videos)?;
            let test_items: Vec<ComplexityTrace> = corpus.test_videos.iter().map(|v| v.item.clone()).collect();
            let test = build_dataset(
                &test_items,
                &cfg.encoder,
                &cfg.cbpn,
                &DatasetConfig {
                    seed: cfg.cbpn_dataset.seed.wrapping_add(1),
                    ..cfg.cbpn_dataset
                },
            )?;
            report.test = Some(eval_metrics(&model, &test)?);
            report.test_last_target_mad = Some(last_target_mad(&test));
            ensure_dir(&cfg.paths.checkpoints_dir)?;
            model.save(cfg.cbpn_path())?;
            ensure_dir(out)?;
            write(
                &out.join("cbpn_metrics.json"),
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            let mut curve = String::from("epoch,baseline_loss,error_loss\n");
            for (i, (b, e)) in report.baseline_curve.iter().zip(&report.error_curve).enumerate() {
                writeln!(curve, "{i},{b},{e}").unwrap();
            }
            ensure_dir(&out.join("plots"))?;
            write(&out.join("plots").join("cbpn_training.csv"), &curve)?;
            Ok(Outcome::Cbpn(Box::new(report)))
        }
        Mode::TrainAbrn => {
            let ablation = cfg.policy.ablation;
            let cbpn = if ablation.uses_predictor() {
                let path = cfg.cbpn_path();
                if !path.exists() {
                    return Err(Error::Config(format!("missing predictor checkpoint {}", path.display())));
                }
                Some(CbpnModel::load(&path)?)
            } else {
                None
            };
            let corpus = Corpus::load(cfg)?;
            let report = train_abrn_on(cfg, ablation, cbpn.as_ref(), &corpus.train_traces, &corpus.train_videos)?;
            ensure_dir(&cfg.paths.checkpoints_dir)?;
            report.model.save(cfg.abrn_path(ablation))?;
            ensure_dir(&out.join("plots"))?;
            write(&out.join("plots").join(format!("abrn_training_{ablation}.csv")), &curve_to_csv(&report.curve))?;
            Ok(Outcome::Abrn {
                updates: report.curve.len(),
                final_reward: report.curve.last().map_or(f64::NAN, |c| c.mean_reward),
                seed: report.seed,
                validation: report.validation,
            })
        }
        Mode::Simulate | Mode::Evaluate | Mode::Compare => {
            let names: Vec<String> = match mode {
                Mode::Simulate => cfg.policy.names[..1].to_vec(),
                Mode::Evaluate => {
                    let learned: Vec<String> = cfg
                        .policy
                        .names
                        .iter()
                        .filter(|n| matches!(n.parse(), Ok(PolicyKind::Anableps(_))))
                        .cloned()
                        .collect();
                    if learned.is_empty() {
                        vec!["anableps".to_string()]
                    } else {
                        learned
                    }
                }
                _ => cfg.policy.names.clone(),
            };
            let models = Models::load_for(cfg, &names)?;
            let corpus = Corpus::load(cfg)?;
            let traces = take(&corpus.test_traces, cfg.session.max_traces);
            let videos = take(&corpus.test_videos, cfg.session.max_videos);
            let runs = compare_policies(cfg, &models, &names, &traces, &videos)?;
            let anchor = (mode == Mode::Compare).then_some(cfg.policy.anchor.as_str());
            if let Some(a) = anchor {
                if !names.iter().any(|n| n == a) {
                    return Err(Error::Config(format!("anchor policy `{a}` is not among the compared policies")));
                }
            }
            let report = ComparisonReport::from_cells(runs.iter().map(|r| r.cell.clone()).collect(), anchor)?;
            ensure_dir(out)?;
            write_report(&runs, &report, out)?;
            Ok(Outcome::Report(report))
        }
    }
}
