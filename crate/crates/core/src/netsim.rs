//! Discrete-event simulation of one real-time video session: paced sender,
//! trace-driven drop-tail bottleneck, NACK-based recovery, frame assembly,
//! and per-second receiver reports.
//!
//! Time is in seconds from session start. Second `k` covers `[k, k + 1)`.
//! At the start of second `k` the controller picks the target of slot `k`
//! from sender-side history and the receiver reports delivered so far; the
//! report for second `w` leaves the receiver at `w + 1` and arrives one RTT
//! later, so controllers act on information that is at least a second old.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abrn::{reward, RewardParams};
use crate::media::{encode_slot, packetize, quality_score, EncoderConfig, EncoderState, QualityModel};
use crate::trace_io::{ComplexityTrace, NetworkTrace};
use crate::Error;

/// Played frame rate below which a second counts as stalled.
pub const STALL_FPS: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// One-way propagation delay, seconds.
    pub base_owd: f64,
    /// Bottleneck buffer in bytes; `None` sizes it to 1.5 s at the trace mean.
    pub queue_capacity: Option<u64>,
    /// Receiver tick, seconds. Must divide one second evenly.
    pub tick: f64,
    /// Independent per-transmission loss probability.
    pub random_loss: f64,
    pub mtu: u32,
    /// Retransmissions the receiver may request per packet.
    pub retx_limit: u32,
    /// Frames still incomplete this long after capture are dropped, seconds.
    pub frame_deadline: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            base_owd: 0.025,
            queue_capacity: None,
            tick: 0.010,
            random_loss: 0.0,
            mtu: crate::media::DEFAULT_MTU,
            retx_limit: 3,
            frame_deadline: 2.0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let ticks = 1.0 / self.tick;
        let ok = self.base_owd >= 0.0
            && self.queue_capacity != Some(0)
            && self.tick > 0.0
            && (ticks - ticks.round()).abs() < 1e-6
            && (0.0..1.0).contains(&self.random_loss)
            && self.mtu > 0
            && self.frame_deadline > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid link config {self:?}")))
        }
    }

    pub fn capacity_for(&self, trace: &NetworkTrace) -> u64 {
        self.queue_capacity
            .unwrap_or_else(|| (1.5 * trace.mean() * 1000.0 / 8.0).round() as u64)
    }
}

/// What the receiver reports about one second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverObservation {
    pub second: u64,
    /// Bytes handed to the bottleneck (first transmissions and retransmissions), kbps.
    pub s: f64,
    /// Bytes arriving at the receiver, kbps.
    pub r: f64,
    /// Mean RTT, seconds.
    pub d: f64,
    /// Dropped share of first transmissions sent this second.
    pub p: f64,
    /// NACKs emitted.
    pub n: f64,
    /// Mean capture-to-completion delay of frames completed this second, seconds.
    pub f: f64,
    /// Lost share of frames resolved this second.
    pub h: f64,
    pub played_fps: f64,
}

/// Sender-side record of an encoded slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub target: f64,
    pub effective_target: f64,
    pub actual: f64,
    pub has_iframe: bool,
}

/// One row of the per-second session table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondRecord {
    pub second: u64,
    pub decision_kbps: f64,
    pub actual_kbps: f64,
    pub send_kbps: f64,
    pub recv_kbps: f64,
    pub rtt_s: f64,
    pub loss: f64,
    pub nack: f64,
    pub frame_delay_s: f64,
    pub lost_frame_rate: f64,
    pub played_fps: f64,
    pub quality: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PacketEventKind {
    /// Handed to the bottleneck; `attempt` 0 is the first transmission.
    Send { attempt: u32 },
    Drop { attempt: u32 },
    Arrive { attempt: u32 },
    Nack,
    Abandon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub time: f64,
    pub seq: u64,
    pub size: u32,
    pub kind: PacketEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub seconds: usize,
    pub mean_quality: f64,
    pub mean_decision_kbps: f64,
    pub mean_actual_kbps: f64,
    pub mean_send_kbps: f64,
    pub mean_recv_kbps: f64,
    pub mean_rtt_s: f64,
    pub mean_loss: f64,
    pub mean_frame_delay_s: f64,
    pub mean_lost_frame_rate: f64,
    pub mean_played_fps: f64,
    pub stalling_ratio: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionLog {
    pub seconds: Vec<SecondRecord>,
    pub slots: Vec<SlotSummary>,
    pub observations: Vec<ReceiverObservation>,
    /// Packet lifecycle events; empty unless recording was enabled.
    pub events: Vec<PacketEvent>,
}

pub const SESSION_CSV_HEADER: &str =
    "second,decision_kbps,actual_kbps,send_kbps,recv_kbps,rtt_s,loss,nack,frame_delay_s,lost_frame_rate,played_fps,quality,reward";

impl SessionLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SESSION_CSV_HEADER);
        s.push('\n');
        for r in &self.seconds {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.second,
                r.decision_kbps,
                r.actual_kbps,
                r.send_kbps,
                r.recv_kbps,
                r.rtt_s,
                r.loss,
                r.nack,
                r.frame_delay_s,
                r.lost_frame_rate,
                r.played_fps,
                r.quality,
                r.reward
            )
            .unwrap();
        }
        s
    }

    /// Parses the per-second table written by [`SessionLog::to_csv`].
    pub fn seconds_from_csv(text: &str) -> Result<Vec<SecondRecord>, Error> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let hdr = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
        if hdr.iter().collect::<Vec<_>>().join(",") != SESSION_CSV_HEADER {
            return Err(Error::Parse("unexpected session CSV header".into()));
        }
        rdr.deserialize()
            .map(|r| r.map_err(|e| Error::Parse(e.to_string())))
            .collect()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> SessionSummary {
        summarize(&self.seconds)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Aggregates a per-second table.
pub fn summarize(rows: &[SecondRecord]) -> SessionSummary {
    let m = |f: fn(&SecondRecord) -> f64| mean(rows.iter().map(f));
    let fps: Vec<f64> = rows.iter().map(|r| r.played_fps).collect();
    SessionSummary {
        seconds: rows.len(),
        mean_quality: m(|r| r.quality),
        mean_decision_kbps: m(|r| r.decision_kbps),
        mean_actual_kbps: m(|r| r.actual_kbps),
        mean_send_kbps: m(|r| r.send_kbps),
        mean_recv_kbps: m(|r| r.recv_kbps),
        mean_rtt_s: m(|r| r.rtt_s),
        mean_loss: m(|r| r.loss),
        mean_frame_delay_s: m(|r| r.frame_delay_s),
        mean_lost_frame_rate: m(|r| r.lost_frame_rate),
        mean_played_fps: m(|r| r.played_fps),
        stalling_ratio: if fps.is_empty() { 0.0 } else { stalling_ratio(&fps) },
        mean_reward: m(|r| r.reward),
    }
}

/// Fraction of seconds whose played frame rate is below 12 fps.
pub fn stalling_ratio(played_fps: &[f64]) -> f64 {
    if played_fps.is_empty() {
        return 0.0;
    }
    played_fps.iter().filter(|&&f| f < STALL_FPS).count() as f64 / played_fps.len() as f64
}

/// Everything a controller may look at when choosing the next target.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    /// Index of the slot being decided.
    pub second: u64,
    /// Sender-side history of slots `0..second`.
    pub slots: &'a [SlotSummary],
    /// Receiver reports that have reached the sender, oldest first.
    pub observations: &'a [ReceiverObservation],
    pub video: &'a ComplexityTrace,
    pub trace: &'a NetworkTrace,
    pub encoder: &'a EncoderConfig,
}

impl DecisionContext<'_> {
    pub fn last_target(&self) -> Option<f64> {
        self.slots.last().map(|s| s.target)
    }

    pub fn latest_observation(&self) -> Option<&ReceiverObservation> {
        self.observations.last()
    }
}

/// A bitrate controller driven once per second.
pub trait BitrateController {
    fn name(&self) -> String;
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, Error>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Send { seq: u64 },
    NackAtSender { seq: u64 },
    Arrive { seq: u64, attempt: u32, sent: Time },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Time,
    order: u64,
    kind: EventKind,
}

#[derive(Debug, Clone)]
struct PacketState {
    frame: u64,
    size: u32,
    attempts: u32,
    received: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FrameStatus {
    Pending,
    Complete,
    Lost,
}

#[derive(Debug, Clone)]
struct FrameState {
    capture: f64,
    size: u32,
    packets: u32,
    received: u32,
    status: FrameStatus,
}

#[derive(Debug, Clone, Copy)]
struct Missing {
    nacks: u32,
    last_nack: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct WindowAcc {
    sent_bytes: u64,
    recv_bytes: u64,
    rtt_sum: f64,
    rtt_count: u32,
    first_tx: u32,
    first_tx_lost: u32,
    nacks: u32,
    delay_sum: f64,
    completed: u32,
    lost: u32,
    played_bytes: u64,
}

/// Queue entry: service start, service end, size.
#[derive(Debug, Clone, Copy)]
struct Queued {
    start: f64,
    finish: f64,
    size: u32,
}

/// An in-progress session advanced one second at a time.
pub struct Session<'a> {
    video: &'a ComplexityTrace,
    trace: NetworkTrace,
    link: LinkConfig,
    encoder: EncoderConfig,
    quality: QualityModel,
    reward_params: RewardParams,
    duration: u64,
    capacity: u64,
    ticks_per_second: u64,

    enc_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    enc_state: EncoderState,
    next_second: u64,
    order: u64,
    events: BinaryHeap<std::cmp::Reverse<Event>>,
    queue: VecDeque<Queued>,
    packets: Vec<PacketState>,
    frames: Vec<FrameState>,
    oldest_unresolved: usize,
    highest_seq: Option<u64>,
    missing: BTreeMap<u64, Missing>,
    rtt_estimate: f64,
    last_rtt: f64,
    windows: Vec<WindowAcc>,
    delivered_until: f64,
    delivery_times: Vec<f64>,
    forced_drops: BTreeMap<(u64, u32), ()>,
    record_events: bool,
    prev_quality: Option<f64>,
    log: SessionLog,
}

impl<'a> Session<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        video: &'a ComplexityTrace,
        trace: &NetworkTrace,
        link: LinkConfig,
        encoder: EncoderConfig,
        quality: QualityModel,
        reward_params: RewardParams,
        duration: u64,
        seed: u64,
    ) -> Result<Self, Error> {
        link.validate()?;
        encoder.validate()?;
        if duration == 0 {
            return Err(Error::Config("session duration must be positive".into()));
        }
        if duration as f64 > trace.duration() + 1e-9 {
            return Err(Error::Config(format!(
                "session of {duration} s is longer than the {} s network trace",
                trace.duration()
            )));
        }
        if duration as f64 > video.duration() + 1e-9 {
            return Err(Error::Config(format!(
                "session of {duration} s is longer than the {} s video",
                video.duration()
            )));
        }
        if video.fps() != encoder.fps || video.gop_frames() != encoder.gop_frames {
            return Err(Error::Config(format!(
                "video is {} fps / GoP {}, encoder expects {} fps / GoP {}",
                video.fps(),
                video.gop_frames(),
                encoder.fps,
                encoder.gop_frames
            )));
        }
        let trace = trace.rebased();
        let capacity = link.capacity_for(&trace);
        let mut loss_rng = ChaCha8Rng::seed_from_u64(seed);
        loss_rng.set_stream(1);
        Ok(Self {
            video,
            capacity,
            ticks_per_second: (1.0 / link.tick).round() as u64,
            trace,
            link,
            encoder,
            quality,
            reward_params,
            duration,
            enc_rng: ChaCha8Rng::seed_from_u64(seed),
            loss_rng,
            enc_state: EncoderState::default(),
            next_second: 0,
            order: 0,
            events: BinaryHeap::new(),
            queue: VecDeque::new(),
            packets: Vec::new(),
            frames: Vec::new(),
            oldest_unresolved: 0,
            highest_seq: None,
            missing: BTreeMap::new(),
            rtt_estimate: 2.0 * link.base_owd,
            last_rtt: 2.0 * link.base_owd,
            windows: vec![WindowAcc::default(); duration as usize + 1],
            delivered_until: 0.0,
            delivery_times: Vec::new(),
            forced_drops: BTreeMap::new(),
            record_events: false,
            prev_quality: None,
            log: SessionLog::default(),
        })
    }

    /// Keeps a per-packet event trace in the log.
    pub fn record_events(&mut self, on: bool) {
        self.record_events = on;
    }

    /// Forces transmission `attempt` (0 = first) of packet `seq` to be dropped.
    pub fn force_drop(&mut self, seq: u64, attempt: u32) {
        self.forced_drops.insert((seq, attempt), ());
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn second(&self) -> u64 {
        self.next_second
    }

    pub fn is_done(&self) -> bool {
        self.next_second >= self.duration
    }

    pub fn queue_capacity(&self) -> u64 {
        self.capacity
    }

    pub fn video(&self) -> &'a ComplexityTrace {
        self.video
    }

    pub fn trace(&self) -> &NetworkTrace {
        &self.trace
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn into_log(self) -> SessionLog {
        self.log
    }

    /// Receiver reports that have reached the sender by the current decision time.
    pub fn delivered(&self) -> &[ReceiverObservation] {
        let now = self.next_second as f64;
        let n = self.delivery_times.iter().take_while(|&&t| t <= now + 1e-12).count();
        &self.log.observations[..n]
    }

    pub fn context(&self) -> DecisionContext<'_> {
        DecisionContext {
            second: self.next_second,
            slots: &self.log.slots,
            observations: self.delivered(),
            video: self.video,
            trace: &self.trace,
            encoder: &self.encoder,
        }
    }

    fn push_event(&mut self, time: f64, kind: EventKind) {
        self.order += 1;
        self.events.push(std::cmp::Reverse(Event {
            time: Time(time),
            order: self.order,
            kind,
        }));
    }

    fn window(&mut self, t: f64) -> Option<&mut WindowAcc> {
        let w = t.floor();
        if w < 0.0 {
            return None;
        }
        self.windows.get_mut(w as usize)
    }

    fn note(&mut self, time: f64, seq: u64, kind: PacketEventKind) {
        if self.record_events {
            let size = self.packets[seq as usize].size;
            self.log.events.push(PacketEvent { time, seq, size, kind });
        }
    }

    /// Time at which `bytes` finish serializing when service starts at `start`.
    fn serve(&self, start: f64, bytes: u32) -> f64 {
        let mut bits = bytes as f64 * 8.0;
        let mut t = start;
        loop {
            let bps = self.trace.kbps_at(t) * 1000.0;
            match self.trace.next_change_after(t) {
                Some(next) if (next - t) * bps < bits => {
                    bits -= (next - t) * bps;
                    t = next;
                }
                _ => return t + bits / bps,
            }
        }
    }

    /// Bytes waiting at the bottleneck at `t`, counting the unsent share of
    /// the packet in service.
    fn backlog(&mut self, t: f64) -> f64 {
        while self.queue.front().is_some_and(|q| q.finish <= t) {
            self.queue.pop_front();
        }
        self.queue
            .iter()
            .map(|q| {
                if q.start >= t {
                    q.size as f64
                } else {
                    q.size as f64 * (q.finish - t) / (q.finish - q.start)
                }
            })
            .sum()
    }

    /// Hands one transmission of `seq` to the bottleneck.
    fn transmit(&mut self, t: f64, seq: u64) {
        let p = &mut self.packets[seq as usize];
        let attempt = p.attempts;
        p.attempts += 1;
        let size = p.size;
        if let Some(w) = self.window(t) {
            w.sent_bytes += size as u64;
            if attempt == 0 {
                w.first_tx += 1;
            }
        }
        self.note(t, seq, PacketEventKind::Send { attempt });
        let random = self.link.random_loss > 0.0 && self.loss_rng.random::<f64>() < self.link.random_loss;
        let forced = self.forced_drops.contains_key(&(seq, attempt));
        let full = self.backlog(t) + size as f64 > self.capacity as f64;
        if random || forced || full {
            if attempt == 0 {
                if let Some(w) = self.window(t) {
                    w.first_tx_lost += 1;
                }
            }
            self.note(t, seq, PacketEventKind::Drop { attempt });
            return;
        }
        let start = self.queue.back().map_or(t, |q| q.finish.max(t));
        let finish = self.serve(start, size);
        self.queue.push_back(Queued { start, finish, size });
        self.push_event(
            finish + self.link.base_owd,
            EventKind::Arrive {
                seq,
                attempt,
                sent: Time(t),
            },
        );
    }

    fn resolve_frame(&mut self, frame: u64, t: f64, status: FrameStatus) {
        let f = &mut self.frames[frame as usize];
        if f.status != FrameStatus::Pending {
            return;
        }
        f.status = status;
        let (capture, size) = (f.capture, f.size);
        if let Some(w) = self.window(t) {
            match status {
                FrameStatus::Complete => {
                    w.completed += 1;
                    w.delay_sum += t - capture;
                    w.played_bytes += size as u64;
                }
                FrameStatus::Lost => w.lost += 1,
                FrameStatus::Pending => {}
            }
        }
    }

    fn arrive(&mut self, t: f64, seq: u64, attempt: u32, sent: f64) {
        let size = self.packets[seq as usize].size;
        let rtt = (t - sent) + self.link.base_owd;
        if let Some(w) = self.window(t) {
            w.recv_bytes += size as u64;
            w.rtt_sum += rtt;
            w.rtt_count += 1;
        }
        self.rtt_estimate = rtt;
        self.note(t, seq, PacketEventKind::Arrive { attempt });
        let p = &mut self.packets[seq as usize];
        if p.received {
            return;
        }
        p.received = true;
        let frame = p.frame;
        self.missing.remove(&seq);
        match self.highest_seq {
            Some(h) if seq <= h => {}
            h => {
                let from = h.map_or(0, |h| h + 1);
                for s in from..seq {
                    if !self.packets[s as usize].received {
                        self.missing.insert(
                            s,
                            Missing {
                                nacks: 0,
                                last_nack: None,
                            },
                        );
                    }
                }
                self.highest_seq = Some(seq);
            }
        }
        let f = &mut self.frames[frame as usize];
        if f.status == FrameStatus::Pending {
            f.received += 1;
            if f.received == f.packets {
                self.resolve_frame(frame, t, FrameStatus::Complete);
            }
        }
    }

    fn tick(&mut self, t: f64) {
        while self.oldest_unresolved < self.frames.len() {
            let f = &self.frames[self.oldest_unresolved];
            if f.status != FrameStatus::Pending {
                self.oldest_unresolved += 1;
            } else if f.capture + self.link.frame_deadline <= t + 1e-9 {
                self.resolve_frame(self.oldest_unresolved as u64, t, FrameStatus::Lost);
                self.oldest_unresolved += 1;
            } else {
                break;
            }
        }
        let seqs: Vec<u64> = self.missing.keys().copied().collect();
        for seq in seqs {
            let frame = self.packets[seq as usize].frame;
            if self.frames[frame as usize].status != FrameStatus::Pending {
                self.missing.remove(&seq);
                continue;
            }
            let m = self.missing[&seq];
            let due = m.last_nack.is_none_or(|last| t - last >= self.rtt_estimate - 1e-9);
            if !due {
                continue;
            }
            if m.nacks >= self.link.retx_limit {
                self.missing.remove(&seq);
                self.note(t, seq, PacketEventKind::Abandon);
                self.resolve_frame(frame, t, FrameStatus::Lost);
                continue;
            }
            self.missing.insert(
                seq,
                Missing {
                    nacks: m.nacks + 1,
                    last_nack: Some(t),
                },
            );
            if let Some(w) = self.window(t) {
                w.nacks += 1;
            }
            self.note(t, seq, PacketEventKind::Nack);
            self.push_event(t + self.link.base_owd, EventKind::NackAtSender { seq });
        }
    }

    fn run_events_until(&mut self, t: f64, inclusive: bool) {
        while let Some(std::cmp::Reverse(ev)) = self.events.peek().copied() {
            let due = if inclusive { ev.time.0 <= t } else { ev.time.0 < t };
            if !due {
                break;
            }
            self.events.pop();
            match ev.kind {
                EventKind::Send { seq } => self.transmit(ev.time.0, seq),
                EventKind::NackAtSender { seq } => {
                    let p = &self.packets[seq as usize];
                    if !p.received && self.frames[p.frame as usize].status == FrameStatus::Pending {
                        self.transmit(ev.time.0, seq);
                    }
                }
                EventKind::Arrive { seq, attempt, sent } => self.arrive(ev.time.0, seq, attempt, sent.0),
            }
        }
    }

    fn enqueue_slot(&mut self, k: u64, target: f64) -> Result<SlotSummary, Error> {
        let fps = self.encoder.fps as u64;
        let flags: Vec<bool> = (0..fps).map(|i| self.video.is_iframe(k * fps + i)).collect();
        let ti_n = self.encoder.normalize_ti(self.video.slot_mean(k).1);
        let (slot, state) = encode_slot(k, target, ti_n, &flags, self.enc_state, &self.encoder, &mut self.enc_rng)?;
        self.enc_state = state;
        let first_seq = self.packets.len() as u64;
        let mut pkts = Vec::new();
        for fr in &slot.frames {
            let frame_id = self.frames.len() as u64;
            let ps = packetize(frame_id, fr.size, fr.capture_time, self.link.mtu);
            self.frames.push(FrameState {
                capture: fr.capture_time,
                size: fr.size,
                packets: ps.len() as u32,
                received: 0,
                status: FrameStatus::Pending,
            });
            pkts.extend(ps);
        }
        let n = pkts.len() as f64;
        for (j, p) in pkts.iter().enumerate() {
            let seq = first_seq + j as u64;
            self.packets.push(PacketState {
                frame: p.frame_id,
                size: p.size,
                attempts: 0,
                received: false,
            });
            let at = (k as f64 + j as f64 / n).max(p.capture_time);
            self.push_event(at, EventKind::Send { seq });
        }
        Ok(SlotSummary {
            target: slot.target,
            effective_target: slot.effective_target,
            actual: slot.actual,
            has_iframe: slot.has_iframe(),
        })
    }

    fn observe(&mut self, k: u64) -> ReceiverObservation {
        let end = (k + 1) as f64;
        let w = self.windows[k as usize];
        let d = if w.rtt_count > 0 {
            w.rtt_sum / w.rtt_count as f64
        } else {
            self.last_rtt
        };
        self.last_rtt = d;
        let f = if w.completed > 0 {
            w.delay_sum / w.completed as f64
        } else {
            let oldest = self.frames[self.oldest_unresolved.min(self.frames.len())..]
                .iter()
                .find(|f| f.status == FrameStatus::Pending)
                .map(|f| end - f.capture);
            oldest.unwrap_or(0.0).max(self.link.base_owd)
        };
        let resolved = w.completed + w.lost;
        ReceiverObservation {
            second: k,
            s: w.sent_bytes as f64 * 8.0 / 1000.0,
            r: w.recv_bytes as f64 * 8.0 / 1000.0,
            d,
            p: if w.first_tx > 0 {
                w.first_tx_lost as f64 / w.first_tx as f64
            } else {
                0.0
            },
            n: w.nacks as f64,
            f,
            h: if resolved > 0 { w.lost as f64 / resolved as f64 } else { 0.0 },
            played_fps: w.completed as f64,
        }
    }

    /// Encodes and simulates the next second with the given target.
    pub fn step(&mut self, target: f64) -> Result<SecondRecord, Error> {
        if self.is_done() {
            return Err(Error::Validation("session already finished".into()));
        }
        let k = self.next_second;
        let target = self.encoder.clamp_bitrate(target);
        let slot = self.enqueue_slot(k, target)?;
        self.log.slots.push(slot);

        let tps = self.ticks_per_second;
        for j in k * tps..(k + 1) * tps {
            let t = j as f64 / tps as f64;
            self.run_events_until(t, true);
            self.tick(t);
        }
        self.run_events_until((k + 1) as f64, false);

        let obs = self.observe(k);
        let delivery = ((k + 1) as f64 + obs.d).max(self.delivered_until);
        self.delivered_until = delivery;
        self.delivery_times.push(delivery);
        self.log.observations.push(obs);

        let (si, ti) = self.video.slot_mean(k);
        let m = quality_score(
            self.windows[k as usize].played_bytes as f64 * 8.0 / 1000.0,
            (si / self.quality.si_max).clamp(0.0, 1.0),
            (ti / self.quality.ti_max).clamp(0.0, 1.0),
            &self.quality,
        );
        let m_prev = self.prev_quality.unwrap_or(m);
        self.prev_quality = Some(m);
        let record = SecondRecord {
            second: k,
            decision_kbps: target,
            actual_kbps: slot.actual,
            send_kbps: obs.s,
            recv_kbps: obs.r,
            rtt_s: obs.d,
            loss: obs.p,
            nack: obs.n,
            frame_delay_s: obs.f,
            lost_frame_rate: obs.h,
            played_fps: obs.played_fps,
            quality: m,
            reward: reward(m, m_prev, obs.h, obs.f, &self.reward_params),
        };
        self.log.seconds.push(record);
        self.next_second += 1;
        Ok(record)
    }
}

/// Inputs shared by every session of an experiment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub link: LinkConfig,
    pub encoder: EncoderConfig,
    pub quality: QualityModel,
    pub reward: RewardParams,
}

/// Runs a whole session under `policy`.
pub fn run_session(
    policy: &mut dyn BitrateController,
    video: &ComplexityTrace,
    trace: &NetworkTrace,
    cfg: &SimConfig,
    duration: u64,
    seed: u64,
) -> Result<SessionLog, Error> {
    let mut session = Session::new(video, trace, cfg.link, cfg.encoder, cfg.quality, cfg.reward, duration, seed)?;
    while !session.is_done() {
        let target = policy.decide(&session.context())?;
        if !target.is_finite() {
            return Err(Error::Validation(format!("{} produced a non-finite target", policy.name())));
        }
        session.step(target)?;
    }
    Ok(session.into_log())
}
