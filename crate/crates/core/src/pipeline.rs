//! Two-stage runtime: stage 1 applies events to the surface, stage 2 runs
//! tracker passes on whatever the surface holds when the pass starts.
//!
//! The stages share only the surface and the timestamp of the newest
//! incorporated event. A sequential mode interleaves the two at fixed
//! event-time intervals and is bit-deterministic.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eros::ErosSurface;
use crate::event::{Event, StreamError};
use crate::tracker::{PuckReport, TrackError, Tracker};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Sequential,
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Playback {
    AsFastAsPossible,
    /// Event time runs `speed` times faster than wall time.
    RealTime { speed: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub playback: Playback,
    /// Event time between passes in sequential mode.
    pub pass_interval_us: u64,
    /// Stage 1 takes a latency sample every this many events.
    pub latency_stride: u64,
    /// Concurrent mode without stage 2, for decoupling checks.
    pub tracking_enabled: bool,
    /// Event time at which the source ends, if known. Caps the "available"
    /// side of latency once playback runs past the last event.
    pub stream_end_us: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Sequential,
            playback: Playback::AsFastAsPossible,
            pass_interval_us: 500,
            latency_stride: 64,
            tracking_enabled: true,
            stream_end_us: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencySummary {
    /// Median is the midpoint of the two central samples; p99 is nearest rank.
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2] as f64
        } else {
            (s[n / 2 - 1] as f64 + s[n / 2] as f64) / 2.0
        };
        let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            count: n,
            mean_us: s.iter().map(|&v| v as f64).sum::<f64>() / n as f64,
            median_us: median,
            p99_us: s[rank - 1] as f64,
            max_us: s[n - 1] as f64,
        }
    }
}

/// Event-time backlog samples for one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyProbe {
    pub samples: Vec<u64>,
}

/// Backlog between the newest event available and the newest processed.
pub fn measure_latency(newest_available: u64, newest_processed: u64) -> u64 {
    newest_available.saturating_sub(newest_processed)
}

impl LatencyProbe {
    pub fn record(&mut self, newest_available: u64, newest_processed: u64) -> u64 {
        let l = measure_latency(newest_available, newest_processed);
        self.samples.push(l);
        l
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary::from_samples(&self.samples)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineStats {
    pub stage1: LatencyProbe,
    pub stage2: LatencyProbe,
    pub processed: u64,
    pub dropped: u64,
    pub passes: u64,
    pub stage1_elapsed: Duration,
    pub stage2_elapsed: Duration,
    /// Timestamp of the last event applied.
    pub last_event_t: Option<u64>,
}

impl PipelineStats {
    /// Events per second of stage-1 wall time.
    pub fn throughput(&self) -> f64 {
        let s = self.stage1_elapsed.as_secs_f64();
        if s > 0.0 {
            self.processed as f64 / s
        } else {
            0.0
        }
    }

    pub fn pass_rate(&self) -> f64 {
        let s = self.stage2_elapsed.as_secs_f64();
        if s > 0.0 {
            self.passes as f64 / s
        } else {
            0.0
        }
    }

    pub fn summary_text(&self) -> String {
        let line = |name: &str, l: LatencySummary| {
            format!(
                "{name}_latency_us: mean={:.1} median={:.1} p99={:.1} max={:.1} samples={}\n",
                l.mean_us, l.median_us, l.p99_us, l.max_us, l.count
            )
        };
        let mut s = String::new();
        s += &line("stage1", self.stage1.summary());
        s += &line("stage2", self.stage2.summary());
        s += &format!("passes: {}\n", self.passes);
        s += &format!("pass_rate_hz: {:.1}\n", self.pass_rate());
        s += &format!("processed: {}\n", self.processed);
        s += &format!("dropped: {}\n", self.dropped);
        s += &format!("throughput_ev_per_s: {:.0}\n", self.throughput());
        s
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("event source failed after {} events: {error}", .stats.processed)]
    Source {
        error: StreamError,
        stats: Box<PipelineStats>,
        reports: Vec<PuckReport>,
    },
    #[error(transparent)]
    Track(#[from] TrackError),
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub reports: Vec<PuckReport>,
    pub stats: PipelineStats,
}

/// Maps wall time to the event time released so far.
pub trait Clock: Sync {
    /// Newest event time the source has made available.
    fn now_event_t(&self) -> u64;
    /// Blocks or yields until `t` has been released.
    fn wait_until(&self, t: u64);
    fn paced(&self) -> bool;
}

/// Releases events by wall clock: as fast as possible, or at a scaled rate.
#[derive(Clone, Copy, Debug)]
pub struct PlaybackClock {
    start: Instant,
    origin_t: u64,
    speed: Option<f64>,
}

impl PlaybackClock {
    pub fn new(playback: Playback, origin_t: u64) -> Self {
        let speed = match playback {
            Playback::AsFastAsPossible => None,
            Playback::RealTime { speed } => Some(speed),
        };
        Self {
            start: Instant::now(),
            origin_t,
            speed,
        }
    }

    /// Wall-clock offset from the start at which `t` is due.
    pub fn deadline(&self, t: u64) -> Duration {
        match self.speed {
            None => Duration::ZERO,
            Some(s) => Duration::from_secs_f64(t.saturating_sub(self.origin_t) as f64 / 1e6 / s),
        }
    }
}

impl Clock for PlaybackClock {
    fn now_event_t(&self) -> u64 {
        match self.speed {
            None => u64::MAX,
            Some(s) => self.origin_t + (self.start.elapsed().as_secs_f64() * 1e6 * s) as u64,
        }
    }

    fn wait_until(&self, t: u64) {
        if self.speed.is_none() {
            return;
        }
        let due = self.deadline(t);
        loop {
            let now = self.start.elapsed();
            if now >= due {
                return;
            }
            let ahead = due - now;
            if ahead > Duration::from_micros(300) {
                thread::sleep(ahead - Duration::from_micros(200));
            } else {
                thread::yield_now();
            }
        }
    }

    fn paced(&self) -> bool {
        self.speed.is_some()
    }
}

/// Shared between the stages: the surface plus progress counters.
struct Shared<'a> {
    surface: &'a ErosSurface,
    newest_t: AtomicU64,
    applied: AtomicU64,
    done: AtomicBool,
}

/// Stage 1: applies every event in order and publishes progress.
fn stage1<I, C>(
    source: I,
    shared: &Shared<'_>,
    clock: &C,
    stride: u64,
    stream_end: u64,
) -> (PipelineStats, Option<StreamError>)
where
    I: IntoIterator<Item = Result<Event, StreamError>>,
    C: Clock + ?Sized,
{
    let mut stats = PipelineStats::default();
    let mut probe = LatencyProbe::default();
    let mut released = 0u64;
    let mut err = None;
    let mut until_sample = stride;
    let mut last = None;
    let started = Instant::now();
    for ev in source {
        let ev = match ev {
            Ok(ev) => ev,
            Err(e) => {
                err = Some(e);
                break;
            }
        };
        until_sample -= 1;
        let sample = until_sample == 0;
        if sample {
            until_sample = stride;
        }
        // The clock is read only to pace or to sample.
        if clock.paced() && (ev.t > released || sample) {
            released = clock.now_event_t().min(stream_end);
            if ev.t > released {
                clock.wait_until(ev.t);
                released = ev.t;
            }
        }
        shared.surface.update(&ev);
        stats.processed += 1;
        shared.newest_t.store(ev.t, Ordering::Release);
        shared.applied.store(stats.processed, Ordering::Release);
        if sample {
            probe.record(if clock.paced() { released } else { ev.t }, ev.t);
        }
        last = Some(ev.t);
    }
    stats.last_event_t = last;
    stats.stage1_elapsed = started.elapsed();
    stats.stage1 = probe;
    shared.done.store(true, Ordering::Release);
    (stats, err)
}

/// Runs the pipeline over `source` on `surface`.
pub fn run<I>(
    source: I,
    surface: &ErosSurface,
    tracker: &mut Tracker,
    config: &PipelineConfig,
) -> Result<RunOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Event, StreamError>> + Send,
    I::IntoIter: Send,
{
    match config.mode {
        PipelineMode::Sequential => run_sequential(source, surface, tracker, config),
        PipelineMode::Concurrent => run_concurrent(source, surface, tracker, config),
    }
}

fn run_sequential<I>(
    source: I,
    surface: &ErosSurface,
    tracker: &mut Tracker,
    config: &PipelineConfig,
) -> Result<RunOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Event, StreamError>>,
{
    let interval = config.pass_interval_us.max(1);
    let mut out = RunOutput::default();
    let mut next_pass = interval;
    let mut newest: Option<u64> = None;
    let started = Instant::now();
    let mut pass_time = Duration::ZERO;

    let mut pass = |t_avail: u64, newest: u64, out: &mut RunOutput| -> Result<(), TrackError> {
        let t0 = Instant::now();
        if let Some(r) = tracker.step(surface, newest)? {
            out.reports.push(r);
        }
        pass_time += t0.elapsed();
        out.stats.passes += 1;
        out.stats.stage2.record(t_avail, newest);
        Ok(())
    };

    for ev in source {
        let ev = match ev {
            Ok(ev) => ev,
            Err(error) => {
                out.stats.stage1_elapsed = started.elapsed();
                return Err(PipelineError::Source {
                    error,
                    stats: Box::new(out.stats),
                    reports: out.reports,
                });
            }
        };
        if ev.t >= next_pass {
            if let Some(n) = newest {
                pass(ev.t, n, &mut out)?;
            }
            next_pass = (ev.t / interval + 1) * interval;
        }
        surface.update(&ev);
        newest = Some(ev.t);
        out.stats.processed += 1;
        if out.stats.processed % config.latency_stride.max(1) == 0 {
            out.stats.stage1.record(ev.t, ev.t);
        }
    }
    if let Some(n) = newest {
        pass(n, n, &mut out)?;
    }
    out.stats.last_event_t = newest;
    out.stats.stage1_elapsed = started.elapsed().saturating_sub(pass_time);
    out.stats.stage2_elapsed = pass_time;
    Ok(out)
}

fn run_concurrent<I>(
    source: I,
    surface: &ErosSurface,
    tracker: &mut Tracker,
    config: &PipelineConfig,
) -> Result<RunOutput, PipelineError>
where
    I: IntoIterator<Item = Result<Event, StreamError>> + Send,
    I::IntoIter: Send,
{
    let shared = Shared {
        surface,
        newest_t: AtomicU64::new(0),
        applied: AtomicU64::new(0),
        done: AtomicBool::new(false),
    };
    let clock = PlaybackClock::new(config.playback, 0);
    let stride = config.latency_stride.max(1);
    let end = config.stream_end_us.unwrap_or(u64::MAX);

    let (stage1_out, stage2_out) = thread::scope(|s| {
        let writer = s.spawn(|| stage1(source, &shared, &clock, stride, end));
        let reader = config
            .tracking_enabled
            .then(|| s.spawn(|| stage2(&shared, tracker, &clock, end)));
        let w = writer.join().expect("stage 1 panicked");
        let r = reader.map(|h| h.join().expect("stage 2 panicked"));
        (w, r)
    });

    let (mut stats, source_err) = stage1_out;
    let mut reports = Vec::new();
    if let Some(r) = stage2_out {
        let (rep, probe, passes, elapsed) = r?;
        reports = rep;
        stats.stage2 = probe;
        stats.passes = passes;
        stats.stage2_elapsed = elapsed;
    }
    match source_err {
        Some(error) => Err(PipelineError::Source {
            error,
            stats: Box::new(stats),
            reports,
        }),
        None => Ok(RunOutput { reports, stats }),
    }
}

type Stage2Out = Result<(Vec<PuckReport>, LatencyProbe, u64, Duration), TrackError>;

/// Stage 2: as-fast-as-possible passes whenever new events have arrived.
fn stage2(shared: &Shared<'_>, tracker: &mut Tracker, clock: &PlaybackClock, end: u64) -> Stage2Out {
    let mut reports = Vec::new();
    let mut probe = LatencyProbe::default();
    let mut passes = 0u64;
    let mut seen = 0u64;
    let started = Instant::now();
    loop {
        let finished = shared.done.load(Ordering::Acquire);
        let applied = shared.applied.load(Ordering::Acquire);
        if applied == seen {
            if finished {
                break;
            }
            thread::yield_now();
            continue;
        }
        seen = applied;
        let newest = shared.newest_t.load(Ordering::Acquire);
        if let Some(r) = tracker.step(shared.surface, newest)? {
            reports.push(r);
        }
        passes += 1;
        let head = shared.newest_t.load(Ordering::Acquire);
        let available = if clock.paced() && !shared.done.load(Ordering::Acquire) {
            clock.now_event_t().min(end).max(head)
        } else {
            head
        };
        probe.record(available, newest);
        // One core may be all there is; let stage 1 run between passes.
        thread::yield_now();
    }
    Ok((reports, probe, passes, started.elapsed()))
}

/// Convenience: events from memory as an infallible source.
pub fn from_slice(events: &[Event]) -> impl Iterator<Item = Result<Event, StreamError>> + Send + '_ {
    events.iter().copied().map(Ok)
}
