//! Event-by-event cluster tracker used as a comparison baseline.
//!
//! Every event inside the gate pulls the cluster towards it with a fixed
//! weight. Nothing checks that the events come from the puck.

use crate::event::Event;
use crate::kernel::SizeModel;
use crate::tracker::{Mode, PuckReport};

pub const DEFAULT_BETA: f64 = 0.05;
pub const GATE_FACTOR: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterState {
    pub x: f64,
    pub y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub gate: f64,
    pub beta: f64,
    pub last_t: u64,
}

impl ClusterState {
    /// Seeds a cluster on a detected puck of half-axes `(a, b)`. The extent
    /// starts at the spread of a ring with those axes.
    pub fn seeded(t: u64, x: f64, y: f64, a: f64, b: f64) -> Self {
        Self {
            x,
            y,
            sigma_x: a / 2f64.sqrt(),
            sigma_y: b / 2f64.sqrt(),
            gate: GATE_FACTOR * a.max(b),
            beta: DEFAULT_BETA,
            last_t: t,
        }
    }

    /// Applies one event. Returns whether it passed the gate.
    pub fn update(&mut self, ev: &Event) -> bool {
        let (ex, ey) = (ev.x as f64, ev.y as f64);
        let (dx, dy) = (ex - self.x, ey - self.y);
        if dx.hypot(dy) > self.gate {
            return false;
        }
        let b = self.beta;
        self.x += b * dx;
        self.y += b * dy;
        self.sigma_x = ((1.0 - b) * self.sigma_x.powi(2) + b * dx * dx).sqrt();
        self.sigma_y = ((1.0 - b) * self.sigma_y.powi(2) + b * dy * dy).sqrt();
        self.last_t = ev.t;
        true
    }
}

/// Functional form of [`ClusterState::update`].
pub fn cluster_update(state: ClusterState, ev: &Event) -> ClusterState {
    let mut next = state;
    next.update(ev);
    next
}

/// First report at which the tracker switched to tracking.
pub fn first_detection(reports: &[PuckReport]) -> Option<&PuckReport> {
    reports.iter().find(|r| r.mode == Mode::Tracking)
}

/// Runs the cluster over the events after its seed time, reporting every
/// `interval_us` of event time. The score is the fraction of events since
/// the previous report that passed the gate.
pub fn track_events<'a>(
    mut state: ClusterState,
    events: impl IntoIterator<Item = &'a Event>,
    interval_us: u64,
) -> Vec<PuckReport> {
    let start = state.last_t;
    let mut reports = Vec::new();
    let mut next = start + interval_us;
    let mut newest = None;
    let (mut seen, mut kept) = (0u32, 0u32);
    let mut emit = |t: u64, s: &ClusterState, seen: &mut u32, kept: &mut u32| {
        reports.push(PuckReport {
            t_us: t,
            x: s.x,
            y: s.y,
            score: if *seen == 0 { 0.0 } else { *kept as f64 / *seen as f64 },
            mode: Mode::Tracking,
        });
        (*seen, *kept) = (0, 0);
    };
    for ev in events.into_iter().filter(|e| e.t > start) {
        if ev.t >= next {
            if let Some(t) = newest {
                emit(t, &state, &mut seen, &mut kept);
            }
            next = ev.t + interval_us;
        }
        seen += 1;
        kept += state.update(ev) as u32;
        newest = Some(ev.t);
    }
    if let Some(t) = newest {
        emit(t, &state, &mut seen, &mut kept);
    }
    reports
}

/// Seeds a cluster at the first tracking report of `puck` and runs it over
/// `events`. `None` when the tracker never detected the puck.
pub fn track_from_detection(
    puck: &[PuckReport],
    events: &[Event],
    model: &SizeModel,
    interval_us: u64,
) -> Option<Vec<PuckReport>> {
    let seed = first_detection(puck)?;
    let (a, b) = model.predict(seed.x, seed.y);
    let state = ClusterState::seeded(seed.t_us, seed.x, seed.y, a, b);
    Some(track_events(state, events, interval_us))
}
