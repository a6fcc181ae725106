//! Synthetic air-hockey scenes: a bouncing puck, an optional paddle, star
//! patterns that only show up when the camera jitters, and uniform noise.
//!
//! Contrast events come from the set difference between successive
//! rasterised silhouettes at a fixed internal step. The playing field is an
//! image-plane rectangle of admissible puck centres; perspective is folded
//! into the position-dependent size model.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, GroundTruthSample, StreamHeader, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::kernel::{Field, SizeModel};

pub const MAX_SPEED: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("puck start ({0}, {1}) is outside the field")]
    StartOutsideField(f64, f64),
    #[error("scene config: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Five-pointed star printed on the table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Star {
    pub x: f64,
    pub y: f64,
    pub outer: f64,
    pub inner: f64,
    /// Radians.
    #[serde(default)]
    pub rotation: f64,
}

impl Star {
    pub fn vertices(&self) -> [(f64, f64); 10] {
        let mut v = [(0.0, 0.0); 10];
        for (i, p) in v.iter_mut().enumerate() {
            let r = if i % 2 == 0 { self.outer } else { self.inner };
            let ang = self.rotation - PI / 2.0 + i as f64 * PI / 5.0;
            *p = (self.x + r * ang.cos(), self.y + r * ang.sin());
        }
        v
    }

    /// Even-odd rule.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = self.vertices();
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let ((xi, yi), (xj, yj)) = (v[i], v[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Sorted crossings of the outline with the horizontal line `y`.
    fn row_crossings(&self, y: f64) -> Vec<f64> {
        let v = self.vertices();
        let mut xs = Vec::new();
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let ((xi, yi), (xj, yj)) = (v[i], v[j]);
            if (yi > y) != (yj > y) {
                xs.push((xj - xi) * (y - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        xs.sort_by(f64::total_cmp);
        xs
    }
}

/// Opponent paddle sliding left and right near the far end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paddle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub amplitude: f64,
    pub period_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: u16,
    pub height: u16,
    /// Admissible puck centres, image coordinates.
    pub field: Field,
    pub table_length_cm: f64,
    pub table_width_cm: f64,
    pub puck_diameter_cm: f64,
    /// Pixels per cm at the far end relative to the near end.
    pub far_scale: f64,
    /// Vertical over horizontal half-axis at the near and far ends.
    pub near_aspect: f64,
    pub far_aspect: f64,
    /// Overrides the geometry-derived size model.
    pub size_model: Option<SizeModel>,
    pub puck_start: (f64, f64),
    pub puck_velocity: (f64, f64),
    pub restitution: f64,
    pub stars: Vec<Star>,
    pub paddle: Option<Paddle>,
    pub jitter_amplitude_deg: f64,
    pub jitter_period_s: f64,
    pub px_per_degree: f64,
    /// Events per pixel whose puck or pattern membership flips.
    pub events_per_pixel: f64,
    /// Uniform noise, events per second per pixel.
    pub noise_rate: f64,
    pub duration_s: f64,
    pub step_us: u64,
    pub gt_rate_hz: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            field: Field::new(90.0, 40.0, 550.0, 440.0),
            table_length_cm: 213.5,
            table_width_cm: 122.0,
            puck_diameter_cm: 6.5,
            far_scale: 0.6,
            near_aspect: 0.65,
            far_aspect: 0.55,
            size_model: None,
            puck_start: (320.0, 240.0),
            puck_velocity: (0.0, 0.0),
            restitution: 0.9,
            stars: Vec::new(),
            paddle: None,
            jitter_amplitude_deg: 0.0,
            jitter_period_s: 2.0,
            px_per_degree: 10.0,
            events_per_pixel: 1.0,
            noise_rate: 0.01,
            duration_s: 10.0,
            step_us: 1000,
            gt_rate_hz: 1000.0,
            seed: 0,
        }
    }
}

/// Puck pose in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Pose {
    pub fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, a: r, b: r }
    }

    /// `sqrt(e) - 1`: negative inside, zero on the outline.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        (dx * dx + dy * dy).sqrt() - 1.0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.level(x, y) <= 0.0
    }
}

/// A straight stretch of the puck's path between bounces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub p0: (f64, f64),
    pub v: (f64, f64),
}

/// Piecewise-linear puck path with specular bounces off the field walls.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    segments: Vec<Segment>,
}

impl Trajectory {
    pub fn new(field: &Field, start: (f64, f64), v: (f64, f64), restitution: f64, duration: f64) -> Self {
        let mut segments = vec![Segment { t0: 0.0, p0: start, v }];
        loop {
            let s = *segments.last().unwrap();
            let hit = |p: f64, v: f64, lo: f64, hi: f64| {
                if v > 0.0 {
                    (hi - p) / v
                } else if v < 0.0 {
                    (lo - p) / v
                } else {
                    f64::INFINITY
                }
            };
            let tx = hit(s.p0.0, s.v.0, field.x_min, field.x_max);
            let ty = hit(s.p0.1, s.v.1, field.y_min, field.y_max);
            let dt = tx.min(ty).max(0.0);
            if !dt.is_finite() || s.t0 + dt >= duration || segments.len() > 1_000_000 {
                break;
            }
            let mut p = (s.p0.0 + s.v.0 * dt, s.p0.1 + s.v.1 * dt);
            let mut v = s.v;
            if tx <= ty {
                v.0 *= -restitution;
                p.0 = if s.v.0 > 0.0 { field.x_max } else { field.x_min };
            }
            if ty <= tx {
                v.1 *= -restitution;
                p.1 = if s.v.1 > 0.0 { field.y_max } else { field.y_min };
            }
            segments.push(Segment { t0: s.t0 + dt, p0: p, v });
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn segment_at(&self, t: f64) -> &Segment {
        let i = self.segments.partition_point(|s| s.t0 <= t);
        &self.segments[i.saturating_sub(1)]
    }

    pub fn position(&self, t: f64) -> (f64, f64) {
        let s = self.segment_at(t);
        let dt = t - s.t0;
        (s.p0.0 + s.v.0 * dt, s.p0.1 + s.v.1 * dt)
    }

    pub fn velocity(&self, t: f64) -> (f64, f64) {
        self.segment_at(t).v
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.restitution > 0.0 && self.restitution <= 1.0) {
            return bad("restitution must be in (0, 1]");
        }
        if !(self.puck_velocity.0.hypot(self.puck_velocity.1) <= MAX_SPEED) {
            return bad("puck speed exceeds the bound");
        }
        if self.step_us == 0 || !(self.gt_rate_hz > 0.0) {
            return bad("step and ground-truth rate must be positive");
        }
        if !(self.events_per_pixel >= 0.0 && self.noise_rate >= 0.0) {
            return bad("event densities must be non-negative");
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty frame");
        }
        if !(self.jitter_period_s > 0.0) {
            return bad("jitter period must be positive");
        }
        let (x, y) = self.puck_start;
        if !self.field.contains(x, y) {
            return Err(SceneError::StartOutsideField(x, y));
        }
        self.size_model()
            .check_positive(&self.field)
            .map_err(|e| SceneError::Invalid(e.to_string()))
    }

    /// The size model used for rendering: the override, or one derived from
    /// the table and puck dimensions. Scale shrinks linearly toward the far
    /// (top) end and the vertical axis is foreshortened by the aspect ratio.
    pub fn size_model(&self) -> SizeModel {
        if let Some(m) = self.size_model {
            return m;
        }
        let f = &self.field;
        let near_ppcm = (f.x_max - f.x_min) / self.table_width_cm;
        let far_ppcm = near_ppcm * self.far_scale;
        let r = self.puck_diameter_cm / 2.0;
        let span = f.y_max - f.y_min;
        let (a_far, a_near) = (r * far_ppcm, r * near_ppcm);
        let (b_far, b_near) = (a_far * self.far_aspect, a_near * self.near_aspect);
        let k2 = (a_near - a_far) / span;
        let h2 = (b_near - b_far) / span;
        SizeModel {
            k0: a_far - k2 * f.y_min,
            k1: 0.0,
            k2,
            h0: b_far - h2 * f.y_min,
            h1: 0.0,
            h2,
        }
    }

    pub fn jitter_amplitude_px(&self) -> f64 {
        self.jitter_amplitude_deg * self.px_per_degree
    }

    /// Horizontal image shift caused by camera yaw at time `t` seconds.
    pub fn jitter(&self, t: f64) -> f64 {
        self.jitter_amplitude_px() * (2.0 * PI * t / self.jitter_period_s).sin()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(
            &self.field,
            self.puck_start,
            self.puck_velocity,
            self.restitution,
            self.duration_s,
        )
    }

    pub fn duration_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self, SceneError> {
        toml::from_str(s).map_err(|e| SceneError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SceneError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        Ok(std::fs::write(path, self.to_toml())?)
    }

    /// Fixed camera, an opponent paddle at the far end, no patterns moving.
    pub fn static_scene(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4943);
        let mut c = Self {
            seed,
            paddle: Some(Paddle {
                x: 320.0,
                y: 20.0,
                radius: 14.0,
                amplitude: 140.0,
                period_s: 1.7,
            }),
            ..Self::default()
        };
        c.stars = default_stars();
        randomise_puck(&mut c, &mut rng);
        c
    }

    /// Camera yaw oscillation makes the printed stars emit events.
    pub fn moving_scene(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d4f_5649);
        let mut c = Self {
            seed,
            jitter_amplitude_deg: 6.0,
            jitter_period_s: 2.0,
            ..Self::default()
        };
        c.stars = default_stars();
        randomise_puck(&mut c, &mut rng);
        c
    }
}

/// Six stars spread around the field, clear of the central detection zone.
pub fn default_stars() -> Vec<Star> {
    [
        (170.0, 110.0),
        (470.0, 110.0),
        (140.0, 260.0),
        (500.0, 250.0),
        (200.0, 390.0),
        (440.0, 390.0),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(x, y))| Star {
        x,
        y,
        outer: 14.0,
        inner: 6.0,
        rotation: 0.3 * i as f64,
    })
    .collect()
}

fn randomise_puck(c: &mut SceneConfig, rng: &mut ChaCha8Rng) {
    let (fx, fy) = c.field.center();
    c.puck_start = (fx + rng.random_range(-30.0..30.0), fy + rng.random_range(-25.0..25.0));
    let speed = rng.random_range(250.0..450.0);
    // Keep the heading away from the axes so the puck covers the field.
    let quadrant = rng.random_range(0..4) as f64;
    let ang = quadrant * PI / 2.0 + rng.random_range(0.35..1.2);
    c.puck_velocity = (speed * ang.cos(), speed * ang.sin());
}

/// A pixel whose silhouette membership flipped between two poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flip {
    pub x: u16,
    pub y: u16,
    /// Position of the crossing within the step, in (0, 1].
    pub frac: f64,
    pub entering: bool,
}

/// Pixels inside exactly one of the two ellipses, with the crossing time
/// found by linear interpolation of the normalised radius.
pub fn silhouette_flips(prev: &Pose, next: &Pose, width: u16, height: u16) -> Vec<Flip> {
    let x_lo = (prev.cx - prev.a).min(next.cx - next.a).floor().max(0.0) as i64;
    let x_hi = (prev.cx + prev.a).max(next.cx + next.a).ceil().min(width as f64 - 1.0) as i64;
    let y_lo = (prev.cy - prev.b).min(next.cy - next.b).floor().max(0.0) as i64;
    let y_hi = (prev.cy + prev.b).max(next.cy + next.b).ceil().min(height as f64 - 1.0) as i64;
    let mut out = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (px, py) = (x as f64, y as f64);
            let (l0, l1) = (prev.level(px, py), next.level(px, py));
            let (in0, in1) = (l0 <= 0.0, l1 <= 0.0);
            if in0 != in1 {
                let frac = (l0 / (l0 - l1)).clamp(f64::MIN_POSITIVE, 1.0);
                out.push(Flip {
                    x: x as u16,
                    y: y as u16,
                    frac,
                    entering: in1,
                });
            }
        }
    }
    out
}

fn emit_count(density: f64, rng: &mut impl Rng) -> u32 {
    let whole = density.floor();
    whole as u32 + (rng.random::<f64>() < density - whole) as u32
}

fn step_time(t0: u64, dt: u64, frac: f64) -> u64 {
    t0 + ((frac * dt as f64).ceil() as u64).clamp(1, dt)
}

/// Events for one step of a moving ellipse. Timestamps fall in
/// `(t0, t0 + dt]`; a dark puck gives OFF events where it arrives.
#[allow(clippy::too_many_arguments)]
pub fn render_silhouette_events(
    prev: &Pose,
    next: &Pose,
    t0: u64,
    dt: u64,
    width: u16,
    height: u16,
    density: f64,
    rng: &mut impl Rng,
) -> Vec<Event> {
    let mut out = Vec::new();
    for f in silhouette_flips(prev, next, width, height) {
        let t = step_time(t0, dt, f.frac);
        for _ in 0..emit_count(density, rng) {
            out.push(Event::new(t, f.x, f.y, !f.entering));
        }
    }
    out
}

/// Horizontal spans of a star at each integer row, in star-local coordinates.
struct StarRaster {
    y0: i64,
    rows: Vec<Vec<(f64, f64)>>,
}

impl StarRaster {
    fn new(star: &Star) -> Self {
        let y0 = (star.y - star.outer).floor() as i64;
        let y1 = (star.y + star.outer).ceil() as i64;
        let rows = (y0..=y1)
            .map(|y| {
                star.row_crossings(y as f64)
                    .chunks_exact(2)
                    .map(|p| (p[0], p[1]))
                    .collect()
            })
            .collect();
        Self { y0, rows }
    }

    /// Events from shifting the star from `s0` to `s1` horizontally. A pixel
    /// flips when a span boundary passes its centre.
    #[allow(clippy::too_many_arguments)]
    fn shift_events(
        &self,
        s0: f64,
        s1: f64,
        t0: u64,
        dt: u64,
        cfg: &SceneConfig,
        rng: &mut impl Rng,
        out: &mut Vec<Event>,
    ) {
        if s0 == s1 {
            return;
        }
        let (lo, hi) = (s0.min(s1), s0.max(s1));
        for (i, spans) in self.rows.iter().enumerate() {
            let y = self.y0 + i as i64;
            if y < 0 || y >= cfg.height as i64 {
                continue;
            }
            for &(l, r) in spans {
                for edge in [l, r] {
                    // Pixel x flips when edge + shift crosses it.
                    let first = (edge + lo).ceil() as i64;
                    let mut x = if (first as f64) == edge + lo { first + 1 } else { first };
                    while (x as f64) <= edge + hi {
                        if x >= 0 && x < cfg.width as i64 {
                            let frac = ((x as f64 - edge - s0) / (s1 - s0)).clamp(0.0, 1.0);
                            let t = step_time(t0, dt, frac);
                            for _ in 0..emit_count(cfg.events_per_pixel, rng) {
                                out.push(Event::new(t, x as u16, y as u16, rng.random()));
                            }
                        }
                        x += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub header: StreamHeader,
    pub events: Vec<Event>,
    pub ground_truth: Vec<GroundTruthSample>,
}

/// Puck pose at `t` seconds, including the camera shift.
pub fn puck_pose(cfg: &SceneConfig, traj: &Trajectory, model: &SizeModel, t: f64) -> Pose {
    let (x, y) = traj.position(t);
    let cx = x + cfg.jitter(t);
    let (a, b) = model.predict(cx, y);
    Pose { cx, cy: y, a, b }
}

fn paddle_pose(cfg: &SceneConfig, p: &Paddle, t: f64) -> Pose {
    let x = p.x + p.amplitude * (2.0 * PI * t / p.period_s).sin() + cfg.jitter(t);
    Pose::circle(x, p.y, p.radius)
}

pub fn ground_truth(cfg: &SceneConfig) -> Vec<GroundTruthSample> {
    let traj = cfg.trajectory();
    let model = cfg.size_model();
    let period_us = 1e6 / cfg.gt_rate_hz;
    let n = (cfg.duration_s * cfg.gt_rate_hz).round() as u64;
    (0..n)
        .map(|k| {
            let t_us = (k as f64 * period_us).round() as u64;
            let p = puck_pose(cfg, &traj, &model, t_us as f64 / 1e6);
            GroundTruthSample {
                t: t_us,
                cx: p.cx,
                cy: p.cy,
                a: p.a,
                b: p.b,
            }
        })
        .collect()
}

pub fn simulate(cfg: &SceneConfig) -> Result<SimOutput, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = cfg.trajectory();
    let model = cfg.size_model();
    let rasters: Vec<StarRaster> = cfg.stars.iter().map(StarRaster::new).collect();
    let duration = cfg.duration_us();
    let dt = cfg.step_us;
    let pixels = cfg.width as f64 * cfg.height as f64;
    let noise = (cfg.noise_rate > 0.0)
        .then(|| Poisson::new(cfg.noise_rate * pixels * dt as f64 / 1e6).expect("positive rate"));

    let mut events = Vec::new();
    let mut step = Vec::new();
    let mut t0 = 0u64;
    while t0 < duration {
        let dt = dt.min(duration - t0);
        let (s0, s1) = (t0 as f64 / 1e6, (t0 + dt) as f64 / 1e6);
        step.clear();

        let (p0, p1) = (puck_pose(cfg, &traj, &model, s0), puck_pose(cfg, &traj, &model, s1));
        step.extend(render_silhouette_events(
            &p0,
            &p1,
            t0,
            dt,
            cfg.width,
            cfg.height,
            cfg.events_per_pixel,
            &mut rng,
        ));
        if let Some(paddle) = &cfg.paddle {
            let (q0, q1) = (paddle_pose(cfg, paddle, s0), paddle_pose(cfg, paddle, s1));
            step.extend(render_silhouette_events(
                &q0,
                &q1,
                t0,
                dt,
                cfg.width,
                cfg.height,
                cfg.events_per_pixel,
                &mut rng,
            ));
        }
        let (j0, j1) = (cfg.jitter(s0), cfg.jitter(s1));
        for r in &rasters {
            r.shift_events(j0, j1, t0, dt, cfg, &mut rng, &mut step);
        }
        if let Some(noise) = &noise {
            let n = noise.sample(&mut rng) as u64;
            for _ in 0..n {
                let t = t0 + rng.random_range(1..=dt);
                let x = rng.random_range(0..cfg.width);
                let y = rng.random_range(0..cfg.height);
                step.push(Event::new(t, x, y, rng.random()));
            }
        }
        step.sort_by_key(|e| e.t);
        events.extend_from_slice(&step);
        t0 += dt;
    }

    let header = StreamHeader::new(cfg.width, cfg.height, duration, events.len() as u64);
    Ok(SimOutput {
        header,
        events,
        ground_truth: ground_truth(cfg),
    })
}
