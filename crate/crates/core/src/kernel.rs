//! Ellipse ring kernels, the affine size model and the precomputed bank.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the ring in normalised radius.
pub const RING_TAU: f64 = 0.15;
pub const MIN_HALF_AXIS: f64 = 2.0;
pub const DEFAULT_BANK_STEP: f64 = 1.0;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("half-axes ({a}, {b}) below the {MIN_HALF_AXIS} px minimum")]
    Degenerate { a: f64, b: f64 },
    #[error("ring half-width {0} must be in (0, 1)")]
    InvalidTau(f64),
    #[error("surround weight {0} must be negative")]
    InvalidSurround(f64),
    #[error("kernel has no outside pixels to balance")]
    NoSurround,
    #[error("calibration needs at least 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation positions are collinear; the size model is underdetermined")]
    RankDeficient,
    #[error("size model predicts non-positive half-axes ({a:.3}, {b:.3}) at ({x}, {y})")]
    NonPositive { x: f64, y: f64, a: f64, b: f64 },
    #[error("invalid bank range or step")]
    InvalidBank,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("size model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    Inside,
    Ring,
    Outside,
}

/// Classifies the offset `(dx, dy)` from the ellipse centre.
pub fn classify(dx: f64, dy: f64, a: f64, b: f64, tau: f64) -> PixelClass {
    let r = ((dx * dx) / (a * a) + (dy * dy) / (b * b)).sqrt();
    if (r - 1.0).abs() <= tau {
        PixelClass::Ring
    } else if r < 1.0 - tau {
        PixelClass::Inside
    } else {
        PixelClass::Outside
    }
}

/// Surround margin around the ellipse, in pixels.
pub fn surround_margin(a: f64, b: f64) -> usize {
    ((0.3 * a.max(b)).ceil() as usize).max(2)
}

/// A contiguous span on one kernel row carrying extra weight on top of the
/// surround weight. Spans may nest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Run {
    pub start: usize,
    pub len: usize,
    pub excess: f64,
}

#[derive(Clone, Debug)]
pub struct PuckKernel {
    a: f64,
    b: f64,
    tau: f64,
    half_w: usize,
    half_h: usize,
    w_neg: f64,
    weights: Vec<f64>,
    ring_count: usize,
    inside_count: usize,
    outside_count: usize,
    runs: Vec<Vec<Run>>,
}

/// Builds a kernel with the default ring width. `w_neg = None` balances the
/// kernel to zero sum.
pub fn build_kernel(a: f64, b: f64, w_neg: Option<f64>) -> Result<PuckKernel, KernelError> {
    PuckKernel::new(a, b, RING_TAU, w_neg)
}

impl PuckKernel {
    pub fn new(a: f64, b: f64, tau: f64, w_neg: Option<f64>) -> Result<Self, KernelError> {
        if !(a >= MIN_HALF_AXIS && b >= MIN_HALF_AXIS) || !a.is_finite() || !b.is_finite() {
            return Err(KernelError::Degenerate { a, b });
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(KernelError::InvalidTau(tau));
        }
        if let Some(w) = w_neg {
            if !(w < 0.0) {
                return Err(KernelError::InvalidSurround(w));
            }
        }
        let m = surround_margin(a, b) as f64;
        let half_w = (a + m).ceil() as usize;
        let half_h = (b + m).ceil() as usize;
        let (w, h) = (2 * half_w + 1, 2 * half_h + 1);

        let mut classes = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                let dx = col as f64 - half_w as f64;
                let dy = row as f64 - half_h as f64;
                classes.push(classify(dx, dy, a, b, tau));
            }
        }
        let count = |c| classes.iter().filter(|&&k| k == c).count();
        let (ring_count, inside_count, outside_count) =
            (count(PixelClass::Ring), count(PixelClass::Inside), count(PixelClass::Outside));
        if outside_count == 0 {
            return Err(KernelError::NoSurround);
        }
        let w_neg = w_neg.unwrap_or(-(ring_count as f64) / outside_count as f64);
        let weights: Vec<f64> = classes
            .iter()
            .map(|c| match c {
                PixelClass::Ring => 1.0,
                PixelClass::Inside => 0.0,
                PixelClass::Outside => w_neg,
            })
            .collect();

        // Each row is the surround weight everywhere, plus the filled
        // ellipse (ring and inside) lifted to 1, minus the inside.
        let runs = classes
            .chunks_exact(w)
            .map(|row| {
                let span = |f: fn(&PixelClass) -> bool, excess: f64| {
                    let start = row.iter().position(f)?;
                    let len = row[start..].iter().take_while(|c| f(c)).count();
                    Some(Run { start, len, excess })
                };
                let filled = span(|c| *c != PixelClass::Outside, 1.0 - w_neg);
                let inside = span(|c| *c == PixelClass::Inside, -1.0);
                filled.into_iter().chain(inside).collect()
            })
            .collect();

        Ok(Self {
            a,
            b,
            tau,
            half_w,
            half_h,
            w_neg,
            weights,
            ring_count,
            inside_count,
            outside_count,
            runs,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn w_neg(&self) -> f64 {
        self.w_neg
    }

    pub fn half_width(&self) -> usize {
        self.half_w
    }

    pub fn half_height(&self) -> usize {
        self.half_h
    }

    /// Matrix columns.
    pub fn width(&self) -> usize {
        2 * self.half_w + 1
    }

    /// Matrix rows.
    pub fn height(&self) -> usize {
        2 * self.half_h + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, col: usize, row: usize) -> f64 {
        self.weights[row * self.width() + col]
    }

    pub fn ring_count(&self) -> usize {
        self.ring_count
    }

    pub fn inside_count(&self) -> usize {
        self.inside_count
    }

    pub fn outside_count(&self) -> usize {
        self.outside_count
    }

    /// Per-row spans whose excess weights, added to `w_neg`, give the row.
    pub fn runs(&self) -> &[Vec<Run>] {
        &self.runs
    }

    /// Divisor turning a raw response into a score: a saturated ring scores 1.
    pub fn score_scale(&self) -> f64 {
        255.0 * self.ring_count as f64
    }
}

/// Affine map from image position to projected half-axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeModel {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub h0: f64,
    pub h1: f64,
    pub h2: f64,
}

impl SizeModel {
    pub fn constant(a: f64, b: f64) -> Self {
        Self {
            k0: a,
            k1: 0.0,
            k2: 0.0,
            h0: b,
            h1: 0.0,
            h2: 0.0,
        }
    }

    pub fn predict(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.k0 + self.k1 * x + self.k2 * y,
            self.h0 + self.h1 * x + self.h2 * y,
        )
    }

    /// Smallest and largest predictions over a rectangle, as
    /// `((a_min, a_max), (b_min, b_max))`. The model is affine, so the corners
    /// bound it.
    pub fn range_over(&self, field: &Field) -> ((f64, f64), (f64, f64)) {
        let corners = field.corners().map(|(x, y)| self.predict(x, y));
        let fold = |f: fn(&(f64, f64)) -> f64| {
            corners
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        (fold(|p| p.0), fold(|p| p.1))
    }

    pub fn check_positive(&self, field: &Field) -> Result<(), KernelError> {
        for (x, y) in field.corners() {
            let (a, b) = self.predict(x, y);
            if !(a > 0.0 && b > 0.0) {
                return Err(KernelError::NonPositive { x, y, a, b });
            }
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("six floats always serialise")
    }

    pub fn from_config_str(s: &str) -> Result<Self, KernelError> {
        toml::from_str(s).map_err(|e| KernelError::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KernelError> {
        Ok(std::fs::write(path, self.to_config_string())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KernelError> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }
}

/// Axis-aligned rectangle in image coordinates, inclusive bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Field {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_min, self.y_max),
            (self.x_max, self.y_max),
        ]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// One annotated puck observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeObservation {
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub rms_a: f64,
    pub rms_b: f64,
    pub max_a: f64,
    pub max_b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeFit {
    pub model: SizeModel,
    pub residuals: Residuals,
}

/// Least-squares fit of both half-axis planes.
///
/// Positions are centred first so the 2x2 slope system stays well
/// conditioned for pixel-scale coordinates.
pub fn fit_size_model(obs: &[SizeObservation]) -> Result<SizeFit, KernelError> {
    if obs.len() < 3 {
        return Err(KernelError::TooFewObservations(obs.len()));
    }
    let n = obs.len() as f64;
    let mx = obs.iter().map(|o| o.x).sum::<f64>() / n;
    let my = obs.iter().map(|o| o.y).sum::<f64>() / n;
    let ma = obs.iter().map(|o| o.a).sum::<f64>() / n;
    let mb = obs.iter().map(|o| o.b).sum::<f64>() / n;

    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut sxa, mut sya, mut sxb, mut syb) = (0.0, 0.0, 0.0, 0.0);
    for o in obs {
        let (dx, dy) = (o.x - mx, o.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sxa += dx * (o.a - ma);
        sya += dy * (o.a - ma);
        sxb += dx * (o.b - mb);
        syb += dy * (o.b - mb);
    }
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-10 * sxx * syy) || sxx * syy == 0.0 {
        return Err(KernelError::RankDeficient);
    }
    let solve = |rx: f64, ry: f64| ((syy * rx - sxy * ry) / det, (sxx * ry - sxy * rx) / det);
    let (k1, k2) = solve(sxa, sya);
    let (h1, h2) = solve(sxb, syb);
    let model = SizeModel {
        k0: ma - k1 * mx - k2 * my,
        k1,
        k2,
        h0: mb - h1 * mx - h2 * my,
        h1,
        h2,
    };

    let (mut ssa, mut ssb, mut max_a, mut max_b) = (0.0, 0.0, 0.0f64, 0.0f64);
    for o in obs {
        let (pa, pb) = model.predict(o.x, o.y);
        ssa += (o.a - pa).powi(2);
        ssb += (o.b - pb).powi(2);
        max_a = max_a.max((o.a - pa).abs());
        max_b = max_b.max((o.b - pb).abs());
    }
    Ok(SizeFit {
        model,
        residuals: Residuals {
            rms_a: (ssa / n).sqrt(),
            rms_b: (ssb / n).sqrt(),
            max_a,
            max_b,
        },
    })
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<Vec<SizeObservation>, KernelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_observations(obs: &[SizeObservation], path: impl AsRef<Path>) -> Result<(), KernelError> {
    let mut w = csv::Writer::from_path(path)?;
    for o in obs {
        w.serialize(o)?;
    }
    w.flush()?;
    Ok(())
}

/// Grid point chosen by [`KernelBank::kernel_for`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelChoice {
    pub ia: usize,
    pub ib: usize,
    pub predicted: (f64, f64),
    /// The prediction fell outside the bank and was clamped.
    pub clamped: bool,
}

/// Kernels precomputed on a regular `(a, b)` grid.
#[derive(Clone, Debug)]
pub struct KernelBank {
    model: SizeModel,
    a0: f64,
    b0: f64,
    step: f64,
    na: usize,
    nb: usize,
    kernels: Vec<PuckKernel>,
}

impl KernelBank {
    /// Bank covering every prediction of `model` over `field`.
    pub fn for_field(model: SizeModel, field: &Field, step: f64) -> Result<Self, KernelError> {
        model.check_positive(field)?;
        let ((a_lo, a_hi), (b_lo, b_hi)) = model.range_over(field);
        Self::with_range(model, (a_lo, a_hi), (b_lo, b_hi), step)
    }

    /// Grid from `floor` of the lower bound to `ceil` of the upper bound in
    /// multiples of `step`, never below the minimum half-axis.
    pub fn with_range(
        model: SizeModel,
        a: (f64, f64),
        b: (f64, f64),
        step: f64,
    ) -> Result<Self, KernelError> {
        if !(step > 0.0) || !(a.0 <= a.1) || !(b.0 <= b.1) {
            return Err(KernelError::InvalidBank);
        }
        let axis = |lo: f64, hi: f64| {
            let start = ((lo / step).floor() * step).max(MIN_HALF_AXIS);
            let n = (((hi - start) / step).ceil().max(0.0) as usize) + 1;
            (start, n)
        };
        let (a0, na) = axis(a.0, a.1);
        let (b0, nb) = axis(b.0, b.1);
        let mut kernels = Vec::with_capacity(na * nb);
        for ia in 0..na {
            for ib in 0..nb {
                kernels.push(build_kernel(a0 + ia as f64 * step, b0 + ib as f64 * step, None)?);
            }
        }
        Ok(Self {
            model,
            a0,
            b0,
            step,
            na,
            nb,
            kernels,
        })
    }

    pub fn model(&self) -> &SizeModel {
        &self.model
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn a_values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.na).map(|i| self.a0 + i as f64 * self.step)
    }

    pub fn b_values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nb).map(|i| self.b0 + i as f64 * self.step)
    }

    pub fn get(&self, ia: usize, ib: usize) -> &PuckKernel {
        &self.kernels[ia * self.nb + ib]
    }

    /// Nearest grid entry to `(a, b)`. On a rectangular grid the Euclidean
    /// nearest point is the per-axis nearest one; ties go to the smaller size.
    pub fn nearest(&self, a: f64, b: f64) -> (usize, usize, bool) {
        let pick = |v: f64, start: f64, n: usize| {
            let u = (v - start) / self.step;
            let i = if u.fract() == 0.5 { u.floor() } else { u.round() };
            let clamped = i < 0.0 || i > (n - 1) as f64;
            (i.clamp(0.0, (n - 1) as f64) as usize, clamped)
        };
        let (ia, ca) = pick(a, self.a0, self.na);
        let (ib, cb) = pick(b, self.b0, self.nb);
        (ia, ib, ca || cb)
    }

    /// Kernel closest to the model prediction at `(x, y)`.
    pub fn kernel_for(&self, x: f64, y: f64) -> (&PuckKernel, KernelChoice) {
        let predicted = self.model.predict(x, y);
        let (ia, ib, clamped) = self.nearest(predicted.0, predicted.1);
        (
            self.get(ia, ib),
            KernelChoice {
                ia,
                ib,
                predicted,
                clamped,
            },
        )
    }
}
