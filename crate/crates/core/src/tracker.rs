//! Detection and tracking state machine over the EROS surface.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eros::{ErosError, ErosSurface, Patch, Roi};
use crate::kernel::{KernelBank, PuckKernel};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("patch {pw}x{ph} is smaller than kernel {kw}x{kh}")]
    PatchTooSmall {
        pw: usize,
        ph: usize,
        kw: usize,
        kh: usize,
    },
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error(transparent)]
    Eros(#[from] ErosError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Detecting,
    Tracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub roi_d: Roi,
    pub theta_det: f64,
    /// Consecutive above-threshold detections needed.
    pub detect_persistence: u32,
    /// Consecutive detection peaks must stay this close, in pixels.
    pub detect_radius: f64,
    pub theta_lost: f64,
    pub loss_persistence: u32,
    /// Passes whose timestamps fall in the same bucket of this many
    /// microseconds count once towards either persistence; 0 counts every
    /// pass. Keeps M and L meaning the same event time whatever the pass
    /// rate.
    pub persistence_bucket_us: u64,
    /// ROI_t extent as a multiple of the kernel extent.
    pub roi_scale: f64,
    /// Prior sigma as a fraction of the ellipse width and height.
    pub prior_sigma_frac: f64,
    /// Argmax window as a fraction of the ROI_t extent.
    pub restrict_frac: f64,
    pub redetect: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            roi_d: Roi::new(240, 180, 160, 120),
            theta_det: 0.05,
            detect_persistence: 3,
            detect_radius: 2.0,
            theta_lost: 0.02,
            loss_persistence: 10,
            persistence_bucket_us: 500,
            roi_scale: 1.5,
            prior_sigma_frac: 0.5,
            restrict_frac: 0.5,
            redetect: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::Config(m.to_string()));
        if !(0.0 < self.theta_lost && self.theta_lost < self.theta_det && self.theta_det <= 1.0) {
            return bad("need 0 < theta_lost < theta_det <= 1");
        }
        if !(self.roi_scale > 1.0) {
            return bad("roi_scale must exceed 1");
        }
        if !(0.0 < self.restrict_frac && self.restrict_frac < 1.0) {
            return bad("restrict_frac must be in (0, 1)");
        }
        if !(self.prior_sigma_frac > 0.0) {
            return bad("prior_sigma_frac must be positive");
        }
        if self.detect_persistence == 0 || self.loss_persistence == 0 {
            return bad("persistence counts must be at least 1");
        }
        if self.roi_d.w == 0 || self.roi_d.h == 0 {
            return bad("roi_d is empty");
        }
        Ok(())
    }
}

/// Normalised scores for every kernel placement inside a patch. `(x0, y0)`
/// is the frame position of the kernel centre for the first entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ResponseMap {
    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Score with the kernel centred on frame pixel `(x, y)`, if evaluated.
    pub fn at_frame(&self, x: usize, y: usize) -> Option<f64> {
        let (c, r) = (x.checked_sub(self.x0)?, y.checked_sub(self.y0)?);
        (c < self.width && r < self.height).then(|| self.at(c, r))
    }
}

/// Valid-region cross-correlation, divided by the kernel's score scale.
///
/// The surround weight covers the whole kernel box and comes from a 2-D
/// integral image; the remaining spans on each kernel row come from row
/// prefix sums.
pub fn convolve(patch: &Patch<f64>, kernel: &PuckKernel) -> Result<ResponseMap, TrackError> {
    let (kw, kh) = (kernel.width(), kernel.height());
    let (pw, ph) = (patch.width, patch.height);
    if pw < kw || ph < kh {
        return Err(TrackError::PatchTooSmall { pw, ph, kw, kh });
    }
    let stride = pw + 1;
    let mut prefix = vec![0.0; stride * ph];
    let mut integral = vec![0.0; stride * (ph + 1)];
    for (r, row) in patch.rows().enumerate() {
        let mut acc = 0.0;
        let (above, below) = integral.split_at_mut((r + 1) * stride);
        let above = &above[r * stride..];
        for (c, v) in row.iter().enumerate() {
            acc += v;
            prefix[r * stride + c + 1] = acc;
            below[c + 1] = above[c + 1] + acc;
        }
    }

    let (rw, rh) = (pw - kw + 1, ph - kh + 1);
    let w_neg = kernel.w_neg();
    let scale = kernel.score_scale();
    let mut data = vec![0.0; rw * rh];
    for (i, out) in data.chunks_exact_mut(rw).enumerate() {
        let top = &integral[i * stride..(i + 1) * stride];
        let bottom = &integral[(i + kh) * stride..(i + kh + 1) * stride];
        for (j, o) in out.iter_mut().enumerate() {
            *o = w_neg * (bottom[j + kw] - bottom[j] - top[j + kw] + top[j]);
        }
        for (kr, runs) in kernel.runs().iter().enumerate() {
            let p = &prefix[(i + kr) * stride..(i + kr + 1) * stride];
            for r in runs {
                let (a, b) = (r.start, r.start + r.len);
                for (j, o) in out.iter_mut().enumerate() {
                    *o += r.excess * (p[j + b] - p[j + a]);
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= scale);
    }
    Ok(ResponseMap {
        x0: patch.x0 + kernel.half_width(),
        y0: patch.y0 + kernel.half_height(),
        width: rw,
        height: rh,
        data,
    })
}

/// Separable Gaussian weights over a frame-aligned region, peak 1 at `center`.
pub fn gaussian_prior(
    center: (f64, f64),
    sigma: (f64, f64),
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
) -> Patch<f64> {
    let g = |v: f64, c: f64, s: f64| (-(v - c) * (v - c) / (2.0 * s * s)).exp();
    let gx: Vec<f64> = (0..width).map(|c| g((x0 + c) as f64, center.0, sigma.0)).collect();
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        let wy = g((y0 + r) as f64, center.1, sigma.1);
        data.extend(gx.iter().map(|wx| wx * wy));
    }
    Patch::new(x0, y0, width, height, data)
}

/// Inclusive frame-coordinate window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Window {
    pub fn around(center: (f64, f64), half_w: f64, half_h: f64) -> Self {
        Self {
            x_lo: center.0 - half_w,
            x_hi: center.0 + half_w,
            y_lo: center.1 - half_h,
            y_hi: center.1 + half_h,
        }
    }

    pub fn everything() -> Self {
        Self {
            x_lo: f64::NEG_INFINITY,
            x_hi: f64::INFINITY,
            y_lo: f64::NEG_INFINITY,
            y_hi: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    /// Value that won the argmax (prior-weighted when a prior is given).
    pub value: f64,
    /// Unweighted score at the peak.
    pub score: f64,
}

/// Argmax of `map * prior` over entries inside `window`; the first maximum
/// in row-major order wins.
pub fn restricted_argmax(map: &ResponseMap, prior: Option<&Patch<f64>>, window: Window) -> Option<Peak> {
    if let Some(p) = prior {
        assert_eq!((p.width, p.height), (map.width, map.height), "prior does not match map");
    }
    let span = |lo: f64, hi: f64, origin: usize, n: usize| {
        let a = (lo - origin as f64).ceil().max(0.0);
        let b = (hi - origin as f64).floor().min(n as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    };
    let (c0, c1) = span(window.x_lo, window.x_hi, map.x0, map.width)?;
    let (r0, r1) = span(window.y_lo, window.y_hi, map.y0, map.height)?;
    let mut best: Option<Peak> = None;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let score = map.at(c, r);
            let value = prior.map_or(score, |p| score * p.at(c, r));
            if best.is_none_or(|b| value > b.value) {
                best = Some(Peak {
                    x: map.x0 + c,
                    y: map.y0 + r,
                    value,
                    score,
                });
            }
        }
    }
    best
}

/// One tracker output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuckReport {
    pub t_us: u64,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub mode: Mode,
    pub position: (f64, f64),
    pub roi_t: Roi,
    /// Bank indices of the current kernel.
    pub kernel: (usize, usize),
    pub score: f64,
    pub detect_count: u32,
    pub loss_count: u32,
    pub last_peak: Option<(f64, f64)>,
    /// Time bucket of the last pass counted towards a persistence.
    pub last_counted: Option<u64>,
    /// Passes whose kernel prediction fell outside the bank.
    pub clamped_lookups: u64,
}

impl TrackerState {
    fn detecting() -> Self {
        Self {
            mode: Mode::Detecting,
            position: (0.0, 0.0),
            roi_t: Roi::new(0, 0, 0, 0),
            kernel: (0, 0),
            score: 0.0,
            detect_count: 0,
            loss_count: 0,
            last_peak: None,
            last_counted: None,
            clamped_lookups: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tracker {
    config: TrackerConfig,
    bank: KernelBank,
    state: TrackerState,
}

impl Tracker {
    pub fn new(config: TrackerConfig, bank: KernelBank) -> Result<Self, TrackError> {
        config.validate()?;
        Ok(Self {
            config,
            bank,
            state: TrackerState::detecting(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state = TrackerState::detecting();
    }

    /// Forces tracking mode at `position`, as if it had just been detected.
    pub fn start_tracking(&mut self, position: (f64, f64)) {
        self.state.mode = Mode::Tracking;
        self.state.position = position;
        self.state.loss_count = 0;
        self.state.detect_count = 0;
        self.state.last_peak = None;
        self.state.last_counted = None;
        self.resize_roi();
    }

    /// ROI_t extent for a kernel, rounded up to odd so it centres exactly.
    pub fn roi_extent(&self, kernel: &PuckKernel) -> (u32, u32) {
        let odd = |v: f64| {
            let n = v.ceil() as u32;
            n | 1
        };
        (
            odd(self.config.roi_scale * kernel.width() as f64),
            odd(self.config.roi_scale * kernel.height() as f64),
        )
    }

    fn resize_roi(&mut self) {
        let (x, y) = self.state.position;
        let (kernel, choice) = self.bank.kernel_for(x, y);
        let (w, h) = self.roi_extent(kernel);
        self.state.kernel = (choice.ia, choice.ib);
        self.state.clamped_lookups += choice.clamped as u64;
        self.state.roi_t = Roi::centered(x.round() as i32, y.round() as i32, w, h);
    }

    /// Whether a pass at `t_us` may advance a persistence count, marking its
    /// bucket as used if so.
    fn counts(&mut self, t_us: u64) -> bool {
        let width = self.config.persistence_bucket_us;
        if width == 0 {
            return true;
        }
        let bucket = t_us / width;
        if self.state.last_counted == Some(bucket) {
            return false;
        }
        self.state.last_counted = Some(bucket);
        true
    }

    /// One detection pass over ROI_d at event time `t_us`. Returns the peak
    /// if one was evaluated.
    pub fn detect(&mut self, surface: &ErosSurface, t_us: u64) -> Result<Option<Peak>, TrackError> {
        let (cx, cy) = self.config.roi_d.center();
        let (kernel, _) = self.bank.kernel_for(cx, cy);
        let patch = surface.blurred_roi(self.config.roi_d)?;
        let peak = match convolve(&patch, kernel) {
            Ok(map) => restricted_argmax(&map, None, Window::everything()),
            Err(TrackError::PatchTooSmall { .. }) => None,
            Err(e) => return Err(e),
        };
        match peak {
            Some(p) if p.score >= self.config.theta_det => {
                let here = (p.x as f64, p.y as f64);
                let near = self.state.last_peak.is_some_and(|(lx, ly)| {
                    (lx - here.0).hypot(ly - here.1) <= self.config.detect_radius
                });
                if !near {
                    self.state.last_counted = None;
                }
                self.state.score = p.score;
                if self.counts(t_us) {
                    let st = &mut self.state;
                    st.detect_count = if near { st.detect_count + 1 } else { 1 };
                    st.last_peak = Some(here);
                }
                if self.state.detect_count >= self.config.detect_persistence {
                    self.start_tracking(here);
                    self.state.score = p.score;
                }
            }
            _ => {
                let st = &mut self.state;
                st.detect_count = 0;
                st.last_peak = None;
                st.last_counted = None;
                st.score = peak.map_or(0.0, |p| p.score);
            }
        }
        Ok(peak)
    }

    /// One tracking pass over ROI_t.
    pub fn track_pass(&mut self, surface: &ErosSurface, t_us: u64) -> Result<PuckReport, TrackError> {
        debug_assert_eq!(self.state.mode, Mode::Tracking);
        let (px, py) = self.state.position;
        let (kernel, _) = self.bank.kernel_for(px, py);
        let roi = self.state.roi_t;
        let fits = roi
            .clip(surface.width(), surface.height())
            .is_some_and(|c| c.w >= kernel.width() && c.h >= kernel.height());

        let mut score = 0.0;
        if fits {
            let patch = surface.blurred_roi(roi)?;
            let map = convolve(&patch, kernel)?;
            let sigma = (
                self.config.prior_sigma_frac * 2.0 * kernel.a(),
                self.config.prior_sigma_frac * 2.0 * kernel.b(),
            );
            let prior = gaussian_prior((px, py), sigma, map.x0, map.y0, map.width, map.height);
            let half = self.config.restrict_frac / 2.0;
            let window = Window::around((px, py), half * roi.w as f64, half * roi.h as f64);
            match restricted_argmax(&map, Some(&prior), window) {
                Some(p) if p.value > 0.0 => {
                    self.state.position = (p.x as f64, p.y as f64);
                    score = p.score;
                }
                // Nothing positive: hold the previous estimate.
                _ => {
                    score = map
                        .at_frame(px.round() as usize, py.round() as usize)
                        .unwrap_or(0.0)
                        .max(0.0);
                }
            }
        }
        self.state.score = score;

        if score >= self.config.theta_lost {
            self.state.loss_count = 0;
            self.state.last_counted = None;
        } else if self.counts(t_us) {
            self.state.loss_count += 1;
        }
        let report_pos = self.state.position;
        if self.config.redetect && self.state.loss_count >= self.config.loss_persistence {
            self.state = TrackerState {
                clamped_lookups: self.state.clamped_lookups,
                ..TrackerState::detecting()
            };
        } else {
            self.resize_roi();
        }
        Ok(PuckReport {
            t_us,
            x: report_pos.0,
            y: report_pos.1,
            score,
            mode: self.state.mode,
        })
    }

    /// Runs whichever pass the current mode calls for. Detection passes only
    /// report when they hand over to tracking.
    pub fn step(&mut self, surface: &ErosSurface, t_us: u64) -> Result<Option<PuckReport>, TrackError> {
        match self.state.mode {
            Mode::Tracking => self.track_pass(surface, t_us).map(Some),
            Mode::Detecting => {
                self.detect(surface, t_us)?;
                Ok((self.state.mode == Mode::Tracking).then_some(PuckReport {
                    t_us,
                    x: self.state.position.0,
                    y: self.state.position.1,
                    score: self.state.score,
                    mode: Mode::Tracking,
                }))
            }
        }
    }
}

/// Writes reports as CSV preceded by an `# algo=<name>` line.
pub fn write_reports<W: Write>(reports: &[PuckReport], algo: &str, mut out: W) -> Result<(), TrackError> {
    writeln!(out, "# algo={algo}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_reports(reports: &[PuckReport], algo: &str, path: impl AsRef<Path>) -> Result<(), TrackError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_reports(reports, algo, f)
}

/// Reads a report CSV; returns the algorithm tag if present.
pub fn read_reports<R: std::io::Read>(input: R) -> Result<(Option<String>, Vec<PuckReport>), TrackError> {
    let mut input = BufReader::new(input);
    let mut algo = None;
    let mut first = String::new();
    input.read_line(&mut first)?;
    let rest: Box<dyn std::io::Read> = match first.trim().strip_prefix("# algo=") {
        Some(tag) => {
            algo = Some(tag.to_string());
            Box::new(input)
        }
        None => Box::new(std::io::Read::chain(std::io::Cursor::new(first), input)),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rest);
    let reports = rdr.deserialize().collect::<Result<Vec<PuckReport>, _>>()?;
    Ok((algo, reports))
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<(Option<String>, Vec<PuckReport>), TrackError> {
    read_reports(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, classify, PixelClass, SizeModel};

    fn paint_ring(s: &ErosSurface, cx: f64, cy: f64, a: f64, b: f64) {
        for y in 0..s.height() {
            for x in 0..s.width() {
                if classify(x as f64 - cx, y as f64 - cy, a, b, 0.15) == PixelClass::Ring {
                    s.set(x, y, 255);
                }
            }
        }
    }

    fn bank(a: f64, b: f64) -> KernelBank {
        KernelBank::with_range(SizeModel::constant(a, b), (a, a), (b, b), 1.0).unwrap()
    }

    fn tracker(m: u32) -> Tracker {
        let cfg = TrackerConfig {
            roi_d: Roi::new(40, 40, 80, 60),
            detect_persistence: m,
            ..TrackerConfig::default()
        };
        Tracker::new(cfg, bank(8.0, 6.0)).unwrap()
    }

    #[test]
    fn zero_patch_gives_zero_response() {
        let k = build_kernel(5.0, 4.0, None).unwrap();
        let p = Patch::new(0, 0, 30, 25, vec![0.0; 750]);
        let r = convolve(&p, &k).unwrap();
        assert_eq!((r.width, r.height), (30 - k.width() + 1, 25 - k.height() + 1));
        assert!(r.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_ring_scores_one_at_its_alignment() {
        let k = build_kernel(7.0, 5.0, None).unwrap();
        let (w, h) = (k.width() + 10, k.height() + 8);
        let mut data = vec![0.0; w * h];
        for row in 0..k.height() {
            for col in 0..k.width() {
                if k.weight(col, row) == 1.0 {
                    data[(row + 4) * w + col + 5] = 255.0;
                }
            }
        }
        let r = convolve(&Patch::new(100, 50, w, h, data), &k).unwrap();
        let peak = restricted_argmax(&r, None, Window::everything()).unwrap();
        assert_eq!((peak.x, peak.y), (100 + 5 + k.half_width(), 50 + 4 + k.half_height()));
        assert!((peak.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_smaller_than_kernel_is_an_error() {
        let k = build_kernel(5.0, 5.0, None).unwrap();
        let p = Patch::new(0, 0, 5, 40, vec![0.0; 200]);
        assert!(matches!(convolve(&p, &k), Err(TrackError::PatchTooSmall { .. })));
    }

    #[test]
    fn prior_values() {
        let w = 20.0;
        let p = gaussian_prior((10.0, 10.0), (0.5 * w, 0.5 * w), 0, 0, 41, 21);
        assert_eq!(p.at(10, 10), 1.0);
        assert!((p.at(30, 10) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((p.at(30, 10) - 0.1353).abs() < 1e-4);
        for d in 0..10 {
            assert_eq!(p.at(10 + d, 10 + d), p.at(10 - d, 10 - d));
            assert_eq!(p.at(10 + d, 10), p.at(10 - d, 10));
        }
    }

    #[test]
    fn uniform_map_argmax_is_prior_peak() {
        let map = ResponseMap {
            x0: 50,
            y0: 60,
            width: 15,
            height: 11,
            data: vec![0.7; 165],
        };
        let prior = gaussian_prior((57.0, 64.0), (4.0, 3.0), 50, 60, 15, 11);
        let p = restricted_argmax(&map, Some(&prior), Window::around((57.0, 64.0), 4.0, 4.0)).unwrap();
        assert_eq!((p.x, p.y), (57, 64));
    }

    #[test]
    fn argmax_ties_go_to_first_row_major() {
        let mut data = vec![0.0; 20];
        data[7] = 1.0;
        data[13] = 1.0;
        let map = ResponseMap {
            x0: 0,
            y0: 0,
            width: 5,
            height: 4,
            data,
        };
        let p = restricted_argmax(&map, None, Window::everything()).unwrap();
        assert_eq!((p.x, p.y), (2, 1));
        let p = restricted_argmax(&map, None, Window::around((3.0, 2.5), 0.5, 0.5)).unwrap();
        assert_eq!((p.x, p.y), (3, 2));
        assert!(restricted_argmax(&map, None, Window::around((30.0, 2.0), 1.0, 1.0)).is_none());
    }

    #[test]
    fn empty_surface_stays_detecting() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        let mut t = tracker(3);
        t.detect(&s, 0).unwrap();
        assert_eq!(t.state().mode, Mode::Detecting);
        assert_eq!(t.state().detect_count, 0);
    }

    #[test]
    fn ring_in_detection_zone_is_found() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        paint_ring(&s, 77.0, 71.0, 8.0, 6.0);
        let mut t = tracker(1);
        let r = t.step(&s, 42).unwrap().unwrap();
        assert_eq!(t.state().mode, Mode::Tracking);
        assert!((r.x - 77.0).abs() <= 1.0 && (r.y - 71.0).abs() <= 1.0);
        assert_eq!(r.t_us, 42);
    }

    #[test]
    fn detection_needs_persistence() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        paint_ring(&s, 80.0, 70.0, 8.0, 6.0);
        let mut t = tracker(3);
        assert!(t.step(&s, 0).unwrap().is_none());
        assert!(t.step(&s, 500).unwrap().is_none());
        assert_eq!(t.state().detect_count, 2);
        assert!(t.step(&s, 1000).unwrap().is_some());
        assert_eq!(t.state().mode, Mode::Tracking);
    }

    #[test]
    fn passes_in_one_time_bucket_count_once() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        paint_ring(&s, 80.0, 70.0, 8.0, 6.0);
        let mut t = tracker(3);
        for us in [0, 100, 200, 499] {
            assert!(t.step(&s, us).unwrap().is_none());
        }
        assert_eq!(t.state().detect_count, 1);
        t.step(&s, 500).unwrap();
        assert_eq!(t.state().detect_count, 2);

        let empty = ErosSurface::new(160, 140, 4).unwrap();
        t.start_tracking((70.0, 60.0));
        for us in 0..100 {
            t.track_pass(&empty, 10_000 + us).unwrap();
        }
        assert_eq!(t.state().loss_count, 1);
        assert_eq!(t.state().mode, Mode::Tracking);
    }

    #[test]
    fn ring_outside_detection_zone_is_ignored() {
        let s = ErosSurface::new(200, 160, 4).unwrap();
        paint_ring(&s, 170.0, 130.0, 8.0, 6.0);
        let mut t = tracker(1);
        t.detect(&s, 0).unwrap();
        assert_eq!(t.state().mode, Mode::Detecting);
    }

    #[test]
    fn stationary_ring_keeps_position() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        paint_ring(&s, 70.0, 60.0, 8.0, 6.0);
        let mut t = tracker(1);
        t.start_tracking((70.0, 60.0));
        let r = t.track_pass(&s, 5).unwrap();
        assert_eq!((r.x, r.y), (70.0, 60.0));
        assert!(r.score > 0.5, "{}", r.score);
        assert_eq!(r.mode, Mode::Tracking);
    }

    #[test]
    fn tracks_a_ring_that_moves_each_pass() {
        let s = ErosSurface::new(200, 140, 4).unwrap();
        let mut t = tracker(1);
        t.start_tracking((60.0, 70.0));
        for step in 1..=40 {
            let cx = 60.0 + 2.0 * step as f64;
            let cy = 70.0 - 0.5 * step as f64;
            for y in 0..140 {
                for x in 0..200 {
                    s.set(x, y, 0);
                }
            }
            paint_ring(&s, cx, cy, 8.0, 6.0);
            let r = t.track_pass(&s, step).unwrap();
            assert!((r.x - cx).abs() <= 1.0 && (r.y - cy).abs() <= 1.0, "step {step}: {r:?}");
        }
    }

    #[test]
    fn near_ring_beats_far_ring() {
        let s = ErosSurface::new(200, 140, 4).unwrap();
        paint_ring(&s, 80.0, 70.0, 8.0, 6.0);
        // Far ring 0.9 ellipse widths away.
        paint_ring(&s, 80.0 + 0.9 * 16.0, 70.0, 8.0, 6.0);
        let mut t = tracker(1);
        t.start_tracking((80.0, 70.0));
        let r = t.track_pass(&s, 0).unwrap();
        assert_eq!((r.x, r.y), (80.0, 70.0));
    }

    #[test]
    fn repeated_empty_passes_revert_to_detection() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        let mut t = tracker(1);
        t.start_tracking((70.0, 60.0));
        for i in 0..9 {
            let r = t.track_pass(&s, i * 500).unwrap();
            assert_eq!(r.mode, Mode::Tracking);
            assert_eq!((r.x, r.y), (70.0, 60.0));
        }
        assert_eq!(t.track_pass(&s, 9 * 500).unwrap().mode, Mode::Detecting);
        assert_eq!(t.state().mode, Mode::Detecting);
    }

    #[test]
    fn redetect_disabled_keeps_tracking() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        let cfg = TrackerConfig {
            redetect: false,
            ..tracker(1).config().clone()
        };
        let mut t = Tracker::new(cfg, bank(8.0, 6.0)).unwrap();
        t.start_tracking((70.0, 60.0));
        for i in 0..30 {
            assert_eq!(t.track_pass(&s, i).unwrap().mode, Mode::Tracking);
        }
    }

    #[test]
    fn roi_off_frame_reports_loss() {
        let s = ErosSurface::new(160, 140, 4).unwrap();
        let mut t = tracker(1);
        t.start_tracking((1.0, 1.0));
        let r = t.track_pass(&s, 0).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(t.state().loss_count, 1);
    }

    #[test]
    fn roi_extent_is_odd_and_scaled() {
        let t = tracker(1);
        let k = build_kernel(8.0, 6.0, None).unwrap();
        let (w, h) = t.roi_extent(&k);
        assert!(w % 2 == 1 && h % 2 == 1);
        assert!(w as f64 >= 1.5 * k.width() as f64 && (w as f64) < 1.5 * k.width() as f64 + 2.0);
        assert!(h as f64 >= 1.5 * k.height() as f64);
    }

    #[test]
    fn config_validation() {
        let bad = TrackerConfig {
            theta_lost: 0.6,
            ..TrackerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrackerConfig {
            roi_scale: 1.0,
            ..TrackerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrackerConfig::default().validate().is_ok());
    }

    #[test]
    fn reports_csv_round_trip() {
        let reports = vec![
            PuckReport {
                t_us: 10,
                x: 1.5,
                y: 2.0,
                score: 0.75,
                mode: Mode::Tracking,
            },
            PuckReport {
                t_us: 20,
                x: 3.0,
                y: 4.25,
                score: 0.1,
                mode: Mode::Detecting,
            },
        ];
        let mut buf = Vec::new();
        write_reports(&reports, "cluster", &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# algo=cluster\nt_us,x,y,score,mode\n"), "{text}");
        let (algo, back) = read_reports(&buf[..]).unwrap();
        assert_eq!(algo.as_deref(), Some("cluster"));
        assert_eq!(back, reports);
        let untagged = "t_us,x,y,score,mode\n5,1,1,0.5,tracking\n";
        let (algo, back) = read_reports(untagged.as_bytes()).unwrap();
        assert_eq!(algo, None);
        assert_eq!(back.len(), 1);
    }
}
