//! Python bindings: simulation, tracking, evaluation and the suite, plus
//! direct access to the surface and kernels.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use puck_track::cluster::track_from_detection;
use puck_track::eros::{self, DEFAULT_K_EROS};
use puck_track::eval::{self, default_scenarios, Algorithm, SuiteConfig};
use puck_track::event::{read_ground_truth, read_stream, write_ground_truth, write_stream, Event, GroundTruthSample};
use puck_track::kernel::{self, KernelBank, SizeModel, SizeObservation, DEFAULT_BANK_STEP};
use puck_track::pipeline::{self, from_slice, PipelineConfig, PipelineMode, Playback};
use puck_track::sim::{simulate, SceneConfig};
use puck_track::tracker::{load_reports, save_reports, Mode, PuckReport, Tracker, TrackerConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn scene(preset: &str, seed: u64, duration: f64) -> PyResult<SceneConfig> {
    let mut cfg = match preset {
        "static" => SceneConfig::static_scene(seed),
        "moving" => SceneConfig::moving_scene(seed),
        other => return Err(value_err(format!("unknown preset {other:?}, expected 'static' or 'moving'"))),
    };
    cfg.duration_s = duration;
    Ok(cfg)
}

type ReportTuple = (u64, f64, f64, f64, String);

fn report_tuple(r: &PuckReport) -> ReportTuple {
    let mode = match r.mode {
        Mode::Tracking => "tracking",
        Mode::Detecting => "detecting",
    };
    (r.t_us, r.x, r.y, r.score, mode.to_string())
}

fn from_tuple(t: &ReportTuple) -> PyResult<PuckReport> {
    let mode = match t.4.as_str() {
        "tracking" => Mode::Tracking,
        "detecting" => Mode::Detecting,
        m => return Err(value_err(format!("unknown mode {m:?}"))),
    };
    Ok(PuckReport { t_us: t.0, x: t.1, y: t.2, score: t.3, mode })
}

/// Simulates a preset scene and writes the event file and ground truth.
/// Returns the number of events.
#[pyfunction]
#[pyo3(signature = (events_path, gt_path, preset = "static", seed = 0, duration = 10.0))]
fn generate(events_path: PathBuf, gt_path: PathBuf, preset: &str, seed: u64, duration: f64) -> PyResult<usize> {
    let sim = simulate(&scene(preset, seed, duration)?).map_err(value_err)?;
    write_stream(&sim.header, &sim.events, &events_path).map_err(io_err)?;
    write_ground_truth(&sim.ground_truth, &gt_path).map_err(io_err)?;
    Ok(sim.events.len())
}

/// Simulates a preset scene in memory: `(events, ground_truth)` as lists of
/// `(t, x, y, p)` and `(t, cx, cy, a, b)` tuples.
#[pyfunction]
#[pyo3(signature = (preset = "static", seed = 0, duration = 1.0))]
#[allow(clippy::type_complexity)]
fn simulate_scene(
    preset: &str,
    seed: u64,
    duration: f64,
) -> PyResult<(Vec<(u64, u16, u16, bool)>, Vec<(u64, f64, f64, f64, f64)>)> {
    let sim = simulate(&scene(preset, seed, duration)?).map_err(value_err)?;
    Ok((
        sim.events.iter().map(|e| (e.t, e.x, e.y, e.p)).collect(),
        sim.ground_truth.iter().map(|g| (g.t, g.cx, g.cy, g.a, g.b)).collect(),
    ))
}

/// Least-squares size model from `(x, y, a, b)` observations, as a dict of
/// the six coefficients.
#[pyfunction]
fn fit_size_model(observations: Vec<(f64, f64, f64, f64)>) -> PyResult<HashMap<String, f64>> {
    let obs: Vec<SizeObservation> =
        observations.into_iter().map(|(x, y, a, b)| SizeObservation { x, y, a, b }).collect();
    let m = kernel::fit_size_model(&obs).map_err(value_err)?.model;
    Ok([("k0", m.k0), ("k1", m.k1), ("k2", m.k2), ("h0", m.h0), ("h1", m.h1), ("h2", m.h2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect())
}

/// Tracks an event file. The size model comes from `model_path` or, failing
/// that, the simulator's default geometry. Returns `(reports, stats)`; when
/// `out_path` is given the reports are also written there as CSV.
#[pyfunction]
#[pyo3(signature = (events_path, mode = "seq", realtime = None, algo = "puck", model_path = None, out_path = None))]
fn track(
    events_path: PathBuf,
    mode: &str,
    realtime: Option<f64>,
    algo: &str,
    model_path: Option<PathBuf>,
    out_path: Option<PathBuf>,
) -> PyResult<(Vec<ReportTuple>, HashMap<String, f64>)> {
    let mode = match mode {
        "seq" => PipelineMode::Sequential,
        "par" => PipelineMode::Concurrent,
        m => return Err(value_err(format!("mode must be 'seq' or 'par', got {m:?}"))),
    };
    let algo = match algo {
        "puck" => Algorithm::Puck,
        "cluster" => Algorithm::Cluster,
        a => return Err(value_err(format!("algo must be 'puck' or 'cluster', got {a:?}"))),
    };
    let playback = match realtime {
        None => Playback::AsFastAsPossible,
        Some(s) if s > 0.0 && s.is_finite() => Playback::RealTime { speed: s },
        Some(s) => return Err(value_err(format!("realtime must be positive, got {s}"))),
    };
    let defaults = SceneConfig::default();
    let model = match model_path {
        Some(p) => SizeModel::load(p).map_err(io_err)?,
        None => defaults.size_model(),
    };
    let (header, events) = read_stream(&events_path).map_err(io_err)?;
    let bank = KernelBank::for_field(model, &defaults.field, DEFAULT_BANK_STEP).map_err(value_err)?;
    let mut tracker = Tracker::new(TrackerConfig::default(), bank).map_err(value_err)?;
    let surface =
        eros::ErosSurface::new(header.width as usize, header.height as usize, DEFAULT_K_EROS).map_err(value_err)?;
    let pcfg = PipelineConfig {
        mode,
        playback,
        stream_end_us: Some(header.duration_us),
        ..PipelineConfig::default()
    };
    let out = pipeline::run(from_slice(&events), &surface, &mut tracker, &pcfg).map_err(value_err)?;
    let reports = match algo {
        Algorithm::Puck => out.reports,
        Algorithm::Cluster => track_from_detection(&out.reports, &events, &model, pcfg.pass_interval_us)
            .ok_or_else(|| value_err("the puck was never detected, nothing to seed the cluster with"))?,
    };
    if let Some(p) = out_path {
        save_reports(&reports, algo.name(), p).map_err(io_err)?;
    }
    let s = &out.stats;
    let (l1, l2) = (s.stage1.summary(), s.stage2.summary());
    let stats = [
        ("processed", s.processed as f64),
        ("passes", s.passes as f64),
        ("pass_rate_hz", s.pass_rate()),
        ("throughput_ev_per_s", s.throughput()),
        ("stage1_latency_mean_us", l1.mean_us),
        ("stage1_latency_median_us", l1.median_us),
        ("stage1_latency_p99_us", l1.p99_us),
        ("stage2_latency_mean_us", l2.mean_us),
        ("stage2_latency_median_us", l2.median_us),
        ("stage2_latency_p99_us", l2.p99_us),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok((reports.iter().map(report_tuple).collect(), stats))
}

/// Accuracy of `reports` (a report CSV path or a list of report tuples)
/// against a ground-truth CSV.
#[pyfunction]
#[pyo3(signature = (reports, gt_path, threshold = eval::STATIC_THRESHOLD_PX))]
fn evaluate(reports: &Bound<'_, PyAny>, gt_path: PathBuf, threshold: f64) -> PyResult<HashMap<String, f64>> {
    let reports: Vec<PuckReport> = if let Ok(path) = reports.extract::<PathBuf>() {
        load_reports(path).map_err(io_err)?.1
    } else {
        let tuples: Vec<ReportTuple> = reports.extract()?;
        tuples.iter().map(from_tuple).collect::<PyResult<_>>()?
    };
    let gt: Vec<GroundTruthSample> = read_ground_truth(gt_path).map_err(io_err)?;
    let a = eval::evaluate(&reports, &gt, threshold).map_err(value_err)?;
    Ok([
        ("samples", a.samples as f64),
        ("mean", a.mean),
        ("median", a.median),
        ("q1", a.q1),
        ("q3", a.q3),
        ("max", a.max),
        ("threshold_px", a.threshold_px),
        ("valid_pct", a.valid_pct),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect())
}

/// Runs the sequential scenario suite; returns `(table, json)`.
#[pyfunction]
#[pyo3(signature = (n_static = 4, n_moving = 4, duration = 10.0))]
fn run_suite(n_static: usize, n_moving: usize, duration: f64) -> (String, String) {
    let rep = eval::run_suite(&SuiteConfig {
        scenarios: default_scenarios(n_static, n_moving, duration),
        ..SuiteConfig::default()
    });
    (rep.table(), rep.to_json())
}

/// Kernel weights for half-axes `(a, b)`: `(width, height, weights)` with
/// weights in row-major order.
#[pyfunction]
fn build_kernel(a: f64, b: f64) -> PyResult<(usize, usize, Vec<f64>)> {
    let k = kernel::build_kernel(a, b, None).map_err(value_err)?;
    Ok((k.width(), k.height(), k.weights().to_vec()))
}

#[pyclass(name = "ErosSurface", frozen)]
struct PySurface {
    inner: eros::ErosSurface,
}

#[pymethods]
impl PySurface {
    #[new]
    #[pyo3(signature = (width, height, k_eros = DEFAULT_K_EROS))]
    fn new(width: usize, height: usize, k_eros: u16) -> PyResult<Self> {
        Ok(Self {
            inner: eros::ErosSurface::new(width, height, k_eros).map_err(value_err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn update(&self, x: u16, y: u16) {
        self.inner.update(&Event::new(0, x, y, true));
    }

    fn get(&self, x: usize, y: usize) -> PyResult<u8> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(value_err(format!("({x}, {y}) is outside the surface")));
        }
        Ok(self.inner.get(x, y))
    }

    /// Row-major cell values.
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.inner.width() * self.inner.height());
        for y in 0..self.inner.height() {
            for x in 0..self.inner.width() {
                out.push(self.inner.get(x, y));
            }
        }
        out
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(io_err)?;
        self.inner.write_pgm(std::io::BufWriter::new(f)).map_err(io_err)
    }
}

#[pymodule]
#[pyo3(name = "puck_track")]
fn puck_track_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(fit_size_model, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(build_kernel, m)?)?;
    m.add_class::<PySurface>()?;
    m.add("STATIC_THRESHOLD_PX", eval::STATIC_THRESHOLD_PX)?;
    m.add("MOVING_THRESHOLD_PX", eval::MOVING_THRESHOLD_PX)?;
    Ok(())
}
