//! Accuracy evaluation against ground truth and the scenario suite runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{first_detection, track_from_detection};
use crate::eros::{ErosSurface, DEFAULT_K_EROS};
use crate::event::{write_ground_truth, write_stream, GroundTruthSample};
use crate::kernel::{KernelBank, DEFAULT_BANK_STEP};
use crate::pipeline::{self, from_slice, LatencySummary, PipelineConfig, PipelineStats};
use crate::sim::{simulate, SceneConfig};
use crate::tracker::{save_reports, write_reports, PuckReport, Tracker, TrackerConfig};

/// Valid-position thresholds for the two camera set-ups.
pub const STATIC_THRESHOLD_PX: f64 = 3.5;
pub const MOVING_THRESHOLD_PX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no reports to evaluate")]
    NoReports,
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
    #[error("reports ({r0}..{r1} us) and ground truth ({g0}..{g1} us) do not overlap")]
    NoOverlap { r0: u64, r1: u64, g0: u64, g1: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    #[serde(skip)]
    pub errors: Vec<f64>,
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub max: f64,
    pub threshold_px: f64,
    pub valid_pct: f64,
}

/// Linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl AccuracyReport {
    pub fn from_errors(errors: Vec<f64>, threshold_px: f64) -> Self {
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n == 0 {
            return Self {
                errors,
                samples: 0,
                mean: 0.0,
                median: 0.0,
                q1: 0.0,
                q3: 0.0,
                max: 0.0,
                threshold_px,
                valid_pct: 0.0,
            };
        }
        let valid = sorted.iter().filter(|&&e| e <= threshold_px).count();
        Self {
            samples: n,
            mean: sorted.iter().sum::<f64>() / n as f64,
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            max: sorted[n - 1],
            threshold_px,
            valid_pct: 100.0 * valid as f64 / n as f64,
            errors,
        }
    }
}

/// Scores each ground-truth sample inside the reported interval against the
/// latest report at or before it.
pub fn evaluate(
    reports: &[PuckReport],
    gt: &[GroundTruthSample],
    threshold_px: f64,
) -> Result<AccuracyReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    if gt.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let mut reps = reports.to_vec();
    reps.sort_by_key(|r| r.t_us);
    let mut gt = gt.to_vec();
    gt.sort_by_key(|g| g.t);
    let (r0, r1) = (reps[0].t_us, reps[reps.len() - 1].t_us);
    let (g0, g1) = (gt[0].t, gt[gt.len() - 1].t);

    let mut errors = Vec::new();
    let mut j = 0;
    for g in gt.iter().filter(|g| g.t >= r0 && g.t <= r1) {
        while j + 1 < reps.len() && reps[j + 1].t_us <= g.t {
            j += 1;
        }
        let r = &reps[j];
        errors.push((r.x - g.cx).hypot(r.y - g.cy));
    }
    if errors.is_empty() {
        return Err(EvalError::NoOverlap { r0, r1, g0, g1 });
    }
    Ok(AccuracyReport::from_errors(errors, threshold_px))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Puck,
    Cluster,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Puck => "puck",
            Self::Cluster => "cluster",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub scene: SceneConfig,
    pub threshold_px: f64,
}

impl Scenario {
    pub fn fixed_camera(seed: u64, duration_s: f64) -> Self {
        let mut scene = SceneConfig::static_scene(seed);
        scene.duration_s = duration_s;
        Self {
            id: format!("static-{seed}"),
            scene,
            threshold_px: STATIC_THRESHOLD_PX,
        }
    }

    pub fn moving_camera(seed: u64, duration_s: f64) -> Self {
        let mut scene = SceneConfig::moving_scene(seed);
        scene.duration_s = duration_s;
        Self {
            id: format!("moving-{seed}"),
            scene,
            threshold_px: MOVING_THRESHOLD_PX,
        }
    }
}

/// `n_static` fixed-camera and `n_moving` moving-camera scenes with distinct
/// seeds.
pub fn default_scenarios(n_static: usize, n_moving: usize, duration_s: f64) -> Vec<Scenario> {
    let fixed = (0..n_static as u64).map(|i| Scenario::fixed_camera(101 + i, duration_s));
    let moving = (0..n_moving as u64).map(|i| Scenario::moving_camera(201 + i, duration_s));
    fixed.chain(moving).collect()
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub scenarios: Vec<Scenario>,
    pub algorithms: Vec<Algorithm>,
    pub tracker: TrackerConfig,
    pub pipeline: PipelineConfig,
    pub k_eros: u16,
    /// Artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenarios: default_scenarios(4, 4, 10.0),
            algorithms: vec![Algorithm::Puck, Algorithm::Cluster],
            tracker: TrackerConfig::default(),
            pipeline: PipelineConfig::default(),
            k_eros: DEFAULT_K_EROS,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub scene_sha256: String,
    pub tracker_sha256: String,
    pub outputs: Vec<String>,
}

/// Wall-clock dependent figures, kept apart from the reproducible ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage1_latency: LatencySummary,
    pub stage2_latency: LatencySummary,
    pub pass_rate_hz: f64,
    pub throughput_ev_per_s: f64,
}

impl Timing {
    fn from_stats(stats: &PipelineStats) -> Self {
        Self {
            stage1_latency: stats.stage1.summary(),
            stage2_latency: stats.stage2.summary(),
            pass_rate_hz: stats.pass_rate(),
            throughput_ev_per_s: stats.throughput(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub manifest: RunManifest,
    pub accuracy: Option<AccuracyReport>,
    pub reports: usize,
    pub events: u64,
    /// Digest of the report CSV.
    pub trajectory_sha256: Option<String>,
    pub timing: Timing,
    pub error: Option<String>,
}

impl SuiteRow {
    /// Equality on everything except wall-clock timing.
    pub fn same_result(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.accuracy == other.accuracy
            && self.reports == other.reports
            && self.events == other.events
            && self.trajectory_sha256 == other.trajectory_sha256
            && self.error == other.error
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn trajectory_digest(reports: &[PuckReport], algo: Algorithm) -> String {
    let mut buf = Vec::new();
    write_reports(reports, algo.name(), &mut buf).expect("in-memory write");
    sha256_hex(&buf)
}

/// Everything one scenario produces, for all requested algorithms.
struct ScenarioRun {
    rows: Vec<SuiteRow>,
}

fn run_scenario(sc: &Scenario, cfg: &SuiteConfig) -> ScenarioRun {
    let manifest = |algo: Algorithm| RunManifest {
        scenario: sc.id.clone(),
        seed: sc.scene.seed,
        algorithm: algo,
        scene_sha256: sha256_hex(sc.scene.to_toml().as_bytes()),
        tracker_sha256: sha256_hex(toml::to_string(&cfg.tracker).expect("tracker config serialises").as_bytes()),
        outputs: Vec::new(),
    };
    let failed = |algo: Algorithm, e: String| SuiteRow {
        manifest: manifest(algo),
        accuracy: None,
        reports: 0,
        events: 0,
        trajectory_sha256: None,
        timing: Timing::default(),
        error: Some(e),
    };
    let fail_all = |e: String| ScenarioRun {
        rows: cfg.algorithms.iter().map(|&a| failed(a, e.clone())).collect(),
    };

    let sim = match simulate(&sc.scene) {
        Ok(s) => s,
        Err(e) => return fail_all(e.to_string()),
    };
    let dir = cfg.out_dir.as_ref().map(|d| d.join(&sc.id));
    let mut shared_outputs = Vec::new();
    if let Some(d) = &dir {
        let written = std::fs::create_dir_all(d)
            .map_err(|e| e.to_string())
            .and_then(|_| {
                write_stream(&sim.header, &sim.events, d.join("events.evs")).map_err(|e| e.to_string())
            })
            .and_then(|_| write_ground_truth(&sim.ground_truth, d.join("gt.csv")).map_err(|e| e.to_string()))
            .and_then(|_| std::fs::write(d.join("scene.toml"), sc.scene.to_toml()).map_err(|e| e.to_string()));
        if let Err(e) = written {
            return fail_all(e);
        }
        shared_outputs = vec![path_string(&d.join("events.evs")), path_string(&d.join("gt.csv"))];
    }

    // The cluster is seeded from the first detection, so the PUCK run always
    // happens.
    let bank = match KernelBank::for_field(sc.scene.size_model(), &sc.scene.field, DEFAULT_BANK_STEP) {
        Ok(b) => b,
        Err(e) => return fail_all(e.to_string()),
    };
    let model = *bank.model();
    let puck = (|| -> Result<_, String> {
        let surface = ErosSurface::new(sim.header.width as usize, sim.header.height as usize, cfg.k_eros)
            .map_err(|e| e.to_string())?;
        let mut tracker = Tracker::new(cfg.tracker.clone(), bank).map_err(|e| e.to_string())?;
        let mut pcfg = cfg.pipeline.clone();
        pcfg.stream_end_us.get_or_insert(sim.events.last().map_or(0, |e| e.t));
        pipeline::run(from_slice(&sim.events), &surface, &mut tracker, &pcfg).map_err(|e| e.to_string())
    })();

    let finish = |algo: Algorithm, reports: &[PuckReport], timing: Timing, events: u64| {
        let mut m = manifest(algo);
        m.outputs = shared_outputs.clone();
        if let Some(d) = &dir {
            let p = d.join(format!("{}.csv", algo.name()));
            if let Err(e) = save_reports(reports, algo.name(), &p) {
                return failed(algo, e.to_string());
            }
            m.outputs.push(path_string(&p));
        }
        let accuracy = evaluate(reports, &sim.ground_truth, sc.threshold_px);
        SuiteRow {
            manifest: m,
            reports: reports.len(),
            events,
            trajectory_sha256: Some(trajectory_digest(reports, algo)),
            timing,
            error: accuracy.as_ref().err().map(|e| e.to_string()),
            accuracy: accuracy.ok(),
        }
    };

    let rows = cfg
        .algorithms
        .iter()
        .map(|&algo| match (&puck, algo) {
            (Err(e), _) => failed(algo, e.clone()),
            (Ok(out), Algorithm::Puck) => {
                finish(algo, &out.reports, Timing::from_stats(&out.stats), out.stats.processed)
            }
            (Ok(out), Algorithm::Cluster) => {
                let started = Instant::now();
                let Some(reports) = track_from_detection(&out.reports, &sim.events, &model, cfg.pipeline.pass_interval_us)
                else {
                    return failed(algo, "no detection to seed the cluster".into());
                };
                let elapsed = started.elapsed().as_secs_f64();
                let seed_t = first_detection(&out.reports).map_or(0, |r| r.t_us);
                let n = sim.events.iter().filter(|e| e.t > seed_t).count() as u64;
                let timing = Timing {
                    throughput_ev_per_s: if elapsed > 0.0 { n as f64 / elapsed } else { 0.0 },
                    ..Timing::default()
                };
                finish(algo, &reports, timing, n)
            }
        })
        .collect();
    ScenarioRun { rows }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Runs every algorithm on every scenario. A failing run becomes a row with
/// its error; the suite carries on.
pub fn run_suite(cfg: &SuiteConfig) -> SuiteReport {
    SuiteReport {
        rows: cfg.scenarios.iter().flat_map(|sc| run_scenario(sc, cfg).rows).collect(),
    }
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite report serialises")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}",
            "scenario", "algo", "mean", "median", "q3", "max", "valid%", "pass_hz", "ev/s"
        );
        for r in &self.rows {
            let head = format!("{:<12} {:<8}", r.manifest.scenario, r.manifest.algorithm.name());
            match &r.accuracy {
                Some(a) => {
                    let _ = writeln!(
                        s,
                        "{head} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.1} {:>10.0} {:>10.0}",
                        a.mean, a.median, a.q3, a.max, a.valid_pct, r.timing.pass_rate_hz, r.timing.throughput_ev_per_s
                    );
                }
                None => {
                    let _ = writeln!(s, "{head} failed: {}", r.error.as_deref().unwrap_or("unknown"));
                }
            }
        }
        s
    }
}
