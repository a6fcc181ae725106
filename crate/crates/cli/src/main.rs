use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use puck_track::cluster::track_from_detection;
use puck_track::eros::{ErosSurface, DEFAULT_K_EROS};
use puck_track::eval::{default_scenarios, evaluate, run_suite, Algorithm, SuiteConfig, STATIC_THRESHOLD_PX};
use puck_track::event::{read_ground_truth, read_stream, write_ground_truth, write_stream, EventReader};
use puck_track::kernel::{
    fit_size_model, read_observations, write_observations, Field, KernelBank, SizeModel, SizeObservation,
    DEFAULT_BANK_STEP,
};
use puck_track::pipeline::{self, from_slice, PipelineConfig, PipelineError, PipelineMode, Playback, RunOutput};
use puck_track::sim::{simulate, SceneConfig};
use puck_track::tracker::{load_reports, save_reports, Tracker, TrackerConfig};

#[derive(Parser)]
#[command(name = "puck-track", version, about = "Event-camera puck tracking harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene: event file plus ground truth.
    Generate(GenerateArgs),
    /// Fit the size model to `x,y,a,b` observations.
    Calibrate(CalibrateArgs),
    /// Run a tracker over an event file.
    Track(TrackArgs),
    /// Score a report CSV against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the scenario suite.
    Suite(SuiteArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Static,
    Moving,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene config (TOML). Without it the preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "static")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds; overrides the config.
    #[arg(long)]
    duration: Option<f64>,
    /// Event file; `.csv` selects the text format.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the resolved scene config here.
    #[arg(long)]
    scene_out: Option<PathBuf>,
    /// Write this many calibration observations taken from the ground truth.
    #[arg(long)]
    observations: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with columns x,y,a,b.
    #[arg(long)]
    observations: PathBuf,
    /// Where to write the fitted model (TOML).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Seq,
    Par,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Puck,
    Cluster,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Puck => Algorithm::Puck,
            AlgoArg::Cluster => Algorithm::Cluster,
        }
    }
}

#[derive(Args)]
struct TrackArgs {
    /// Event file, binary or `.csv`.
    #[arg(long)]
    input: PathBuf,
    /// Tracking config (TOML); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size model from `calibrate`; overrides the config's.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "seq")]
    mode: ModeArg,
    /// Replay at this multiple of real time instead of as fast as possible.
    #[arg(long)]
    realtime: Option<f64>,
    #[arg(long, value_enum, default_value = "puck")]
    algo: AlgoArg,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the stats summary here.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Dump the final surface as PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Valid-position threshold in pixels.
    #[arg(long, default_value_t = STATIC_THRESHOLD_PX)]
    threshold: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long = "static", default_value_t = 4)]
    n_static: usize,
    #[arg(long = "moving", default_value_t = 4)]
    n_moving: usize,
    /// Seconds per scene.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["puck", "cluster"])]
    algo: Vec<AlgoArg>,
    /// Tracking config (TOML); only the tracker and k_eros keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "seq")]
    mode: ModeArg,
    #[arg(long)]
    realtime: Option<f64>,
    /// Per-scene artifacts go here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Machine-readable summary.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Everything `track` needs besides the events.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrackSetup {
    k_eros: u16,
    bank_step: f64,
    pass_interval_us: u64,
    field: Field,
    size_model: SizeModel,
    tracker: TrackerConfig,
}

impl Default for TrackSetup {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            k_eros: DEFAULT_K_EROS,
            bank_step: DEFAULT_BANK_STEP,
            pass_interval_us: PipelineConfig::default().pass_interval_us,
            field: scene.field,
            size_model: scene.size_model(),
            tracker: TrackerConfig::default(),
        }
    }
}

fn load_setup(path: Option<&Path>) -> Result<TrackSetup> {
    match path {
        None => Ok(TrackSetup::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn pipeline_config(mode: ModeArg, realtime: Option<f64>, pass_interval_us: u64) -> Result<PipelineConfig> {
    let playback = match realtime {
        None => Playback::AsFastAsPossible,
        Some(s) if s > 0.0 && s.is_finite() => Playback::RealTime { speed: s },
        Some(s) => bail!("--realtime must be a positive factor, got {s}"),
    };
    Ok(PipelineConfig {
        mode: match mode {
            ModeArg::Seq => PipelineMode::Sequential,
            ModeArg::Par => PipelineMode::Concurrent,
        },
        playback,
        pass_interval_us,
        ..PipelineConfig::default()
    })
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut scene = match &args.config {
        Some(p) => SceneConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => match args.preset {
            Preset::Static => SceneConfig::static_scene(0),
            Preset::Moving => SceneConfig::moving_scene(0),
        },
    };
    if let Some(seed) = args.seed {
        scene.seed = seed;
    }
    if let Some(d) = args.duration {
        scene.duration_s = d;
    }
    let sim = simulate(&scene)?;
    write_stream(&sim.header, &sim.events, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_ground_truth(&sim.ground_truth, &args.gt).with_context(|| format!("writing {}", args.gt.display()))?;
    if let Some(p) = &args.scene_out {
        scene.save(p)?;
    }
    if let Some(p) = &args.observations {
        let step = (sim.ground_truth.len() / args.samples.max(1)).max(1);
        let obs: Vec<SizeObservation> = sim
            .ground_truth
            .iter()
            .step_by(step)
            .take(args.samples)
            .map(|g| SizeObservation { x: g.cx, y: g.cy, a: g.a, b: g.b })
            .collect();
        write_observations(&obs, p)?;
    }
    println!(
        "{} events over {:.3} s ({:.0} ev/s), {} ground-truth samples, seed {}",
        sim.events.len(),
        sim.header.duration_us as f64 / 1e6,
        sim.events.len() as f64 / scene.duration_s,
        sim.ground_truth.len(),
        scene.seed
    );
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let obs = read_observations(&args.observations)
        .with_context(|| format!("reading {}", args.observations.display()))?;
    let fit = fit_size_model(&obs)?;
    fit.model.save(&args.out)?;
    let m = fit.model;
    let r = fit.residuals;
    println!("observations: {}", obs.len());
    println!("a = {:.6} + {:.6} x + {:.6} y", m.k0, m.k1, m.k2);
    println!("b = {:.6} + {:.6} x + {:.6} y", m.h0, m.h1, m.h2);
    println!("residual rms a={:.4} b={:.4}, max a={:.4} b={:.4}", r.rms_a, r.rms_b, r.max_a, r.max_b);
    Ok(())
}

fn track(args: TrackArgs) -> Result<()> {
    let mut setup = load_setup(args.config.as_deref())?;
    if let Some(p) = &args.model {
        setup.size_model = SizeModel::load(p).with_context(|| format!("loading {}", p.display()))?;
    }
    let mut pcfg = pipeline_config(args.mode, args.realtime, setup.pass_interval_us)?;
    let bank = KernelBank::for_field(setup.size_model, &setup.field, setup.bank_step)?;
    let mut tracker = Tracker::new(setup.tracker.clone(), bank)?;

    let is_csv = args.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    // The cluster needs the events again after the PUCK pass that seeds it.
    let in_memory = is_csv || matches!(args.algo, AlgoArg::Cluster);
    let (header, events, reader) = if in_memory {
        let (h, ev) = read_stream(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
        (h, ev, None)
    } else {
        let r = EventReader::open(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
        (*r.header(), Vec::new(), Some(r))
    };
    pcfg.stream_end_us = Some(header.duration_us);
    let surface = ErosSurface::new(header.width as usize, header.height as usize, setup.k_eros)?;

    let result = match reader {
        Some(r) => pipeline::run(r, &surface, &mut tracker, &pcfg),
        None => pipeline::run(from_slice(&events), &surface, &mut tracker, &pcfg),
    };
    let (run, failure) = match result {
        Ok(run) => (run, None),
        // Keep what was tracked before the stream broke.
        Err(PipelineError::Source { error, stats, reports }) => (RunOutput { reports, stats: *stats }, Some(error)),
        Err(e) => return Err(e.into()),
    };

    let algo = Algorithm::from(args.algo);
    let reports = match algo {
        Algorithm::Puck => run.reports,
        Algorithm::Cluster => track_from_detection(&run.reports, &events, &setup.size_model, setup.pass_interval_us)
            .context("the puck was never detected, nothing to seed the cluster with")?,
    };
    save_reports(&reports, algo.name(), &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(p) = &args.pgm {
        surface.write_pgm(BufWriter::new(File::create(p)?))?;
    }

    let mut summary = format!("algo: {}\nreports: {}\n", algo.name(), reports.len());
    summary += &run.stats.summary_text();
    print!("{summary}");
    if let Some(p) = &args.stats {
        std::fs::write(p, &summary)?;
    }
    if let Some(e) = failure {
        bail!("event stream failed after {} events: {e}", run.stats.processed);
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (algo, reports) = load_reports(&args.reports).with_context(|| format!("reading {}", args.reports.display()))?;
    let gt = read_ground_truth(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let acc = evaluate(&reports, &gt, args.threshold)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&acc)?);
        return Ok(());
    }
    if let Some(a) = algo {
        println!("algo: {a}");
    }
    println!("samples: {}", acc.samples);
    println!("mean_px: {:.3}", acc.mean);
    println!("median_px: {:.3}", acc.median);
    println!("q1_px: {:.3}", acc.q1);
    println!("q3_px: {:.3}", acc.q3);
    println!("max_px: {:.3}", acc.max);
    println!("valid_pct@{}: {:.1}", acc.threshold_px, acc.valid_pct);
    Ok(())
}

fn suite(args: SuiteArgs) -> Result<()> {
    let setup = load_setup(args.config.as_deref())?;
    let cfg = SuiteConfig {
        scenarios: default_scenarios(args.n_static, args.n_moving, args.duration),
        algorithms: args.algo.iter().map(|&a| a.into()).collect(),
        tracker: setup.tracker,
        pipeline: pipeline_config(args.mode, args.realtime, setup.pass_interval_us)?,
        k_eros: setup.k_eros,
        out_dir: args.out_dir,
    };
    let report = run_suite(&cfg);
    print!("{}", report.table());
    if let Some(p) = &args.json {
        let mut f = BufWriter::new(File::create(p)?);
        f.write_all(report.to_json().as_bytes())?;
        f.flush()?;
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", report.rows.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Track(a) => track(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Suite(a) => suite(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
