use std::io::Cursor;

use puck_track::event::{
    read_ground_truth, read_stream, read_stream_csv, write_ground_truth, write_stream, write_stream_csv, Event,
    GroundTruthSample, StreamHeader, HEADER_SIZE, RECORD_SIZE,
};
use puck_track::kernel::{fit_size_model, read_observations, write_observations, SizeModel, SizeObservation};
use puck_track::sim::{simulate, SceneConfig};
use puck_track::tracker::{load_reports, save_reports, Mode, PuckReport};

fn scene() -> SceneConfig {
    let mut cfg = SceneConfig::moving_scene(17);
    cfg.duration_s = 0.3;
    cfg
}

#[test]
fn simulated_stream_survives_both_formats() {
    let sim = simulate(&scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["s.evs", "s.csv"] {
        let p = dir.path().join(name);
        write_stream(&sim.header, &sim.events, &p).unwrap();
        let (h, ev) = read_stream(&p).unwrap();
        assert_eq!(h, sim.header, "{name}");
        assert_eq!(ev, sim.events, "{name}");
    }
    let bin = std::fs::metadata(dir.path().join("s.evs")).unwrap().len();
    assert_eq!(bin, HEADER_SIZE + RECORD_SIZE * sim.events.len() as u64);
}

#[test]
fn csv_stream_in_memory() {
    let events = vec![Event::new(10, 1, 2, true), Event::new(10, 3, 4, false), Event::new(12, 5, 6, true)];
    let header = StreamHeader::for_events(32, 24, &events);
    let mut buf = Vec::new();
    write_stream_csv(&header, &events, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("# width=32 height=24"));
    assert!(text.contains("t,x,y,p\n10,1,2,1\n10,3,4,0\n12,5,6,1"));
    let (h, ev) = read_stream_csv(Cursor::new(buf)).unwrap();
    assert_eq!((h.width, h.height), (32, 24));
    assert_eq!(ev, events);
}

#[test]
fn ground_truth_file_round_trips() {
    let sim = simulate(&scene()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.csv");
    write_ground_truth(&sim.ground_truth, &p).unwrap();
    let back = read_ground_truth(&p).unwrap();
    assert_eq!(back.len(), 300);
    for (a, b) in back.iter().zip(&sim.ground_truth) {
        assert_eq!(a.t, b.t);
        assert!((a.cx - b.cx).abs() <= 1e-6 && (a.cy - b.cy).abs() <= 1e-6);
        assert!((a.a - b.a).abs() <= 1e-6 && (a.b - b.b).abs() <= 1e-6);
    }
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("t,cx,cy,a,b\n"));
}

#[test]
fn empty_ground_truth_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.csv");
    write_ground_truth(&[], &p).unwrap();
    assert_eq!(read_ground_truth(&p).unwrap(), Vec::<GroundTruthSample>::new());
}

#[test]
fn report_file_keeps_algorithm_tag() {
    let reports = vec![
        PuckReport { t_us: 500, x: 10.0, y: 20.0, score: 0.25, mode: Mode::Tracking },
        PuckReport { t_us: 1000, x: 11.5, y: 20.0, score: 0.01, mode: Mode::Detecting },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    save_reports(&reports, "cluster", &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("# algo=cluster\nt_us,x,y,score,mode\n"), "{text}");
    let (algo, back) = load_reports(&p).unwrap();
    assert_eq!(algo.as_deref(), Some("cluster"));
    assert_eq!(back, reports);

    std::fs::write(&p, "t_us,x,y,score,mode\n500,1,2,0.5,tracking\n").unwrap();
    let (algo, back) = load_reports(&p).unwrap();
    assert_eq!(algo, None);
    assert_eq!(back.len(), 1);
}

#[test]
fn calibration_from_simulated_ground_truth() {
    let cfg = scene();
    let sim = simulate(&cfg).unwrap();
    let obs: Vec<SizeObservation> = sim
        .ground_truth
        .iter()
        .step_by(7)
        .map(|g| SizeObservation { x: g.cx, y: g.cy, a: g.a, b: g.b })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("obs.csv");
    write_observations(&obs, &csv).unwrap();
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("x,y,a,b\n"));
    let fit = fit_size_model(&read_observations(&csv).unwrap()).unwrap();

    let toml = dir.path().join("model.toml");
    fit.model.save(&toml).unwrap();
    let model = SizeModel::load(&toml).unwrap();
    assert_eq!(model, fit.model);
    let truth = cfg.size_model();
    for g in &sim.ground_truth {
        let (a0, b0) = truth.predict(g.cx, g.cy);
        let (a1, b1) = model.predict(g.cx, g.cy);
        assert!((a0 - a1).abs() < 1e-6 && (b0 - b1).abs() < 1e-6);
    }
}

#[test]
fn size_model_text_names_all_coefficients() {
    let text = SizeModel::constant(9.0, 5.0).to_config_string();
    for k in ["k0", "k1", "k2", "h0", "h1", "h2"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{text}");
    }
    assert!(SizeModel::from_config_str("k0 = 1.0\n").is_err());
}
