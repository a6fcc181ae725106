use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use puck_track::eval::{evaluate, run_suite, Algorithm, Scenario, SuiteConfig};
use puck_track::event::GroundTruthSample;
use puck_track::tracker::{Mode, PuckReport};

fn fixture(seed: u64) -> (Vec<PuckReport>, Vec<GroundTruthSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<GroundTruthSample> = (0..200)
        .map(|i| GroundTruthSample {
            t: 1000 * i,
            cx: 200.0 + 0.3 * i as f64,
            cy: 100.0 + 5.0 * (i as f64 / 20.0).sin(),
            a: 9.0,
            b: 6.0,
        })
        .collect();
    let mut t = 1500;
    let mut reports = Vec::new();
    while t < 190_000 {
        reports.push(PuckReport {
            t_us: t,
            x: 200.0 + 0.3 * t as f64 / 1000.0 + rng.random_range(-4.0..4.0),
            y: 100.0 + rng.random_range(-4.0..4.0),
            score: 0.1,
            mode: Mode::Tracking,
        });
        t += rng.random_range(200..2500);
    }
    (reports, gt)
}

/// Straightforward recomputation: linear scan for the association, nearest
/// rank arithmetic spelled out for the quartiles.
fn oracle(reports: &[PuckReport], gt: &[GroundTruthSample], thr: f64) -> (Vec<f64>, f64, f64, f64, f64, f64, f64) {
    let first = reports.iter().map(|r| r.t_us).min().unwrap();
    let last = reports.iter().map(|r| r.t_us).max().unwrap();
    let mut errs = Vec::new();
    for g in gt.iter().filter(|g| g.t >= first && g.t <= last) {
        let r = reports.iter().filter(|r| r.t_us <= g.t).max_by_key(|r| r.t_us).unwrap();
        errs.push(((r.x - g.cx).powi(2) + (r.y - g.cy).powi(2)).sqrt());
    }
    let mut s = errs.clone();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let h = (s.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        s[lo] + (h - lo as f64) * (s[(lo + 1).min(s.len() - 1)] - s[lo])
    };
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let valid = 100.0 * errs.iter().filter(|&&e| e <= thr).count() as f64 / errs.len() as f64;
    (errs, mean, q(0.5), q(0.25), q(0.75), *s.last().unwrap(), valid)
}

#[test]
fn statistics_match_recomputation() {
    for seed in 0..5 {
        let (reports, gt) = fixture(seed);
        let acc = evaluate(&reports, &gt, 3.5).unwrap();
        let (errs, mean, median, q1, q3, max, valid) = oracle(&reports, &gt, 3.5);
        assert_eq!(acc.samples, errs.len());
        for (a, b) in acc.errors.iter().zip(&errs) {
            assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in [(acc.mean, mean), (acc.median, median), (acc.q1, q1), (acc.q3, q3), (acc.max, max), (acc.valid_pct, valid)] {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
        assert!((0.0..=100.0).contains(&acc.valid_pct));
    }
}

#[test]
fn report_order_does_not_matter() {
    let (reports, gt) = fixture(9);
    let want = evaluate(&reports, &gt, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut shuffled = reports.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(evaluate(&shuffled, &gt, 4.0).unwrap(), want);
    }
}

#[test]
fn samples_outside_reported_interval_are_not_scored() {
    let (reports, gt) = fixture(2);
    let acc = evaluate(&reports, &gt, 3.5).unwrap();
    let (r0, r1) = (reports[0].t_us, reports.last().unwrap().t_us);
    assert_eq!(acc.samples, gt.iter().filter(|g| g.t >= r0 && g.t <= r1).count());
}

#[test]
fn one_scenario_two_algorithms_two_rows() {
    let cfg = SuiteConfig {
        scenarios: vec![Scenario::fixed_camera(5, 1.0)],
        ..SuiteConfig::default()
    };
    let rep = run_suite(&cfg);
    assert_eq!(rep.rows.len(), 2);
    assert_eq!(rep.rows[0].manifest.algorithm, Algorithm::Puck);
    assert_eq!(rep.rows[1].manifest.algorithm, Algorithm::Cluster);
    assert!(rep.rows.iter().all(|r| r.accuracy.is_some()), "{}", rep.table());
    assert_eq!(rep.table().lines().count(), 3);
    let again = run_suite(&cfg);
    assert!(rep.rows.iter().zip(&again.rows).all(|(a, b)| a.same_result(b)));

    let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(json["rows"][0]["manifest"]["algorithm"], "puck");
    assert_eq!(json["rows"][0]["manifest"]["scene_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn manifests_distinguish_inputs() {
    let cfg = SuiteConfig {
        scenarios: vec![Scenario::fixed_camera(5, 0.5), Scenario::fixed_camera(6, 0.5)],
        algorithms: vec![Algorithm::Puck],
        ..SuiteConfig::default()
    };
    let rep = run_suite(&cfg);
    let (a, b) = (&rep.rows[0].manifest, &rep.rows[1].manifest);
    assert_ne!(a.scene_sha256, b.scene_sha256);
    assert_eq!(a.tracker_sha256, b.tracker_sha256);
}

#[test]
fn suite_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SuiteConfig {
        scenarios: vec![Scenario::moving_camera(8, 0.5)],
        out_dir: Some(dir.path().to_path_buf()),
        ..SuiteConfig::default()
    };
    let rep = run_suite(&cfg);
    for row in &rep.rows {
        assert!(row.error.is_none(), "{:?}", row.error);
        for p in &row.manifest.outputs {
            assert!(std::path::Path::new(p).exists(), "{p}");
        }
    }
    let cluster = std::fs::read_to_string(dir.path().join("moving-8/cluster.csv")).unwrap();
    assert!(cluster.starts_with("# algo=cluster\n"));
}
