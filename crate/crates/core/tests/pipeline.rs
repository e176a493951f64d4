use std::path::Path;

use ropdf::config::{parse_config_str, RunConfig};
use ropdf::pipeline::{replay, run_command, sha256_file, Command, Manifest, MANIFEST};
use ropdf::Error;

fn small_config() -> RunConfig {
    parse_config_str(
        r#"{"case": "case9", "sim": {"n_realizations": 200, "t_final": 1.0},
            "qoi": ["omega_4", "delta_4"],
            "benchmark": {"yardstick_samples": 1000, "schedule": [100, 200, 400],
                          "cases": ["case9"], "correlations": ["uncorrelated"],
                          "failures": [false]}}"#,
        "test",
    )
    .unwrap()
}

fn run_all(cfg: &RunConfig, dir: &Path) {
    for c in Command::ALL {
        run_command(c, cfg, dir).unwrap_or_else(|e| panic!("{c}: {e}"));
    }
}

#[test]
fn downstream_commands_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let e = run_command(Command::Learn, &cfg, dir.path()).unwrap_err();
    assert_eq!(e.to_string(), "ensemble missing; run simulate");
    run_command(Command::Simulate, &cfg, dir.path()).unwrap();
    let e = run_command(Command::Solve, &cfg, dir.path()).unwrap_err();
    assert!(matches!(e, Error::MissingArtifact { .. }));
    assert_eq!(e.to_string(), "regression artifacts missing; run learn");
}

#[test]
fn ensemble_from_another_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    run_command(Command::Simulate, &cfg, dir.path()).unwrap();
    cfg.sim.seed += 1;
    assert!(run_command(Command::Learn, &cfg, dir.path()).is_err());
}

#[test]
fn identical_runs_give_identical_manifests_and_replay_cleanly() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&cfg, a.path());
    run_all(&cfg, b.path());
    let ma = Manifest::load(a.path().join(MANIFEST)).unwrap();
    let mb = Manifest::load(b.path().join(MANIFEST)).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        sha256_file(a.path().join(MANIFEST)).unwrap(),
        sha256_file(b.path().join(MANIFEST)).unwrap()
    );
    let commands: Vec<Command> = ma.steps.iter().map(|s| s.command).collect();
    assert_eq!(commands, Command::ALL.to_vec());
    for expected in [
        "ensemble.bin",
        "R.csv",
        "coefficients_omega_4.json",
        "density_delta_4.csv",
    ] {
        assert!(
            ma.steps.iter().any(|s| s.artifacts.contains_key(expected)),
            "{expected}"
        );
    }

    let c = tempfile::tempdir().unwrap();
    let report = replay(a.path().join(MANIFEST), c.path()).unwrap();
    assert!(report.is_clean(), "{:?}", report.mismatches);
    assert_eq!(
        report.checked,
        ma.steps.iter().map(|s| s.artifacts.len()).sum::<usize>()
    );
}

#[test]
fn replay_flags_tampered_manifests() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    run_command(Command::Simulate, &cfg, a.path()).unwrap();
    let path = a.path().join(MANIFEST);
    let mut m = Manifest::load(&path).unwrap();
    m.steps[0].artifacts.insert("R.csv".into(), "0".repeat(64));
    m.write(&path).unwrap();
    let c = tempfile::tempdir().unwrap();
    let report = replay(&path, c.path()).unwrap();
    assert_eq!(report.mismatches, vec!["simulate: R.csv".to_string()]);
}

#[test]
fn benchmark_writes_the_plotting_tables() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_command(Command::Benchmark, &cfg, dir.path()).unwrap();
    assert_eq!(summary.results.len(), 1);
    let counts = std::fs::read_to_string(dir.path().join("sample_counts.csv")).unwrap();
    assert!(counts.starts_with("case,correlation,failure,group,method,total,ic_samples\n"));
    // speed and angle groups, one row per method each
    assert_eq!(counts.lines().count(), 1 + 4);
    let trail = std::fs::read_to_string(dir.path().join("error_trail.csv")).unwrap();
    assert!(trail
        .lines()
        .skip(1)
        .all(|l| l.starts_with("case9,uncorrelated,false,")));
    let sub = dir.path().join("case9_uncorrelated_nominal");
    assert!(sub.join("yardstick_omega_4.csv").is_file());
    assert!(dir.path().join("timings.csv").is_file());
}
