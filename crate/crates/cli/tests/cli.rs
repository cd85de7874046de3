use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use yosida_cli::config::{self, ConfigError, INSTANCES};

const BASE: &str = r#"
[triple]
kind = "euclidean"
dim = 2
p = 2.0

[drift]
kind = "LinearDrift"
a = 2.0

[diffusion]
kind = "MultiplicativeScalar"
sigma = 0.5
modes = 1

[constants]
c1 = 1.875
growth = 4.0

[run]
horizon = 1.0
dt = 0.125
lambdas = [1.0, 0.5, 0.25, 0.125]
paths = 32
seed = 11
samples = 200
x0 = [1.0, 0.5]
x0_alt = [-0.5, 0.25]
"#;

fn yosida(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yosida"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_cmd(cmd: &str, config: &Path, out: &Path) -> Output {
    yosida(&[
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn check_assumptions_on_gbm_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = run_cmd("check-assumptions", &cfg, tmp.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv =
        std::fs::read_to_string(tmp.path().join("check-assumptions/assumptions.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn converge_writes_one_row_per_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = run_cmd("converge", &cfg, tmp.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let csv = std::fs::read_to_string(tmp.path().join("converge/convergence.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let lambdas: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(lambdas, [1.0, 0.5, 0.25, 0.125]);
}

#[test]
fn solve_and_estimates_write_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    for cmd in ["solve", "estimates"] {
        let out = run_cmd(cmd, &cfg, tmp.path());
        assert_eq!(
            out.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
    }
    for file in [
        "solve/noise.bin",
        "solve/path_lambda_0.csv",
        "solve/path_lambda_3.bin",
        "solve/solve.csv",
        "estimates/estimates.csv",
        "estimates/family.csv",
        "estimates/lipschitz.csv",
        "estimates/summary.txt",
    ] {
        assert!(tmp.path().join(file).exists(), "{file} missing");
    }
    let manifest = std::fs::read_to_string(tmp.path().join("estimates/manifest.txt")).unwrap();
    let last = manifest.lines().last().unwrap();
    assert!(last.starts_with("timestamp "));
    assert!(!manifest
        .lines()
        .rev()
        .skip(1)
        .any(|l| l.starts_with("timestamp")));
    assert!(manifest.contains("seed 11"));
}

#[test]
fn seed_override_changes_results_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_cmd("solve", &cfg, &a);
    let out = yosida(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--seed-override",
        "12",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("solve/path_lambda_0.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
    let manifest = std::fs::read_to_string(b.join("solve/manifest.txt")).unwrap();
    assert!(manifest.contains("seed 12"));
}

#[test]
fn jobs_do_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let mut csvs = Vec::new();
    for jobs in ["1", "3"] {
        let out_dir = tmp.path().join(jobs);
        let out = yosida(&[
            "converge",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--jobs",
            jobs,
        ]);
        assert_eq!(out.status.code(), Some(0));
        csvs.push(std::fs::read(out_dir.join("converge/convergence.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn parse_errors_carry_line_and_key() {
    let text = BASE.replace("paths = 32", "paths = \"many\"");
    let err = config::parse(&text).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, ConfigError::Parse(_)));
    let line = text.lines().position(|l| l.starts_with("paths")).unwrap() + 1;
    assert!(msg.contains(&format!("line {line}")), "{msg}");
    assert!(msg.contains("paths"), "{msg}");

    let text = BASE.replace("seed = 11", "seed = 11\nsede = 3");
    let msg = config::parse(&text).unwrap_err().to_string();
    assert!(msg.contains("sede"), "{msg}");
    assert!(msg.contains("line"), "{msg}");
}

#[test]
fn unknown_instance_lists_available() {
    let text = BASE.replace("kind = \"LinearDrift\"", "kind = \"CubicDrift\"");
    let err = config::parse(&text).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, ConfigError::UnknownInstance { .. }));
    for name in [
        "CubicDrift",
        "LinearDrift",
        "ScalarPower",
        "DiscretePLaplacian",
    ] {
        assert!(msg.contains(name), "{msg}");
    }

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("MultiplicativeScalar", "Colored"));
    let out = run_cmd("solve", &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("AdditiveNoise") && stderr.contains("MultiplicativeScalar"),
        "{stderr}"
    );
}

#[test]
fn empty_lambdas_is_a_config_error() {
    let text = BASE.replace("lambdas = [1.0, 0.5, 0.25, 0.125]", "lambdas = []");
    let err = config::parse(&text).unwrap_err();
    assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    assert!(err.to_string().contains("lambdas"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &text);
    assert_eq!(run_cmd("converge", &cfg, tmp.path()).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(yosida(&["solve"]).status.code(), Some(2));
    assert_eq!(
        yosida(&["solve", "--config", "/nonexistent/exp.toml"])
            .status
            .code(),
        Some(2)
    );

    // Declared coercivity constant far above the truth: a failed check.
    let cfg = write_config(tmp.path(), &BASE.replace("c1 = 1.875", "c1 = 10.0"));
    assert_eq!(
        run_cmd("check-assumptions", &cfg, tmp.path()).status.code(),
        Some(1)
    );

    // Noise this large overflows the blow-up guard.
    let text = BASE.replace(
        "kind = \"MultiplicativeScalar\"\nsigma = 0.5\nmodes = 1",
        "kind = \"AdditiveNoise\"\nscale = 1e15",
    );
    let cfg = write_config(tmp.path(), &text);
    let out = run_cmd("solve", &cfg, tmp.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn listed_instances_round_trip_through_parsing() {
    let out = yosida(&["list-instances"]);
    assert_eq!(out.status.code(), Some(0));
    let listing = String::from_utf8(out.stdout).unwrap();
    for inst in INSTANCES {
        assert!(listing.contains(inst.name));
    }
    let drifts = [
        ("LinearDrift", "kind = \"LinearDrift\"\na = 1.0"),
        ("ScalarPower", "kind = \"ScalarPower\""),
        ("DiscretePLaplacian", "kind = \"DiscretePLaplacian\""),
    ];
    let diffusions = [
        (
            "MultiplicativeScalar",
            "kind = \"MultiplicativeScalar\"\nsigma = 0.3\nmodes = 2",
        ),
        (
            "AdditiveNoise",
            "kind = \"AdditiveNoise\"\nscale = 0.3\nmodes = 2",
        ),
    ];
    for (name, drift) in drifts {
        for (dname, diffusion) in diffusions {
            let text = format!(
                "[triple]\nkind = \"dirichlet-grid\"\ndim = 4\np = 2.0\n\n[drift]\n{drift}\n\n[diffusion]\n{diffusion}\n\n\
                 [constants]\nc1 = 0.1\ngrowth = 100.0\n\n[run]\nhorizon = 1.0\ndt = 0.5\nlambdas = [1.0]\npaths = 1\nseed = 0\nx0 = [0.0, 0.0, 0.0, 0.0]\n"
            );
            let exp = config::parse(&text).unwrap_or_else(|e| panic!("{name}/{dname}: {e}"));
            assert_eq!(exp.pair.drift().name(), name);
            assert_eq!(exp.pair.diffusion().name(), dname);
            assert!(listing.contains(name) && listing.contains(dname));
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let exp = config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(exp.steps, 1024);
            count += 1;
        }
    }
    assert_eq!(count, 4);
}
