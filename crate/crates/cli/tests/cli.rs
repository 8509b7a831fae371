use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpvmpc::config::{ExperimentConfig, SweepAxis, SweepSpec};
use lpvmpc::solver;

fn lpvmpc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpvmpc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn short_config(steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::angular_positioning();
    cfg.run.steps = steps;
    cfg.run.seeds = vec![0];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_config(15));
    for out in ["a", "b"] {
        assert_eq!(code(&lpvmpc(&["--config", &cfg, "--out", out, "generate-data"], dir.path())), 0);
        assert_eq!(code(&lpvmpc(&["--config", &cfg, "--out", out, "simulate"], dir.path())), 0);
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/dataset.csv"), read("b/dataset.csv"));
    assert_eq!(read("a/plot.csv"), read("b/plot.csv"));
    assert_eq!(read("a/seed_0/dataset.csv"), read("b/seed_0/dataset.csv"));
    assert_eq!(read("a/seed_0/solutions.csv"), read("b/seed_0/solutions.csv"));
}

#[test]
fn simulated_bundle_verifies_and_corrupted_gain_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_config(25));
    assert_eq!(code(&lpvmpc(&["--config", &cfg, "--out", "run", "simulate"], dir.path())), 0);

    let verify = lpvmpc(&["--out", "run", "verify", "--samples", "100"], dir.path());
    let stdout = String::from_utf8_lossy(&verify.stdout);
    assert_eq!(code(&verify), 0, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(dir.path().join("run/verification.toml").exists());

    // Doubling the applied feedback gain must break at least one certificate.
    let trace_path = dir.path().join("run/seed_0/trace.csv");
    let text = fs::read_to_string(&trace_path).unwrap();
    let mut lines = text.lines();
    let mut out: Vec<String> = Vec::new();
    let header = loop {
        let line = lines.next().unwrap();
        out.push(line.to_owned());
        if !line.starts_with('#') {
            break line.split(',').map(str::to_owned).collect::<Vec<_>>();
        }
    };
    let f_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with('f')).map(|(i, _)| i).collect();
    assert_eq!(f_cols.len(), 2);
    for line in lines {
        let mut cells: Vec<String> = line.split(',').map(str::to_owned).collect();
        for &i in &f_cols {
            let v: f64 = cells[i].parse().unwrap();
            cells[i] = format!("{:e}", 2.0 * v);
        }
        out.push(cells.join(","));
    }
    fs::write(&trace_path, out.join("\n") + "\n").unwrap();
    let verify = lpvmpc(&["--out", "run", "verify", "--samples", "100"], dir.path());
    let stdout = String::from_utf8_lossy(&verify.stdout);
    assert_eq!(code(&verify), 3, "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("FAIL")), "{stdout}");
}

#[test]
fn two_samples_are_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_config(5).with_length(2));
    let solve = lpvmpc(&["--config", &cfg, "--out", "o", "solve-step"], dir.path());
    assert_eq!(code(&solve), 2);
    assert!(fs::read_to_string(dir.path().join("o/solution.toml")).unwrap().contains("infeasible"));
    assert_eq!(code(&lpvmpc(&["--config", &cfg, "--out", "o", "simulate"], dir.path())), 2);
}

#[test]
fn bad_input_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "schema_version = 1\n[plant]\nkind = \"nonsense\"\n").unwrap();
    assert_eq!(code(&lpvmpc(&["--config", "bad.toml", "generate-data"], dir.path())), 4);
    assert_eq!(code(&lpvmpc(&["--config", "absent.toml", "generate-data"], dir.path())), 4);
    assert_eq!(code(&lpvmpc(&["--out", "nothing", "verify"], dir.path())), 4);
    assert_eq!(code(&lpvmpc(&["--workers", "0", "simulate"], dir.path())), 4);
    assert_eq!(code(&lpvmpc(&["frobnicate"], dir.path())), 4);
    assert_eq!(code(&lpvmpc(&["--help"], dir.path())), 0);

    // A directory without report.toml is not a bundle.
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&lpvmpc(&["verify", "--bundle", "empty"], dir.path())), 4);
}

#[test]
fn exported_problem_can_be_read_back() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lpvmpc(&["--out", "o", "export-sdp"], dir.path())), 0);
    let req = solver::import(&dir.path().join("o/problem.dat-s")).unwrap();
    let res = solver::solve(&req).unwrap();
    assert_eq!(res.backend_status, "Solved");
    assert!(res.objective.is_finite());
}

#[test]
fn sweep_writes_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(10);
    cfg.sweep = Some(SweepSpec { axis: SweepAxis::C, values: vec![0.5, 1.5] });
    let cfg = write_config(dir.path(), &cfg);
    let run = lpvmpc(&["--config", &cfg, "--out", "s", "--workers", "2", "sweep"], dir.path());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let plot = fs::read_to_string(dir.path().join("s/plot.csv")).unwrap();
    let mut rows = plot.lines();
    assert!(rows.next().unwrap().starts_with("c,seed,"));
    assert_eq!(rows.count(), 2);
    assert!(fs::read_to_string(dir.path().join("s/plot.gp")).unwrap().contains("plot.csv"));
    assert!(dir.path().join("s/point_1/trace.csv").exists());
    let verify = lpvmpc(&["verify", "--bundle", "s", "--samples", "50"], dir.path());
    assert_eq!(code(&verify), 0, "{}", String::from_utf8_lossy(&verify.stdout));

    let sweep = lpvmpc(&["--out", "t", "sweep", "--axis", "t"], dir.path());
    assert_eq!(code(&sweep), 4);
}
