use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn metric(dir: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("no {name} in metrics.csv"))
        .parse()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("experiment.txt");
    fs::write(&p, body).unwrap();
    path(&p).to_string()
}

#[test]
fn noiseless_pipeline_recovers_poses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "n: 20\nside: 64\nseed: 11\n# noiseless, unshifted\nsnr: none\n",
    );
    let out = dir.path().join("run");
    let o = clpose(&["--threads", "1", "pipeline", "-c", &cfg, "-o", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let normal = metric(&out, "normal_err_deg");
    assert!(normal < 2.0, "normal error {normal} deg");
    assert!(metric(&out, "inplane_err_deg") < 2.0);
    for f in [
        "config.txt",
        "stack.cps",
        "stack.json",
        "shifts.csv",
        "poses.csv",
        "opt_trace.csv",
        "metrics.txt",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n: 8\nside: 48\nsnr: 2\nmax_shift: 3\nseed: 4\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(clpose(&["simulate", "-c", &cfg, "-o", path(d)]).status.success());
    }
    for f in ["stack.cps", "stack.json", "phantom.cpv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n: 8\nfrobnicate: 3\n");
    let o = clpose(&["simulate", "-c", &cfg, "-o", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("frobnicate"));
    let o = clpose(&["simulate", "--set", "widget=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widget"));
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = clpose(&["poses", "-o", path(&dir.path().join("empty"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = clpose(&["fsc", path(&dir.path().join("a.cpv")), path(&dir.path().join("b.cpv"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_stage_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    assert!(
        clpose(&["simulate", "--set", "n=6", "--set", "side=48", "-o", path(&out)])
            .status
            .success()
    );
    // n_theta must be even for the ray convention.
    let o = clpose(&[
        "poses",
        "--set",
        "n=6",
        "--set",
        "side=48",
        "--set",
        "n_theta=35",
        "-o",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[polarfft]"));
}

#[test]
fn staged_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n: 10\nside: 48\nsnr: 5\nmax_shift: 2\nseed: 9\n");
    let (p, s) = (dir.path().join("p"), dir.path().join("s"));
    assert!(clpose(&["pipeline", "-c", &cfg, "-o", path(&p)]).status.success());
    for cmd in ["simulate", "shifts", "poses", "evaluate"] {
        let o = clpose(&[cmd, "-c", &cfg, "-o", path(&s)]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "stack.cps",
        "shifts.csv",
        "shift_trace.csv",
        "poses.csv",
        "opt_trace.csv",
        "metrics.csv",
    ] {
        assert_eq!(
            fs::read(p.join(f)).unwrap(),
            fs::read(s.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn fsc_of_a_volume_with_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    assert!(
        clpose(&["simulate", "--set", "n=3", "--set", "side=48", "-o", path(&out)])
            .status
            .success()
    );
    let vol = out.join("phantom.cpv");
    let o = clpose(&["fsc", path(&vol), path(&vol)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 25);
    assert!(rows.iter().all(|c| (c - 1.0).abs() < 1e-12));
}
