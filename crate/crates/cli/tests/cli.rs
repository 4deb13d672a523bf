use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SMOKE: &str = r#"
[federation]
num_clients = 2
rounds = 1
warmup_steps = 20

[local]
tau = 1
eta = 0.1

[data.source]
kind = "blobs"
num_classes = 3
per_class = 40
input_dim = 4
spread = 1.0
proxy_per_class = 10
"#;

// heterogeneous label-shift fixture for local-step sweeps
const HETERO: &str = r#"
[federation]
num_clients = 5
rounds = 1
strategy = "fedavg"
warmup_steps = 200

[local]
eta = 2.0
batch_size = 64

[partition]
mode = "dirichlet"
alpha = 0.1

[analysis]
zeta = false
sigma = false
bvcl = false
sharpness = false
"#;

const FILES: [&str; 4] = ["rounds.csv", "diagnostics.txt", "final.lssw", "config.toml"];

fn lss(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lss"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("LSS_THREADS", t),
        None => cmd.env_remove("LSS_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn smoke_run_writes_all_files_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let out_dir = tmp.path().join("run");
    let start = Instant::now();
    let out = lss(&["run", &cfg, "--out", out_dir.to_str().unwrap()], Some("1"));
    let elapsed = start.elapsed().as_secs_f64();
    ok(&out);
    assert!(elapsed < 5.0, "smoke run took {elapsed:.2}s");
    for f in FILES {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let names: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), FILES.len(), "unexpected files: {names:?}");

    let csv = String::from_utf8(read(&out_dir.join("rounds.csv"))).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("round,global_acc,global_loss,client_accs,update_norms,wall_time_s")
    );
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&lss(&["run", &cfg, "--out", a.to_str().unwrap()], Some("1")));
    ok(&lss(&["run", &cfg, "--out", b.to_str().unwrap()], Some("3")));
    for f in FILES {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }

    // the snapshot alone reproduces the run
    let c = tmp.path().join("c");
    let snap = a.join("config.toml");
    ok(&lss(&["run", snap.to_str().unwrap(), "--out", c.to_str().unwrap()], Some("2")));
    for f in FILES {
        assert_eq!(read(&a.join(f)), read(&c.join(f)), "{f} differs");
    }
}

#[test]
fn bad_output_dir_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "x").unwrap();

    let under_file = blocker.join("run");
    let out = lss(&["run", &cfg, "--out", under_file.to_str().unwrap()], Some("1"));
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(read(&blocker), b"x");

    let out = lss(&["run", &cfg, "--out", blocker.to_str().unwrap()], Some("1"));
    assert!(!out.status.success());

    let mut entries: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    assert_eq!(entries, ["blocker", "smoke.toml"]);
}

#[test]
fn invalid_config_reports_key_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dir = tmp.path().join("run");
    let out = lss(
        &["run", &cfg, "--out", dir.to_str().unwrap(), "--set", "partition.alpha=-1"],
        Some("1"),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("partition.alpha"));
    assert!(!dir.exists());

    let out = lss(&["run", &cfg, "--out", dir.to_str().unwrap()], Some("zero"));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("LSS_THREADS"));
}

#[test]
fn sweep_makes_one_directory_and_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dir = tmp.path().join("sweep");
    ok(&lss(
        &["sweep", &cfg, "--grid", "local.lambda_a=0,1,3", "--out", dir.to_str().unwrap()],
        Some("1"),
    ));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "cell,local.lambda_a,status,final_test_accuracy,error");
    assert_eq!(lines.len(), 4);
    let mut subdirs: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    subdirs.sort();
    assert_eq!(subdirs, ["cell-0000", "cell-0001", "cell-0002"]);
    for (row, lam) in lines[1..].iter().zip(["0", "1", "3"]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1], lam);
        assert_eq!(fields[2], "ok");
    }
    let snap = fs::read_to_string(dir.join("cell-0002/config.toml")).unwrap();
    assert!(snap.contains("lambda_a = 3"));
}

#[test]
fn one_cell_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let run_dir = tmp.path().join("run");
    let sweep_dir = tmp.path().join("sweep");
    ok(&lss(
        &["run", &cfg, "--out", run_dir.to_str().unwrap(), "--set", "local.tau=2"],
        Some("1"),
    ));
    ok(&lss(
        &["sweep", &cfg, "--grid", "local.tau=2", "--out", sweep_dir.to_str().unwrap()],
        Some("1"),
    ));
    for f in FILES {
        assert_eq!(read(&run_dir.join(f)), read(&sweep_dir.join("cell-0000").join(f)), "{f} differs");
    }
}

#[test]
fn sweep_records_failures_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dir = tmp.path().join("sweep");
    let out = lss(
        &["sweep", &cfg, "--grid", "local.eta=0.1,-1,0.2", "--out", dir.to_str().unwrap()],
        Some("1"),
    );
    assert!(!out.status.success());
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let status: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(status, ["ok", "failed", "ok"]);
    assert!(!dir.join("cell-0001").exists());
    assert!(dir.join("cell-0002/final.lssw").is_file());
}

#[test]
fn local_step_sweep_rises_then_falls() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "hetero.toml", HETERO);
    let dir = tmp.path().join("taus");
    ok(&lss(
        &[
            "sweep",
            &cfg,
            "--grid",
            "local.tau=1,4,8,12,16",
            "--grid",
            "federation.master_seed=0,1,2",
            "--out",
            dir.to_str().unwrap(),
        ],
        None,
    ));
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let taus = [1usize, 4, 8, 12, 16];
    let mut acc = [0.0f64; 5];
    for row in summary.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let tau: usize = f[1].parse().unwrap();
        let i = taus.iter().position(|&t| t == tau).unwrap();
        acc[i] += f[4].parse::<f64>().unwrap() / 3.0;
    }
    let peak = (0..5).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
    assert!(peak > 0 && peak < 4, "mean accuracies {acc:?}");
    assert!(acc[4] < acc[peak], "mean accuracies {acc:?}");
}

#[test]
fn eval_reproduces_the_final_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dir = tmp.path().join("run");
    ok(&lss(&["run", &cfg, "--out", dir.to_str().unwrap()], Some("1")));
    let ckpt = dir.join("final.lssw");
    let out = lss(&["eval", ckpt.to_str().unwrap(), "--config", &cfg], Some("1"));
    ok(&out);
    let printed = String::from_utf8(out.stdout).unwrap();
    let diag = fs::read_to_string(dir.join("diagnostics.txt")).unwrap();
    let get = |text: &str, key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
            .unwrap()
    };
    assert_eq!(get(&printed, "test_accuracy"), get(&diag, "final_test_accuracy"));
    assert_eq!(get(&printed, "test_loss"), get(&diag, "final_test_loss"));

    // a checkpoint for another architecture is rejected
    let out = lss(
        &["eval", ckpt.to_str().unwrap(), "--config", &cfg, "--set", "model.hidden_dims=[3]"],
        Some("1"),
    );
    assert!(!out.status.success());
}

#[test]
fn bound_prints_theory_values() {
    let out = lss(
        &[
            "bound", "--beta", "1", "--sigma", "1", "--zeta", "0.5", "--c", "0.5", "--d", "1", "--clients",
            "4", "--tau", "8", "--rounds", "2",
        ],
        None,
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lr_term_1: 0.25\n"));
    assert!(text.contains("bound_term_1: 0.5\n"));
    let lr: f64 = text.lines().find_map(|l| l.strip_prefix("lr: ")).unwrap().parse().unwrap();
    assert!((lr - 0.125 * 2f64.powf(-1.0 / 3.0)).abs() < 1e-12);

    let out = lss(
        &[
            "bound", "--beta", "1", "--sigma", "1", "--zeta", "0", "--d", "1", "--clients", "4", "--tau",
            "8", "--rounds", "2",
        ],
        None,
    );
    ok(&out);
    assert!(String::from_utf8(out.stdout).unwrap().contains("max_local_steps: unbounded"));
}
