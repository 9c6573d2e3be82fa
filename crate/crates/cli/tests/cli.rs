use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cellfed_core::channel::{build_network, ChannelConfig};
use cellfed_core::emq::error_bound;
use cellfed_core::federation::read_checkpoint;
use cellfed_core::power::PowerProblem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SMALL: &str = "\
clients = 2
max_rounds = 3
n_train = 160
n_test = 80
features = 6
classes = 3
hidden = 8
aps = 4
";

fn cellfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellfed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn run_writes_k_rows_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&cellfed(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()]));
    }
    let csv = fs::read_to_string(a.join("iterations.csv")).unwrap();
    assert!(csv.starts_with("# schema=cellfed-iterations/1\nk,loss,test_acc,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 3);
    assert_eq!(data_rows(&csv), 3);
    assert_eq!(csv, fs::read_to_string(b.join("iterations.csv")).unwrap());

    let (iteration, w) = read_checkpoint(fs::File::open(a.join("weights.ckpt")).unwrap()).unwrap();
    assert_eq!(iteration, 3);
    assert_eq!(w.len(), 6 * 8 + 8 + 8 * 3 + 3);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_cellfed"))
            .args(["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()])
            .env("CELLFED_THREADS", threads)
            .output()
            .unwrap();
        ok(&o);
        csvs.push(fs::read_to_string(out.join("iterations.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn seed_and_arm_flags_override_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    ok(&cellfed(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--arm",
        "fixedbit+fullpower",
    ]));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["arm"], "fixedbit+fullpower");
    let csv = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert!(csv.lines().last().unwrap().ends_with(",fixedbit+fullpower"));

    let bad = cellfed(&["run", "--config", &cfg, "--arm", "emq"]);
    assert!(!bad.status.success());
}

#[test]
fn missing_field_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "clients = 2\n");
    let out = cellfed(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_rounds"));
}

#[test]
fn unknown_key_reports_line_and_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}theta_E = 0.3\n"));
    let out = cellfed(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("theta_E") && err.contains("line 9"), "{err}");
}

#[test]
fn one_cell_sweep_matches_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run_dir = dir.path().join("run");
    let sweep_dir = dir.path().join("sweep");
    ok(&cellfed(&["run", "--config", &cfg, "--out-dir", run_dir.to_str().unwrap()]));
    ok(&cellfed(&[
        "sweep",
        "--config",
        &cfg,
        "--out-dir",
        sweep_dir.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read_to_string(run_dir.join("iterations.csv")).unwrap(),
        fs::read_to_string(sweep_dir.join("cells/cell-000.csv")).unwrap()
    );
    let sweep = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(data_rows(&sweep), 1);
}

#[test]
fn theta_e_sweep_has_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("s");
    ok(&cellfed(&[
        "sweep",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "--theta-e",
        "0.25,0.5,0.75,1",
        "--theta-l",
        "0.5",
        "--energy-budget",
        "inf",
    ]));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(data_rows(&sweep), 4);
    let firsts: Vec<&str> = sweep
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(firsts, ["0.25", "0.5", "0.75", "1"]);

    let dup = cellfed(&["sweep", "--config", &cfg, "--theta-e", "0.5,0.5"]);
    assert!(!dup.status.success());
    assert!(String::from_utf8_lossy(&dup.stderr).contains("duplicate"));
}

#[test]
fn codec_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<f64> = (0..257).map(|_| rng.random_range(-0.02..0.02)).collect();
    let text: String = v.iter().map(|x| format!("{x}\n")).collect();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    fs::write(p("v.txt"), text).unwrap();

    ok(&cellfed(&["codec", "encode", "--input", &p("v.txt"), "--output", &p("v.emq")]));
    ok(&cellfed(&[
        "codec", "decode", "--input", &p("v.emq"), "--output", &p("w.txt"), "--dim", "257",
    ]));
    let w: Vec<f64> = fs::read_to_string(p("w.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    let norm = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let u = norm.log10().floor() as i32;
    let bound = error_bound(u).relaxed;
    assert!(v.iter().zip(&w).all(|(a, b)| (a - b).abs() <= bound));

    // Decoded values are a fixed point. Bytes may differ in the sign bits of
    // zero mantissas.
    ok(&cellfed(&["codec", "encode", "--input", &p("w.txt"), "--output", &p("w.emq")]));
    ok(&cellfed(&[
        "codec", "decode", "--input", &p("w.emq"), "--output", &p("y.txt"), "--dim", "257",
    ]));
    assert_eq!(fs::read(p("w.txt")).unwrap(), fs::read(p("y.txt")).unwrap());
    assert_eq!(fs::read(p("v.emq")).unwrap().len(), fs::read(p("w.emq")).unwrap().len());

    let short = cellfed(&[
        "codec", "decode", "--input", &p("v.emq"), "--output", &p("x.txt"), "--dim", "4000",
    ]);
    assert!(!short.status.success());
}

#[test]
fn zero_vector_file_gives_minimal_stream() {
    let dir = TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    fs::write(p("z.txt"), "0\n0\n0\n0\n").unwrap();
    ok(&cellfed(&["codec", "encode", "--input", &p("z.txt"), "--output", &p("z.emq")]));
    assert_eq!(fs::read(p("z.emq")).unwrap(), vec![0x80, 0xf0]);
}

#[test]
fn power_single_client_latency_only_is_full_power() {
    let dir = TempDir::new().unwrap();
    let cfg = ChannelConfig::default();
    let net = build_network(5, 16, 1, 1000.0, true, &cfg);
    let problem = PowerProblem::new(net.stats, vec![20_000.0], cfg, 0.0, 1.0).unwrap();
    let input = dir.path().join("p.json");
    let output = dir.path().join("s.json");
    fs::write(&input, serde_json::to_string(&problem).unwrap()).unwrap();
    ok(&cellfed(&[
        "power",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]));
    let sol: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&output).unwrap()).unwrap();
    assert_eq!(sol["p"][0].as_f64().unwrap(), 1.0);
    assert_eq!(sol["converged"], true);
}
