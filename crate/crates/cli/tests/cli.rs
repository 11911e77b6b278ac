use std::path::Path;
use std::process::{Command, Output};

use hybridlm::config::{parse_config, ModelConfig, Profile};
use hybridlm::count_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridlm"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest written");
    serde_json::from_str(&text).unwrap()
}

#[test]
fn demo_streams_match_and_manifest_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["demo", "--profile", "tiny", "--k", "3", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("lossless              = true"));
    for line in out.lines().filter(|l| l.contains("] greedy")) {
        let tag = &line[..line.find(']').unwrap() + 1];
        let greedy = line.split_once("greedy").unwrap().1.trim();
        let spec = out
            .lines()
            .find(|l| l.starts_with(tag) && l.contains("speculative"))
            .unwrap()
            .split_once("speculative")
            .unwrap()
            .1
            .trim();
        assert_eq!(greedy, spec);
    }
    let m = manifest(dir.path());
    assert_eq!(m["command"], "demo");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["exit_code"], 0);
    assert!(m["outputs"][0].as_str().unwrap().ends_with("demo.txt"));
}

#[test]
fn zero_depth_demo_accepts_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["demo", "--profile", "tiny", "--k", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mean_accept_length    = 1.000000"));
}

#[test]
fn corrupted_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = run(dir.path(), &["dump", "--output", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let loaded = run(dir.path(), &["load", ckpt.to_str().unwrap()]);
    assert_eq!(loaded.status.code(), Some(0));
    let params = format!("params          = {}", count_params(&ModelConfig::tiny()).total);
    assert!(stdout(&loaded).contains(&params), "{}", stdout(&loaded));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    for verb in [vec!["demo", "--checkpoint", ckpt.to_str().unwrap()], vec!["load", ckpt.to_str().unwrap()]] {
        let o = run(dir.path(), &verb);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("checkpoint header mismatch"), "{}", stderr(&o));
        assert_eq!(manifest(dir.path())["exit_code"], 2);
    }
}

#[test]
fn verify_suite_filter_and_fault_injection() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify-suite", "--only", "attention"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let rows: Vec<String> = stdout(&o).lines().filter(|l| l.contains("PASS") || l.contains("FAIL")).map(String::from).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|l| l.starts_with("attention")));

    let o = run(dir.path(), &["verify-suite", "--only", "attention", "--inject-fault", "sink-normalization"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("normalization"));

    let o = run(dir.path(), &["verify-suite", "--only", "tea-leaves"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_verify_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify-suite"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

fn curve(x: f64) -> f64 {
    4.0 * (1.0 - 0.58 * x.powf(0.58))
}

fn write_points(path: &Path, pts: &[(f64, f64)]) {
    let mut s = String::from("entropy,accept_length\n");
    for (x, y) in pts {
        s.push_str(&format!("{x:?},{y:?}\n"));
    }
    std::fs::write(path, s).unwrap();
}

fn fitted(out: &str, key: &str) -> f64 {
    out.lines()
        .find(|l| l.starts_with(key))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn fit_curve_recovers_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pts.csv");
    let xs: Vec<f64> = (1..=20).map(|i| i as f64 * 0.07).collect();
    write_points(&csv, &xs.iter().map(|&x| (x, curve(x))).collect::<Vec<_>>());
    let o = run(dir.path(), &["fit-curve", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!((fitted(&out, "ceiling") - 4.0).abs() < 1e-6);
    assert!((fitted(&out, "scale") - 0.58).abs() < 1e-6);
    assert!((fitted(&out, "exponent") - 0.58).abs() < 1e-6);
    assert!((fitted(&out, "r_squared") - 1.0).abs() < 1e-9);

    let mut r = ChaCha8Rng::seed_from_u64(4);
    let noisy: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| {
            // Box-Muller, σ = 0.01.
            let (u, v): (f64, f64) = (r.random::<f64>().max(1e-300), r.random());
            (x, curve(x) + 0.01 * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos())
        })
        .collect();
    write_points(&csv, &noisy);
    let out = stdout(&run(dir.path(), &["fit-curve", csv.to_str().unwrap()]));
    for (key, truth) in [("ceiling", 4.0), ("scale", 0.58), ("exponent", 0.58)] {
        let got = fitted(&out, key);
        assert!((got - truth).abs() / truth < 0.05, "{key} {got}");
    }
    assert!(fitted(&out, "r_squared") > 0.99);

    write_points(&csv, &[(0.3, 2.0), (0.3, 2.1), (0.3, 2.2)]);
    let o = run(dir.path(), &["fit-curve", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("insufficient spread"));

    write_points(&csv, &[(0.3, 2.0), (0.5, 2.1)]);
    assert_eq!(run(dir.path(), &["fit-curve", csv.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bench_output_refits() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["bench-decode", "--drafter", "sampled", "--head-scale", "1,4,8,16,32,64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = dir.path().join("bench.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("dataset,mean_entropy,mean_accept_length\n"));
    let fit_dir = dir.path().join("fit");
    let o = run(&fit_dir, &["fit-curve", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fitted(&stdout(&o), "r_squared") > 0.9);
}

#[test]
fn identical_flags_give_identical_csv() {
    let cases: [&[&str]; 2] = [
        &["bench-decode", "--drafter", "noisy", "--seeds", "2", "--seed", "11"],
        &["mopd-train", "--steps", "15", "--drift", "stale:3", "--seed", "11"],
    ];
    for (args, file) in cases.iter().zip(["bench.csv", "mopd.csv"]) {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(run(a.path(), args).status.code(), Some(0));
        assert_eq!(run(b.path(), args).status.code(), Some(0));
        let fa = std::fs::read(a.path().join(file)).unwrap();
        let fb = std::fs::read(b.path().join(file)).unwrap();
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{file}");
    }
}

#[test]
fn mopd_csv_columns_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["mopd-train", "--domains", "math:2,code:1", "--steps", "60", "--alpha", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("mopd.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,reverse_kl_per_domain,discard_frac,loss"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 60);
    let kl = |row: &[&str], d: &str| -> f64 {
        row[1].split(';').find_map(|kv| kv.strip_prefix(&format!("{d}="))).unwrap().parse().unwrap()
    };
    for d in ["math", "code"] {
        assert!(kl(&rows[59], d) < kl(&rows[0], d));
    }

    let o = run(dir.path(), &["mopd-train", "--domains", "math:2,math:1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["mopd-train", "--eps-low", "1.2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_config_resolves_to_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "window = 4\nvocab_size = 40\n").unwrap();
    let o = run(dir.path(), &["cache-report", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(dir.path());
    let text = m["config"].as_str().unwrap();
    let resolved = parse_config(text, Profile::Tiny).unwrap();
    let mut expect = ModelConfig::tiny();
    expect.window = 4;
    expect.vocab_size = 40;
    expect.seed = 9;
    assert_eq!(resolved, expect);
    assert_eq!(parse_config(text, Profile::Small).unwrap(), expect);
}

#[test]
fn cache_report_at_full_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["cache-report", "--profile", "paper", "--seq-len", "262144", "--bytes-per-scalar", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("layer_normalized_limit = 5.333333"));
    assert!(out.contains("byte_exact_limit       = 9.666667"));
    assert!(out.contains("ga_layers              = 9"));
    let o = run(dir.path(), &["cache-report", "--seq-len", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["replay-check", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = std::fs::read_to_string(dir.path().join("routing.txt")).unwrap();
    assert!(text.starts_with("routing-record v1"));
}

#[test]
fn paper_profile_is_not_instantiated() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["demo", "--profile", "paper"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("too large"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["transmogrify"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["demo", "--k", "lots"]).status.code(), Some(2));
}
