use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const WORKED_EXAMPLE: [[f64; 3]; 4] = [[0.5, 0.1, 0.4], [0.3, 0.3, 0.4], [0.5, 0.0, 0.5], [0.4, 0.2, 0.4]];

fn evifuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evifuse"))
        .args(args)
        .env_remove("EVIFUSE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evifuse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn score_file(dir: &TempDir, name: &str, rows: &[&[f64]]) -> PathBuf {
    let p = path(dir, name);
    let mut text = String::from("sample_id,E1,E2,E3\n");
    for (i, r) in rows.iter().enumerate() {
        text.push_str(&format!("r{i},{},{},{}\n", r[0], r[1], r[2]));
    }
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn synth_writes_two_rows_per_sample_reproducibly() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (path(&dir, "a.csv"), path(&dir, "b.csv"));
    let args = ["synth", "--healthy", "6", "--defected", "4", "--nf", "32", "--seed", "3", "-o"];
    let said = ok(&[&args[..], &[s(&a)]].concat());
    assert!(said.contains("10 samples"), "{said}");
    ok(&[&args[..], &[s(&b)]].concat());
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    let data_rows = String::from_utf8(text).unwrap().lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(data_rows, 20);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(evifuse(&["synth", "--nf", "32"]).status.code(), Some(2));
    assert_eq!(evifuse(&["synth", "--healthy", "0", "-o", s(&path(&dir, "x.csv"))]).status.code(), Some(2));
    let missing = path(&dir, "absent.csv");
    let out = evifuse(&["select", "--data", s(&missing), "-o", s(&path(&dir, "sel.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    assert_eq!(evifuse(&["--jobs", "0", "fuse", s(&missing), "-o", s(&missing)]).status.code(), Some(2));
}

#[test]
fn help_lists_the_run_flags() {
    let help = ok(&["run", "--help"]);
    for flag in ["--data", "--seed", "--repetitions", "--nsr", "--bands", "--output", "--plot-csv", "--jobs", "--config"] {
        assert!(help.contains(flag), "missing {flag}");
    }
    let top = ok(&["--help"]);
    for sub in ["synth", "select", "train", "rank", "fuse", "run", "noise-sweep", "band-sweep"] {
        assert!(top.contains(sub), "missing {sub}");
    }
}

#[test]
fn select_keeps_the_single_informative_line() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "toy.csv");
    let mut text = String::from("# frequencies_hz: 100,200,300,400\n# classes: healthy,defected\nsample_id,label,ch,100,200,300,400\n");
    for i in 0..10 {
        let label = i % 2;
        for ch in ["x1", "x2"] {
            let signal = 1.0 + label as f64;
            text.push_str(&format!("s{i},{},{ch},0.5,{signal},0.5,0.5\n", ["healthy", "defected"][label]));
        }
    }
    fs::write(&data, text).unwrap();
    let out = path(&dir, "sel.csv");
    let said = ok(&["select", "--data", s(&data), "-o", s(&out)]);
    assert!(said.contains("union 1"), "{said}");
    let sel = fs::read_to_string(&out).unwrap();
    assert!(sel.lines().skip(1).all(|l| l.split(',').nth(1) == Some("1")), "{sel}");
}

#[test]
fn fuse_reproduces_the_worked_example_weights() {
    let dir = TempDir::new().unwrap();
    let inputs: Vec<PathBuf> = WORKED_EXAMPLE
        .iter()
        .enumerate()
        .map(|(i, r)| score_file(&dir, &format!("m{i}.csv"), &[&r[..]]))
        .collect();
    let (out, trace) = (path(&dir, "fused.csv"), path(&dir, "trace.json"));
    let mut args: Vec<&str> = vec!["fuse"];
    args.extend(inputs.iter().map(|p| s(p)));
    args.extend(["--theta", "0.5", "--sigma", "0.5", "--trace", s(&trace), "-o", s(&out)]);
    ok(&args);
    let t: Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t[0]["status"], "ok");
    let w: Vec<f64> = t[0]["trace"]["w_hat"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (g, want) in w.iter().zip([0.32, 0.18, 0.21, 0.29]) {
        assert!((g - want).abs() < 0.02, "{w:?}");
    }
    let fused = fs::read_to_string(&out).unwrap();
    assert!(fused.starts_with("sample_id,E1,E2,E3\n"));
    let row: Vec<f64> = fused.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(row[0] > row[1] && row[0] > row[2]);
}

#[test]
fn fusing_one_classifier_returns_it() {
    let dir = TempDir::new().unwrap();
    let input = score_file(&dir, "only.csv", &[&[0.2, 0.5, 0.3], &[0.6, 0.3, 0.1]]);
    let out = path(&dir, "fused.csv");
    ok(&["fuse", s(&input), "-o", s(&out)]);
    let read = |p: &Path| -> Vec<Vec<f64>> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (a, b) = (read(&input), read(&out));
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn degenerate_rows_are_flagged_not_fatal() {
    let dir = TempDir::new().unwrap();
    let a = score_file(&dir, "a.csv", &[&[1.0, 0.0, 0.0], &[0.5, 0.3, 0.2]]);
    let b = score_file(&dir, "b.csv", &[&[0.0, 0.5, 0.5], &[0.4, 0.4, 0.2]]);
    let c = score_file(&dir, "c.csv", &[&[0.0, 0.5, 0.5], &[0.6, 0.2, 0.2]]);
    let out = path(&dir, "fused.csv");
    let said = ok(&["fuse", s(&a), s(&b), s(&c), "--theta", "-0.5", "-o", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].ends_with(",status"), "{text}");
    assert!(lines[2].ends_with(",ok"), "{text}");
    assert!(!lines[1].ends_with(",ok"), "{text}");
    assert!(said.contains("1 flagged"), "{said}");
}

#[test]
fn misaligned_score_files_name_the_culprit() {
    let dir = TempDir::new().unwrap();
    let a = score_file(&dir, "a.csv", &[&[0.2, 0.5, 0.3], &[0.6, 0.3, 0.1]]);
    let b = score_file(&dir, "short.csv", &[&[0.2, 0.5, 0.3]]);
    let out = evifuse(&["fuse", s(&a), s(&b), "-o", s(&path(&dir, "f.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("short.csv"));
}

fn small_dataset(dir: &TempDir) -> PathBuf {
    let data = path(dir, "data.csv");
    ok(&["synth", "--healthy", "12", "--defected", "8", "--nf", "64", "--seed", "5", "-o", s(&data)]);
    data
}

fn run_json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

#[test]
fn run_records_exact_snr_for_noise_levels() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);
    let report = run_json(&["run", "--data", s(&data), "--repetitions", "2", "--nsr", "160"]);
    for key in ["per_learner", "fused", "noise_sweep", "bandwidth_sweep", "config_echo"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let snr = report["noise_sweep"][0]["snr_db"].as_f64().unwrap();
    assert!((snr - (-20.0 * 1.6f64.log10())).abs() < 1e-12);
    assert!((snr + 4.0824).abs() < 1e-3);
}

#[test]
fn run_reports_every_band_section() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);
    let bands = run_json(&["band-sweep", "--data", s(&data), "--repetitions", "1", "--bands", "16"]);
    let bands = bands.as_array().unwrap();
    assert_eq!(bands.len(), 16);
    let text = fs::read_to_string(&data).unwrap();
    let freqs: Vec<f64> = text.lines().next().unwrap()["# frequencies_hz: ".len()..]
        .split(',')
        .map(|v| v.trim().parse().unwrap())
        .collect();
    for (i, b) in bands.iter().enumerate() {
        assert_eq!(b["band_index"], i);
        assert_eq!(b["start_frequency_hz"].as_f64().unwrap(), freqs[4 * i]);
    }
}

#[test]
fn config_file_and_seed_precedence() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);
    let cfg = path(&dir, "cfg.json");
    fs::write(&cfg, r#"{"experiment": {"seed": 11, "repetitions": 1, "learner": {"epochs": 5}}}"#).unwrap();
    let from_file = run_json(&["--config", s(&cfg), "run", "--data", s(&data)]);
    assert_eq!(from_file["config_echo"]["seed"], 11);
    assert_eq!(from_file["config_echo"]["learner"]["epochs"], 5);
    let env = Command::new(env!("CARGO_BIN_EXE_evifuse"))
        .args(["--config", s(&cfg), "run", "--data", s(&data)])
        .env("EVIFUSE_SEED", "12")
        .output()
        .unwrap();
    let env: Value = serde_json::from_slice(&env.stdout).unwrap();
    assert_eq!(env["config_echo"]["seed"], 12);
    let flag = run_json(&["--config", s(&cfg), "run", "--data", s(&data), "--seed", "13"]);
    assert_eq!(flag["config_echo"]["seed"], 13);

    fs::write(&cfg, r#"{"experiment": {"sead": 1}}"#).unwrap();
    assert_eq!(evifuse(&["--config", s(&cfg), "run", "--data", s(&data)]).status.code(), Some(2));
}

#[test]
fn train_and_rank_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir);
    let mut score_paths = Vec::new();
    for ch in ["x1", "log_x2", "all"] {
        let (model, scores) = (path(&dir, &format!("{ch}.json")), path(&dir, &format!("{ch}.csv")));
        ok(&["train", "--data", s(&data), "--channel", ch, "-o", s(&model), "--predict", s(&data), "--scores-out", s(&scores), "--seed", "1"]);
        assert!(fs::read_to_string(&scores).unwrap().starts_with("sample_id,healthy,defected\n"));
        score_paths.push(scores);
    }
    let ranking = path(&dir, "rank.json");
    let mut args = vec!["rank", "--data", s(&data), "-o", s(&ranking), "--theta-grid", "-0.5", "0.5", "--scores"];
    args.extend(score_paths.iter().map(|p| s(p)));
    ok(&args);
    let r: Value = serde_json::from_str(&fs::read_to_string(&ranking).unwrap()).unwrap();
    let names = |key: &str| -> Vec<String> {
        let mut v: Vec<String> = r[key].as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect();
        v.sort();
        v
    };
    assert_eq!(names("ranked"), names("classifiers"));
    let size = r["result"]["selected_size"].as_u64().unwrap();
    assert!((1..=3).contains(&size));
}
