mod common;

use common::*;

fn sweep(dir: &std::path::Path, param: &str, values: &str, extra: &[&str]) -> (String, String) {
    let data = if dir.join("data").is_dir() { dir.join("data") } else { tiny_data(dir, 4, 1) };
    let cfg = tiny_train_config(dir);
    let out = dir.join(format!("sweep_{param}"));
    let mut args = vec![
        "sweep", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--param", param, "--values", values,
        "--phase1-epochs", "1", "--phase2-epochs", "1", "--batches-per-epoch", "1",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    (read(&out.join("sweep.csv")), read(&out.join("sweep_runs.csv")))
}

#[test]
fn interval_sweep_gives_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let (summary, runs) = sweep(dir.path(), "interval", "1,2,3", &["--parallel", "2"]);
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "interval,val_miou,runs,failed");
    assert_eq!(lines.len(), 4, "{summary}");
    for (line, v) in lines[1..].iter().zip(["1", "2", "3"]) {
        assert!(line.starts_with(&format!("{v},")), "{line}");
        assert!(line.ends_with(",1,0"), "{line}");
    }
    assert_eq!(runs.lines().next(), Some("param,value,seed,val_miou,clean_miou,corrupted_miou,degradation,status"));
    assert_eq!(runs.lines().count(), 4);
}

#[test]
fn noise_probability_sweep_with_seeds_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (summary, runs) =
        sweep(dir.path(), "noise_p", "0,0.25,0.5,0.75,1.0", &["--noise", "random_tensor", "--seeds", "0,1", "--corrupt", "distortion"]);
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "noise_p,val_miou,clean_miou,corrupted_miou,degradation,runs,failed");
    assert_eq!(lines.len(), 6, "{summary}");
    assert_eq!(runs.lines().count(), 1 + 5 * 2);
    assert!(runs.lines().skip(1).all(|l| l.ends_with(",ok")), "{runs}");
    for line in &lines[1..] {
        assert!(line.ends_with(",2,0"), "{line}");
    }
}

#[test]
fn empty_or_invalid_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 2, 1);
    let out = dir.path().join("sw");
    for values in ["", "0,abc", "1.5"] {
        let res = run(&["sweep", "--data", s(&data), "--out", s(&out), "--param", "noise_p", "--values", values]);
        assert_eq!(code(&res), 1, "values {values:?}: {}", stderr(&res));
    }
}
