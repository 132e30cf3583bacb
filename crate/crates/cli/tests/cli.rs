use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use noisylab::report::{mean, parse_noise_heatmap, parse_run_report, RunFinal};

fn noisylab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisylab"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    let out = dir.join("out");
    fs::write(
        &path,
        format!(
            "# small smoke experiment\npreset = paper-regime\nclasses = 3\nper_class = 40\ndim = 4\n\
             noise_accuracy = 0.9,0.5,0.7\nepochs = 3\noutput = {}\n{extra}",
            out.display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn one_variant_one_seed_writes_one_report_and_one_summary_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "variants = c3l:ensemble\nseeds = 0\n");
    let out = noisylab(&["run", "--config", &cfg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let dir = tmp.path().join("out");
    let runs: Vec<_> = fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !n.ends_with(".timing.csv"))
        .collect();
    assert_eq!(runs, ["c3l-ensemble-seed0.csv"]);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2, "{summary}");
    let report =
        parse_run_report(&fs::read_to_string(dir.join("runs").join(&runs[0])).unwrap()).unwrap();
    assert_eq!(report.records.len(), 3);
}

#[test]
fn summary_mean_is_the_mean_of_run_finals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "variants = kl_only:clip\nseeds = 0..3\n");
    let out = noisylab(&["run", "--config", &cfg]);
    assert!(out.status.success());
    let dir = tmp.path().join("out");

    let finals: Vec<f64> = (0..3)
        .map(|s| {
            let text =
                fs::read_to_string(dir.join(format!("runs/kl_only-clip-seed{s}.csv"))).unwrap();
            RunFinal::from_report(&parse_run_report(&text).unwrap())
                .accuracy
                .unwrap()
        })
        .collect();
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "mean_accuracy").unwrap();
    let reported: f64 = row[col].parse().unwrap();
    assert!((reported - mean(&finals).unwrap()).abs() <= 1e-12);
}

#[test]
fn noise_matrix_output_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "variants = kl_only:pseudo\nseeds = 1\n");
    assert!(noisylab(&["run", "--config", &cfg]).status.success());
    let text = fs::read_to_string(tmp.path().join("out/noise_matrix.csv")).unwrap();
    let (nm, names) = parse_noise_heatmap(&text).unwrap();
    assert_eq!(names.len(), 3);
    assert_eq!(nm.num_classes(), 3);
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "not_a_key = 1\n");
    assert_eq!(noisylab(&["run", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "tau = -1\n");
    assert_eq!(noisylab(&["run", "--config", &cfg]).status.code(), Some(2));
    let out = noisylab(&[
        "run",
        "--preset",
        "paper-regime",
        "--label-update",
        "sometimes",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn all_runs_diverging_exits_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "variants = c3l:ensemble\nseeds = 0,1\nlr_head = 1e200\nlr_backbone = 1e200\n",
    );
    let out = noisylab(&["run", "--config", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn synth_then_inspect_noise_reports_the_diagonal() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = noisylab(&[
        "synth",
        "--preset",
        "paper-regime",
        "--override",
        "per_class=200",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let full = tmp.path().join("nm.csv");
    let out = noisylab(&[
        "inspect-noise",
        "--labels",
        data.join("labels.csv").to_str().unwrap(),
        "--truth",
        data.join("truth.txt").to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let inspected = fs::read_to_string(&full).unwrap();
    assert_eq!(
        inspected,
        fs::read_to_string(data.join("noise_matrix.csv")).unwrap()
    );
    let (nm, _) = parse_noise_heatmap(&inspected).unwrap();
    let diag = nm.diagonal();
    assert!(diag[7] > 0.85 && diag[5] < 0.06, "{diag:?}");
}
