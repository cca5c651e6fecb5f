use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partsplit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn partsplit")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn last_stderr_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line:?} ({e})"))
}

/// Small planted batch plus a model fitted to it.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    let model = dir.path().join("model");
    ok(&[
        "synth", "--samples", "6", "--channels", "6", "--height", "4", "--width", "4", "--rank-appearance", "2",
        "--rank-parts", "2", "--seed", "3", "--out", p(&synth),
    ]);
    let acts = synth.join("acts.npy");
    ok(&[
        "decompose", "-i", p(&acts), "-o", p(&model), "--rank-appearance", "2", "--rank-parts", "2", "--seed", "3",
    ]);
    (dir, acts, model)
}

fn write_npy(path: &Path, rows: usize, cols: usize, values: &[f64]) {
    let a = ndarray::Array2::from_shape_vec((rows, cols), values.to_vec()).unwrap();
    partsplit::io::write_array(a.view().into_dyn(), path).unwrap();
}

#[test]
fn pipeline_produces_expected_artifacts() {
    let (dir, acts, model) = fixture();
    for f in ["appearance.npy", "parts.npy", "model.json", "loss_trace.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(model.join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,loss"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (i, v) = l.split_once(',').unwrap();
            (i.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows[0].0, 0);
    assert!(rows.windows(2).all(|w| w[1].1 <= w[0].1));

    let report = ok(&["inspect", "-m", p(&model), "--truth", p(&dir.path().join("synth/truth")), "-i", p(&acts)]);
    assert!(report.contains("orthogonality_residual:"));
    assert!(report.contains("mean_part_iou:"));
    assert_eq!(report.lines().filter(|l| l.starts_with("  ")).count(), 4);

    let sal = dir.path().join("sal");
    let out = ok(&["saliency", "-m", p(&model), "-i", p(&acts), "-c", "0", "-o", p(&sal)]);
    assert!(out.starts_with("threshold: "));
    let maps = partsplit::io::read_array(sal.join("saliency.npy")).unwrap();
    assert_eq!(maps.shape(), &[6, 4, 4]);
    let masks = partsplit::io::read_array(sal.join("masks.npy")).unwrap();
    assert!(masks.iter().all(|&v| v == 0.0 || v == 1.0));

    let refined = dir.path().join("refined");
    let out = ok(&["refine", "-m", p(&model), "-i", p(&acts), "--samples", "0,2", "-o", p(&refined)]);
    assert_eq!(out.lines().count(), 3);
    let parts = partsplit::io::read_array(refined.join("refined_parts.npy")).unwrap();
    assert_eq!(parts.shape(), &[2, 16, 2]);
    assert!(parts.iter().all(|&v| v >= 0.0));
}

#[test]
fn edits_stay_inside_the_mask_and_roir_is_zero() {
    let (dir, acts, model) = fixture();
    let roi = dir.path().join("roi.npy");
    let mut values = vec![0.0; 16];
    values[..8].fill(1.0);
    write_npy(&roi, 4, 4, &values);
    let all_ones = dir.path().join("part.npy");
    write_npy(&all_ones, 4, 4, &[1.0; 16]);

    let edited = dir.path().join("edit/edited.npy");
    ok(&[
        "edit", "-m", p(&model), "-i", p(&acts), "--appearance", "1", "--alpha", "-4", "--part-file", p(&all_ones),
        "--mask", p(&roi), "-o", p(&edited),
    ]);
    assert!(edited.with_extension("json").exists());
    let out = ok(&["roir", "--original", p(&acts), "--edited", p(&edited), "--mask", p(&roi)]);
    assert_eq!(out.lines().next(), Some("index,ratio"));
    assert_eq!(out.lines().filter(|l| l.ends_with(",0")).count(), 6);
    assert!(out.trim_end().ends_with("mean ± std: 0 ± 0"));

    let flipped = dir.path().join("flip.npy");
    let inverse: Vec<f64> = values.iter().map(|v| 1.0 - v).collect();
    write_npy(&flipped, 4, 4, &inverse);
    let out = run(&["roir", "--original", p(&acts), "--edited", p(&edited), "--mask", p(&flipped)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(last_stderr_line(&out)["error"], "data");
}

#[test]
fn edit_record_matches_flags() {
    let (dir, acts, model) = fixture();
    let a = dir.path().join("a.npy");
    let b = dir.path().join("b.npy");
    ok(&["edit", "-m", p(&model), "-i", p(&acts), "--appearance", "0", "--alpha", "2.5", "--part-index", "1", "-o", p(&a)]);
    let record = dir.path().join("edit.json");
    fs::write(&record, r#"{"appearance_index": 0, "alpha": 2.5, "part_index": 1}"#).unwrap();
    ok(&["edit", "-m", p(&model), "-i", p(&acts), "--record", p(&record), "-o", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let out = run(&["edit", "-m", p(&model), "-i", p(&acts), "--appearance", "0", "--alpha", "1", "-o", p(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical_and_inputs_untouched() {
    let (dir, acts, _) = fixture();
    let before = fs::read(&acts).unwrap();
    let mut snapshots = Vec::new();
    for name in ["m1", "m2"] {
        let out = dir.path().join(name);
        ok(&[
            "decompose", "-i", p(&acts), "-o", p(&out), "--rank-appearance", "2", "--rank-parts", "2", "--minibatch",
            "3", "--iterations", "120", "--seed", "9",
        ]);
        let files: Vec<Vec<u8>> = ["appearance.npy", "parts.npy", "model.json", "loss_trace.csv"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(fs::read(&acts).unwrap(), before);

    let other = dir.path().join("m3");
    ok(&[
        "decompose", "-i", p(&acts), "-o", p(&other), "--rank-appearance", "2", "--rank-parts", "2", "--minibatch", "3",
        "--iterations", "120", "--seed", "10",
    ]);
    assert_ne!(fs::read(other.join("parts.npy")).unwrap(), snapshots[0][1]);
}

#[test]
fn config_file_precedence() {
    let (dir, acts, _) = fixture();
    let cfg = dir.path().join("fit.toml");
    fs::write(&cfg, "rank_appearance = 2\nrank_parts = 2\niterations = 7\nseed = 42\nconvergence_tol = 0.0\n").unwrap();
    let out = dir.path().join("m");
    ok(&["decompose", "-i", p(&acts), "-o", p(&out), "--config", p(&cfg), "--iterations", "4"]);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(meta["fit_config"]["iterations"], 4);
    assert_eq!(meta["fit_config"]["seed"], 42);
    assert_eq!(meta["fit_config"]["learning_rate"], 1e-3);

    fs::write(&cfg, "rank_appearance = 2\nrank_parts = 2\nwarmup = 3\n").unwrap();
    let bad = run(&["decompose", "-i", p(&acts), "-o", p(&dir.path().join("x")), "--config", p(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(last_stderr_line(&bad)["error"], "usage");
}

#[test]
fn invalid_rank_leaves_no_output() {
    let (dir, acts, _) = fixture();
    let out = dir.path().join("never");
    let res = run(&["decompose", "-i", p(&acts), "-o", p(&out), "--rank-appearance", "2", "--rank-parts", "17"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
    let err = last_stderr_line(&res);
    assert_eq!(err["code"], 2);
    assert!(err["message"].as_str().unwrap().contains("parts rank"));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = run(&["decompose", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(last_stderr_line(&unknown)["error"], "usage");

    let missing = dir.path().join("missing.npy");
    let res = run(&["decompose", "-i", p(&missing), "-o", p(&dir.path().join("m")), "--rank-appearance", "1", "--rank-parts", "1"]);
    assert_eq!(res.status.code(), Some(3));
    assert!(last_stderr_line(&res)["message"].as_str().unwrap().contains("missing.npy"));

    let garbage = dir.path().join("garbage.npy");
    fs::write(&garbage, b"not an array").unwrap();
    let res = run(&["roir", "--original", p(&garbage), "--edited", p(&garbage), "--mask", p(&garbage)]);
    assert_eq!(res.status.code(), Some(3));

    assert!(run(&["--help"]).status.success());
}

#[test]
fn divergent_fixed_step_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let acts = dir.path().join("acts.npy");
    let batch = ndarray::Array3::from_shape_fn((2, 3, 4), |(n, c, s)| ((n * 7 + c * 3 + s) % 5) as f64 - 2.0);
    partsplit::io::write_array(batch.view().into_dyn(), &acts).unwrap();
    fs::write(acts.with_extension("json"), r#"{"format_version": 1, "height": 2, "width": 2}"#).unwrap();
    let out = dir.path().join("m");
    let res = run(&[
        "decompose", "-i", p(&acts), "-o", p(&out), "--rank-appearance", "2", "--rank-parts", "2", "--nonneg", "false",
        "--step-rule", "fixed", "--learning-rate", "10", "--iterations", "200",
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(last_stderr_line(&res)["error"], "numerical");
    assert!(!out.exists());
}
