use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brainshift::ffd::{write_cpp, FfdGrid};
use brainshift::nifti::read_nifti;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_brainshift"))
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    bin().current_dir(cwd).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn listing(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"{"pipeline": {"target_dims": [16, 16, 16]}, "train": {"epochs": 1}}"#;

/// Cohort of 3 small cases plus a 16³ config file, in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    let o = run(dir.path(), &["phantom", "--seed", "4", "--n", "3", "--dims", "16", "--out", "cohort"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("network"));
    assert!(listing(dir.path()).is_empty());
}

#[test]
fn phantom_is_byte_deterministic_and_echoes_config() {
    let dir = workspace();
    let o = run(dir.path(), &["--threads", "1", "phantom", "--seed", "4", "--n", "3", "--dims", "16", "--out", "again"]);
    assert!(o.status.success());
    let (a, b) = (dir.path().join("cohort"), dir.path().join("again"));
    assert_eq!(listing(&a), listing(&b));
    for rel in listing(&a).iter().filter(|p| a.join(p).is_file()) {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
    let echoed = fs::read_to_string(a.join("config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert_eq!(v["cohort"]["n_cases"], 3);
    assert_eq!(v["cohort"]["phantom"]["dims"], serde_json::json!([16, 16, 16]));
}

#[test]
fn validation_errors_exit_1_with_all_violations() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train": {"lr": -1, "loss": {"alpha": -1}}, "cohort": {"k_folds": 1}}"#).unwrap();
    let o = run(dir.path(), &["phantom", "--config", "bad.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.starts_with("error[CONFIG]:"), "{e}");
    assert!(e.contains("train.lr") && e.contains("loss.alpha") && e.contains("k_folds"), "{e}");
    assert!(!dir.path().join("x").exists());

    let o = run(dir.path(), &["phantom", "--out", "x", "--dims", "30"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[USAGE]:"));
    assert!(listing(dir.path()) == vec![PathBuf::from("bad.json")]);
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = workspace();
    let p = dir.path();
    let o = run(p, &["train", "--cohort", "cohort", "--config", "small.json", "--epochs", "2", "--out", "model.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(p.join("model.ckpt.loss.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,case,disp_mse,theta,phi,mag,dice,edge,sdf,total"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("model.ckpt.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["epochs"], 2);

    let o = run(p, &["train", "--cohort", "cohort", "--config", "small.json", "--epochs", "2", "--out", "model2.ckpt"]);
    assert!(o.status.success());
    assert_eq!(fs::read(p.join("model.ckpt")).unwrap(), fs::read(p.join("model2.ckpt")).unwrap());

    let o = run(p, &["predict", "--ckpt", "model.ckpt", "--case", "cohort/case_000", "--config", "small.json", "--out", "pred"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let disp = read_nifti(p.join("pred/disp.nii")).unwrap();
    assert_eq!((disp.channels(), disp.dims()), (3, [16; 3]));
    let mask = read_nifti(p.join("pred/mask.nii")).unwrap();
    assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));

    let o = run(p, &["eval", "--cohort", "cohort", "--ckpt", "model.ckpt", "--folds", "3", "--config", "small.json", "--out", "report.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 3);
    assert_eq!(report["cases"].as_array().unwrap().len(), 3);
    assert!(p.join("report.json.cases.csv").exists());
}

#[test]
fn mismatched_checkpoint_is_ckpt_shape() {
    let dir = workspace();
    let mut bytes = b"BSCK".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&0u64.to_le_bytes());
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&3u32.to_le_bytes());
    bytes.extend_from_slice(b"foo");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&2u64.to_le_bytes());
    bytes.extend_from_slice(&[0u8; 8]);
    fs::write(dir.path().join("odd.ckpt"), bytes).unwrap();
    let o = run(dir.path(), &["predict", "--ckpt", "odd.ckpt", "--case", "cohort/case_000", "--out", "pred"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[CKPT_SHAPE]:"), "{}", stderr(&o));
    assert!(!dir.path().join("pred").exists());
}

#[test]
fn warp_sdf_and_supervise() {
    let dir = workspace();
    let p = dir.path();
    let o = run(p, &["sdf", "--mask", "cohort/case_000/mask_pre.nii", "--out", "sdf.nii"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sdf = read_nifti(p.join("sdf.nii")).unwrap();
    let mask = read_nifti(p.join("cohort/case_000/mask_pre.nii")).unwrap();
    assert!(sdf.data().iter().zip(mask.data()).all(|(s, m)| (*s < 0.0) == (*m > 0.5)));

    let o = run(p, &["warp", "--vol", "cohort/case_000/mask_pre.nii", "--field", "cohort/case_000/gt_disp.nii", "--mask", "--out", "w.nii"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read_nifti(p.join("w.nii")).unwrap().data().iter().all(|&v| v == 0.0 || v == 1.0));

    let grid = FfdGrid::covering(mask.geometry(), [4.0; 3]).unwrap();
    let mut grid = grid;
    grid.displacements_mut().iter_mut().for_each(|d| *d = [0.5, 0.0, -0.25]);
    write_cpp(&grid, p.join("grid.nii")).unwrap();
    let o = run(p, &["supervise", "--cpp", "grid.nii", "--geom", "cohort/case_000/mask_pre.nii", "--out", "sup"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let disp = read_nifti(p.join("sup/gt_disp.nii")).unwrap();
    assert!(disp.channel(0).iter().all(|&v| (v - 0.5).abs() < 1e-6));
    assert!(p.join("sup/gt_mask_intra.nii").exists() && p.join("sup/gt_sdf.nii").exists());

    let o = run(p, &["warp", "--vol", "cohort/case_000/pmri.nii", "--field", "sdf.nii", "--out", "bad.nii"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!p.join("bad.nii").exists());
}
