//! End-to-end runs of the `semlab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

const SMALL: &str = "[dataset]\ntrain_per_class = 40\ntest_per_class = 10\n\
     [collection]\nsigmas = [0.25, 0.75]\naca_trials = 20\n[collection.training]\nepochs = 4\n\
     [eval]\nsamples = 5\nn_trials = 20\n[search]\nbinary_steps = 4\n[attack]\niterations = 5\n";

fn semlab(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semlab"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

/// A small trained collection shared by the tests in this binary.
fn trained() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static CELL: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, SMALL).unwrap();
        let out = dir.path().join("out");
        let o = semlab(&cfg, &out, &["train-collection"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (dir, cfg, out)
    })
}

fn hashes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let h = Sha256::digest(std::fs::read(&p).unwrap()).to_vec();
            (p, h)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_scenario_fails_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let o = semlab(&cfg, &out, &["attack", "--scenario", "Z", "--attack", "bim", "--epsilon", "0.1"]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn missing_collection_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = semlab(&cfg, &dir.path().join("out"), &["aca-table"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr).to_lowercase();
    assert!(err.contains("collection"), "{err}");
}

#[test]
fn aca_table_has_a_row_per_entry() {
    let (_, cfg, out) = trained();
    let o = semlab(cfg, out, &["aca-table"]);
    assert!(o.status.success());
    let mut r = csv::Reader::from_path(out.join("aca_table.csv")).unwrap();
    let mut keys: Vec<(String, String)> = r.records().map(|x| x.unwrap()).map(|x| (x[0].to_string(), x[1].to_string())).collect();
    let n = keys.len();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), n);
    assert_eq!(n, 8 * 2);
}

#[test]
fn curve_csv_is_monotone_and_reads_leave_checkpoints_alone() {
    let (_, cfg, out) = trained();
    let before = hashes(&out.join("collection"));
    let o = semlab(cfg, out, &["curve", "--scenario", "A", "--attack", "bim,mim,pgd", "--untargeted", "--name", "fig"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(before, hashes(&out.join("collection")));

    let curves = semlab::workbench::emit::read_curves_csv(&out.join("fig.csv")).unwrap();
    assert_eq!(curves.len(), 3);
    for c in &curves {
        assert!(c.points.windows(2).all(|w| w[0].asr <= w[1].asr));
    }
    let svgs: Vec<_> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.starts_with("fig-") && f.ends_with(".svg"))
        .collect();
    assert_eq!(svgs.len(), 3, "{svgs:?}");
    for m in ["bim", "mim", "pgd"] {
        assert!(svgs.iter().any(|f| f.contains(m)));
    }
}
