use std::path::{Path, PathBuf};

use unmt_core::pipeline::{cmd_prepare, cmd_report, cmd_run, load_prepared, load_records, reordering_mismatches, ExperimentConfig};
use unmt_core::trainer::{Cell, DataVariant, Objective};

fn tiny(dir: &Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn prepare_is_idempotent_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m1 = cmd_prepare(&tiny(a.path())).unwrap();
    let m2 = cmd_prepare(&tiny(a.path())).unwrap();
    let m3 = cmd_prepare(&tiny(b.path())).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1, m3);
    let prep = load_prepared(&tiny(a.path())).unwrap();
    assert!(reordering_mismatches(&prep).unwrap().is_empty());
    assert_eq!(prep.corpus("mono.src").len(), prep.corpus("mono.src-reordered").len());
}

#[test]
fn seeds_change_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    let m1 = cmd_prepare(&cfg).unwrap();
    cfg.master_seed = 2;
    cfg.name = "tiny-2".into();
    let m2 = cmd_prepare(&cfg).unwrap();
    assert_ne!(m1.files["mono.src"].sha256, m2.files["mono.src"].sha256);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.test = 0;
    assert!(cmd_prepare(&cfg).unwrap_err().to_string().contains("prepare"));

    let cfg = tiny(dir.path());
    let err = cmd_run(&cfg, None).unwrap_err().to_string();
    assert!(err.contains("run") && err.contains("manifest"), "{err}");

    let mut cfg = tiny(dir.path());
    cfg.embed.skipgram.dim = 8;
    assert!(cfg.validate().is_err());

    assert!(ExperimentConfig::from_toml("cells = [\"dae-sideways\"]").is_err());
}

#[test]
fn changed_config_refuses_to_reuse_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cmd_prepare(&cfg).unwrap();
    cfg.data.bpe_merges += 1;
    assert!(cmd_prepare(&cfg).is_err());
    assert!(load_prepared(&cfg).is_err());
}

#[test]
fn tampered_artifacts_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_prepare(&cfg).unwrap();
    let p = cfg.stage_dir("prepare").join("mono.tgt");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text.push_str("extra line\n");
    std::fs::write(&p, text).unwrap();
    assert!(load_prepared(&cfg).is_err());
}

#[test]
fn run_resumes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.grid.pretrain.max_epochs = 1;
    cfg.grid.finetune.max_epochs = 1;
    cmd_prepare(&cfg).unwrap();
    let cell = Cell::new(Objective::Dae, DataVariant::Original);
    let first = cmd_run(&cfg, Some(&[cell])).unwrap();
    let again = cmd_run(&cfg, Some(&[cell])).unwrap();
    assert_eq!(first[0].test, again[0].test);
    assert_eq!(first[0].finetune, again[0].finetune);

    // Losing the evaluation stage re-evaluates from the stored checkpoint.
    std::fs::remove_dir_all(cfg.stage_dir("evaluate")).unwrap();
    let re = cmd_run(&cfg, Some(&[cell])).unwrap();
    assert_eq!(first[0].test.as_ref().unwrap().entries, re[0].test.as_ref().unwrap().entries);

    assert_eq!(load_records(&cfg).unwrap().len(), 1);
    let b1 = cmd_report(&cfg).unwrap();
    let table = std::fs::read_to_string(cfg.stage_dir("report").join("comparison.txt")).unwrap();
    let b2 = cmd_report(&cfg).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(table, std::fs::read_to_string(cfg.stage_dir("report").join("comparison.txt")).unwrap());
    let widths = std::fs::read_to_string(cfg.stage_dir("report").join("position_width.csv")).unwrap();
    assert_eq!(widths.lines().next().unwrap(), "cell,checkpoint,tau,neighborhood_width");
    assert!(widths.lines().any(|l| l.starts_with("dae-original,pretrain,0.5,")), "{widths}");
}
