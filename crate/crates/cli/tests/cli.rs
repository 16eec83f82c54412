use std::path::Path;
use std::process::{Command, Output};

use crossmag::eval::read_csv;
use crossmag::mil::AblationRow;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crossmag")
}

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let run_dir = dir.join("run");
    Command::new(bin())
        .args(["--config", cfg.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap(), "--log-level", "warn"])
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[global]
seed = 5

[synth]
n_slides = 4
height = 896
width = 1792
n_classes = 2

[distill]
total_steps = 3
batch_size = 4

[mil]
epochs = 1
folds = 2
d_a = 8

[e2e]
ablation = true
"#;

#[test]
fn synth_writes_expected_records_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), SMALL, &["synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    let manifest = std::fs::read_to_string(run_dir.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4 * 2);
    for d in ["data", "checkpoints", "embeddings", "reports", "logs"] {
        assert!(run_dir.join(d).is_dir(), "{d}");
    }
    let resolved = std::fs::read_to_string(run_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 5"), "{resolved}");
    assert!(!run_dir.join(".crossmag.lock").exists());
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "[synth]\nn_slides = 2\nheight = 896\nn_classes = 2\n", &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));

    let o = run(dir.path(), "[distill]\ntotal_steps = 3\nbatchsize = 4\n", &["distill"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = run(dir.path(), "[synth]\nn_slides = 2\nheight = 900\nwidth = 896\nn_classes = 2\n", &["synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_prerequisites_exit_3_naming_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), SMALL, &["distill"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest.jsonl"), "{}", stderr(&o));

    assert!(run(dir.path(), SMALL, &["synth"]).status.success());
    for cmd in ["mil", "e2e", "probe"] {
        let o = run(dir.path(), SMALL, &[cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert!(stderr(&o).contains("xmag"), "{cmd}: {}", stderr(&o));
    }
    let o = run(dir.path(), SMALL, &["stats"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("_predictions.json"), "{}", stderr(&o));
}

#[test]
fn held_lock_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join(".crossmag.lock"), "1").unwrap();
    let o = run(dir.path(), SMALL, &["synth"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("lock"), "{}", stderr(&o));
}

#[test]
fn inconsistent_fixture_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fx.csv");
    std::fs::write(&fixtures, "model,patches_per_wsi,seconds_per_wsi,wsis_per_minute,speedup\nXMAG,554,6.82,8.80,1.00\nPhikon,6260,54.21,1.50,7.95\n").unwrap();
    let o = run(dir.path(), &format!("[bench]\nfixtures = {:?}\n", fixtures.to_str().unwrap()), &["bench"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("Phikon"), "{}", stderr(&o));
}

#[test]
fn zero_learning_rate_delivers_the_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("total_steps = 3", "total_steps = 3\npeak_lr = 0.0");
    assert!(run(dir.path(), &cfg, &["synth"]).status.success());
    let o = run(dir.path(), &cfg, &["distill"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join("run/checkpoints");
    assert_eq!(std::fs::read(ck.join("xmag.bin")).unwrap(), std::fs::read(ck.join("xmag_init.bin")).unwrap());
    let log = std::fs::read_to_string(dir.path().join("run/logs/distill_loss.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,lr,L,L_global,L_local,wall_ms");
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn pipeline_produces_reports_and_one_ablation_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "distill", "mil", "e2e", "probe", "stats"] {
        let o = run(dir.path(), SMALL, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let r = dir.path().join("run");
    let rows: Vec<AblationRow> = read_csv(&r.join("reports/ablation.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
    assert_eq!(std::fs::read_dir(r.join("embeddings")).unwrap().count(), 2 * 4);
    let paired = std::fs::read_to_string(r.join("reports/paired_tests.csv")).unwrap();
    assert!(paired.contains("mcnemar") && paired.contains("bootstrap_f1"), "{paired}");

    // Frozen MIL also runs from exported embeddings alone.
    std::fs::remove_file(r.join("checkpoints/xmag.bin")).unwrap();
    let before = std::fs::read(r.join("reports/mil_folds.csv")).unwrap();
    let o = run(dir.path(), SMALL, &["mil"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(r.join("reports/mil_folds.csv")).unwrap(), before);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), SMALL, &["--seed", "77", "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(dir.path().join("run/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 77"), "{resolved}");
    let o = run(dir.path(), SMALL, &["--log-level", "loud", "synth"]);
    assert_eq!(o.status.code(), Some(2));
}
