use std::path::Path;

use ssda_core::checkpoint::load_checkpoint;
use ssda_core::config::{ResolvedConfig, RunConfig};
use ssda_core::error::Error;
use ssda_core::model::NetSet;
use ssda_core::runner::{execute, run_dir, RunSummary};

const TINY: &str = r#"
[data.synthetic]
task = "classification"
samples_per_class = 6
test_samples_per_class = 3

[model]
encoder_channels = [4, 8, 8, 8]
discriminator_channels = [4, 8]

[train]
batch_size_source = 4
batch_size_target = 4
max_iters = 6
eval_every = 3

[calibration]
passes = 2
batch_size = 8
"#;

fn resolved(preset: &str, seed: u64) -> ResolvedConfig {
    RunConfig::from_toml(TINY).unwrap().resolve(Some(preset)).unwrap().with_seed(seed)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn calibrating_preset_chains_train_calibrate_and_eval() {
    let out = tempfile::tempdir().unwrap();
    let cfg = resolved("rot+adv+bn", 0);
    let summary = execute(&cfg, out.path(), false).unwrap();
    let dir = run_dir(out.path(), &cfg);
    for f in ["config.toml", "metrics.jsonl", "last.ckpt", "best.ckpt", "calibrated.ckpt", "summary.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(RunSummary::load(&dir).unwrap(), summary);
    assert_eq!(summary.preset, "rot+adv+bn");
    assert_eq!(summary.iters, 6);
    assert!(summary.target_before_bn.is_some());

    let (last, last_meta) = load_checkpoint(&dir.join("last.ckpt")).unwrap();
    let (cal, cal_meta) = load_checkpoint(&dir.join("calibrated.ckpt")).unwrap();
    assert!(!last_meta.bn_calibrated && cal_meta.bn_calibrated);
    assert_eq!(last.param_hash(NetSet::ALL), cal.param_hash(NetSet::ALL));
    assert_ne!(last.bn_stats_hash(), cal.bn_stats_hash());

    let log = String::from_utf8(read(&dir, "metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines.last().unwrap()["stage"], "bn_calibrated");
    let evals: Vec<u64> = lines.iter().filter(|l| l.get("eval").is_some()).map(|l| l["iter"].as_u64().unwrap()).collect();
    assert_eq!(evals, [3, 6, 6]);

    let saved = ResolvedConfig::from_toml(&String::from_utf8(read(&dir, "config.toml")).unwrap()).unwrap();
    assert_eq!(saved.hash(), cfg.hash());
}

#[test]
fn completed_runs_are_not_overwritten_without_force() {
    let out = tempfile::tempdir().unwrap();
    let cfg = resolved("src", 1);
    execute(&cfg, out.path(), false).unwrap();
    let dir = run_dir(out.path(), &cfg);
    std::fs::write(dir.join("marker"), b"x").unwrap();
    match execute(&cfg, out.path(), false) {
        Err(Error::RunExists(d)) => assert_eq!(d, dir),
        other => panic!("expected RunExists, got {other:?}"),
    }
    assert!(dir.join("marker").exists());
    execute(&cfg, out.path(), true).unwrap();
    assert!(!dir.join("marker").exists());
    assert!(dir.join("summary.json").exists());
}

#[test]
fn identical_runs_write_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = resolved("rot+adv+bn", 2);
    execute(&cfg, a.path(), false).unwrap();
    execute(&cfg, b.path(), false).unwrap();
    let (da, db) = (run_dir(a.path(), &cfg), run_dir(b.path(), &cfg));
    for f in ["config.toml", "metrics.jsonl", "last.ckpt", "best.ckpt", "calibrated.ckpt", "summary.json"] {
        assert!(read(&da, f) == read(&db, f), "{f} differs");
    }
}

#[test]
fn adapted_runs_report_gain_over_their_source_only_sibling() {
    let out = tempfile::tempdir().unwrap();
    let rot = resolved("rot", 0);
    assert_eq!(execute(&rot, out.path(), false).unwrap().gain_vs_src, None);

    let src = execute(&resolved("src", 0), out.path(), false).unwrap();
    assert_eq!(src.gain_vs_src, Some(0.0));
    let again = execute(&rot, out.path(), true).unwrap();
    assert_eq!(again.gain_vs_src, Some(again.target - src.target));

    let calibrated = execute(&resolved("src+bn", 0), out.path(), false).unwrap();
    assert_eq!(calibrated.target_before_bn, Some(src.target));
    assert_eq!(calibrated.gain_vs_src, Some(calibrated.target - src.target));
}

#[test]
fn run_names_separate_presets_and_seeds() {
    let names: Vec<String> = [("src", 0), ("src", 1), ("rot", 0), ("src+bn", 0)]
        .iter()
        .map(|(p, s)| resolved(p, *s).run_name())
        .collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len(), "{names:?}");
    assert!(names[0].starts_with("src-") && names[0].ends_with("-s0"));
}
