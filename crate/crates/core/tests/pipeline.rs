//! End-to-end behaviour of the staged pipeline on untrained (fast) configurations.

use std::fs;
use std::path::Path;

use mdnslam_core::pipeline::{
    fit_variance_calibration, run_pipeline, run_stage, run_sweep, LoopSources, Manifest, ModelCache, PipelineConfig,
    PipelineError, Stage, SweepParameter, TrainSettings, CONFIG_JSON, MANIFEST_JSON, METRICS_JSON, OPTIMIZED_TUM,
};
use mdnslam_core::simulator::WorldSpec;

fn untrained(dir: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        output_dir: dir.to_path_buf(),
        train: TrainSettings {
            enabled: false,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn noiseless_world_is_recovered_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        world: WorldSpec::default().noiseless(),
        loop_sources: LoopSources {
            detections: false,
            simulated: true,
        },
        ..untrained(tmp.path(), 3)
    };
    let m = run_pipeline(&cfg).unwrap();
    assert!(m.odom_ate_m < 1e-8, "dead reckoning {}", m.odom_ate_m);
    assert!(m.ate_m < 1e-6, "optimized {}", m.ate_m);
    assert_eq!(m.n_inliers, m.n_candidates);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = untrained(&tmp.path().join("a"), 5);
    let b = untrained(&tmp.path().join("b"), 5);
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    for name in [METRICS_JSON, OPTIMIZED_TUM] {
        let x = fs::read(a.output_dir.join(name)).unwrap();
        let y = fs::read(b.output_dir.join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let ma: Manifest = serde_json::from_str(&fs::read_to_string(a.output_dir.join(MANIFEST_JSON)).unwrap()).unwrap();
    let mb: Manifest = serde_json::from_str(&fs::read_to_string(b.output_dir.join(MANIFEST_JSON)).unwrap()).unwrap();
    // config.json records the output directory; every other artifact must match
    let strip = |m: &Manifest| {
        let mut files = m.files.clone();
        files.remove(CONFIG_JSON);
        files
    };
    assert_eq!(strip(&ma), strip(&mb));
    assert_eq!(ma.config_sha256, mb.config_sha256);
    assert_eq!(ma.config_sha256, a.hash());
    assert!(ma.files.contains_key(OPTIMIZED_TUM));
}

#[test]
fn different_seeds_give_different_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_pipeline(&untrained(&tmp.path().join("a"), 1)).unwrap();
    let b = run_pipeline(&untrained(&tmp.path().join("b"), 2)).unwrap();
    assert_ne!(a.ate_m, b.ate_m);
}

#[test]
fn default_run_improves_on_dead_reckoning() {
    let tmp = tempfile::tempdir().unwrap();
    let m = run_pipeline(&untrained(tmp.path(), 1)).unwrap();
    assert!(m.ate_m < m.odom_ate_m, "{} vs {}", m.ate_m, m.odom_ate_m);
    assert!(m.gain_percent > 0.0);
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let unknown = PipelineConfig::from_json(r#"{"seed": 1, "colour": "blue"}"#).unwrap_err();
    assert!(matches!(unknown, PipelineError::Config(_)));
    assert_eq!(unknown.exit_code(), 2);

    let bad_value = PipelineConfig::from_json(r#"{"backend": {"rho": -1.0}}"#).unwrap_err();
    assert_eq!(bad_value.exit_code(), 2);

    let malformed = PipelineConfig::from_json("{").unwrap_err();
    assert_eq!(malformed.exit_code(), 2);

    let partial = PipelineConfig::from_json(r#"{"seed": 9}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.backend, Default::default());
}

#[test]
fn config_json_roundtrips() {
    let cfg = PipelineConfig {
        seed: 42,
        ..Default::default()
    };
    assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn stage_without_inputs_reports_its_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = untrained(tmp.path(), 1);
    let err = run_stage(&cfg, Stage::Optimize, &mut ModelCache::new()).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: Stage::Optimize, .. }));
    assert_eq!(err.exit_code(), 3 + Stage::Optimize as i32);
}

#[test]
fn stages_can_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = untrained(&tmp.path().join("whole"), 4);
    let staged = untrained(&tmp.path().join("staged"), 4);
    run_pipeline(&whole).unwrap();
    let mut cache = ModelCache::new();
    for stage in Stage::ALL {
        run_stage(&staged, stage, &mut cache).unwrap();
    }
    for name in [METRICS_JSON, OPTIMIZED_TUM] {
        assert!(fs::read(whole.output_dir.join(name)).unwrap() == fs::read(staged.output_dir.join(name)).unwrap());
    }
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = untrained(tmp.path(), 1);
    let values: Vec<String> = ["0.5", "1", "3"].iter().map(|s| s.to_string()).collect();
    let rows = run_sweep(&cfg, SweepParameter::Rho, &values, &mut ModelCache::new()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.status == "ok" && r.ate_m.is_some()));
    let csv = fs::read_to_string(tmp.path().join("sweep_rho.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for idx in 0..3 {
        assert!(tmp.path().join(format!("rho_{idx}")).join(METRICS_JSON).is_file());
    }
}

#[test]
fn sweep_rejects_unparsable_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = untrained(tmp.path(), 1);
    let err = run_sweep(&cfg, SweepParameter::Rho, &["abc".to_string()], &mut ModelCache::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = run_sweep(&cfg, SweepParameter::CovarianceMode, &["sometimes".to_string()], &mut ModelCache::new())
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn variance_calibration_recovers_a_power_law() {
    let var: Vec<f64> = (1..200).map(|k| 1e-4 * k as f64).collect();
    let sq: Vec<f64> = var.iter().map(|v| 2.0 * v.powf(0.5)).collect();
    let (c, b) = fit_variance_calibration(&var, &sq).unwrap();
    assert!((b - 0.5).abs() < 1e-12, "exponent {b}");
    assert!((c - 2.0).abs() < 1e-9, "scale {c}");
    assert_eq!(fit_variance_calibration(&[], &[]), None);
}
