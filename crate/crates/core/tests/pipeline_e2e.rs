use std::path::Path;

use regime_audit::attack::AttackConfig;
use regime_audit::dataset::Schema;
use regime_audit::model::LogisticParams;
use regime_audit::pipeline::{
    emit_report, report_json, run_protocol, synth_generate, write_synth, EvaluationReport, RunConfig, Stage, SynthSpec,
    REPORT_FILES,
};
use regime_audit::{ModelSpec, PipelineError};

fn setup(dir: &Path, compression: f64) -> RunConfig {
    let spec = SynthSpec {
        n_per_regime: 1000,
        compression,
        seed: 5,
        ..SynthSpec::default()
    };
    let (data, series) = synth_generate(&spec).unwrap();
    write_synth(dir, &data, &series).unwrap();
    let mut cfg = RunConfig::new("data.csv", "stress.csv", Schema::new(vec![], "y", "t"));
    cfg.model = ModelSpec::logistic(LogisticParams::default());
    cfg.explain.audit_sample = 40;
    cfg.explain.background_size = 16;
    cfg.seeds = vec![5];
    cfg.output_dir = Some("out".into());
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn protocol_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), 0.8);
    let cfg = RunConfig::from_file(write_config(tmp.path(), &cfg)).unwrap();
    assert_eq!(cfg.dataset, tmp.path().join("data.csv"));
    let report = run_protocol(&cfg).unwrap();
    let out = cfg.output_dir.clone().unwrap();
    emit_report(&report, &out).unwrap();
    for f in REPORT_FILES {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let back: EvaluationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(report_json(&back).unwrap(), text);

    let thresholds = std::fs::read_to_string(out.join("thresholds.csv")).unwrap();
    assert_eq!(thresholds.lines().count(), 1 + 6);
    let sri = std::fs::read_to_string(out.join("sri.csv")).unwrap();
    assert!(sri.lines().last().unwrap().starts_with("delta,"));

    assert!(report.calm.delta_auroc > 0.0);
    assert!(report.cross.raf.factor.unwrap() > 1.0);
    assert_eq!(report.calm.n_test + report.calm.n_train, report.calm.n_instances);
    assert!(report.calm.attack.max_linf <= 0.1);
}

#[test]
fn zero_budget_leaves_everything_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), 0.8);
    cfg.attack = AttackConfig::with_epsilon(0.0);
    let cfg = RunConfig::from_file(write_config(tmp.path(), &cfg)).unwrap();
    let report = run_protocol(&cfg).unwrap();
    for r in [&report.calm, &report.stress] {
        assert_eq!(r.delta_auroc, 0.0);
        assert_eq!(r.risk.delta_el, 0.0);
        let drift = r.drift.as_ref().unwrap();
        assert!((drift.cosine - 1.0).abs() < 1e-12);
        assert_eq!(drift.llm_score, Some(1.0));
    }
    assert!(report.cross.raf.factor.is_none());
}

#[test]
fn errors_carry_their_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = setup(tmp.path(), 1.0);
    cfg.dataset = "missing.csv".into();
    let err = run_protocol(&RunConfig::from_file(write_config(tmp.path(), &cfg)).unwrap()).unwrap_err();
    assert_eq!(err.stage(), Stage::Load);
    assert!(err.to_string().starts_with("[load]"));

    let mut cfg = setup(tmp.path(), 1.0);
    cfg.test_fraction = 1.5;
    assert!(matches!(run_protocol(&cfg), Err(PipelineError::Config(_))));
}
