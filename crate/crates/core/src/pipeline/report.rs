//! Report artefacts: JSON, CSV tables and a Markdown summary.

use std::fmt::Write as _;
use std::path::Path;

use super::{EvaluationReport, PipelineError, RegimeReport};
use crate::metrics::amplification;

pub const REPORT_FILES: [&str; 7] = [
    "report.json",
    "baseline.csv",
    "adversarial.csv",
    "risk.csv",
    "thresholds.csv",
    "sri.csv",
    "report.md",
];

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + a.abs().max(b.abs()))
}

fn inconsistent<T>(msg: String) -> Result<T, PipelineError> {
    Err(PipelineError::Inconsistent(msg))
}

/// Cross-checks derived quantities against the per-regime numbers they come from.
pub fn verify_report(r: &EvaluationReport) -> Result<(), PipelineError> {
    for reg in [&r.calm, &r.stress] {
        if !close(reg.delta_auroc, reg.clean.auroc - reg.adversarial.auroc) {
            return inconsistent(format!("{}: ΔAUROC does not match clean minus adversarial", reg.regime));
        }
        if reg.attack.max_linf > reg.attack.epsilon {
            return inconsistent(format!(
                "{}: perturbation {} exceeds budget {}",
                reg.regime, reg.attack.max_linf, reg.attack.epsilon
            ));
        }
    }
    let raf = amplification(r.stress.delta_auroc, r.calm.delta_auroc);
    if raf.delta_calm != r.cross.raf.delta_calm
        || raf.delta_stress != r.cross.raf.delta_stress
        || raf.factor.is_some() != r.cross.raf.factor.is_some()
        || raf.factor.zip(r.cross.raf.factor).is_some_and(|(a, b)| !close(a, b))
    {
        return inconsistent("RAF does not match the per-regime ΔAUROC values".into());
    }
    if r.calm.thresholds.len() != r.stress.thresholds.len()
        || r.cross.fnr_amplification.len() != r.calm.thresholds.len()
    {
        return inconsistent("threshold tables differ in length across regimes".into());
    }
    let sri = |reg: &RegimeReport| reg.drift.as_ref().and_then(|d| d.sri);
    match (sri(&r.calm), sri(&r.stress), r.cross.delta_sri) {
        (Some(c), Some(s), Some(d)) if close(d, c - s) => {}
        (None, _, None) | (_, None, None) => {}
        _ => return inconsistent("ΔSRI does not match the per-regime SRI values".into()),
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_md(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(PipelineError::csv)?;
    w.write_record(header).map_err(PipelineError::csv)?;
    for row in rows {
        w.write_record(&row).map_err(PipelineError::csv)?;
    }
    w.flush()?;
    Ok(())
}

fn perf_rows(r: &EvaluationReport, adversarial: bool) -> Vec<Vec<String>> {
    [&r.calm, &r.stress]
        .iter()
        .map(|reg| {
            let p = if adversarial { &reg.adversarial } else { &reg.clean };
            let mut row = vec![
                reg.regime.to_string(),
                reg.n_test.to_string(),
                p.auroc.to_string(),
                p.accuracy.to_string(),
                p.brier.to_string(),
            ];
            if adversarial {
                row.push(reg.delta_auroc.to_string());
                row.push(reg.attack.epsilon.to_string());
                row.push(reg.attack.max_linf.to_string());
            }
            row
        })
        .collect()
}

/// Serialized form of `report.json`: pretty JSON with a trailing newline.
pub fn report_json(r: &EvaluationReport) -> Result<String, PipelineError> {
    let mut s = serde_json::to_string_pretty(r)?;
    s.push('\n');
    Ok(s)
}

/// Writes every file in [`REPORT_FILES`] into `dir`.
pub fn emit_report(r: &EvaluationReport, dir: &Path) -> Result<(), PipelineError> {
    verify_report(r)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(r)?)?;

    write_csv(
        &dir.join("baseline.csv"),
        &["regime", "n_test", "auroc", "accuracy", "brier"],
        perf_rows(r, false),
    )?;
    write_csv(
        &dir.join("adversarial.csv"),
        &[
            "regime",
            "n_test",
            "auroc",
            "accuracy",
            "brier",
            "delta_auroc",
            "epsilon",
            "max_linf",
        ],
        perf_rows(r, true),
    )?;

    let risk_rows = [&r.calm, &r.stress]
        .iter()
        .map(|reg| {
            let k = &reg.risk;
            vec![
                reg.regime.to_string(),
                k.el_clean.to_string(),
                k.el_adv.to_string(),
                k.delta_el.to_string(),
                opt(k.delta_el_pct),
                k.alpha.to_string(),
                k.var_clean.to_string(),
                k.var_adv.to_string(),
                k.es_clean.to_string(),
                k.es_adv.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("risk.csv"),
        &[
            "regime",
            "el_clean",
            "el_adv",
            "delta_el",
            "delta_el_pct",
            "alpha",
            "var_clean",
            "var_adv",
            "es_clean",
            "es_adv",
        ],
        risk_rows,
    )?;

    let mut threshold_rows = Vec::new();
    for reg in [&r.calm, &r.stress] {
        for t in &reg.thresholds {
            threshold_rows.push(vec![
                reg.regime.to_string(),
                t.name.label(t.percentile),
                t.percentile.to_string(),
                t.tau.to_string(),
                opt(t.clean.fnr),
                opt(t.adversarial.fnr),
                opt(t.delta_fnr),
                opt(t.clean.fpr),
                opt(t.adversarial.fpr),
            ]);
        }
    }
    write_csv(
        &dir.join("thresholds.csv"),
        &[
            "regime",
            "threshold",
            "percentile",
            "tau",
            "fnr_clean",
            "fnr_adv",
            "delta_fnr",
            "fpr_clean",
            "fpr_adv",
        ],
        threshold_rows,
    )?;

    let mut sri_rows: Vec<Vec<String>> = [&r.calm, &r.stress]
        .iter()
        .map(|reg| match &reg.drift {
            Some(d) => vec![
                reg.regime.to_string(),
                d.cosine.to_string(),
                opt(d.rank_corr),
                opt(d.llm_score),
                opt(d.sri),
                reg.governance.map(|g| g.level.to_string()).unwrap_or_default(),
            ],
            None => vec![
                reg.regime.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        })
        .collect();
    let comp = |f: fn(&crate::semantic::DriftReport) -> Option<f64>| {
        let c = r.calm.drift.as_ref().and_then(f);
        let s = r.stress.drift.as_ref().and_then(f);
        opt(c.zip(s).map(|(c, s)| c - s))
    };
    sri_rows.push(vec![
        "delta".into(),
        comp(|d| Some(d.cosine)),
        comp(|d| d.rank_corr),
        comp(|d| d.llm_score),
        opt(r.cross.delta_sri),
        if r.cross.early_warning {
            "early_warning".into()
        } else {
            String::new()
        },
    ]);
    write_csv(
        &dir.join("sri.csv"),
        &["regime", "cosine", "rank_corr", "llm_score", "sri", "governance"],
        sri_rows,
    )?;

    std::fs::write(dir.join("report.md"), markdown(r))?;
    Ok(())
}

pub fn markdown(r: &EvaluationReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Regime audit report\n");
    let _ = writeln!(
        md,
        "Seed {} · {} instances ({} calm, {} stress, {} neutral) · model: {}\n",
        r.seed,
        r.n_instances,
        r.calm.n_instances,
        r.stress.n_instances,
        r.neutral_count,
        match &r.config.model.family {
            crate::model::ModelFamily::Logistic(_) => "logistic",
            crate::model::ModelFamily::GradientBoostedTrees(_) => "gradient-boosted trees",
        }
    );

    let _ = writeln!(md, "## Performance\n");
    let _ = writeln!(
        md,
        "| Regime | n_test | AUROC clean | AUROC adv | ΔAUROC | Accuracy clean | Accuracy adv |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    for reg in [&r.calm, &r.stress] {
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            reg.regime,
            reg.n_test,
            reg.clean.auroc,
            reg.adversarial.auroc,
            reg.delta_auroc,
            reg.clean.accuracy,
            reg.adversarial.accuracy
        );
    }
    let _ = writeln!(md, "\nRAF: {}\n", opt_md(r.cross.raf.factor, 3));

    let _ = writeln!(md, "## Thresholds\n");
    let _ = writeln!(md, "| Regime | Threshold | τ | FNR clean | FNR adv | ΔFNR |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for reg in [&r.calm, &r.stress] {
        for t in &reg.thresholds {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {} | {} | {} |",
                reg.regime,
                t.name.label(t.percentile),
                t.tau,
                opt_md(t.clean.fnr, 4),
                opt_md(t.adversarial.fnr, 4),
                opt_md(t.delta_fnr, 4)
            );
        }
    }
    let _ = writeln!(md);
    for a in &r.cross.fnr_amplification {
        let _ = writeln!(
            md,
            "- FNR amplification, {}: {}",
            a.name.label(a.percentile),
            opt_md(a.amplification.and_then(|x| x.factor), 3)
        );
    }

    let _ = writeln!(md, "\n## Credit risk\n");
    let _ = writeln!(
        md,
        "| Regime | EL clean | EL adv | ΔEL % | VaR clean | VaR adv | ES clean | ES adv |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    for reg in [&r.calm, &r.stress] {
        let k = &reg.risk;
        let _ = writeln!(
            md,
            "| {} | {:.4} | {:.4} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            reg.regime,
            k.el_clean,
            k.el_adv,
            opt_md(k.delta_el_pct, 1),
            k.var_clean,
            k.var_adv,
            k.es_clean,
            k.es_adv
        );
    }

    let _ = writeln!(md, "\n## Explanation stability\n");
    let _ = writeln!(md, "| Regime | Cosine | Rank | Narrative | SRI | Governance |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for reg in [&r.calm, &r.stress] {
        match &reg.drift {
            Some(d) => {
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {} | {} | {}{} | {} |",
                    reg.regime,
                    d.cosine,
                    opt_md(d.rank_corr, 4),
                    opt_md(d.llm_score, 4),
                    opt_md(d.sri, 4),
                    if d.sri_partial { " (partial)" } else { "" },
                    reg.governance
                        .map(|g| g.level.to_string())
                        .unwrap_or_else(|| "n/a".into())
                );
            }
            None => {
                let _ = writeln!(md, "| {} | n/a | n/a | n/a | n/a | n/a |", reg.regime);
            }
        }
    }
    let _ = writeln!(
        md,
        "\nΔSRI: {} · early warning: {}",
        opt_md(r.cross.delta_sri, 4),
        if r.cross.early_warning { "yes" } else { "no" }
    );

    if let Some(rep) = &r.replication {
        let _ = writeln!(md, "\n## Replication\n");
        let _ = writeln!(md, "| Seed | ΔAUROC calm | ΔAUROC stress | RAF |");
        let _ = writeln!(md, "|---|---|---|---|");
        for s in &rep.replicates {
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {} |",
                s.seed,
                s.delta_auroc_calm,
                s.delta_auroc_stress,
                opt_md(s.raf, 3)
            );
        }
        let _ = writeln!(
            md,
            "\nRAF mean {} (min {}, max {}), pooled {}",
            opt_md(rep.raf_mean, 3),
            opt_md(rep.raf_min, 3),
            opt_md(rep.raf_max, 3),
            opt_md(rep.pooled_raf, 3)
        );
    }

    if !r.warnings.is_empty() {
        let _ = writeln!(md, "\n## Warnings\n");
        for w in &r.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    md
}
