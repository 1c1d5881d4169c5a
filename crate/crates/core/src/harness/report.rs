use std::fmt::Write as _;

use crate::numerics::Matrix;

use super::experiment::ExperimentReport;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Markdown table of a square matrix with `true \ observed` axes.
pub fn matrix_table(title: &str, m: &Matrix) -> String {
    let mut out = format!("**{title}**\n\n| true \\ observed |");
    for c in 0..m.cols() {
        write!(out, " {c} |").unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(m.cols()));
    out.push('\n');
    for r in 0..m.rows() {
        write!(out, "| {r} |").unwrap();
        for c in 0..m.cols() {
            write!(out, " {:.3} |", m[(r, c)]).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Human-readable Markdown rendering of a report.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let m = &report.final_metrics;
    let d = &report.diagnostics;
    writeln!(out, "# Experiment report\n").unwrap();
    writeln!(out, "| field | value |\n|---|---|").unwrap();
    writeln!(out, "| pipeline | `{}` |", report.pipeline).unwrap();
    writeln!(out, "| seed | {} |", report.config.seed).unwrap();
    writeln!(
        out,
        "| version | {} (schema {}) |",
        report.version, report.schema_version
    )
    .unwrap();
    writeln!(out, "| train / test size | {} / {} |", d.train_size, d.test_size).unwrap();
    writeln!(out, "| wall time | {:.2} s |\n", report.wall_time_secs).unwrap();

    writeln!(out, "## Final test metrics\n").unwrap();
    writeln!(out, "| metric | value |\n|---|---:|").unwrap();
    writeln!(out, "| accuracy | {:.4} |", m.accuracy).unwrap();
    writeln!(out, "| macro-F1 | {:.4} |", m.macro_f1).unwrap();
    writeln!(out, "| ECE | {:.4} |", m.ece).unwrap();
    if let Some(auc) = m.auc {
        writeln!(out, "| AUC | {auc:.4} |").unwrap();
    }
    for (c, acc) in m.per_class_accuracy.iter().enumerate() {
        writeln!(out, "| class {c} accuracy | {} |", fmt_opt(*acc)).unwrap();
    }
    out.push('\n');

    writeln!(out, "## Diagnostics\n").unwrap();
    let rows = [
        ("observed noise rate", d.observed_noise_rate),
        ("transition row-l1 error", d.transition_l1),
        ("annotator confusion row-l1 error", d.annotator_l1),
        ("fused label accuracy", d.fused_label_accuracy),
        ("best single annotator accuracy", d.best_annotator_accuracy),
        ("store agreement (start)", d.store_agreement.map(|s| s.start)),
        ("store agreement (end)", d.store_agreement.map(|s| s.end)),
        ("flag precision", d.label_recovery.map(|f| f.precision)),
        ("flag recall", d.label_recovery.map(|f| f.recall)),
    ];
    let present: Vec<_> = rows.iter().filter(|(_, v)| v.is_some()).collect();
    if present.is_empty() {
        writeln!(out, "No noise diagnostics for this run.\n").unwrap();
    } else {
        writeln!(out, "| quantity | value |\n|---|---:|").unwrap();
        for (name, v) in present {
            writeln!(out, "| {name} | {} |", fmt_opt(*v)).unwrap();
        }
        out.push('\n');
    }
    if let Some(rounds) = &d.clean_rounds {
        writeln!(
            out,
            "### Cleaning rounds\n\n| round | flagged | relabeled |\n|---:|---:|---:|"
        )
        .unwrap();
        for r in rounds {
            writeln!(out, "| {} | {} | {} |", r.round, r.flagged, r.relabeled).unwrap();
        }
        out.push('\n');
    }
    if let Some(t) = &d.estimated_transition {
        out.push_str(&matrix_table("Estimated transition matrix", t.as_matrix()));
        out.push('\n');
    }
    if let Some(model) = &d.annotator_model {
        writeln!(out, "### Annotator confusion matrices\n").unwrap();
        for (a, c) in model.confusions.iter().enumerate() {
            out.push_str(&matrix_table(&format!("Annotator {a}"), c.as_matrix()));
            out.push('\n');
        }
    }

    writeln!(out, "## Per-epoch metrics\n").unwrap();
    writeln!(
        out,
        "| epoch | train loss | test accuracy | test macro-F1 | updated | skipped | relabeled |"
    )
    .unwrap();
    writeln!(out, "|---:|---:|---:|---:|---:|---:|---:|").unwrap();
    for e in &report.epochs {
        writeln!(
            out,
            "| {} | {:.4} | {} | {} | {} | {} | {} |",
            e.epoch,
            e.train_loss,
            fmt_opt(e.test_accuracy),
            fmt_opt(e.test_macro_f1),
            e.updated,
            e.skipped,
            e.relabeled
        )
        .unwrap();
    }
    out
}
