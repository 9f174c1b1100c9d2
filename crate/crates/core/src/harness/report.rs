use super::cv::{CvReport, SweepReport};
use super::metrics::MetricsReport;

/// One labelled row of a results table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub metrics: MetricsReport,
}

const COLUMNS: [&str; 8] = ["Accuracy", "Precision", "Recall", "F-Score", "TN", "FP", "FN", "TP"];

fn cells(m: &MetricsReport) -> [f64; 8] {
    [
        m.accuracy, m.precision, m.recall, m.f_score, m.tn_rate, m.fp_rate, m.fn_rate, m.tp_rate,
    ]
}

/// Fixed-width text table with scores and row-normalized rates in percent.
/// Rows with an undefined ratio are marked with `*`.
pub fn render_table(first_column: &str, rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(first_column.len());
    let mut out = format!("{first_column:<width$}");
    for c in COLUMNS {
        out.push_str(&format!(" {c:>9}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<width$}", row.label));
        for v in cells(&row.metrics) {
            out.push_str(&format!(" {:>9.2}", 100.0 * v));
        }
        if row.metrics.undefined.any() {
            out.push_str(" *");
        }
        out.push('\n');
    }
    if rows.iter().any(|r| r.metrics.undefined.any()) {
        out.push_str("* some ratio had a zero denominator and is reported as 0\n");
    }
    out
}

/// Per-fold metrics plus `mean` and `pooled` rows, as fractions.
pub fn metrics_csv(report: &CvReport) -> String {
    let mut out = String::from(
        "fold,accuracy,precision,recall,f_score,tn_rate,fp_rate,fn_rate,tp_rate,prevalence,tn,fp,fn,tp,undefined\n",
    );
    let line = |name: String, m: &MetricsReport, cm: Option<&super::ConfusionMatrix>| {
        let mut s = name;
        for v in cells(m) {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", m.prevalence));
        match cm {
            Some(c) => s.push_str(&format!(",{},{},{},{}", c.tn, c.fp, c.fn_, c.tp)),
            None => s.push_str(",,,,"),
        }
        s.push_str(&format!(",{}\n", m.undefined.any()));
        s
    };
    for f in &report.folds {
        out.push_str(&line(f.index.to_string(), &f.metrics, Some(&f.confusion)));
    }
    out.push_str(&line("mean".into(), &report.mean, None));
    out.push_str(&line("pooled".into(), &report.pooled, Some(&report.pooled_confusion)));
    out
}

/// Fold-averaged metrics per augmentation arm.
pub fn render_sweep_table(sweep: &SweepReport) -> String {
    let rows: Vec<TableRow> = sweep
        .arms
        .iter()
        .map(|a| TableRow {
            label: a.label.clone(),
            metrics: a.report.mean,
        })
        .collect();
    render_table("Broken in training", &rows)
}
