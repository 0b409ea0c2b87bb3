//! Metrics reports: a structured JSON document with stable key order plus
//! plain-text accuracy rows in the conventional benchmark-table shape.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub protocol: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SplitRow>,
    pub average: f64,
    pub confusions: Vec<Vec<Vec<usize>>>,
}

/// Serialize a metrics report with stable field order.
pub fn render_metrics_report(report: &MetricsReport) -> String {
    let mut out = serde_json::to_string_pretty(report).expect("report serialization");
    out.push('\n');
    out
}

/// One benchmark-style accuracy row. Subset protocols print per-column
/// accuracies and the average; single-number protocols print "Acc." only.
///
/// ```text
/// Method  AS1     AS2     AS3     Aver.
/// ours    97.87   96.81   99.27   97.98
/// ```
pub fn render_table_row(method: &str, rows: &[SplitRow], average: f64) -> String {
    let mut header = format!("{:<12}", "Method");
    let mut values = format!("{method:<12}");
    if rows.len() > 1 {
        for row in rows {
            header.push_str(&format!("{:<8}", row.name));
            values.push_str(&format!("{:<8.2}", row.accuracy * 100.0));
        }
        header.push_str("Aver.");
        values.push_str(&format!("{:.2}", average * 100.0));
    } else {
        header.push_str("Acc.");
        values.push_str(&format!("{:.2}", average * 100.0));
    }
    format!("{header}\n{values}\n")
}

/// The per-action error row shape used for lifting results:
/// class columns then the average, in millimeters.
pub fn render_mpjpe_row(
    method: &str,
    per_class: &[(String, f64)],
    average_mm: f64,
) -> String {
    let mut header = format!("{:<12}", "Method");
    let mut values = format!("{method:<12}");
    for (name, err) in per_class {
        let col = if name.len() > 7 { &name[..7] } else { name };
        header.push_str(&format!("{col:<8}"));
        values.push_str(&format!("{err:<8.1}"));
    }
    header.push_str("Avg");
    values.push_str(&format!("{average_mm:.1}"));
    format!("{header}\n{values}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_row_formats_subsets() {
        let rows = vec![
            SplitRow {
                name: "AS1".into(),
                accuracy: 0.9787,
            },
            SplitRow {
                name: "AS2".into(),
                accuracy: 0.9681,
            },
            SplitRow {
                name: "AS3".into(),
                accuracy: 0.9927,
            },
        ];
        let text = render_table_row("ours", &rows, 0.9798);
        assert!(text.contains("AS1"));
        assert!(text.contains("97.87"));
        assert!(text.contains("Aver."));
        assert!(text.contains("97.98"));
    }

    #[test]
    fn table_row_single_accuracy() {
        let rows = vec![SplitRow {
            name: "all".into(),
            accuracy: 0.963,
        }];
        let text = render_table_row("ours", &rows, 0.963);
        assert!(text.contains("Acc."));
        assert!(text.contains("96.30"));
    }

    #[test]
    fn metrics_report_roundtrip() {
        let report = MetricsReport {
            version: 1,
            protocol: "msr_half".into(),
            config_hash: "abc123".into(),
            seed: 7,
            rows: vec![SplitRow {
                name: "AS1".into(),
                accuracy: 0.5,
            }],
            average: 0.5,
            confusions: vec![vec![vec![1, 0], vec![0, 1]]],
        };
        let text = render_metrics_report(&report);
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        // Stable output.
        assert_eq!(render_metrics_report(&back), text);
    }
}
