use std::fmt::Write as _;

use super::metrics::Metrics;
use super::HarnessError;
use crate::classifier::NUM_CLASSES;
use crate::dataset::Variant;

/// Metrics of one trained (model, variant) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub model: String,
    pub variant: Variant,
    pub test: Metrics,
    pub valid: Metrics,
    pub train_size: usize,
}

impl ExperimentRow {
    pub fn accuracy(&self) -> f64 {
        self.test.accuracy
    }
}

/// Completed experiment cells in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Whole percent, truncated toward zero. The small epsilon keeps values
/// such as `0.29 * 100 = 28.999...` at 29.
pub fn whole_percent(fraction: f64) -> u32 {
    (fraction * 100.0 + 1e-9).floor().max(0.0) as u32
}

impl ExperimentReport {
    pub fn push(&mut self, row: ExperimentRow) {
        self.rows.push(row);
    }

    /// Model names in order of first appearance, each with its accuracy per
    /// variant (the latest row wins on duplicates).
    pub fn table(&self) -> Vec<(String, [Option<f64>; 3])> {
        let mut table: Vec<(String, [Option<f64>; 3])> = Vec::new();
        for row in &self.rows {
            let col = Variant::ALL.iter().position(|v| *v == row.variant).expect("known variant");
            let idx = match table.iter().position(|(m, _)| *m == row.model) {
                Some(i) => i,
                None => {
                    table.push((row.model.clone(), [None; 3]));
                    table.len() - 1
                }
            };
            table[idx].1[col] = Some(row.accuracy());
        }
        table
    }
}

/// Renders test-split accuracies as a `Model | Original | Preprocessed |
/// Augmented` table. Missing cells print as `-`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> String {
    let cell = |v: Option<f64>, suffix: &str| v.map_or_else(|| "-".to_string(), |a| format!("{}{suffix}", whole_percent(a)));
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str("| Model | Original | Preprocessed | Augmented |\n");
            out.push_str("|---|---|---|---|\n");
            for (model, accs) in report.table() {
                let _ = writeln!(
                    out,
                    "| {model} | {} | {} | {} |",
                    cell(accs[0], "%"),
                    cell(accs[1], "%"),
                    cell(accs[2], "%")
                );
            }
        }
        ReportFormat::Csv => {
            out.push_str("model,original,preprocessed,augmented\n");
            for (model, accs) in report.table() {
                let _ = writeln!(out, "{},{},{},{}", csv_field(&model), cell(accs[0], ""), cell(accs[1], ""), cell(accs[2], ""));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const METRICS_HEADER: &str =
    "model,variant,split,train_size,samples,accuracy,macro_f1,recall_0,recall_1,recall_2,recall_3,recall_4,confusion";

/// One CSV line per (model, variant, split) with accuracy, macro F1,
/// per-grade recall and the row-major confusion matrix (space separated).
/// [`parse_metrics_csv`] reads it back.
pub fn emit_metrics_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for row in &report.rows {
        for (split, m) in [("test", &row.test), ("valid", &row.valid)] {
            let _ = write!(
                out,
                "{},{},{split},{},{},{:.6},{:.6}",
                csv_field(&row.model),
                row.variant,
                row.train_size,
                m.total(),
                m.accuracy,
                m.macro_f1
            );
            for r in m.per_class_recall {
                let _ = write!(out, ",{r:.6}");
            }
            let cells: Vec<String> = m.confusion.iter().flatten().map(|c| c.to_string()).collect();
            let _ = writeln!(out, ",{}", cells.join(" "));
        }
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                chars.next();
                fields.last_mut().expect("non-empty").push('"');
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(String::new()),
            _ => fields.last_mut().expect("non-empty").push(c),
        }
    }
    fields
}

/// Parses the output of [`emit_metrics_csv`]. Metrics are rebuilt from the
/// stored confusion matrices, so the round trip is exact.
pub fn parse_metrics_csv(text: &str) -> Result<ExperimentReport, HarnessError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        _ => return Err(HarnessError::Config("metrics file lacks the expected header".into())),
    }
    let bad = |n: usize, why: &str| HarnessError::Config(format!("metrics line {}: {why}", n + 1));
    let mut report = ExperimentReport::default();
    let mut pending: Option<(String, Variant, usize, Metrics)> = None;
    for (n, line) in lines {
        let fields = split_csv_line(line);
        if fields.len() != 13 {
            return Err(bad(n, "expected 13 fields"));
        }
        let variant: Variant = fields[1].parse().map_err(|_| bad(n, "unknown variant"))?;
        let train_size: usize = fields[3].parse().map_err(|_| bad(n, "bad train size"))?;
        let cells: Vec<usize> = fields[12]
            .split_whitespace()
            .map(|c| c.parse().map_err(|_| bad(n, "bad confusion cell")))
            .collect::<Result<_, _>>()?;
        if cells.len() != NUM_CLASSES * NUM_CLASSES {
            return Err(bad(n, "confusion needs 25 cells"));
        }
        let mut matrix = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (i, c) in cells.into_iter().enumerate() {
            matrix[i / NUM_CLASSES][i % NUM_CLASSES] = c;
        }
        let metrics = Metrics::from_confusion(matrix);
        match (fields[2].as_str(), pending.take()) {
            ("test", None) => pending = Some((fields[0].clone(), variant, train_size, metrics)),
            ("valid", Some((model, v, size, test))) if model == fields[0] && v == variant => {
                report.push(ExperimentRow {
                    model,
                    variant,
                    test,
                    valid: metrics,
                    train_size: size,
                });
            }
            _ => return Err(bad(n, "expected a test line followed by its valid line")),
        }
    }
    if pending.is_some() {
        return Err(HarnessError::Config("metrics file ends after a test line".into()));
    }
    Ok(report)
}
