use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::error::{Error, Result};
use crate::evaluation::EvalMethod;
use crate::models::ModelKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: ModelKind,
    pub window_questions: usize,
    pub folds: usize,
    pub test_method: EvalMethod,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub aggregated_auc_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per model, folds summarised by mean and sample standard deviation.
pub fn comparison_rows(records: &[RunRecord]) -> Vec<ComparisonRow> {
    let mut by_model: BTreeMap<ModelKind, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_model.entry(r.model).or_default().push(r);
    }
    by_model
        .into_iter()
        .map(|(model, rs)| {
            let aucs: Vec<f64> = rs.iter().map(|r| r.test.auc).collect();
            let accs: Vec<f64> = rs.iter().map(|r| r.test.accuracy).collect();
            let aggs: Vec<f64> = rs.iter().map(|r| r.test_aggregated.auc).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            ComparisonRow {
                model,
                window_questions: rs[0].config.window_questions,
                folds: rs.len(),
                test_method: rs[0].test.method,
                auc_mean,
                auc_std,
                accuracy_mean,
                accuracy_std,
                aggregated_auc_mean: mean_std(&aggs).0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format {s:?}"))),
        }
    }
}

pub fn render_table(rows: &[ComparisonRow], format: TableFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        TableFormat::Json => out = serde_json::to_string_pretty(rows)? + "\n",
        TableFormat::Csv => {
            out.push_str("model,window_questions,folds,test_method,auc_mean,auc_std,accuracy_mean,accuracy_std,aggregated_auc_mean\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    r.model, r.window_questions, r.folds, r.test_method, r.auc_mean, r.auc_std, r.accuracy_mean, r.accuracy_std, r.aggregated_auc_mean
                );
            }
        }
        TableFormat::Markdown => {
            out.push_str("| model | W | folds | test method | AUC | accuracy | aggregated AUC |\n");
            out.push_str("|---|---|---|---|---|---|---|\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} |",
                    r.model, r.window_questions, r.folds, r.test_method, r.auc_mean, r.auc_std, r.accuracy_mean, r.accuracy_std, r.aggregated_auc_mean
                );
            }
        }
    }
    Ok(out)
}

/// Bar chart of mean test AUC per model with one-standard-deviation whiskers.
pub fn render_bar_chart_svg(rows: &[ComparisonRow]) -> String {
    let (bar, gap, left, top, height) = (48.0, 24.0, 56.0, 24.0, 240.0);
    let width = left + rows.len() as f64 * (bar + gap) + gap;
    let total_h = top + height + 64.0;
    let y = |v: f64| top + height * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(s, r##"<line x1="{left}" x2="{width}" y1="{0:.1}" y2="{0:.1}" stroke="#ddd"/>"##, y(v));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {0})" text-anchor="middle">test AUC</text>"#, top + height / 2.0);
    for (i, r) in rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="#4c72b0"/>"##,
            y(r.auc_mean),
            height * r.auc_mean.clamp(0.0, 1.0)
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
            y(r.auc_mean + r.auc_std),
            y(r.auc_mean - r.auc_std)
        );
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y(r.auc_mean + r.auc_std) - 4.0, r.auc_mean);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, top + height + 16.0, r.model);
    }
    s.push_str("</svg>\n");
    s
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Every run record under `dir`, in path order. Other JSON files are skipped.
pub fn load_run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    collect_json(dir, &mut paths)?;
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        if let Ok(r) = serde_json::from_str::<RunRecord>(&text) {
            records.push(r);
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!("no run records under {}", dir.display())));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[0.6, 0.8]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
