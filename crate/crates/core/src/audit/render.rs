use std::path::{Path, PathBuf};

use super::pipeline::Manifest;
use super::{tsv, Stage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub tables: String,
    pub files: Vec<PathBuf>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(dir: &Path, name: &str) -> Result<Table> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Report(format!("{} is missing", path.display())));
        }
        let (header, rows) = tsv::read(&path)?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Report(format!("result file lacks column `{name}`")))
    }

    fn cell<'a>(&self, row: &'a [String], name: &str) -> Result<&'a str> {
        Ok(&row[self.col(name)?])
    }
}

/// Distinct values of one column, in first-seen order.
fn distinct(t: &Table, name: &str) -> Result<Vec<String>> {
    let c = t.col(name)?;
    let mut out: Vec<String> = Vec::new();
    for r in &t.rows {
        if !out.contains(&r[c]) {
            out.push(r[c].clone());
        }
    }
    Ok(out)
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}|\n", header.join(" | "), vec!["---"; header.len()].join("|"));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

/// Pivot `value(row)` into a model × `key` grid; missing cells are `-`.
fn pivot(
    t: &Table,
    key: &str,
    first: &str,
    value: impl Fn(&Table, &[String]) -> Result<String>,
) -> Result<String> {
    let models = distinct(t, "model")?;
    let keys = distinct(t, key)?;
    let (mc, kc) = (t.col("model")?, t.col(key)?);
    let mut rows = Vec::new();
    for m in &models {
        let mut row = vec![m.clone()];
        for k in &keys {
            let cell = match t.rows.iter().find(|r| &r[mc] == m && &r[kc] == k) {
                Some(r) => value(t, r)?,
                None => "-".to_string(),
            };
            row.push(if cell.is_empty() { "-".to_string() } else { cell });
        }
        rows.push(row);
    }
    let mut header = vec![first.to_string()];
    header.extend(keys);
    Ok(markdown(&header, &rows))
}

fn copy_rows(t: &Table, keep: impl Fn(&[String]) -> bool, path: &Path) -> Result<()> {
    let mut text = format!("{}\n", t.header.join("\t"));
    for r in t.rows.iter().filter(|r| keep(r)) {
        text.push_str(&r.join("\t"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Turns a finished audit directory into `rendered/tables.md` plus figure
/// data files. Cells are copied verbatim from the result files.
pub fn cmd_render(dir: &Path) -> Result<Rendered> {
    let empty = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .next()
        .is_none();
    if empty {
        return Err(Error::Report(format!("{} is empty", dir.display())));
    }
    let manifest = Manifest::load(dir)?;
    for stage in &manifest.planned {
        if !manifest.completed.contains(stage) {
            return Err(Error::Report(format!(
                "stage `{stage}` has no completed entry in the manifest{}",
                manifest
                    .failed
                    .as_ref()
                    .map(|f| format!(" (failed: {})", f.error))
                    .unwrap_or_default()
            )));
        }
    }
    let out = dir.join("rendered");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut tables = String::new();
    let mut files = Vec::new();

    if manifest.completed.contains(&Stage::Evaluate) {
        let t = Table::read(dir, "charge_metrics.tsv")?;
        let cols = ["model", "accuracy", "f1", "precision", "recall"].map(|c| t.col(c));
        let cols: Vec<usize> = cols.into_iter().collect::<Result<_>>()?;
        let rows: Vec<Vec<String>> = t.rows.iter().map(|r| cols.iter().map(|&c| r[c].clone()).collect()).collect();
        tables.push_str("## Charge prediction (test split, macro)\n\n");
        tables.push_str(&markdown(&["Model", "Acc", "F1", "P", "R"].map(String::from), &rows));
        tables.push('\n');
    }
    if manifest.completed.contains(&Stage::Probe) {
        let t = Table::read(dir, "probe.tsv")?;
        tables.push_str("## Element probing (P/R/F1, micro, fold average)\n\n");
        tables.push_str(&pivot(&t, "charge", "Models", |t, r| {
            Ok(format!("{}/{}/{}", t.cell(r, "precision")?, t.cell(r, "recall")?, t.cell(r, "f1")?))
        })?);
        tables.push('\n');
    }
    if manifest.completed.contains(&Stage::Perturb) {
        let t = Table::read(dir, "retention.tsv")?;
        tables.push_str("## Retention after perturbation\n\n");
        tables.push_str(&pivot(&t, "rule", "Model", |t, r| Ok(t.cell(r, "ratio")?.to_string()))?);
        tables.push_str("\nWithout the originally-correct filter:\n\n");
        tables.push_str(&pivot(&t, "rule", "Model", |t, r| Ok(t.cell(r, "ratio_raw")?.to_string()))?);
        tables.push('\n');
    }
    if manifest.completed.contains(&Stage::Ablate) {
        let t = Table::read(dir, "consistency.tsv")?;
        tables.push_str("## Consistency after element removal\n\n");
        tables.push_str(&pivot(&t, "element", "Model", |t, r| Ok(t.cell(r, "consistency")?.to_string()))?);
        tables.push_str("\nMean INNOCENT probability after removal:\n\n");
        tables.push_str(&pivot(&t, "element", "Model", |t, r| {
            Ok(t.cell(r, "mean_innocent_after")?.to_string())
        })?);
        tables.push('\n');

        let h = Table::read(dir, "confidence_histogram.tsv")?;
        let path = out.join("figure_confidence_density.tsv");
        copy_rows(&h, |_| true, &path)?;
        files.push(path);
        let b = Table::read(dir, "boxplot.tsv")?;
        let q = b.col("quantity")?;
        for (quantity, name) in [("innocent", "figure_innocent_box.tsv"), ("confidence", "figure_confidence_box.tsv")] {
            let path = out.join(name);
            copy_rows(&b, |r| r[q] == quantity, &path)?;
            files.push(path);
        }
        tables.push_str("## INNOCENT probability five-number summary\n\n");
        let cols: Vec<usize> = ["model", "condition", "min", "q1", "median", "q3", "max"]
            .into_iter()
            .map(|c| b.col(c))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<String>> = b
            .rows
            .iter()
            .filter(|r| r[q] == "innocent")
            .map(|r| cols.iter().map(|&c| r[c].clone()).collect())
            .collect();
        tables.push_str(&markdown(&["Model", "Condition", "Min", "Q1", "Median", "Q3", "Max"].map(String::from), &rows));
    }
    let path = out.join("tables.md");
    std::fs::write(&path, &tables).map_err(|e| Error::io(&path, e))?;
    files.insert(0, path);
    Ok(Rendered { tables, files })
}
