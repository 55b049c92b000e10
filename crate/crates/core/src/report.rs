//! Task × system result tables in markdown and CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One score. Extra fields in metric files are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub system: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
}

/// A file holding one record or an array of them.
pub fn load_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let parsed = if v.is_array() {
        serde_json::from_value(v)
    } else {
        serde_json::from_value(v).map(|r| vec![r])
    };
    parsed.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub task: String,
    pub domain: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub systems: Vec<String>,
    pub rows: Vec<Row>,
}

const DOMAIN_ORDER: [&str; 3] = ["Sound", "Music", "Speech"];

fn domain_label(d: Option<&str>) -> String {
    let Some(d) = d else { return "Other".into() };
    let mut c = d.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + &c.as_str().to_lowercase(),
        None => "Other".into(),
    }
}

/// Columns in first-seen order; rows grouped Sound, Music, Speech, then the rest.
pub fn build_table(records: &[ResultRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no results to report".into()));
    }
    let mut systems: Vec<String> = Vec::new();
    for r in records {
        if !systems.contains(&r.system) {
            systems.push(r.system.clone());
        }
    }
    let mut rows: Vec<Row> = Vec::new();
    for r in records {
        if !r.value.is_finite() {
            return Err(Error::Validation(format!("{} / {}: non-finite value", r.task, r.system)));
        }
        let col = systems.iter().position(|s| *s == r.system).expect("collected above");
        let domain = domain_label(r.domain.as_deref());
        let row = match rows.iter_mut().position(|row| row.task == r.task) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(Row { task: r.task.clone(), domain, values: vec![None; systems.len()] });
                rows.last_mut().expect("just pushed")
            }
        };
        match row.values[col] {
            Some(v) if v != r.value => {
                return Err(Error::Config(format!(
                    "conflicting results for task {:?}, system {:?}: {v} and {}",
                    r.task, r.system, r.value
                )))
            }
            _ => row.values[col] = Some(r.value),
        }
    }
    let rank = |d: &str| DOMAIN_ORDER.iter().position(|x| *x == d).unwrap_or(DOMAIN_ORDER.len());
    rows.sort_by_key(|r| rank(&r.domain));
    Ok(ReportTable { systems, rows })
}

/// Columns holding the row maximum, when at least two systems report.
pub fn best_columns(row: &Row) -> Vec<usize> {
    let present: Vec<(usize, f64)> = row.values.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    if present.len() < 2 {
        return Vec::new();
    }
    let max = present.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    present.into_iter().filter(|p| p.1 == max).map(|p| p.0).collect()
}

pub fn render_markdown(t: &ReportTable) -> String {
    let mut out = String::new();
    out.push_str("| Task | Domain |");
    for s in &t.systems {
        out.push_str(&format!(" {s} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(t.systems.len()));
    out.push('\n');
    for row in &t.rows {
        let best = best_columns(row);
        out.push_str(&format!("| {} | {} |", row.task, row.domain));
        for (i, v) in row.values.iter().enumerate() {
            match v {
                Some(v) if best.contains(&i) => out.push_str(&format!(" **{v:.3}** |")),
                Some(v) => out.push_str(&format!(" {v:.3} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\nBest value per row in bold. mAP averages only classes with at least one positive.\n");
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(t: &ReportTable) -> String {
    let mut out = String::from("task,domain");
    for s in &t.systems {
        out.push(',');
        out.push_str(&csv_field(s));
    }
    out.push('\n');
    for row in &t.rows {
        out.push_str(&format!("{},{}", csv_field(&row.task), csv_field(&row.domain)));
        for v in &row.values {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}
