use serde::{Deserialize, Serialize};

use super::TrainingReport;
use crate::error::{contract_err, Result};
use crate::partition::Method;

/// One line of a comparison table; every field is copied from a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub tuning: String,
    /// Blocks inside the server's trusted domain, for split runs.
    pub server_layers: Option<usize>,
    pub qkv_ratio: Option<f64>,
    pub dense_ratio: Option<f64>,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub cost: f64,
    pub audit: String,
}

/// Tabulates reports that share everything but the scheme and its tuning.
/// Reports that disagree on data, model, seed, clients, rounds, training,
/// precision, masking or cost weights are a contract error.
pub fn compare(reports: &[TrainingReport]) -> Result<Vec<CompareRow>> {
    let Some(first) = reports.first() else {
        return contract_err("nothing to compare");
    };
    let a = &first.config;
    for r in &reports[1..] {
        let b = &r.config;
        let clash = [
            ("data", a.data != b.data),
            ("model", a.model != b.model),
            ("seed", a.seed != b.seed),
            ("clients", a.clients != b.clients),
            ("rounds", a.rounds != b.rounds),
            ("train", a.train != b.train),
            ("precision", a.precision != b.precision),
            ("mask", a.mask != b.mask),
            ("cost", a.cost != b.cost),
        ];
        if let Some((field, _)) = clash.iter().find(|(_, c)| *c) {
            return contract_err(format!("reports disagree on {field}"));
        }
    }
    Ok(reports
        .iter()
        .map(|r| {
            let split = r.config.method == Method::Method2;
            let t = &r.config.tuning;
            CompareRow {
                method: r.config.method,
                tuning: format!("{:?}", r.tuning).to_lowercase(),
                server_layers: split.then(|| r.config.model.n_layers - t.split_layer),
                qkv_ratio: split.then_some(t.qkv_ratio),
                dense_ratio: split.then_some(t.dense_ratio),
                accuracy: r.final_accuracy,
                trainable_params: r.trainable_params,
                cost: r.cost.total,
                audit: r.audit_status.clone(),
            }
        })
        .collect())
}

const HEADER: [&str; 9] = [
    "method",
    "tuning",
    "server_layers",
    "qkv_ratio",
    "dense_ratio",
    "accuracy",
    "trainable_params",
    "cost",
    "audit",
];

fn cells(r: &CompareRow) -> [String; 9] {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    [
        r.method.to_string(),
        r.tuning.clone(),
        opt(r.server_layers.map(|v| v.to_string())),
        opt(r.qkv_ratio.map(|v| v.to_string())),
        opt(r.dense_ratio.map(|v| v.to_string())),
        format!("{:.4}", r.accuracy),
        r.trainable_params.to_string(),
        format!("{:.1}", r.cost),
        r.audit.clone(),
    ]
}

pub fn to_csv(rows: &[CompareRow]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&cells(r).join(","));
        out.push('\n');
    }
    out
}

/// Space-aligned rendering of the same cells as [`to_csv`].
pub fn format_table(rows: &[CompareRow]) -> String {
    let body: Vec<[String; 9]> = rows.iter().map(cells).collect();
    let mut width = HEADER.map(str::len);
    for r in &body {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(HEADER.to_vec());
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
