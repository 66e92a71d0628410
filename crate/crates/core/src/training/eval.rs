//! Chamfer tables per category.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{chamfer_value, Metric};
use crate::model::SnowflakeNet;
use crate::pointio::DatasetEntry;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub category: String,
    /// Mean chamfer distance in reporting units.
    pub cd: f64,
    pub count: usize,
}

/// One row per category in first-appearance order, then `average` over all
/// shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub metric: Metric,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn average(&self) -> &EvalRow {
        self.rows.last().expect("average row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,cd,count\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.category, r.cd, r.count).expect("string write");
        }
        out
    }

    pub fn render(&self) -> String {
        let unit = match self.metric {
            Metric::L1 => "CD-L1 x1e3",
            Metric::L2 => "CD-L2 x1e4",
        };
        let mut out = format!("{:<12} {:>14} {:>6}\n", "category", unit, "count");
        for r in &self.rows {
            writeln!(out, "{:<12} {:>14.6} {:>6}", r.category, r.cd, r.count)
                .expect("string write");
        }
        out
    }

    /// Parses the output of [`Self::to_csv`].
    pub fn from_csv(metric: Metric, text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != "category,cd,count" {
            return None;
        }
        let rows = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                match f.as_slice() {
                    [c, cd, n] => Some(EvalRow {
                        category: c.to_string(),
                        cd: cd.parse().ok()?,
                        count: n.parse().ok()?,
                    }),
                    _ => None,
                }
            })
            .collect::<Option<Vec<_>>>()?;
        (!rows.is_empty()).then_some(EvalTable { metric, rows })
    }
}

/// Raw chamfer distance between `P_3` and the full ground truth per entry.
/// With `sanity_gt` the ground truth itself stands in for the prediction.
pub fn per_shape(
    net: &SnowflakeNet,
    entries: &[&DatasetEntry],
    metric: Metric,
    sanity_gt: bool,
) -> Result<Vec<f64>> {
    entries
        .iter()
        .map(|e| {
            if sanity_gt {
                Ok(chamfer_value(metric, &e.gt, &e.gt))
            } else {
                let out = net.complete(&e.partial)?;
                Ok(chamfer_value(metric, out.output(), &e.gt))
            }
        })
        .collect()
}

pub fn evaluate(
    net: &SnowflakeNet,
    entries: &[&DatasetEntry],
    metric: Metric,
    sanity_gt: bool,
) -> Result<EvalTable> {
    if entries.is_empty() {
        return Err(Error::contract("evaluation needs at least one entry"));
    }
    let values = per_shape(net, entries, metric, sanity_gt)?;
    Ok(table(metric, entries, &values))
}

/// Groups raw per-shape values into a scaled table.
pub fn table(metric: Metric, entries: &[&DatasetEntry], values: &[f64]) -> EvalTable {
    let scale = metric.report_scale();
    let mut rows: Vec<(String, f64, usize)> = Vec::new();
    for (e, v) in entries.iter().zip(values) {
        match rows.iter_mut().find(|r| r.0 == e.category) {
            Some(r) => {
                r.1 += v;
                r.2 += 1;
            }
            None => rows.push((e.category.clone(), *v, 1)),
        }
    }
    let total: f64 = values.iter().sum();
    rows.push(("average".into(), total, values.len()));
    EvalTable {
        metric,
        rows: rows
            .into_iter()
            .map(|(category, sum, count)| EvalRow {
                category,
                cd: sum / count as f64 * scale,
                count,
            })
            .collect(),
    }
}
