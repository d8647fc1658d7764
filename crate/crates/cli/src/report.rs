//! Per-category evaluation tables in the conventional reporting units.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use dualgen::cloud::metrics::{evaluate, MetricReport};
use dualgen::PointCloud;

/// Scores in reporting units: CD×10⁴, EMD×10², F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub category: String,
    pub samples: usize,
    pub cd: f64,
    pub emd: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tau: f64,
    pub rows: Vec<Row>,
    /// Unweighted mean of the category rows.
    pub average: Row,
}

/// Scores `(category, prediction, ground truth)` triples.
pub fn build(pairs: &[(String, PointCloud, PointCloud)], tau: f64, emd_iters: usize) -> dualgen::Result<Report> {
    let mut by_cat: BTreeMap<&str, Vec<MetricReport>> = BTreeMap::new();
    for (cat, pred, gt) in pairs {
        by_cat.entry(cat).or_default().push(evaluate(pred, gt, tau, emd_iters)?);
    }
    let rows: Vec<Row> = by_cat
        .into_iter()
        .map(|(cat, ms)| {
            let n = ms.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| ms.iter().map(f).sum::<f64>() / n;
            Row {
                category: cat.to_string(),
                samples: ms.len(),
                cd: mean(|m| m.scaled().0),
                emd: mean(|m| m.scaled().1),
                f1: mean(|m| m.scaled().2),
            }
        })
        .collect();
    let k = rows.len().max(1) as f64;
    let average = Row {
        category: "average".into(),
        samples: rows.iter().map(|r| r.samples).sum(),
        cd: rows.iter().map(|r| r.cd).sum::<f64>() / k,
        emd: rows.iter().map(|r| r.emd).sum::<f64>() / k,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / k,
    };
    Ok(Report { tau, rows, average })
}

impl Report {
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>7} {:>10} {:>10} {:>8}\n", "category", "samples", "CDx1e4", "EMDx1e2", "F1");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "{:<16} {:>7} {:>10.3} {:>10.3} {:>8.4}", r.category, r.samples, r.cd, r.emd, r.f1);
        }
        s
    }
}
