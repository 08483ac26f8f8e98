//! Aggregate per-scan metrics CSVs into the results table: mean ± sample
//! std per split, a mean row across splits, and a tag breakdown.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, MetricsRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    /// `None` for an empty sample. Values are summed in sorted order so the
    /// result does not depend on row order.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            sq.sort_by(f64::total_cmp);
            (sq.iter().sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { n, mean, std })
    }
}

/// The five reported metrics, in table order.
pub const METRICS: [&str; 5] = ["dsc", "crd", "cad", "msd", "hd95"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub scans: usize,
    /// Scans whose distance metrics are excluded.
    pub degenerate: usize,
    pub dsc: Option<Stat>,
    pub crd: Option<Stat>,
    pub cad: Option<Stat>,
    pub msd: Option<Stat>,
    pub hd95: Option<Stat>,
}

impl SummaryRow {
    pub fn of(label: &str, rows: &[&MetricsRow]) -> Result<SummaryRow> {
        let mut degenerate = 0;
        for r in rows {
            if r.metric_flags()?.any() {
                degenerate += 1;
            }
        }
        let col = |f: fn(&MetricsRow) -> Option<f64>| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| !r.metric_flags().expect("flags checked above").any())
                .filter_map(|r| f(r))
                .collect();
            Stat::of(&v)
        };
        Ok(SummaryRow {
            label: label.into(),
            scans: rows.len(),
            degenerate,
            dsc: Stat::of(&rows.iter().map(|r| r.dsc).collect::<Vec<_>>()),
            crd: col(|r| r.crd),
            cad: col(|r| r.cad),
            msd: col(|r| r.msd),
            hd95: col(|r| r.hd95),
        })
    }

    pub fn stats(&self) -> [Option<Stat>; 5] {
        [self.dsc, self.crd, self.cad, self.msd, self.hd95]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRow {
    pub tag: String,
    pub present: SummaryRow,
    pub absent: SummaryRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub splits: Vec<SummaryRow>,
    /// Per metric, the mean of the split means and of the split stds.
    pub mean: SummaryRow,
    pub tags: Vec<TagRow>,
}

/// Running mean over sorted values; exact when all values are equal.
fn running_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().enumerate().fold(0.0, |m, (i, x)| m + (x - m) / (i + 1) as f64)
}

fn average(stats: &[Option<Stat>]) -> Option<Stat> {
    let s: Vec<Stat> = stats.iter().flatten().copied().collect();
    if s.is_empty() {
        return None;
    }
    Some(Stat {
        n: s.iter().map(|x| x.n).sum(),
        mean: running_mean(s.iter().map(|x| x.mean).collect()),
        std: running_mean(s.iter().map(|x| x.std).collect()),
    })
}

/// Build the report from labelled row sets, one per split.
pub fn build_report(splits: &[(String, Vec<MetricsRow>)]) -> Result<Report> {
    if splits.is_empty() {
        return Err(Error::Parameter("report needs at least one metrics table".into()));
    }
    let rows: Vec<SummaryRow> = splits
        .iter()
        .map(|(label, rows)| SummaryRow::of(label, &rows.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let pick = |i: usize| rows.iter().map(|r| r.stats()[i]).collect::<Vec<_>>();
    let mean = SummaryRow {
        label: "Mean".into(),
        scans: rows.iter().map(|r| r.scans).sum(),
        degenerate: rows.iter().map(|r| r.degenerate).sum(),
        dsc: average(&pick(0)),
        crd: average(&pick(1)),
        cad: average(&pick(2)),
        msd: average(&pick(3)),
        hd95: average(&pick(4)),
    };
    let all: Vec<&MetricsRow> = splits.iter().flat_map(|(_, r)| r.iter()).collect();
    let tag_names: BTreeSet<&str> = all.iter().flat_map(|r| r.tag_list()).collect();
    let mut tags = Vec::new();
    for tag in tag_names {
        let (with, without): (Vec<&MetricsRow>, Vec<&MetricsRow>) =
            all.iter().partition(|r| r.tag_list().contains(&tag));
        tags.push(TagRow {
            tag: tag.into(),
            present: SummaryRow::of(&format!("{tag} ({})", with.len()), &with)?,
            absent: SummaryRow::of(&format!("no {tag} ({})", without.len()), &without)?,
        });
    }
    Ok(Report {
        splits: rows,
        mean,
        tags,
    })
}

/// Read one metrics CSV per split and build the report.
pub fn run_report(inputs: &[(String, &Path)]) -> Result<Report> {
    let mut splits = Vec::new();
    for (label, path) in inputs {
        let f = std::fs::File::open(path).map_err(|e| Error::io(*path, e))?;
        splits.push((label.clone(), read_metrics_csv(f)?));
    }
    build_report(&splits)
}

fn cell(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
        None => "n/a".into(),
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = ["", "n", "DSC", "CrD (mm)", "CaD (mm)", "MSD (mm)", "95%HD (mm)"];
        let line = |out: &mut String, r: &SummaryRow| {
            let mut cols = vec![r.label.clone(), format!("{}", r.scans)];
            cols.extend(r.stats().iter().map(|s| cell(*s)));
            writeln!(
                out,
                "{:<28}{:>5}  {}",
                cols[0],
                cols[1],
                cols[2..].iter().map(|c| format!("{c:>17}")).collect::<String>()
            )
            .expect("write to string");
        };
        writeln!(
            out,
            "{:<28}{:>5}  {}",
            header[0],
            header[1],
            header[2..].iter().map(|c| format!("{c:>17}")).collect::<String>()
        )
        .expect("write to string");
        for r in &self.splits {
            line(&mut out, r);
        }
        line(&mut out, &self.mean);
        let degenerate: usize = self.splits.iter().map(|r| r.degenerate).sum();
        if degenerate > 0 {
            writeln!(
                out,
                "{degenerate} scan(s) with an empty mask are excluded from distance metrics"
            )
            .expect("write to string");
        }
        if !self.tags.is_empty() {
            out.push('\n');
            for t in &self.tags {
                line(&mut out, &t.present);
                line(&mut out, &t.absent);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
