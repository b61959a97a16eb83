use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};

pub const METRICS_HEADER: &str = "task,method,success_rate,mean_steps,param_count,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub task: String,
    pub method: String,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub param_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.success_rate) {
            bail!(Contract, "success rate {} outside [0, 1]", row.success_rate);
        }
        if row.task.contains(',') || row.method.contains(',') {
            bail!(Contract, "task and method names cannot contain commas");
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task, r.method, r.success_rate, r.mean_steps, r.param_count, r.seed
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            bail!(Format, "metrics CSV must start with `{METRICS_HEADER}`");
        }
        let mut table = Self::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                bail!(Format, "metrics row `{line}` has {} fields", f.len());
            }
            let bad = || Error::Format(format!("bad metrics row `{line}`"));
            table.push(MetricsRow {
                task: f[0].into(),
                method: f[1].into(),
                success_rate: f[2].parse().map_err(|_| bad())?,
                mean_steps: f[3].parse().map_err(|_| bad())?,
                param_count: f[4].parse().map_err(|_| bad())?,
                seed: f[5].parse().map_err(|_| bad())?,
            })?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn find(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, rate: f64) -> MetricsRow {
        MetricsRow {
            task: "occluded_reach".into(),
            method: method.into(),
            success_rate: rate,
            mean_steps: 41.5,
            param_count: 1234,
            seed: 7,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut t = MetricsTable::default();
        t.push(row("concat", 0.25)).unwrap();
        t.push(row("composed:soft", 0.6)).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("task,method,success_rate,mean_steps,param_count,seed\n"));
        assert_eq!(MetricsTable::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn rate_outside_unit_interval_is_rejected() {
        let mut t = MetricsTable::default();
        assert!(t.push(row("x", 1.5)).is_err());
        assert!(t.push(row("a,b", 0.5)).is_err());
    }
}
