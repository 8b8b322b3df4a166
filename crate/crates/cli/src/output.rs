//! CSV tables and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gridshare::experiments::{CriticalEstimate, HeatmapTable, SweepTable};
use gridshare::markov::{Estimate, LotMetrics};
use gridshare::PowerFlowModel;

pub const NA: &str = "NA";

pub const SWEEP_HEADER: &[&str] = &[
    "model",
    "method",
    "lot",
    "lambda_lot",
    "total_rate",
    "fraction_1",
    "mean_number",
    "mean_number_ci",
    "mean_time",
    "mean_time_ci",
    "blocking",
    "seed",
    "horizon",
    "burn_in",
];
pub const HEATMAP_HEADER: &[&str] = &["model", "total_rate", "fraction_1", "total_mean_number", "ci"];
pub const CRITICAL_HEADER: &[&str] = &["model", "fraction_1", "critical_rate", "grid_step"];
pub const ALLOCATION_HEADER: &[&str] = &["model", "lot", "state", "power"];

/// Decimal rendering with 7 significant digits; non-finite values print as `NA`.
pub fn sig7(x: f64) -> String {
    if !x.is_finite() {
        return NA.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.6e}");
    let exp: i32 = sci.rsplit_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    let decimals = (6 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), sig7)
}

/// A header plus rows of preformatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &'static [&'static str]) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Sampling parameters shown in the sweep schema; `None` for exact results.
#[derive(Debug, Clone, Copy)]
pub struct RunInfo {
    pub seed: u64,
    pub horizon: f64,
    pub burn_in: f64,
}

/// One `(model, rate point)` worth of per-lot results.
pub struct PointRows<'a> {
    pub model: PowerFlowModel,
    pub method: &'a str,
    pub lambdas: &'a [f64],
    pub total_rate: f64,
    pub fraction_1: Option<f64>,
    pub lots: Option<&'a [LotMetrics]>,
    pub run: Option<RunInfo>,
}

fn estimate_cells(e: Option<Estimate>) -> [String; 2] {
    match e {
        Some(e) => [sig7(e.value), sig7(e.half_width)],
        None => [NA.to_string(), NA.to_string()],
    }
}

pub fn push_point(table: &mut Table, p: &PointRows<'_>) {
    for (j, &lambda) in p.lambdas.iter().enumerate() {
        let lot = p.lots.map(|l| &l[j]);
        let [n, n_ci] = estimate_cells(lot.map(|l| l.mean_number));
        let [t, t_ci] = estimate_cells(lot.and_then(|l| l.mean_charging_time));
        let run = match p.run {
            Some(r) => [r.seed.to_string(), sig7(r.horizon), sig7(r.burn_in)],
            None => [NA.to_string(), NA.to_string(), NA.to_string()],
        };
        let [seed, horizon, burn_in] = run;
        table.push(vec![
            p.model.to_string(),
            p.method.to_string(),
            (j + 1).to_string(),
            sig7(lambda),
            sig7(p.total_rate),
            opt(p.fraction_1),
            n,
            n_ci,
            t,
            t_ci,
            opt(lot.map(|l| l.blocking.value)),
            seed,
            horizon,
            burn_in,
        ]);
    }
}

fn key_order(a: &(PowerFlowModel, f64, f64), b: &(PowerFlowModel, f64, f64)) -> std::cmp::Ordering {
    a.0.as_str().cmp(b.0.as_str()).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2))
}

/// Rows ordered by model name, lot-1 fraction, rate and lot.
pub fn sweep_table(table: &SweepTable) -> Table {
    let mut points: Vec<_> = table.points.iter().collect();
    points.sort_by(|a, b| key_order(&(a.model, a.fractions[0], a.rate), &(b.model, b.fractions[0], b.rate)));
    let mut out = Table::new(SWEEP_HEADER);
    for p in points {
        let sampled = p.method.as_str() == "sim";
        push_point(
            &mut out,
            &PointRows {
                model: p.model,
                method: p.method.as_str(),
                lambdas: &p.lambdas,
                total_rate: p.total_rate,
                fraction_1: Some(p.fractions[0]),
                lots: p.outcome.as_ref().ok().map(|m| m.lots.as_slice()),
                run: sampled.then_some(RunInfo { seed: p.seed, horizon: p.horizon, burn_in: p.burn_in }),
            },
        );
    }
    out
}

pub fn heatmap_table(map: &HeatmapTable) -> Table {
    let mut cells: Vec<_> = map.cells.iter().collect();
    cells.sort_by(|a, b| key_order(&(a.model, a.total_rate, a.fraction_1), &(b.model, b.total_rate, b.fraction_1)));
    let mut out = Table::new(HEATMAP_HEADER);
    for c in cells {
        let [v, ci] = estimate_cells(c.total_mean_number.as_ref().ok().copied());
        out.push(vec![c.model.to_string(), sig7(c.total_rate), sig7(c.fraction_1), v, ci]);
    }
    out
}

pub fn critical_table(estimates: &[CriticalEstimate]) -> Table {
    let mut rows: Vec<_> = estimates.iter().collect();
    rows.sort_by(|a, b| key_order(&(a.model, a.fraction_1(), 0.0), &(b.model, b.fraction_1(), 0.0)));
    let mut out = Table::new(CRITICAL_HEADER);
    for e in rows {
        out.push(vec![e.model.to_string(), sig7(e.fraction_1()), opt(e.rate), sig7(e.grid_step)]);
    }
    out
}

/// Plain `key=value` record of everything needed to reproduce a run.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m.set("timestamp", chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_list(&mut self, key: &str, values: &[f64]) {
        self.set(key, values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Writes `tables` under `dir` and a `<command>.manifest` listing them.
pub fn write_run(dir: &Path, mut manifest: Manifest, tables: &[(&str, &Table)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, table) in tables {
        let path = dir.join(name);
        table.write(&path)?;
        written.push(path);
    }
    manifest.set(
        "outputs",
        written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
    );
    let command = manifest.entries[0].1.clone();
    let path = dir.join(format!("{command}.manifest"));
    fs::write(&path, manifest.render()).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_significant_digits() {
        assert_eq!(sig7(0.27008310249307), "0.2700831");
        assert_eq!(sig7(197.63110215), "197.6311");
        assert_eq!(sig7(1.9), "1.900000");
        assert_eq!(sig7(200000.0), "200000.0");
        assert_eq!(sig7(12345678.0), "12345678");
        assert_eq!(sig7(0.0), "0");
        assert_eq!(sig7(f64::NAN), "NA");
        assert_eq!(sig7(-0.001234567891), "-0.001234568");
    }

    #[test]
    fn rounding_carries_into_next_decade() {
        assert_eq!(sig7(9.9999999), "10.00000");
        assert_eq!(sig7(0.099999999), "0.1000000");
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(CRITICAL_HEADER);
        assert_eq!(t.render(), "model,fraction_1,critical_rate,grid_step\n");
    }

    #[test]
    fn manifest_overwrites_keys() {
        let mut m = Manifest::default();
        m.set("a", 1);
        m.set("b", "x");
        m.set("a", 2);
        assert_eq!(m.render(), "a=2\nb=x\n");
    }
}
