//! RMSE, daily RMSE, valid-estimation counts and daily RMSE differences.
//!
//! Everything here is computed from one long table of published estimates
//! (`truths.csv`), so a dumped run can be re-scored without re-running it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Cycle, GridId};

pub const CYCLES_PER_DAY: usize = 96;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.15, 0.20, 0.25];

/// RMSE over the grids present in both maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rmse {
    /// `None` when no grid could be evaluated.
    pub value: Option<f64>,
    pub evaluated: usize,
    /// Truth grids without an estimate.
    pub excluded: usize,
}

pub fn rmse(estimates: &BTreeMap<GridId, f64>, truths: &BTreeMap<GridId, f64>) -> Rmse {
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (g, real) in truths {
        if let Some(est) = estimates.get(g) {
            sum += (est - real).powi(2);
            evaluated += 1;
        }
    }
    Rmse {
        value: (evaluated > 0).then(|| (sum / evaluated as f64).sqrt()),
        evaluated,
        excluded: truths.len() - evaluated,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyRmse {
    pub day: usize,
    /// Mean of the day's defined per-cycle RMSEs.
    pub rmse: Option<f64>,
    /// Cycles in the window (96 except for a trailing partial day).
    pub cycles: usize,
    pub partial: bool,
}

/// Means over consecutive 96-cycle windows. Cycles without an RMSE are
/// skipped; a day with none has no value.
pub fn daily_rmse(per_cycle: &[Option<f64>]) -> Vec<DailyRmse> {
    per_cycle
        .chunks(CYCLES_PER_DAY)
        .enumerate()
        .map(|(day, w)| {
            let defined: Vec<f64> = w.iter().flatten().copied().collect();
            DailyRmse {
                day,
                rmse: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                cycles: w.len(),
                partial: w.len() < CYCLES_PER_DAY,
            }
        })
        .collect()
}

/// Cycles where `|est - truth| / truth < threshold`. Missing estimates never count.
pub fn valid_estimations(estimates: &[Option<f64>], truths: &[f64], threshold: f64) -> usize {
    estimates
        .iter()
        .zip(truths)
        .filter(|(e, t)| matches!(e, Some(e) if (e - **t).abs() / **t < threshold))
        .count()
}

/// `base - other` day by day; positive where `other` beats `base`.
pub fn rmse_difference(base: &[f64], other: &[f64]) -> Vec<f64> {
    base.iter().zip(other).map(|(b, o)| b - o).collect()
}

/// One published estimate next to the real truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub cycle: Cycle,
    pub grid: GridId,
    pub algo: String,
    pub estimate: Option<f64>,
    pub real: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRmseRow {
    pub algo: String,
    pub cycle: Cycle,
    pub rmse: Option<f64>,
    pub evaluated: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyRow {
    pub algo: String,
    pub day: usize,
    pub rmse: Option<f64>,
    pub cycles: usize,
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRow {
    pub algo: String,
    pub grid: GridId,
    pub threshold: f64,
    pub count: usize,
    /// Cycles with an estimate for this grid.
    pub estimated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub day: usize,
    pub pair: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rmse_cycle: Vec<CycleRmseRow>,
    pub rmse_daily: Vec<DailyRow>,
    pub valid: Vec<ValidRow>,
    pub diff: Vec<DiffRow>,
}

impl MetricsTable {
    /// Scores `rows`. Algorithms keep their order of first appearance; the
    /// differences subtract every other algorithm from `base` when present.
    pub fn compute(rows: &[TruthRow], thresholds: &[f64], base: &str) -> Self {
        let mut order: Vec<&str> = Vec::new();
        // algo -> cycle -> (estimates, truths)
        type PerCycle = BTreeMap<Cycle, (BTreeMap<GridId, f64>, BTreeMap<GridId, f64>)>;
        let mut by_algo: BTreeMap<&str, PerCycle> = BTreeMap::new();
        // algo -> grid -> (estimates, truths) in cycle order
        type PerGrid = BTreeMap<GridId, BTreeMap<Cycle, (Option<f64>, f64)>>;
        let mut by_grid: BTreeMap<&str, PerGrid> = BTreeMap::new();
        for r in rows {
            if !order.contains(&r.algo.as_str()) {
                order.push(&r.algo);
            }
            let slot = by_algo.entry(&r.algo).or_default().entry(r.cycle).or_default();
            slot.1.insert(r.grid, r.real);
            if let Some(e) = r.estimate {
                slot.0.insert(r.grid, e);
            }
            by_grid
                .entry(&r.algo)
                .or_default()
                .entry(r.grid)
                .or_default()
                .insert(r.cycle, (r.estimate, r.real));
        }

        let mut table = MetricsTable::default();
        let mut daily: BTreeMap<&str, Vec<DailyRmse>> = BTreeMap::new();
        for &algo in &order {
            let cycles = &by_algo[algo];
            let last = cycles.keys().next_back().copied().unwrap_or(0);
            let mut series = vec![None; last as usize + 1];
            for (&c, (est, real)) in cycles {
                let r = rmse(est, real);
                series[c as usize] = r.value;
                table.rmse_cycle.push(CycleRmseRow {
                    algo: algo.to_string(),
                    cycle: c,
                    rmse: r.value,
                    evaluated: r.evaluated,
                    excluded: r.excluded,
                });
            }
            let days = daily_rmse(&series);
            table.rmse_daily.extend(days.iter().map(|d| DailyRow {
                algo: algo.to_string(),
                day: d.day,
                rmse: d.rmse,
                cycles: d.cycles,
                partial: d.partial,
            }));
            daily.insert(algo, days);

            for (&g, per_cycle) in &by_grid[algo] {
                let est: Vec<Option<f64>> = per_cycle.values().map(|p| p.0).collect();
                let real: Vec<f64> = per_cycle.values().map(|p| p.1).collect();
                for &th in thresholds {
                    table.valid.push(ValidRow {
                        algo: algo.to_string(),
                        grid: g,
                        threshold: th,
                        count: valid_estimations(&est, &real, th),
                        estimated: est.iter().flatten().count(),
                    });
                }
            }
        }

        if let Some(base_days) = daily.get(base) {
            for &algo in order.iter().filter(|&&a| a != base) {
                for (b, o) in base_days.iter().zip(&daily[algo]) {
                    if let (Some(bv), Some(ov)) = (b.rmse, o.rmse) {
                        table.diff.push(DiffRow {
                            day: b.day,
                            pair: format!("{base}-{algo}"),
                            value: rmse_difference(&[bv], &[ov])[0],
                        });
                    }
                }
            }
        }
        table
    }

    /// Daily RMSEs of one algorithm, complete days only.
    pub fn full_days(&self, algo: &str) -> Vec<(usize, Option<f64>)> {
        self.rmse_daily
            .iter()
            .filter(|d| d.algo == algo && !d.partial)
            .map(|d| (d.day, d.rmse))
            .collect()
    }

    pub fn valid_count(&self, algo: &str, grid: GridId, threshold: f64) -> Option<usize> {
        self.valid
            .iter()
            .find(|v| v.algo == algo && v.grid == grid && v.threshold == threshold)
            .map(|v| v.count)
    }

    /// The four tables as `(file name, CSV bytes)`, in file-name order.
    pub fn csv_files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        Ok(vec![
            ("diff.csv", csv_bytes(&["day", "pair", "value"], &self.diff)?),
            (
                "rmse_cycle.csv",
                csv_bytes(&["algo", "cycle", "rmse", "evaluated", "excluded"], &self.rmse_cycle)?,
            ),
            (
                "rmse_daily.csv",
                csv_bytes(&["algo", "day", "rmse", "cycles", "partial"], &self.rmse_daily)?,
            ),
            (
                "valid.csv",
                csv_bytes(&["algo", "grid", "threshold", "count", "estimated"], &self.valid)?,
            ),
        ])
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.csv_files()? {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn csv_bytes<T: Serialize>(headers: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(headers)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_truths_csv<W: Write>(rows: &[TruthRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["cycle", "grid", "algo", "estimate", "real"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truths_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let row: TruthRow = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        if !row.real.is_finite() || row.estimate.is_some_and(|e| !e.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("non-finite value in cycle {} grid {}", row.cycle, row.grid),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
