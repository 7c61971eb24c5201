//! Two-layer perturbation of a vehicle's report: grid perturbation drops real
//! entries and imitates unvisited grids, then value perturbation adds Laplace
//! noise to everything that is left.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::Open01;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Cycle, GridId};
use crate::rng;

/// Used for imitation when no grid has a previous truth at all.
pub const FALLBACK_TRUTH: f64 = 75.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationParams {
    /// Probability of removing a real observation.
    pub p1: f64,
    /// Probability of imitating an uncovered grid.
    pub p2: f64,
    /// Laplace scale of the imitation noise.
    pub lambda1: f64,
    /// Laplace scale of the value noise.
    pub lambda2: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            p1: 0.2,
            p2: 0.05,
            lambda1: 1.5,
            lambda2: 2.0,
        }
    }
}

impl PerturbationParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("perturbation.{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("perturbation.{name} must be > 0, got {l}")));
            }
        }
        if self.lambda1 >= self.lambda2 {
            log::warn!(
                "perturbation.lambda1 ({}) is not below lambda2 ({})",
                self.lambda1,
                self.lambda2
            );
        }
        Ok(())
    }
}

/// Inverse CDF of the zero-mean Laplace law at `u` in (0, 1).
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    let c = u - 0.5;
    if c == 0.0 {
        return 0.0;
    }
    -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln()
}

pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    laplace_from_uniform(rng.sample(Open01), scale)
}

/// Identifies one vehicle-cycle for keyed draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerturbKey {
    pub seed: u64,
    pub rid: u64,
    pub cycle: Cycle,
}

impl PerturbKey {
    fn stream(&self, site: &str, grid: GridId) -> rng::Stream {
        rng::stream(self.seed, site, &[self.rid, u64::from(self.cycle), u64::from(grid.0)])
    }
}

/// An entry after grid perturbation. The flag exists for instrumentation and
/// is never part of what leaves the vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbedObs {
    pub grid: GridId,
    pub value: f64,
    pub imitated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridPerturbation {
    pub entries: Vec<PerturbedObs>,
    pub dropped: usize,
    pub imitated: usize,
    /// Grids considered for imitation (uncovered after dropping).
    pub uncovered: usize,
    /// Imitations that had to fall back to the constant.
    pub fallbacks: usize,
}

/// Drops real entries with probability `p1`, then imitates every uncovered
/// grid with probability `p2` around its previous truth.
///
/// Grids without a previous truth use the mean of the available ones, or
/// [`FALLBACK_TRUTH`] when there are none.
pub fn grid_perturb(
    observations: &[(GridId, f64)],
    all_grids: &[GridId],
    prev_truths: &BTreeMap<GridId, f64>,
    params: &PerturbationParams,
    key: &PerturbKey,
) -> GridPerturbation {
    let mut out = GridPerturbation::default();
    for &(grid, value) in observations {
        if key.stream("perturb/drop", grid).random_bool(params.p1) {
            out.dropped += 1;
        } else {
            out.entries.push(PerturbedObs {
                grid,
                value,
                imitated: false,
            });
        }
    }
    let covered: BTreeSet<GridId> = out.entries.iter().map(|e| e.grid).collect();
    let global = (!prev_truths.is_empty()).then(|| prev_truths.values().sum::<f64>() / prev_truths.len() as f64);
    let grids: BTreeSet<GridId> = all_grids.iter().copied().collect();
    for grid in grids {
        if covered.contains(&grid) {
            continue;
        }
        out.uncovered += 1;
        let mut r = key.stream("perturb/imitate", grid);
        if !r.random_bool(params.p2) {
            continue;
        }
        let base = match prev_truths.get(&grid).copied().or(global) {
            Some(v) => v,
            None => {
                out.fallbacks += 1;
                FALLBACK_TRUTH
            }
        };
        out.imitated += 1;
        out.entries.push(PerturbedObs {
            grid,
            value: base + laplace_sample(params.lambda1, &mut r),
            imitated: true,
        });
    }
    out
}

/// Adds independent Laplace noise to every entry, real or imitated.
pub fn value_perturb(entries: &[PerturbedObs], lambda2: f64, key: &PerturbKey) -> Vec<(GridId, f64)> {
    entries
        .iter()
        .map(|e| {
            let noise = laplace_sample(lambda2, &mut key.stream("perturb/value", e.grid));
            (e.grid, e.value + noise)
        })
        .collect()
}

/// What a vehicle uploads for the SST side of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedReport<S> {
    pub pseudo_id: S,
    pub cycle: Cycle,
    pub values: Vec<(GridId, f64)>,
}

impl<S> PerturbedReport<S> {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(g, v) in &self.values {
            if !seen.insert(g) {
                return Err(Error::MalformedReport(format!("grid {g} listed twice")));
            }
            if !v.is_finite() {
                return Err(Error::MalformedReport(format!("non-finite value for grid {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PerturbedRecord<S> {
    pseudo_id: S,
    cycle: Cycle,
    grid_id: GridId,
    value: f64,
}

pub fn write_perturbed_jsonl<S: Serialize + Clone, W: Write>(reports: &[PerturbedReport<S>], mut out: W) -> Result<()> {
    for r in reports {
        for &(grid_id, value) in &r.values {
            let rec = PerturbedRecord {
                pseudo_id: r.pseudo_id.clone(),
                cycle: r.cycle,
                grid_id,
                value,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Consecutive lines with the same pseudo-id and cycle form one report.
pub fn read_perturbed_jsonl<S: DeserializeOwned + PartialEq, R: BufRead>(input: R) -> Result<Vec<PerturbedReport<S>>> {
    let mut out: Vec<PerturbedReport<S>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PerturbedRecord<S> = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedReport(format!("line {}: {e}", i + 1)))?;
        match out.last_mut() {
            Some(last) if last.pseudo_id == rec.pseudo_id && last.cycle == rec.cycle => {
                last.values.push((rec.grid_id, rec.value))
            }
            _ => out.push(PerturbedReport {
                pseudo_id: rec.pseudo_id,
                cycle: rec.cycle,
                values: vec![(rec.grid_id, rec.value)],
            }),
        }
    }
    for r in &out {
        r.validate()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(rid: u64) -> PerturbKey {
        PerturbKey { seed: 5, rid, cycle: 1 }
    }

    fn grids(m: u32) -> Vec<GridId> {
        (0..m).map(GridId).collect()
    }

    #[test]
    fn median_maps_to_zero() {
        assert_eq!(laplace_from_uniform(0.5, 3.0), 0.0);
        // P(X <= -b ln 2) = 1/4
        assert!((laplace_from_uniform(0.25, 1.0) + 2f64.ln()).abs() < 1e-12);
        assert!((laplace_from_uniform(0.75, 1.0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_drop_no_imitation_is_identity() {
        let p = PerturbationParams {
            p1: 0.0,
            p2: 0.0,
            ..PerturbationParams::default()
        };
        let obs = [(GridId(2), 50.0), (GridId(0), 60.0)];
        let out = grid_perturb(&obs, &grids(5), &BTreeMap::new(), &p, &key(1));
        let got: Vec<(GridId, f64)> = out.entries.iter().map(|e| (e.grid, e.value)).collect();
        assert_eq!(got, obs.to_vec());
    }

    #[test]
    fn full_drop_empties_the_list() {
        let p = PerturbationParams {
            p1: 1.0,
            p2: 0.0,
            ..PerturbationParams::default()
        };
        let obs = [(GridId(2), 50.0), (GridId(0), 60.0)];
        let out = grid_perturb(&obs, &grids(5), &BTreeMap::new(), &p, &key(1));
        assert!(out.entries.is_empty());
        assert_eq!(out.dropped, 2);
    }

    #[test]
    fn expected_imitations_for_the_reference_setting() {
        let p = PerturbationParams {
            p1: 0.0,
            ..PerturbationParams::default()
        };
        let obs: Vec<(GridId, f64)> = (0..10).map(|g| (GridId(g), 50.0)).collect();
        let prev: BTreeMap<GridId, f64> = grids(31).into_iter().map(|g| (g, 60.0)).collect();
        let n = 20_000;
        let total: usize = (0..n)
            .map(|rid| grid_perturb(&obs, &grids(31), &prev, &p, &key(rid)).imitated)
            .sum();
        let mean = total as f64 / n as f64;
        // 21 uncovered grids at 0.05 each
        let sd = (21.0 * 0.05 * 0.95 / n as f64).sqrt();
        assert!((mean - 1.05).abs() < 4.0 * sd, "{mean}");
    }

    #[test]
    fn imitation_uses_previous_truth_then_fallbacks() {
        let p = PerturbationParams {
            p1: 0.0,
            p2: 1.0,
            lambda1: 1e-9,
            lambda2: 1.0,
        };
        let prev = BTreeMap::from([(GridId(1), 40.0), (GridId(2), 80.0)]);
        let out = grid_perturb(&[], &grids(4), &prev, &p, &key(1));
        let vals: BTreeMap<GridId, f64> = out.entries.iter().map(|e| (e.grid, e.value)).collect();
        assert!((vals[&GridId(1)] - 40.0).abs() < 1e-6);
        assert!((vals[&GridId(0)] - 60.0).abs() < 1e-6);
        assert_eq!(out.fallbacks, 0);
        let out = grid_perturb(&[], &grids(2), &BTreeMap::new(), &p, &key(1));
        assert_eq!(out.fallbacks, 2);
        assert!(out.entries.iter().all(|e| (e.value - FALLBACK_TRUTH).abs() < 1e-6 && e.imitated));
    }

    #[test]
    fn tiny_lambda_leaves_values() {
        let e = [PerturbedObs {
            grid: GridId(0),
            value: 42.0,
            imitated: false,
        }];
        let v = value_perturb(&e, 1e-12, &key(3));
        assert!((v[0].1 - 42.0).abs() < 1e-9);
    }

    #[test]
    fn permuted_input_permutes_output() {
        let p = PerturbationParams::default();
        let a = [(GridId(0), 10.0), (GridId(1), 20.0), (GridId(2), 30.0)];
        let b = [a[2], a[0], a[1]];
        let ra = grid_perturb(&a, &grids(6), &BTreeMap::new(), &p, &key(9));
        let rb = grid_perturb(&b, &grids(6), &BTreeMap::new(), &p, &key(9));
        let mut x: Vec<_> = ra.entries.iter().map(|e| (e.grid, e.value.to_bits())).collect();
        let mut y: Vec<_> = rb.entries.iter().map(|e| (e.grid, e.value.to_bits())).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }

    #[test]
    fn jsonl_has_no_flag_and_round_trips() {
        let r = PerturbedReport {
            pseudo_id: "ab12".to_string(),
            cycle: 4,
            values: vec![(GridId(1), 55.5), (GridId(3), 61.25)],
        };
        let mut buf = Vec::new();
        write_perturbed_jsonl(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"pseudo_id":"ab12","cycle":4,"grid_id":1,"value":55.5}"#);
        assert!(!text.contains("imitated"));
        let back: Vec<PerturbedReport<String>> = read_perturbed_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn params_validated() {
        assert!(PerturbationParams::default().validate().is_ok());
        let bad = PerturbationParams {
            p1: 1.5,
            ..PerturbationParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerturbationParams {
            lambda2: 0.0,
            ..PerturbationParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
