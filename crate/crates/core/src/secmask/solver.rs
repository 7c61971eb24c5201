use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Cycle, GridId, SourceKey};
use crate::rng;
use crate::temporal::{Delta, TemporalParams};
use crate::truthdisc::{
    assemble, log_ratio_weights, solve, CoordinateModel, CycleResult, Histories, SolverParams, WeightUpdate,
};

use super::fixed::Codec;
use super::report::{aggregate_reports, Chi, ChiSums, MaskedReport};

/// Upper end of the uniform draw used when a grid has no history.
pub const RANDOM_INIT_MAX: f64 = 500.0;

/// Starting truths for the masked solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `sum chi1 / sum chi3` over all sources: the same theta-weighted mean
    /// plaintext ST starts from.
    #[default]
    Aggregate,
    /// Last historical truth, else a keyed uniform draw in `[0, 500]`.
    History,
}

/// How the masked solver seeds its grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRule {
    pub seed: u64,
    pub domain: String,
    pub mode: InitMode,
}

impl InitRule {
    pub fn new(seed: u64, domain: impl Into<String>) -> Self {
        Self::with_mode(seed, domain, InitMode::Aggregate)
    }

    pub fn with_mode(seed: u64, domain: impl Into<String>, mode: InitMode) -> Self {
        Self {
            seed,
            domain: domain.into(),
            mode,
        }
    }

    pub fn initial_truth(&self, grid: GridId, cycle: Cycle, last: Option<f64>, aggregate: f64) -> f64 {
        match self.mode {
            InitMode::Aggregate => aggregate,
            InitMode::History => last.unwrap_or_else(|| {
                rng::stream(self.seed, &format!("init/{}", self.domain), &[u64::from(grid.0), u64::from(cycle)])
                    .random_range(0.0..=RANDOM_INIT_MAX)
            }),
        }
    }
}

struct Index<S> {
    by_grid: BTreeMap<GridId, Vec<(S, Chi)>>,
    by_source: BTreeMap<S, Vec<(GridId, Chi)>>,
    quantum: f64,
}

impl<S: SourceKey> Index<S> {
    fn new(chis: &ChiSums<S>) -> Self {
        let mut by_grid: BTreeMap<GridId, Vec<(S, Chi)>> = BTreeMap::new();
        let mut by_source: BTreeMap<S, Vec<(GridId, Chi)>> = BTreeMap::new();
        for (s, g, chi) in chis.iter() {
            by_grid.entry(g).or_default().push((s, chi));
            by_source.entry(s).or_default().push((g, chi));
        }
        Self {
            by_grid,
            by_source,
            quantum: chis.codec().quantum(),
        }
    }
}

fn delta_of<K: Ord>(map: &BTreeMap<K, Delta>, k: &K) -> Delta {
    map.get(k).copied().unwrap_or_default()
}

fn fa<S: SourceKey>(temp: &BTreeMap<S, f64>, deltas: &BTreeMap<S, Delta>, s: &S) -> f64 {
    temp.get(s).map_or(0.0, |&w| delta_of(deltas, s).apply(w))
}

fn truths_from_index<S: SourceKey>(
    idx: &Index<S>,
    temp_weights: &BTreeMap<S, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
    truth_deltas: &BTreeMap<GridId, Delta>,
) -> BTreeMap<GridId, f64> {
    let mut out = BTreeMap::new();
    for (&g, entries) in &idx.by_grid {
        let d = delta_of(truth_deltas, &g);
        let (mut num, mut den, mut num0, mut den0) = (0.0, 0.0, 0.0, 0.0);
        for (s, chi) in entries {
            let w = fa(temp_weights, weight_deltas, s);
            num += w * (chi.chi1 - d.offset * chi.chi3);
            den += w * chi.chi3;
            num0 += chi.chi1 - d.offset * chi.chi3;
            den0 += chi.chi3;
        }
        let v = if den > 0.0 {
            num / (d.scale * den)
        } else if den0 > 0.0 {
            num0 / (d.scale * den0)
        } else {
            continue;
        };
        out.insert(g, v);
    }
    out
}

/// Per-source distance and the bound below which it reads as zero: rounding
/// plus what the truths resolve at `tolerance`.
fn distances_from_index<S: SourceKey>(
    idx: &Index<S>,
    temp_truths: &BTreeMap<GridId, f64>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    tolerance: f64,
) -> BTreeMap<S, (f64, f64)> {
    idx.by_source
        .iter()
        .map(|(&s, entries)| {
            let (mut d, mut bound) = (0.0, 0.0);
            for (g, chi) in entries {
                let Some(&v) = temp_truths.get(g) else { continue };
                let fb = delta_of(truth_deltas, g).apply(v);
                d += chi.chi2 - 2.0 * fb * chi.chi1 + fb * fb * chi.chi3;
                bound += chi.len as f64 * idx.quantum * (1.0 + 2.0 * fb.abs() + fb * fb);
                bound += chi.chi3.max(0.0) * (tolerance * fb.abs().max(1.0)).powi(2);
            }
            (s, (d, bound))
        })
        .collect()
}

fn weights_from_index<S: SourceKey>(
    idx: &Index<S>,
    temp_truths: &BTreeMap<GridId, f64>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    weight_deltas: &BTreeMap<S, Delta>,
    params: &SolverParams,
) -> (WeightUpdate<S>, usize) {
    let mut noise = 0;
    let distances = distances_from_index(idx, temp_truths, truth_deltas, params.tolerance)
        .into_iter()
        .map(|(s, (d, bound))| {
            // indistinguishable from zero once rounding is accounted for
            if d <= bound {
                noise += 1;
                (s, 0.0)
            } else {
                (s, d)
            }
        })
        .collect();
    (log_ratio_weights(&distances, weight_deltas, params), noise)
}

/// Temporary truths from aggregated masked sums.
pub fn masked_update_truths<S: SourceKey>(
    chis: &ChiSums<S>,
    temp_weights: &BTreeMap<S, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
    truth_deltas: &BTreeMap<GridId, Delta>,
) -> BTreeMap<GridId, f64> {
    truths_from_index(&Index::new(chis), temp_weights, weight_deltas, truth_deltas)
}

/// Temporary weights from aggregated masked sums.
///
/// A distance at or below its rounding bound is treated as zero and floored;
/// the second value counts how often that happened.
pub fn masked_update_weights<S: SourceKey>(
    chis: &ChiSums<S>,
    temp_truths: &BTreeMap<GridId, f64>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    weight_deltas: &BTreeMap<S, Delta>,
    params: &SolverParams,
) -> (WeightUpdate<S>, usize) {
    weights_from_index(&Index::new(chis), temp_truths, truth_deltas, weight_deltas, params)
}

struct MaskedModel<'a, S> {
    idx: Index<S>,
    weight_deltas: &'a BTreeMap<S, Delta>,
    truth_deltas: &'a BTreeMap<GridId, Delta>,
    params: &'a SolverParams,
    noise_events: Cell<usize>,
}

impl<S: SourceKey> CoordinateModel<S> for MaskedModel<'_, S> {
    fn update_weights(&self, temp_truths: &BTreeMap<GridId, f64>) -> WeightUpdate<S> {
        let (wu, noise) = weights_from_index(&self.idx, temp_truths, self.truth_deltas, self.weight_deltas, self.params);
        self.noise_events.set(self.noise_events.get() + noise);
        wu
    }

    fn update_truths(&self, temp_weights: &BTreeMap<S, f64>) -> BTreeMap<GridId, f64> {
        truths_from_index(&self.idx, temp_weights, self.weight_deltas, self.truth_deltas)
    }

    fn objective(&self, temp_weights: &BTreeMap<S, f64>, temp_truths: &BTreeMap<GridId, f64>) -> f64 {
        distances_from_index(&self.idx, temp_truths, self.truth_deltas, self.params.tolerance)
            .iter()
            .map(|(s, &(d, _))| fa(temp_weights, self.weight_deltas, s) * d)
            .sum()
    }

    fn truth_delta(&self, grid: GridId) -> Delta {
        delta_of(self.truth_deltas, &grid)
    }

    fn negative_distance_events(&self) -> usize {
        self.noise_events.get()
    }
}

/// ST on aggregated masked sums.
pub fn solve_masked<S: SourceKey>(
    chis: &ChiSums<S>,
    grids: &[GridId],
    histories: &Histories<S>,
    temporal: &TemporalParams,
    solver: &SolverParams,
    init: &InitRule,
    t: Cycle,
) -> Result<CycleResult<S>> {
    let known: BTreeSet<GridId> = grids.iter().copied().collect();
    if let Some((_, g, _)) = chis.iter().find(|(_, g, _)| !known.contains(g)) {
        return Err(Error::Protocol(format!("masked report for unknown grid {g}")));
    }
    let idx = Index::new(chis);
    let sources: Vec<S> = idx.by_source.keys().copied().collect();
    let weight_deltas = histories.weight_deltas(&sources, temporal, t)?;
    let truth_deltas = histories.truth_deltas(grids, temporal, t)?;
    let start: BTreeMap<GridId, f64> = idx
        .by_grid
        .iter()
        .filter_map(|(&g, e)| {
            let (num, den) = e.iter().fold((0.0, 0.0), |(n, d), (_, c)| (n + c.chi1, d + c.chi3));
            (den > 0.0).then(|| (g, init.initial_truth(g, t, histories.last_truth(g), num / den)))
        })
        .collect();
    let model = MaskedModel {
        idx,
        weight_deltas: &weight_deltas,
        truth_deltas: &truth_deltas,
        params: solver,
        noise_events: Cell::new(0),
    };
    let solved = solve(&model, start, &sources, solver);
    Ok(assemble(t, grids, solved, &truth_deltas, &weight_deltas, |g| histories.last_truth(g)))
}

/// One AirQ cycle: aggregate the uploaded reports and run ST on the sums.
#[allow(clippy::too_many_arguments)]
pub fn run_airq<S: SourceKey>(
    reports: &[MaskedReport<S>],
    grids: &[GridId],
    histories: &Histories<S>,
    temporal: &TemporalParams,
    solver: &SolverParams,
    codec: &Codec,
    init: &InitRule,
    t: Cycle,
) -> Result<CycleResult<S>> {
    if let Some(r) = reports.iter().find(|r| r.cycle != t) {
        return Err(Error::Protocol(format!("report for cycle {} submitted in cycle {t}", r.cycle)));
    }
    let chis = aggregate_reports(reports, codec)?;
    solve_masked(&chis, grids, histories, temporal, solver, init, t)
}
