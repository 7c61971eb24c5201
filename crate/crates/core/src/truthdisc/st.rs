use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geo::ThetaTable;
use crate::ids::{Cycle, GridId, SourceKey};
use crate::temporal::{Delta, TemporalParams};

use super::{
    assemble, log_ratio_weights, solve, CoordinateModel, CycleResult, Histories, Observation,
    SolverParams, WeightUpdate,
};

/// One observation reused for one target grid with coefficient `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term<S> {
    pub source: S,
    pub target: GridId,
    pub theta: f64,
    pub value: f64,
}

/// Observations expanded through a spatial table, indexed both ways.
#[derive(Clone, Debug)]
pub struct SpatialTerms<S: Ord> {
    by_grid: BTreeMap<GridId, Vec<Term<S>>>,
    by_source: BTreeMap<S, Vec<Term<S>>>,
}

impl<S: SourceKey> SpatialTerms<S> {
    /// Expands every observation to all grids its origin correlates with.
    pub fn new(observations: &[Observation<S>], thetas: &ThetaTable) -> Result<Self> {
        Self::build(observations, |g| {
            thetas
                .row(g)
                .map(<[(GridId, f64)]>::to_vec)
                .ok_or_else(|| Error::Protocol(format!("observation for unknown grid {g}")))
        })
    }

    /// Keeps every observation on its own grid only (no reuse).
    pub fn direct(observations: &[Observation<S>], grids: &[GridId]) -> Result<Self> {
        let known: BTreeSet<GridId> = grids.iter().copied().collect();
        Self::build(observations, |g| {
            if known.contains(&g) {
                Ok(vec![(g, 1.0)])
            } else {
                Err(Error::Protocol(format!("observation for unknown grid {g}")))
            }
        })
    }

    fn build(
        observations: &[Observation<S>],
        row: impl Fn(GridId) -> Result<Vec<(GridId, f64)>>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut by_grid: BTreeMap<GridId, Vec<Term<S>>> = BTreeMap::new();
        let mut by_source: BTreeMap<S, Vec<Term<S>>> = BTreeMap::new();
        for o in observations {
            if !o.value.is_finite() {
                return Err(Error::Protocol(format!("non-finite observation from {:?}", o.source)));
            }
            if !seen.insert((o.source, o.grid)) {
                return Err(Error::Protocol(format!(
                    "source {:?} reported grid {} twice in one cycle",
                    o.source, o.grid
                )));
            }
            for (target, theta) in row(o.grid)? {
                let term = Term {
                    source: o.source,
                    target,
                    theta,
                    value: o.value,
                };
                by_grid.entry(target).or_default().push(term);
                by_source.entry(o.source).or_default().push(term);
            }
        }
        Ok(Self { by_grid, by_source })
    }

    pub fn sources(&self) -> Vec<S> {
        self.by_source.keys().copied().collect()
    }

    /// Grids reached by at least one term.
    pub fn grids(&self) -> impl Iterator<Item = GridId> + '_ {
        self.by_grid.keys().copied()
    }

    pub fn grid_terms(&self, grid: GridId) -> &[Term<S>] {
        self.by_grid.get(&grid).map_or(&[], Vec::as_slice)
    }

    pub fn source_terms(&self, source: S) -> &[Term<S>] {
        self.by_source.get(&source).map_or(&[], Vec::as_slice)
    }

    /// Theta-weighted mean of everything reaching the grid. Without reuse
    /// this is the plain mean of the grid's own observations.
    pub fn initial_truth(&self, grid: GridId) -> Option<f64> {
        let terms = self.by_grid.get(&grid)?;
        let den: f64 = terms.iter().map(|t| t.theta).sum();
        (den > 0.0).then(|| terms.iter().map(|t| t.theta * t.value).sum::<f64>() / den)
    }

    pub fn is_empty(&self) -> bool {
        self.by_source.is_empty()
    }
}

fn delta_of<K: Ord>(map: &BTreeMap<K, Delta>, k: &K) -> Delta {
    map.get(k).copied().unwrap_or_default()
}

fn combined_weight<S: SourceKey>(temp: &BTreeMap<S, f64>, deltas: &BTreeMap<S, Delta>, s: &S) -> f64 {
    temp.get(s).map_or(0.0, |&w| delta_of(deltas, s).apply(w))
}

/// Temporary truths `v*'` for every grid reached by data.
///
/// When every contributor of a grid has zero combined weight the grid falls
/// back to its theta-weighted mean; that is the limit of equal weights.
pub fn st_update_truths<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_weights: &BTreeMap<S, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
    truth_deltas: &BTreeMap<GridId, Delta>,
) -> BTreeMap<GridId, f64> {
    let mut out = BTreeMap::new();
    for (&g, ts) in &terms.by_grid {
        let d = delta_of(truth_deltas, &g);
        let (mut num, mut den) = (0.0, 0.0);
        let (mut num0, mut den0) = (0.0, 0.0);
        for t in ts {
            let fa = combined_weight(temp_weights, weight_deltas, &t.source);
            num += fa * t.theta * (t.value - d.offset);
            den += fa * t.theta;
            num0 += t.theta * (t.value - d.offset);
            den0 += t.theta;
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

/// Per-source theta-weighted squared distances to the combined truths.
///
/// A distance no larger than what the truths resolve at `tolerance`
/// (`sum theta * (tolerance * max(|truth|, 1))^2`) is reported as zero.
pub(crate) fn st_distances<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_truths: &BTreeMap<GridId, f64>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    tolerance: f64,
) -> BTreeMap<S, f64> {
    terms
        .by_source
        .iter()
        .map(|(&s, ts)| {
            let (mut d, mut resolution) = (0.0, 0.0);
            for t in ts {
                let fb = temp_truths
                    .get(&t.target)
                    .map_or(t.value, |&v| delta_of(truth_deltas, &t.target).apply(v));
                d += t.theta * (t.value - fb).powi(2);
                resolution += t.theta * (tolerance * fb.abs().max(1.0)).powi(2);
            }
            (s, if d <= resolution { 0.0 } else { d })
        })
        .collect()
}

/// Temporary weights `w'` from the current temporary truths.
pub fn st_update_weights<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_truths: &BTreeMap<GridId, f64>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    weight_deltas: &BTreeMap<S, Delta>,
    params: &SolverParams,
) -> WeightUpdate<S> {
    let distances = st_distances(terms, temp_truths, truth_deltas, params.tolerance);
    log_ratio_weights(&distances, weight_deltas, params)
}

/// The weighted squared-error objective over every (source, observation, grid) term.
pub fn objective<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_weights: &BTreeMap<S, f64>,
    temp_truths: &BTreeMap<GridId, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
    truth_deltas: &BTreeMap<GridId, Delta>,
) -> f64 {
    terms
        .by_grid
        .iter()
        .map(|(g, ts)| {
            let Some(&v) = temp_truths.get(g) else { return 0.0 };
            let fb = delta_of(truth_deltas, g).apply(v);
            ts.iter()
                .map(|t| {
                    combined_weight(temp_weights, weight_deltas, &t.source) * t.theta * (t.value - fb).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

pub(crate) struct TermModel<'a, S: Ord> {
    pub terms: &'a SpatialTerms<S>,
    pub weight_deltas: &'a BTreeMap<S, Delta>,
    pub truth_deltas: &'a BTreeMap<GridId, Delta>,
    pub params: &'a SolverParams,
}

impl<S: SourceKey> CoordinateModel<S> for TermModel<'_, S> {
    fn update_weights(&self, temp_truths: &BTreeMap<GridId, f64>) -> WeightUpdate<S> {
        st_update_weights(self.terms, temp_truths, self.truth_deltas, self.weight_deltas, self.params)
    }

    fn update_truths(&self, temp_weights: &BTreeMap<S, f64>) -> BTreeMap<GridId, f64> {
        st_update_truths(self.terms, temp_weights, self.weight_deltas, self.truth_deltas)
    }

    fn objective(&self, temp_weights: &BTreeMap<S, f64>, temp_truths: &BTreeMap<GridId, f64>) -> f64 {
        objective(self.terms, temp_weights, temp_truths, self.weight_deltas, self.truth_deltas)
    }

    fn truth_delta(&self, grid: GridId) -> Delta {
        delta_of(self.truth_deltas, &grid)
    }
}

/// One cycle of ST on plaintext observations.
///
/// Histories are read, not written; appending the result is up to the caller.
pub fn run_st<S: SourceKey>(
    observations: &[Observation<S>],
    thetas: &ThetaTable,
    histories: &Histories<S>,
    temporal: &TemporalParams,
    solver: &SolverParams,
    t: Cycle,
) -> Result<CycleResult<S>> {
    let terms = SpatialTerms::new(observations, thetas)?;
    let sources = terms.sources();
    let weight_deltas = histories.weight_deltas(&sources, temporal, t)?;
    let truth_deltas = histories.truth_deltas(thetas.grids(), temporal, t)?;
    let init: BTreeMap<GridId, f64> = terms
        .grids()
        .filter_map(|g| terms.initial_truth(g).map(|v| (g, v)))
        .collect();
    let model = TermModel {
        terms: &terms,
        weight_deltas: &weight_deltas,
        truth_deltas: &truth_deltas,
        params: solver,
    };
    let solved = solve(&model, init, &sources, solver);
    Ok(assemble(t, thetas.grids(), solved, &truth_deltas, &weight_deltas, |g| {
        histories.last_truth(g)
    }))
}
