use std::collections::BTreeMap;

use crate::error::Result;
use crate::ids::{Cycle, GridId, SourceKey};
use crate::temporal::{Delta, TemporalParams, WeightHistory};

use super::st::{objective, st_update_truths, st_update_weights, SpatialTerms, TermModel};
use super::{assemble, solve, weight_deltas, CycleResult, Observation, SolverParams, WeightUpdate};

/// Truths from each grid's own observations only.
pub fn sst_update_truths<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_weights: &BTreeMap<S, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
) -> BTreeMap<GridId, f64> {
    st_update_truths(terms, temp_weights, weight_deltas, &BTreeMap::new())
}

pub fn sst_update_weights<S: SourceKey>(
    terms: &SpatialTerms<S>,
    truths: &BTreeMap<GridId, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
    params: &SolverParams,
) -> WeightUpdate<S> {
    st_update_weights(terms, truths, &BTreeMap::new(), weight_deltas, params)
}

pub fn sst_objective<S: SourceKey>(
    terms: &SpatialTerms<S>,
    temp_weights: &BTreeMap<S, f64>,
    truths: &BTreeMap<GridId, f64>,
    weight_deltas: &BTreeMap<S, Delta>,
) -> f64 {
    objective(terms, temp_weights, truths, weight_deltas, &BTreeMap::new())
}

/// One cycle of SST. Grids without observations stay unestimated.
pub fn run_sst<S: SourceKey>(
    observations: &[Observation<S>],
    grids: &[GridId],
    weight_histories: &BTreeMap<S, WeightHistory>,
    temporal: &TemporalParams,
    solver: &SolverParams,
    t: Cycle,
) -> Result<CycleResult<S>> {
    let terms = SpatialTerms::direct(observations, grids)?;
    let sources = terms.sources();
    let wd = weight_deltas(weight_histories, &sources, temporal, t)?;
    let no_truth_history = BTreeMap::new();
    let init = terms
        .grids()
        .filter_map(|g| terms.initial_truth(g).map(|v| (g, v)))
        .collect();
    let model = TermModel {
        terms: &terms,
        weight_deltas: &wd,
        truth_deltas: &no_truth_history,
        params: solver,
    };
    let solved = solve(&model, init, &sources, solver);
    Ok(assemble(t, grids, solved, &no_truth_history, &wd, |_| None))
}

/// Classic truth discovery: SST with no history at all.
pub fn run_baseline_td<S: SourceKey>(
    observations: &[Observation<S>],
    grids: &[GridId],
    solver: &SolverParams,
    t: Cycle,
) -> Result<CycleResult<S>> {
    run_sst(observations, grids, &BTreeMap::new(), &TemporalParams::default(), solver, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truthdisc::GridStatus;

    fn obs(source: u32, grid: u32, value: f64) -> Observation<u32> {
        Observation {
            source,
            grid: GridId(grid),
            value,
            cycle: 0,
        }
    }

    #[test]
    fn unobserved_grid_is_unestimated() {
        let grids = [GridId(0), GridId(1)];
        let r = run_baseline_td(&[obs(1, 0, 5.0)], &grids, &SolverParams::default(), 0).unwrap();
        assert_eq!(r.truth(GridId(0)), Some(5.0));
        assert_eq!(r.status(GridId(1)), Some(GridStatus::Unestimated));
    }

    #[test]
    fn outlier_source_loses_weight() {
        let grids: Vec<GridId> = (0..3).map(GridId).collect();
        let mut o = Vec::new();
        for g in 0..3 {
            o.push(obs(1, g, 50.0 + f64::from(g)));
            o.push(obs(2, g, 50.5 + f64::from(g)));
            o.push(obs(3, g, 80.0));
        }
        let r = run_baseline_td(&o, &grids, &SolverParams::default(), 0).unwrap();
        assert!(r.weights[&3] < r.weights[&1]);
        assert!(r.weights[&3] < r.weights[&2]);
        assert!(r.diagnostics.converged);
    }

    #[test]
    fn weight_history_only_reparametrises() {
        let grids = [GridId(0)];
        let o = [obs(1, 0, 10.0), obs(2, 0, 20.0)];
        let mut hist = BTreeMap::new();
        hist.insert(1u32, WeightHistory::from_entries(vec![(0, 5.0)]).unwrap());
        let p = TemporalParams::default();
        let with = run_sst(&o, &grids, &hist, &p, &SolverParams::default(), 1).unwrap();
        let without = run_sst(&o, &grids, &BTreeMap::new(), &p, &SolverParams::default(), 1).unwrap();
        // the combined weight is pinned by the log ratio, so history changes w' only
        assert!((with.truth(GridId(0)).unwrap() - without.truth(GridId(0)).unwrap()).abs() < 1e-12);
        assert!((with.weights[&1] - without.weights[&1]).abs() < 1e-12);
    }
}
