//! Plaintext truth-discovery solvers.
//!
//! All solvers here alternate two closed-form block updates until the
//! estimated truths stop moving:
//!
//! 1. weights: every source gets `log(total_distance / own_distance)` as its
//!    combined weight, which is the minimiser of the weighted objective under
//!    the `sum(exp(-w)) = 1` constraint;
//! 2. truths: every grid gets the weighted mean of the observations that
//!    reach it.
//!
//! ST reuses observations across nearby grids through the spatial table and
//! mixes in history through the temporal deltas. SST only looks at a grid's
//! own observations. The baseline is SST without any history.

mod sst;
mod st;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Cycle, GridId, SourceKey};
use crate::temporal::{self, Delta, TemporalParams, TruthHistory, WeightHistory};

pub use sst::{run_baseline_td, run_sst, sst_objective, sst_update_truths, sst_update_weights};
pub use st::{objective, run_st, st_update_truths, st_update_weights, SpatialTerms, Term};

/// One sensory reading of a source for a grid in a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation<S> {
    pub source: S,
    pub grid: GridId,
    pub value: f64,
    pub cycle: Cycle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Stop once the largest relative truth change drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Per-source distances are floored here so the log ratio stays finite.
    pub distance_floor: f64,
    /// Combined weights are clamped to `[0, weight_cap]`.
    pub weight_cap: f64,
    /// Initial temporary weight; `None` means `1/n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_weight: Option<f64>,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 100,
            distance_floor: 1e-12,
            weight_cap: 50.0,
            initial_weight: None,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("solver.tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("solver.max_iterations must be >= 1".into()));
        }
        if !(self.distance_floor > 0.0) {
            return Err(Error::Config(format!(
                "solver.distance_floor must be > 0, got {}",
                self.distance_floor
            )));
        }
        if !(self.weight_cap > 0.0) {
            return Err(Error::Config(format!("solver.weight_cap must be > 0, got {}", self.weight_cap)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridStatus {
    Estimated,
    CarriedForward,
    Unestimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    pub value: Option<f64>,
    pub status: GridStatus,
}

impl GridEstimate {
    pub fn estimated(v: f64) -> Self {
        Self {
            value: Some(v),
            status: GridStatus::Estimated,
        }
    }

    pub fn carried(v: f64) -> Self {
        Self {
            value: Some(v),
            status: GridStatus::CarriedForward,
        }
    }

    pub const UNESTIMATED: GridEstimate = GridEstimate {
        value: None,
        status: GridStatus::Unestimated,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Objective after every half-step (weights, then truths) of every iteration.
    pub objective_trace: Vec<f64>,
    /// `|sum(exp(-w)) - 1|` before clamping, one entry per weight update.
    pub constraint_residuals: Vec<f64>,
    pub floor_events: usize,
    pub clamp_events: usize,
    /// Masked distances that came out negative or within quantisation noise.
    pub negative_distance_events: usize,
    pub converged: bool,
}

impl SolveDiagnostics {
    pub fn max_constraint_residual(&self) -> f64 {
        self.constraint_residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Largest increase between consecutive objective values.
    pub fn max_objective_increase(&self) -> f64 {
        self.objective_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Per-cycle solver output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleResult<S: Ord> {
    pub cycle: Cycle,
    pub truths: BTreeMap<GridId, GridEstimate>,
    /// Final combined weights of the sources that reported this cycle.
    pub weights: BTreeMap<S, f64>,
    pub iterations: usize,
    pub diagnostics: SolveDiagnostics,
}

impl<S: SourceKey> CycleResult<S> {
    pub fn truth(&self, grid: GridId) -> Option<f64> {
        self.truths.get(&grid).and_then(|e| e.value)
    }

    pub fn status(&self, grid: GridId) -> Option<GridStatus> {
        self.truths.get(&grid).map(|e| e.status)
    }

    /// Every truth and weight is finite.
    pub fn check_finite(&self) -> std::result::Result<(), String> {
        for (g, e) in &self.truths {
            if let Some(v) = e.value {
                if !v.is_finite() {
                    return Err(format!("truth of grid {g} is {v}"));
                }
            }
        }
        for (s, w) in &self.weights {
            if !w.is_finite() {
                return Err(format!("weight of source {s:?} is {w}"));
            }
        }
        Ok(())
    }
}

/// Weight and truth histories owned by one server.
#[derive(Clone, Debug, PartialEq)]
pub struct Histories<S: Ord> {
    pub weights: BTreeMap<S, WeightHistory>,
    pub truths: BTreeMap<GridId, TruthHistory>,
}

impl<S: Ord> Default for Histories<S> {
    fn default() -> Self {
        Self {
            weights: BTreeMap::new(),
            truths: BTreeMap::new(),
        }
    }
}

impl<S: SourceKey> Histories<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight_deltas<'a>(
        &self,
        sources: impl IntoIterator<Item = &'a S>,
        p: &TemporalParams,
        t: Cycle,
    ) -> Result<BTreeMap<S, Delta>>
    where
        S: 'a,
    {
        weight_deltas(&self.weights, sources, p, t)
    }

    pub fn truth_deltas(&self, grids: &[GridId], p: &TemporalParams, t: Cycle) -> Result<BTreeMap<GridId, Delta>> {
        let mut out = BTreeMap::new();
        for &g in grids {
            if let Some(h) = self.truths.get(&g) {
                out.insert(g, temporal::delta_for_truth(h, p, t)?);
            }
        }
        Ok(out)
    }

    pub fn last_truth(&self, grid: GridId) -> Option<f64> {
        self.truths.get(&grid).and_then(|h| h.last()).map(|(_, v)| v)
    }

    /// Appends the cycle's final weights and its freshly estimated truths.
    /// Carried-forward grids add nothing.
    pub fn append(&mut self, result: &CycleResult<S>) -> Result<()> {
        for (&s, &w) in &result.weights {
            self.weights.entry(s).or_default().push(result.cycle, w)?;
        }
        for (&g, e) in &result.truths {
            if let (GridStatus::Estimated, Some(v)) = (e.status, e.value) {
                self.truths.entry(g).or_default().push(result.cycle, v)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn weight_deltas<'a, S: SourceKey + 'a>(
    histories: &BTreeMap<S, WeightHistory>,
    sources: impl IntoIterator<Item = &'a S>,
    p: &TemporalParams,
    t: Cycle,
) -> Result<BTreeMap<S, Delta>> {
    let mut out = BTreeMap::new();
    for s in sources {
        let d = match histories.get(s) {
            Some(h) => temporal::delta_for_weight(h, p, t)?,
            None => Delta::IDENTITY,
        };
        out.insert(*s, d);
    }
    Ok(out)
}

/// Outcome of one weight update.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate<S: Ord> {
    /// Temporary weights `w'`.
    pub temp: BTreeMap<S, f64>,
    /// `|sum(exp(-(delta3 + delta4 * w'))) - 1|` before clamping.
    pub constraint_residual: f64,
    pub floors: usize,
    pub clamps: usize,
}

/// Turns per-source distances into temporary weights.
///
/// The combined weight is `log(total / own)`, clamped to `[0, weight_cap]`,
/// and the temporary weight is recovered through the source's delta pair.
pub fn log_ratio_weights<S: SourceKey>(
    distances: &BTreeMap<S, f64>,
    deltas: &BTreeMap<S, Delta>,
    params: &SolverParams,
) -> WeightUpdate<S> {
    let mut floors = 0;
    let floored: Vec<(S, f64)> = distances
        .iter()
        .map(|(&s, &d)| {
            if d < params.distance_floor {
                floors += 1;
                (s, params.distance_floor)
            } else {
                (s, d)
            }
        })
        .collect();
    let total: f64 = floored.iter().map(|&(_, d)| d).sum();
    let mut clamps = 0;
    let mut exp_sum = 0.0;
    let mut temp = BTreeMap::new();
    for (s, d) in floored {
        let combined = (total / d).ln();
        exp_sum += d / total;
        let clamped = combined.clamp(0.0, params.weight_cap);
        if clamped != combined {
            clamps += 1;
        }
        let delta = deltas.get(&s).copied().unwrap_or_default();
        temp.insert(s, delta.invert(clamped));
    }
    let constraint_residual = if temp.is_empty() { 0.0 } else { (exp_sum - 1.0).abs() };
    WeightUpdate {
        temp,
        constraint_residual,
        floors,
        clamps,
    }
}

/// A problem the coordinate-descent driver can iterate on.
pub(crate) trait CoordinateModel<S: SourceKey> {
    fn update_weights(&self, temp_truths: &BTreeMap<GridId, f64>) -> WeightUpdate<S>;
    fn update_truths(&self, temp_weights: &BTreeMap<S, f64>) -> BTreeMap<GridId, f64>;
    fn objective(&self, temp_weights: &BTreeMap<S, f64>, temp_truths: &BTreeMap<GridId, f64>) -> f64;
    fn truth_delta(&self, grid: GridId) -> Delta;
    /// Extra events the model counted while building its inputs.
    fn negative_distance_events(&self) -> usize {
        0
    }
}

pub(crate) struct Solved<S: Ord> {
    pub temp_truths: BTreeMap<GridId, f64>,
    pub temp_weights: BTreeMap<S, f64>,
    pub iterations: usize,
    pub diagnostics: SolveDiagnostics,
}

pub(crate) fn solve<S: SourceKey, M: CoordinateModel<S>>(
    model: &M,
    init_truths: BTreeMap<GridId, f64>,
    sources: &[S],
    params: &SolverParams,
) -> Solved<S> {
    let w0 = params
        .initial_weight
        .unwrap_or(1.0 / sources.len().max(1) as f64);
    let mut temp_weights: BTreeMap<S, f64> = sources.iter().map(|&s| (s, w0)).collect();
    let mut temp_truths = init_truths;
    let mut diag = SolveDiagnostics::default();
    let mut iterations = 0;
    if temp_truths.is_empty() {
        diag.converged = true;
        return Solved {
            temp_truths,
            temp_weights: BTreeMap::new(),
            iterations,
            diagnostics: diag,
        };
    }
    while iterations < params.max_iterations {
        iterations += 1;
        let wu = model.update_weights(&temp_truths);
        diag.constraint_residuals.push(wu.constraint_residual);
        diag.floor_events += wu.floors;
        diag.clamp_events += wu.clamps;
        temp_weights = wu.temp;
        diag.objective_trace.push(model.objective(&temp_weights, &temp_truths));

        let next = model.update_truths(&temp_weights);
        let change = next
            .iter()
            .map(|(&g, &v)| {
                let delta = model.truth_delta(g);
                let new = delta.apply(v);
                let old = temp_truths.get(&g).map_or(f64::INFINITY, |&o| delta.apply(o));
                (new - old).abs() / new.abs().max(1.0)
            })
            .fold(0.0, f64::max);
        temp_truths = next;
        diag.objective_trace.push(model.objective(&temp_weights, &temp_truths));
        if change < params.tolerance {
            diag.converged = true;
            break;
        }
    }
    diag.negative_distance_events = model.negative_distance_events();
    Solved {
        temp_truths,
        temp_weights,
        iterations,
        diagnostics: diag,
    }
}

/// Builds the cycle result: estimated grids take `delta1 + delta2 * v'`,
/// grids without data fall back to `carry`, the rest are unestimated.
pub(crate) fn assemble<S: SourceKey>(
    cycle: Cycle,
    grids: &[GridId],
    solved: Solved<S>,
    truth_deltas: &BTreeMap<GridId, Delta>,
    weight_deltas: &BTreeMap<S, Delta>,
    carry: impl Fn(GridId) -> Option<f64>,
) -> CycleResult<S> {
    let truths = grids
        .iter()
        .map(|&g| {
            let est = match solved.temp_truths.get(&g) {
                Some(&v) => {
                    GridEstimate::estimated(truth_deltas.get(&g).copied().unwrap_or_default().apply(v))
                }
                None => carry(g).map_or(GridEstimate::UNESTIMATED, GridEstimate::carried),
            };
            (g, est)
        })
        .collect();
    let weights = solved
        .temp_weights
        .iter()
        .map(|(&s, &w)| (s, weight_deltas.get(&s).copied().unwrap_or_default().apply(w)))
        .collect();
    CycleResult {
        cycle,
        truths,
        weights,
        iterations: solved.iterations,
        diagnostics: solved.diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_ratio_single_source_is_zero() {
        let d = BTreeMap::from([(1u32, 3.0)]);
        let wu = log_ratio_weights(&d, &BTreeMap::new(), &SolverParams::default());
        assert_eq!(wu.temp[&1], 0.0);
    }

    #[test]
    fn log_ratio_equal_distances() {
        let d = BTreeMap::from([(1u32, 2.0), (2, 2.0)]);
        let wu = log_ratio_weights(&d, &BTreeMap::new(), &SolverParams::default());
        assert!((wu.temp[&1] - 2f64.ln()).abs() < 1e-15);
        assert!((wu.temp[&2] - 0.6931).abs() < 1e-4);
        let s: f64 = wu.temp.values().map(|w| (-w).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(wu.constraint_residual < 1e-12);
    }

    #[test]
    fn log_ratio_respects_deltas() {
        let d = BTreeMap::from([(1u32, 1.0), (2, 3.0)]);
        let deltas = BTreeMap::from([(1u32, Delta { offset: 0.2, scale: 0.5 })]);
        let wu = log_ratio_weights(&d, &deltas, &SolverParams::default());
        let combined = 0.2 + 0.5 * wu.temp[&1];
        assert!((combined - 4f64.ln()).abs() < 1e-12);
        assert!((wu.temp[&2] - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_and_clamp_are_counted() {
        let params = SolverParams {
            weight_cap: 5.0,
            ..SolverParams::default()
        };
        let d = BTreeMap::from([(1u32, 0.0), (2, 10.0)]);
        let wu = log_ratio_weights(&d, &BTreeMap::new(), &params);
        assert_eq!(wu.floors, 1);
        assert_eq!(wu.clamps, 1);
        assert_eq!(wu.temp[&1], 5.0);
    }
}
