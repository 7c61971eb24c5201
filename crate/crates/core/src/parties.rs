//! Vehicles, RSUs, the trusted manager, and the EAirQ server-side fusion.
//!
//! The trusted manager (TM) is the only party that can link a pseudonym to a
//! real identity. The server sees pseudonymous reports, asks the TM for the
//! weight histories behind a list of pseudonyms, and hands the final weights
//! back for the TM to file under the right identities.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ThetaTable;
use crate::ids::{Cycle, GridId, SourceId};
use crate::privacy::{grid_perturb, value_perturb, PerturbKey, PerturbationParams, PerturbedReport};
use crate::rng::{self, Stream};
use crate::secmask::{build_masked_report, aggregate_reports, solve_masked, Codec, InitRule, MaskState, MaskedReport};
use crate::temporal::{TemporalParams, TruthHistory, WeightHistory};
use crate::truthdisc::{run_sst, CycleResult, GridEstimate, GridStatus, Histories, Observation, SolverParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceProfile {
    pub rid: SourceId,
    /// Multiplicative deviation of this source's readings.
    pub kappa: f64,
    /// Ground-truth label, for evaluation only.
    pub bad: bool,
}

/// Per-cycle pseudonym. Serialized as `"<cycle>:<token hex>"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PseudoId {
    pub cycle: Cycle,
    pub token: u64,
}

impl fmt::Display for PseudoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:016x}", self.cycle, self.token)
    }
}

impl FromStr for PseudoId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::MalformedReport(format!("bad pseudo-id {s:?}"));
        let (c, t) = s.split_once(':').ok_or_else(bad)?;
        Ok(PseudoId {
            cycle: c.parse().map_err(|_| bad())?,
            token: u64::from_str_radix(t, 16).map_err(|_| bad())?,
        })
    }
}

impl Serialize for PseudoId {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PseudoId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Application-level adjustment the TM may apply before filing a weight.
pub trait WeightPolicy: Send + Sync {
    fn adjust(&self, _rid: SourceId, weight: f64, _cycle: Cycle) -> f64 {
        weight
    }
}

/// Files weights unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoPolicy;

impl WeightPolicy for NoPolicy {}

/// Why a pseudonym could not be resolved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolveError {
    Unknown,
    Stale,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRequest {
    pub pids: Vec<PseudoId>,
}

/// Histories in request order; `null` marks a pseudonym that did not resolve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub histories: Vec<Option<Vec<(Cycle, f64)>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendSummary {
    pub appended: usize,
    pub unknown: usize,
    pub duplicates: usize,
}

/// The TM-private ledger.
pub struct TrustedManager {
    rng: Stream,
    registered: BTreeSet<SourceId>,
    histories: BTreeMap<SourceId, WeightHistory>,
    cycle: Option<Cycle>,
    pids: BTreeMap<PseudoId, SourceId>,
    issued: BTreeMap<SourceId, PseudoId>,
    tokens: HashSet<u64>,
    policy: Box<dyn WeightPolicy>,
    appended_total: usize,
    participants_total: usize,
}

impl fmt::Debug for TrustedManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustedManager")
            .field("registered", &self.registered.len())
            .field("cycle", &self.cycle)
            .field("pids", &self.pids.len())
            .finish_non_exhaustive()
    }
}

impl TrustedManager {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed, "tm/pseudonyms", &[]),
            registered: BTreeSet::new(),
            histories: BTreeMap::new(),
            cycle: None,
            pids: BTreeMap::new(),
            issued: BTreeMap::new(),
            tokens: HashSet::new(),
            policy: Box::new(NoPolicy),
            appended_total: 0,
            participants_total: 0,
        }
    }

    pub fn with_policy(mut self, policy: Box<dyn WeightPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn register(&mut self, rid: SourceId) {
        self.registered.insert(rid);
    }

    /// Starts a cycle; every earlier pseudonym becomes stale.
    pub fn begin_cycle(&mut self, cycle: Cycle) {
        self.cycle = Some(cycle);
        self.pids.clear();
        self.issued.clear();
    }

    pub fn current_cycle(&self) -> Option<Cycle> {
        self.cycle
    }

    /// A fresh token for `rid` in the current cycle; asking twice returns the same one.
    pub fn issue_pseudo_id(&mut self, rid: SourceId) -> Result<PseudoId> {
        if !self.registered.contains(&rid) {
            return Err(Error::Unregistered(rid.0));
        }
        let cycle = self
            .cycle
            .ok_or_else(|| Error::Protocol("pseudonym requested before the first cycle".into()))?;
        if let Some(&pid) = self.issued.get(&rid) {
            return Ok(pid);
        }
        let token = loop {
            let t: u64 = self.rng.random();
            if self.tokens.insert(t) {
                break t;
            }
        };
        let pid = PseudoId { cycle, token };
        self.pids.insert(pid, rid);
        self.issued.insert(rid, pid);
        Ok(pid)
    }

    fn lookup(&self, pid: &PseudoId) -> std::result::Result<SourceId, ResolveError> {
        match self.pids.get(pid) {
            Some(&rid) => Ok(rid),
            None if Some(pid.cycle) != self.cycle => Err(ResolveError::Stale),
            None => Err(ResolveError::Unknown),
        }
    }

    /// Weight histories behind `pids`, in order. Identities never leave the TM.
    pub fn resolve_weight_histories(&self, pids: &[PseudoId]) -> Vec<std::result::Result<WeightHistory, ResolveError>> {
        pids.iter()
            .map(|pid| {
                self.lookup(pid)
                    .map(|rid| self.histories.get(&rid).cloned().unwrap_or_default())
            })
            .collect()
    }

    pub fn respond(&self, request: &HistoryRequest) -> HistoryResponse {
        HistoryResponse {
            histories: self
                .resolve_weight_histories(&request.pids)
                .into_iter()
                .map(|r| r.ok().map(|h| h.entries().to_vec()))
                .collect(),
        }
    }

    /// Files the final weights of this cycle under the real identities.
    pub fn append_final_weights(&mut self, weights: &BTreeMap<PseudoId, f64>, cycle: Cycle) -> AppendSummary {
        let mut summary = AppendSummary::default();
        for (pid, &w) in weights {
            let rid = match self.lookup(pid) {
                Ok(rid) => rid,
                Err(e) => {
                    log::error!("cannot file weight for pseudonym {pid}: {e:?}");
                    summary.unknown += 1;
                    continue;
                }
            };
            let w = self.policy.adjust(rid, w, cycle);
            match self.histories.entry(rid).or_default().push(cycle, w) {
                Ok(()) => summary.appended += 1,
                Err(_) => {
                    log::error!("second weight for pseudonym {pid} in cycle {cycle}");
                    summary.duplicates += 1;
                }
            }
        }
        self.appended_total += summary.appended;
        self.participants_total += weights.len();
        summary
    }

    /// Total entries filed and total weights offered, across all cycles.
    pub fn ledger_totals(&self) -> (usize, usize) {
        (self.appended_total, self.participants_total)
    }

    /// Stored entries across all identities.
    pub fn stored_entries(&self) -> usize {
        self.histories.values().map(WeightHistory::len).sum()
    }

    /// For tests and evaluation: the history of a real identity.
    pub fn history_of(&self, rid: SourceId) -> Option<&WeightHistory> {
        self.histories.get(&rid)
    }
}

/// Reports an RSU forwards to the server. RSUs only route.
#[derive(Clone, Debug, PartialEq)]
pub struct RsuBatch<R> {
    pub rsu: GridId,
    pub reports: Vec<R>,
}

/// Groups `(rsu, report)` uploads per RSU, preserving arrival order within each.
pub fn rsu_collect<R>(uploads: impl IntoIterator<Item = (GridId, R)>) -> Vec<RsuBatch<R>> {
    let mut by: BTreeMap<GridId, Vec<R>> = BTreeMap::new();
    for (rsu, r) in uploads {
        by.entry(rsu).or_default().push(r);
    }
    by.into_iter().map(|(rsu, reports)| RsuBatch { rsu, reports }).collect()
}

/// Server side: concatenation of the batches in RSU order.
pub fn server_receive<R>(batches: Vec<RsuBatch<R>>) -> Vec<R> {
    batches.into_iter().flat_map(|b| b.reports).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandlingParams {
    /// Minimum perturbed report count for a grid to use SST.
    pub tau: u32,
}

impl Default for HandlingParams {
    fn default() -> Self {
        Self { tau: 10 }
    }
}

impl HandlingParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("handling.tau must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which path produced a grid's final truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Sst,
    MaskedSt,
    CarriedForward,
    Unestimated,
}

#[derive(Clone, Debug)]
pub struct EairqOutcome {
    /// Final truths and fused weights.
    pub result: CycleResult<PseudoId>,
    pub provenance: BTreeMap<GridId, Provenance>,
    pub report_counts: BTreeMap<GridId, usize>,
    pub st: CycleResult<PseudoId>,
    pub sst: CycleResult<PseudoId>,
    pub filed: AppendSummary,
    /// Pseudonyms the TM could not resolve; they start from an empty history.
    pub unresolved: usize,
}

/// Shared, cycle-independent inputs of the EAirQ server.
#[derive(Clone, Debug)]
pub struct EairqContext<'a> {
    pub grids: &'a [GridId],
    pub temporal: &'a TemporalParams,
    pub solver: &'a SolverParams,
    pub handling: &'a HandlingParams,
    pub codec: &'a Codec,
    pub init: &'a InitRule,
}

/// One EAirQ cycle on the server.
///
/// Grids with at least `tau` perturbed reports take the SST truth from the
/// perturbed data; the rest take masked ST on the unperturbed data. Each
/// source's final weight is the mean of its ST and SST weights (or the single
/// one it has), and is filed with the TM. Estimated truths are appended to
/// `truths`.
pub fn eairq_handle_cycle(
    masked: &[MaskedReport<PseudoId>],
    perturbed: &[PerturbedReport<PseudoId>],
    tm: &mut TrustedManager,
    truths: &mut BTreeMap<GridId, TruthHistory>,
    ctx: &EairqContext<'_>,
    t: Cycle,
) -> Result<EairqOutcome> {
    let pids: BTreeSet<PseudoId> = masked
        .iter()
        .map(|r| r.pseudo_id)
        .chain(perturbed.iter().map(|r| r.pseudo_id))
        .collect();
    let pid_list: Vec<PseudoId> = pids.iter().copied().collect();
    let mut unresolved = 0;
    let mut weights = BTreeMap::new();
    for (pid, h) in pid_list.iter().zip(tm.resolve_weight_histories(&pid_list)) {
        match h {
            Ok(h) => {
                weights.insert(*pid, h);
            }
            Err(e) => {
                log::warn!("pseudonym {pid} did not resolve: {e:?}");
                unresolved += 1;
            }
        }
    }
    let histories = Histories {
        weights,
        truths: std::mem::take(truths),
    };
    let outcome = handle_with(masked, perturbed, &histories, ctx, t);
    *truths = histories.truths;
    let (result, provenance, report_counts, st, sst) = outcome?;
    for (&g, e) in &result.truths {
        if let (GridStatus::Estimated, Some(v)) = (e.status, e.value) {
            truths.entry(g).or_default().push(t, v)?;
        }
    }
    let filed = tm.append_final_weights(&result.weights, t);
    Ok(EairqOutcome {
        result,
        provenance,
        report_counts,
        st,
        sst,
        filed,
        unresolved,
    })
}

type Handled = (
    CycleResult<PseudoId>,
    BTreeMap<GridId, Provenance>,
    BTreeMap<GridId, usize>,
    CycleResult<PseudoId>,
    CycleResult<PseudoId>,
);

fn handle_with(
    masked: &[MaskedReport<PseudoId>],
    perturbed: &[PerturbedReport<PseudoId>],
    histories: &Histories<PseudoId>,
    ctx: &EairqContext<'_>,
    t: Cycle,
) -> Result<Handled> {
    let chis = aggregate_reports(masked, ctx.codec)?;
    let st = solve_masked(&chis, ctx.grids, histories, ctx.temporal, ctx.solver, ctx.init, t)?;

    let mut obs = Vec::new();
    let mut counts: BTreeMap<GridId, usize> = ctx.grids.iter().map(|&g| (g, 0)).collect();
    for r in perturbed {
        r.validate()?;
        for &(grid, value) in &r.values {
            *counts
                .get_mut(&grid)
                .ok_or_else(|| Error::Protocol(format!("perturbed report for unknown grid {grid}")))? += 1;
            obs.push(Observation {
                source: r.pseudo_id,
                grid,
                value,
                cycle: t,
            });
        }
    }
    let sst = run_sst(&obs, ctx.grids, &histories.weights, ctx.temporal, ctx.solver, t)?;

    let tau = ctx.handling.tau as usize;
    let mut provenance = BTreeMap::new();
    let mut final_truths = BTreeMap::new();
    for &g in ctx.grids {
        let dense = counts[&g] >= tau;
        let (est, prov) = match (dense, sst.truths.get(&g), st.truths.get(&g)) {
            (true, Some(e), _) if e.status == GridStatus::Estimated => (*e, Provenance::Sst),
            (_, _, Some(e)) => match e.status {
                GridStatus::Estimated => (*e, Provenance::MaskedSt),
                GridStatus::CarriedForward => (*e, Provenance::CarriedForward),
                GridStatus::Unestimated => (GridEstimate::UNESTIMATED, Provenance::Unestimated),
            },
            _ => (GridEstimate::UNESTIMATED, Provenance::Unestimated),
        };
        provenance.insert(g, prov);
        final_truths.insert(g, est);
    }

    let mut fused = BTreeMap::new();
    let sources: BTreeSet<PseudoId> = st.weights.keys().chain(sst.weights.keys()).copied().collect();
    for s in sources {
        let w = match (st.weights.get(&s), sst.weights.get(&s)) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) | (None, Some(a)) => *a,
            (None, None) => unreachable!(),
        };
        fused.insert(s, w);
    }

    let mut diagnostics = st.diagnostics.clone();
    diagnostics.floor_events += sst.diagnostics.floor_events;
    diagnostics.clamp_events += sst.diagnostics.clamp_events;
    diagnostics.converged &= sst.diagnostics.converged;
    let result = CycleResult {
        cycle: t,
        truths: final_truths,
        weights: fused,
        iterations: st.iterations.max(sst.iterations),
        diagnostics,
    };
    Ok((result, provenance, counts, st, sst))
}

/// Counters a vehicle reports about its own uploads, for instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VehicleStats {
    pub additions: u64,
    pub dropped: usize,
    pub imitated: usize,
    pub uncovered: usize,
    pub fallbacks: usize,
}

/// Everything a vehicle needs to prepare its uploads for one cycle.
#[derive(Clone, Debug)]
pub struct VehicleContext<'a> {
    pub thetas: &'a ThetaTable,
    pub codec: &'a Codec,
    pub perturbation: &'a PerturbationParams,
    /// Published truths of the previous cycle.
    pub prev_truths: &'a BTreeMap<GridId, f64>,
    pub seed: u64,
    /// Separates the masks of independent pipelines sharing a seed.
    pub domain: &'a str,
}

/// A vehicle's EAirQ uploads: masked raw data and perturbed data under one pseudonym.
pub fn vehicle_uploads(
    rid: SourceId,
    pid: PseudoId,
    observations: &[(GridId, f64)],
    ctx: &VehicleContext<'_>,
    cycle: Cycle,
) -> Result<(MaskedReport<PseudoId>, PerturbedReport<PseudoId>, VehicleStats)> {
    let masks = MaskState::new(ctx.seed, ctx.domain, u64::from(rid.0), cycle);
    let (masked, additions) = build_masked_report(pid, observations, ctx.thetas, &masks, ctx.codec, cycle)?;
    let key = PerturbKey {
        seed: ctx.seed,
        rid: u64::from(rid.0),
        cycle,
    };
    let gp = grid_perturb(observations, ctx.thetas.grids(), ctx.prev_truths, ctx.perturbation, &key);
    let values = value_perturb(&gp.entries, ctx.perturbation.lambda2, &key);
    let stats = VehicleStats {
        additions,
        dropped: gp.dropped,
        imitated: gp.imitated,
        uncovered: gp.uncovered,
        fallbacks: gp.fallbacks,
    };
    Ok((
        masked,
        PerturbedReport {
            pseudo_id: pid,
            cycle,
            values,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_theta_table, Grid, SpatialParams};
    use crate::temporal::History;

    fn tm_with(n: u32) -> TrustedManager {
        let mut tm = TrustedManager::new(1);
        for i in 0..n {
            tm.register(SourceId(i));
        }
        tm
    }

    #[test]
    fn pseudonyms_are_fresh() {
        let mut tm = tm_with(2);
        tm.begin_cycle(0);
        let a0 = tm.issue_pseudo_id(SourceId(0)).unwrap();
        let b0 = tm.issue_pseudo_id(SourceId(1)).unwrap();
        assert_ne!(a0, b0);
        assert_eq!(a0, tm.issue_pseudo_id(SourceId(0)).unwrap());
        tm.begin_cycle(1);
        let a1 = tm.issue_pseudo_id(SourceId(0)).unwrap();
        assert_ne!(a0.token, a1.token);
        assert!(matches!(tm.issue_pseudo_id(SourceId(7)), Err(Error::Unregistered(7))));
    }

    #[test]
    fn no_collisions_in_ten_thousand() {
        let mut tm = tm_with(100);
        let mut seen = HashSet::new();
        for c in 0..100 {
            tm.begin_cycle(c);
            for i in 0..100 {
                assert!(seen.insert(tm.issue_pseudo_id(SourceId(i)).unwrap().token));
            }
        }
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn pseudo_id_text_form_round_trips() {
        let p = PseudoId { cycle: 12, token: 0xdead_beef };
        assert_eq!(p.to_string(), "12:00000000deadbeef");
        assert_eq!(p.to_string().parse::<PseudoId>().unwrap(), p);
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"12:00000000deadbeef\"");
        assert!("zz".parse::<PseudoId>().is_err());
    }

    #[test]
    fn histories_resolve_in_order() {
        let mut tm = tm_with(2);
        for c in 0..3 {
            tm.begin_cycle(c);
            let p = tm.issue_pseudo_id(SourceId(0)).unwrap();
            tm.append_final_weights(&BTreeMap::from([(p, 0.1 * f64::from(c + 1))]), c);
        }
        tm.begin_cycle(3);
        let old = tm.issue_pseudo_id(SourceId(0)).unwrap();
        let new = tm.issue_pseudo_id(SourceId(1)).unwrap();
        let r = tm.resolve_weight_histories(&[new, old]);
        assert!(r[0].as_ref().unwrap().is_empty());
        let h = r[1].as_ref().unwrap();
        assert_eq!(h.entries().iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        let stale = PseudoId { cycle: 1, token: 5 };
        let unknown = PseudoId { cycle: 3, token: 5 };
        let r = tm.resolve_weight_histories(&[stale, unknown]);
        assert_eq!(r[0], Err(ResolveError::Stale));
        assert_eq!(r[1], Err(ResolveError::Unknown));
    }

    #[test]
    fn response_schema_has_no_identity() {
        let mut tm = tm_with(1);
        tm.begin_cycle(0);
        let p = tm.issue_pseudo_id(SourceId(0)).unwrap();
        tm.append_final_weights(&BTreeMap::from([(p, 0.4)]), 0);
        tm.begin_cycle(1);
        let p = tm.issue_pseudo_id(SourceId(0)).unwrap();
        let req: HistoryRequest = serde_json::from_str(&serde_json::to_string(&HistoryRequest { pids: vec![p] }).unwrap()).unwrap();
        let json = serde_json::to_value(tm.respond(&req)).unwrap();
        assert_eq!(json, serde_json::json!({"histories": [[[0, 0.4]]]}));
    }

    #[test]
    fn appends_are_counted_and_deduplicated() {
        let mut tm = tm_with(500);
        tm.begin_cycle(0);
        let w: BTreeMap<PseudoId, f64> = (0..500).map(|i| (tm.issue_pseudo_id(SourceId(i)).unwrap(), 0.4)).collect();
        let s = tm.append_final_weights(&w, 0);
        assert_eq!(s.appended, 500);
        let again = tm.append_final_weights(&w, 0);
        assert_eq!(again.duplicates, 500);
        assert_eq!(tm.stored_entries(), 500);
        let ghost = BTreeMap::from([(PseudoId { cycle: 0, token: 1 }, 1.0)]);
        assert_eq!(tm.append_final_weights(&ghost, 0).unknown, 1);
        assert_eq!(tm.history_of(SourceId(3)).unwrap(), &History::from_entries(vec![(0, 0.4)]).unwrap());
    }

    #[test]
    fn rsus_only_route() {
        let empty: Vec<RsuBatch<u8>> = rsu_collect(Vec::new());
        assert!(empty.is_empty());
        let b = rsu_collect(vec![(GridId(1), 'a'), (GridId(0), 'b'), (GridId(1), 'c')]);
        assert_eq!(b[1].reports, vec!['a', 'c']);
        assert_eq!(server_receive(b).len(), 3);
    }

    struct World {
        thetas: ThetaTable,
        tm: TrustedManager,
        pids: Vec<PseudoId>,
    }

    fn world(n: u32) -> World {
        let grids: Vec<Grid> = (0..3)
            .map(|i| Grid::new(GridId(i), 39.9, 116.4 + 0.02 * f64::from(i)).unwrap())
            .collect();
        let thetas = build_theta_table(&grids, &SpatialParams { omega_km: 2.0, cutoff_km: 3.0 }).unwrap();
        let mut tm = tm_with(n);
        tm.begin_cycle(0);
        let pids = (0..n).map(|i| tm.issue_pseudo_id(SourceId(i)).unwrap()).collect();
        World { thetas, tm, pids }
    }

    fn uploads(w: &World, obs: &[(u32, u32, f64)]) -> (Vec<MaskedReport<PseudoId>>, Vec<PerturbedReport<PseudoId>>) {
        let p = PerturbationParams {
            p1: 0.0,
            p2: 0.0,
            ..PerturbationParams::default()
        };
        let prev = BTreeMap::new();
        let ctx = VehicleContext {
            thetas: &w.thetas,
            codec: &Codec::default(),
            perturbation: &p,
            prev_truths: &prev,
            seed: 3,
            domain: "eairq",
        };
        let mut by: BTreeMap<u32, Vec<(GridId, f64)>> = BTreeMap::new();
        for &(s, g, v) in obs {
            by.entry(s).or_default().push((GridId(g), v));
        }
        let (mut m, mut pr) = (Vec::new(), Vec::new());
        for (s, os) in by {
            let (a, b, _) = vehicle_uploads(SourceId(s), w.pids[s as usize], &os, &ctx, 0).unwrap();
            m.push(a);
            pr.push(b);
        }
        (m, pr)
    }

    fn run(w: &mut World, obs: &[(u32, u32, f64)], tau: u32) -> EairqOutcome {
        let (m, p) = uploads(w, obs);
        let grids = w.thetas.grids().to_vec();
        let ctx = EairqContext {
            grids: &grids,
            temporal: &TemporalParams::default(),
            solver: &SolverParams::default(),
            handling: &HandlingParams { tau },
            codec: &Codec::default(),
            init: &InitRule::new(1, "eairq"),
        };
        eairq_handle_cycle(&m, &p, &mut w.tm, &mut BTreeMap::new(), &ctx, 0).unwrap()
    }

    const OBS: [(u32, u32, f64); 6] = [(0, 0, 50.0), (1, 0, 54.0), (2, 0, 52.0), (0, 1, 61.0), (1, 2, 70.0), (2, 2, 66.0)];

    #[test]
    fn tau_one_uses_sst_everywhere() {
        let mut w = world(3);
        let out = run(&mut w, &OBS, 1);
        assert!(out.provenance.values().all(|&p| p == Provenance::Sst));
        for (g, e) in &out.result.truths {
            assert_eq!(e.value, out.sst.truth(*g));
        }
    }

    #[test]
    fn huge_tau_is_pure_masked_st() {
        let mut w = world(3);
        let out = run(&mut w, &OBS, u32::MAX);
        assert!(out.provenance.values().all(|&p| p == Provenance::MaskedSt));
        for (g, e) in &out.result.truths {
            assert_eq!(e.value, out.st.truth(*g));
        }
    }

    #[test]
    fn fused_weights_average_both_solvers() {
        let mut w = world(3);
        let out = run(&mut w, &OBS, 3);
        assert_eq!(out.provenance[&GridId(0)], Provenance::Sst);
        assert_eq!(out.provenance[&GridId(1)], Provenance::MaskedSt);
        for (s, &f) in &out.result.weights {
            assert_eq!(f, (out.st.weights[s] + out.sst.weights[s]) / 2.0);
        }
        assert_eq!(out.filed.appended, 3);
        assert_eq!(w.tm.stored_entries(), 3);
    }
}
