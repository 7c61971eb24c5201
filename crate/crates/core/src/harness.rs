//! Experiment configuration and the end-to-end cycle pipeline.
//!
//! One simulated world feeds every selected algorithm. Each algorithm owns
//! its histories and derives its masks and perturbations from its own stream
//! domain, so enabling another algorithm never changes the outputs of the
//! ones already selected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{build_theta_table, SpatialParams, ThetaTable};
use crate::ids::{Cycle, GridId, SourceId};
use crate::metrics::{self, MetricsTable, TruthRow, DEFAULT_THRESHOLDS};
use crate::parties::{
    eairq_handle_cycle, vehicle_uploads, EairqContext, HandlingParams, Provenance, PseudoId, TrustedManager,
    VehicleContext,
};
use crate::privacy::PerturbationParams;
use crate::secmask::{build_masked_report, run_airq, Codec, InitMode, InitRule, MaskState};
use crate::synth::{load_aqi_dataset, World, WorldParams};
use crate::temporal::{TemporalParams, TruthHistory};
use crate::truthdisc::{run_baseline_td, run_sst, run_st, CycleResult, GridStatus, Histories, Observation, SolverParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "TD")]
    Td,
    #[serde(rename = "ST", alias = "ST-plain")]
    St,
    #[serde(rename = "AirQ")]
    Airq,
    #[serde(rename = "SST", alias = "SST-plain")]
    Sst,
    #[serde(rename = "EAirQ")]
    Eairq,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::Td, Self::St, Self::Airq, Self::Sst, Self::Eairq];

    pub fn name(self) -> &'static str {
        match self {
            Self::Td => "TD",
            Self::St => "ST",
            Self::Airq => "AirQ",
            Self::Sst => "SST",
            Self::Eairq => "EAirQ",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TD" => Ok(Self::Td),
            "ST" | "ST-plain" => Ok(Self::St),
            "AirQ" => Ok(Self::Airq),
            "SST" | "SST-plain" => Ok(Self::Sst),
            "EAirQ" => Ok(Self::Eairq),
            _ => Err(Error::Config(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingParams {
    /// Fixed-point scale of the masking ring.
    pub scale: f64,
    /// Starting truths of the masked solve.
    pub init: InitMode,
}

impl Default for MaskingParams {
    fn default() -> Self {
        Self {
            scale: Codec::DEFAULT_SCALE,
            init: InitMode::Aggregate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsParams {
    pub thresholds: Vec<f64>,
    /// Algorithm the daily differences are taken against.
    pub base: Algorithm,
}

impl Default for MetricsParams {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            base: Algorithm::Airq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Hourly AQI CSV; synthetic truths are generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Threads for vehicle-side work; 0 picks the machine default.
    pub workers: usize,
    pub world: WorldParams,
    pub spatial: SpatialParams,
    pub temporal: TemporalParams,
    pub solver: SolverParams,
    pub perturbation: PerturbationParams,
    pub handling: HandlingParams,
    pub masking: MaskingParams,
    pub metrics: MetricsParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            algorithms: vec![Algorithm::Td, Algorithm::Airq, Algorithm::Eairq],
            dataset: None,
            out: PathBuf::from("out"),
            workers: 0,
            world: WorldParams::default(),
            spatial: SpatialParams::default(),
            temporal: TemporalParams::default(),
            solver: SolverParams::default(),
            perturbation: PerturbationParams::default(),
            handling: HandlingParams::default(),
            masking: MaskingParams::default(),
            metrics: MetricsParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file. A relative dataset path is taken
    /// relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(d), Some(parent)) = (&cfg.dataset, path.parent()) {
            if d.is_relative() {
                cfg.dataset = Some(parent.join(d));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".into()));
        }
        let mut seen = self.algorithms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.algorithms.len() {
            return Err(Error::Config("algorithms listed twice".into()));
        }
        if self.metrics.thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("metrics.thresholds must be positive".into()));
        }
        self.world.validate()?;
        self.spatial.validate()?;
        self.temporal.validate()?;
        self.solver.validate()?;
        self.perturbation.validate()?;
        self.handling.validate()?;
        Codec::new(self.masking.scale)?;
        Ok(())
    }

    /// SHA-256 of everything that influences results (not `out` or `workers`).
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out: PathBuf::new(),
            workers: 0,
            ..self.clone()
        };
        hex(&Sha256::digest(serde_json::to_vec(&canonical).unwrap_or_default()))
    }

    pub fn build_world(&self) -> Result<World> {
        match &self.dataset {
            Some(path) => {
                let (grids, truths) = load_aqi_dataset(path)?;
                World::from_dataset(&self.world, grids, truths, self.seed)
            }
            None => World::synthetic(&self.world, self.seed),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-algorithm event totals over a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounters {
    pub cycles: usize,
    pub iterations: usize,
    pub non_converged: usize,
    pub clamps: usize,
    pub floors: usize,
    pub negative_distances: usize,
    pub unestimated: usize,
    pub carried_forward: usize,
    /// Vehicle-side ring additions spent on masking.
    pub mask_additions: u64,
    pub dropped: usize,
    pub imitated: usize,
    pub uncovered: usize,
    /// Imitations seeded with the fixed fallback value.
    pub imitation_fallbacks: usize,
    pub unresolved_pseudonyms: usize,
    pub sst_grids: usize,
    pub masked_st_grids: usize,
}

impl EventCounters {
    fn record<S: crate::ids::SourceKey>(&mut self, r: &CycleResult<S>) {
        self.cycles += 1;
        self.iterations += r.iterations;
        self.non_converged += usize::from(!r.diagnostics.converged);
        self.clamps += r.diagnostics.clamp_events;
        self.floors += r.diagnostics.floor_events;
        self.negative_distances += r.diagnostics.negative_distance_events;
        for e in r.truths.values() {
            match e.status {
                GridStatus::Unestimated => self.unestimated += 1,
                GridStatus::CarriedForward => self.carried_forward += 1,
                GridStatus::Estimated => {}
            }
        }
    }
}

/// Compact per-cycle outcome of one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: Cycle,
    pub iterations: usize,
    pub converged: bool,
    pub participants: usize,
    pub max_constraint_residual: f64,
    pub max_objective_increase: f64,
}

impl CycleSummary {
    fn of<S: crate::ids::SourceKey>(r: &CycleResult<S>) -> Self {
        Self {
            cycle: r.cycle,
            iterations: r.iterations,
            converged: r.diagnostics.converged,
            participants: r.weights.len(),
            max_constraint_residual: r.diagnostics.max_constraint_residual(),
            max_objective_increase: r.diagnostics.max_objective_increase(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    pub grids: Vec<GridId>,
    pub cycles: BTreeMap<Algorithm, Vec<CycleSummary>>,
    /// Published estimates, algorithm-major, then cycle, then grid.
    pub truths: Vec<TruthRow>,
    pub metrics: MetricsTable,
    pub counters: BTreeMap<Algorithm, EventCounters>,
    pub thresholds: Vec<f64>,
    pub base: Algorithm,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    config_hash: String,
    seed: u64,
    algorithms: Vec<Algorithm>,
    grids: usize,
    cycles: usize,
    thresholds: Vec<f64>,
    base: Algorithm,
    counters: BTreeMap<Algorithm, EventCounters>,
    /// SHA-256 of each CSV output.
    outputs: BTreeMap<String, String>,
}

pub const OUTPUT_CSVS: [&str; 5] = ["diff.csv", "rmse_cycle.csv", "rmse_daily.csv", "truths.csv", "valid.csv"];

impl RunRecord {
    /// Writes the CSV tables and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut outputs = BTreeMap::new();
        for (name, bytes) in self.csv_files()? {
            outputs.insert(name.to_string(), hex(&Sha256::digest(&bytes)));
            fs::write(dir.join(name), bytes)?;
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            algorithms: self.algorithms.clone(),
            grids: self.grids.len(),
            cycles: self.cycles.values().map(Vec::len).max().unwrap_or(0),
            thresholds: self.thresholds.clone(),
            base: self.base,
            counters: self.counters.clone(),
            outputs,
        };
        let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(())
    }

    /// The five output CSVs as `(file name, bytes)`, in file-name order.
    pub fn csv_files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut truths = Vec::new();
        metrics::write_truths_csv(&self.truths, &mut truths)?;
        let mut files = self.metrics.csv_files()?;
        files.push(("truths.csv", truths));
        files.sort_by_key(|f| f.0);
        Ok(files)
    }

    /// SHA-256 over the output CSVs.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (_, bytes) in self.csv_files()? {
            h.update(&bytes);
        }
        Ok(hex(&h.finalize()))
    }

    pub fn counters(&self, algo: Algorithm) -> EventCounters {
        self.counters.get(&algo).cloned().unwrap_or_default()
    }
}

/// Recomputes the metric tables of a run directory from its `truths.csv`,
/// writing them into `out`.
pub fn recompute_metrics(input: &Path, out: &Path) -> Result<MetricsTable> {
    let rows = metrics::read_truths_csv(&input.join("truths.csv"))?;
    let (thresholds, base) = match fs::read(input.join("manifest.json")) {
        Ok(bytes) => {
            let m: Manifest = serde_json::from_slice(&bytes)?;
            (m.thresholds, m.base)
        }
        Err(_) => (DEFAULT_THRESHOLDS.to_vec(), Algorithm::Airq),
    };
    let table = MetricsTable::compute(&rows, &thresholds, base.name());
    fs::create_dir_all(out)?;
    table.write_csvs(out)?;
    Ok(table)
}

/// Everything one algorithm carries from cycle to cycle.
enum Pipeline {
    Td,
    St(Histories<SourceId>),
    Sst(Histories<SourceId>),
    Airq {
        histories: Histories<SourceId>,
        init: InitRule,
    },
    Eairq {
        tm: TrustedManager,
        truths: BTreeMap<GridId, TruthHistory>,
        published: BTreeMap<GridId, f64>,
        init: InitRule,
    },
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    grids: &'a [GridId],
    thetas: &'a ThetaTable,
    codec: &'a Codec,
}

impl Pipeline {
    fn new(algo: Algorithm, cfg: &ExperimentConfig, sources: usize) -> Self {
        match algo {
            Algorithm::Td => Self::Td,
            Algorithm::St => Self::St(Histories::new()),
            Algorithm::Sst => Self::Sst(Histories::new()),
            Algorithm::Airq => Self::Airq {
                histories: Histories::new(),
                init: InitRule::with_mode(cfg.seed, "airq", cfg.masking.init),
            },
            Algorithm::Eairq => {
                let mut tm = TrustedManager::new(crate::rng::derive(cfg.seed, "tm", &[]));
                for i in 0..sources {
                    tm.register(SourceId(i as u32));
                }
                Self::Eairq {
                    tm,
                    truths: BTreeMap::new(),
                    published: BTreeMap::new(),
                    init: InitRule::with_mode(cfg.seed, "eairq", cfg.masking.init),
                }
            }
        }
    }

    /// Runs one cycle and returns the published estimates.
    fn step(
        &mut self,
        obs: &[Observation<SourceId>],
        by_source: &BTreeMap<SourceId, Vec<(GridId, f64)>>,
        sh: &Shared<'_>,
        counters: &mut EventCounters,
        t: Cycle,
    ) -> Result<(BTreeMap<GridId, Option<f64>>, CycleSummary)> {
        let cfg = sh.cfg;
        let (truths, summary) = match self {
            Self::Td => {
                let r = run_baseline_td(obs, sh.grids, &cfg.solver, t)?;
                finish(&r, counters, "TD", t)?
            }
            Self::St(h) => {
                let r = run_st(obs, sh.thetas, h, &cfg.temporal, &cfg.solver, t)?;
                h.append(&r)?;
                finish(&r, counters, "ST", t)?
            }
            Self::Sst(h) => {
                let r = run_sst(obs, sh.grids, &h.weights, &cfg.temporal, &cfg.solver, t)?;
                h.append(&r)?;
                finish(&r, counters, "SST", t)?
            }
            Self::Airq { histories, init } => {
                let built: Vec<_> = by_source
                    .par_iter()
                    .map(|(&rid, o)| {
                        let masks = MaskState::new(cfg.seed, "airq", u64::from(rid.0), t);
                        build_masked_report(rid, o, sh.thetas, &masks, sh.codec, t)
                    })
                    .collect::<Result<_>>()?;
                let mut reports = Vec::with_capacity(built.len());
                for (r, adds) in built {
                    counters.mask_additions += adds;
                    reports.push(r);
                }
                let r = run_airq(&reports, sh.grids, histories, &cfg.temporal, &cfg.solver, sh.codec, init, t)?;
                histories.append(&r)?;
                finish(&r, counters, "AirQ", t)?
            }
            Self::Eairq {
                tm,
                truths,
                published,
                init,
            } => {
                tm.begin_cycle(t);
                let pids: Vec<(SourceId, PseudoId)> = by_source
                    .keys()
                    .map(|&rid| tm.issue_pseudo_id(rid).map(|p| (rid, p)))
                    .collect::<Result<_>>()?;
                let vctx = VehicleContext {
                    thetas: sh.thetas,
                    codec: sh.codec,
                    perturbation: &cfg.perturbation,
                    prev_truths: published,
                    seed: cfg.seed,
                    domain: "eairq",
                };
                let uploads: Vec<_> = pids
                    .par_iter()
                    .map(|&(rid, pid)| vehicle_uploads(rid, pid, &by_source[&rid], &vctx, t))
                    .collect::<Result<_>>()?;
                let mut masked = Vec::with_capacity(uploads.len());
                let mut perturbed = Vec::with_capacity(uploads.len());
                for (m, p, s) in uploads {
                    counters.mask_additions += s.additions;
                    counters.dropped += s.dropped;
                    counters.imitated += s.imitated;
                    counters.uncovered += s.uncovered;
                    counters.imitation_fallbacks += s.fallbacks;
                    masked.push(m);
                    perturbed.push(p);
                }
                let ctx = EairqContext {
                    grids: sh.grids,
                    temporal: &cfg.temporal,
                    solver: &cfg.solver,
                    handling: &cfg.handling,
                    codec: sh.codec,
                    init,
                };
                let out = eairq_handle_cycle(&masked, &perturbed, tm, truths, &ctx, t)?;
                counters.unresolved_pseudonyms += out.unresolved;
                for p in out.provenance.values() {
                    match p {
                        Provenance::Sst => counters.sst_grids += 1,
                        Provenance::MaskedSt => counters.masked_st_grids += 1,
                        _ => {}
                    }
                }
                let done = finish(&out.result, counters, "EAirQ", t)?;
                *published = done.0.iter().filter_map(|(&g, v)| v.map(|v| (g, v))).collect();
                done
            }
        };
        Ok((truths, summary))
    }
}

fn finish<S: crate::ids::SourceKey>(
    r: &CycleResult<S>,
    counters: &mut EventCounters,
    algorithm: &str,
    t: Cycle,
) -> Result<(BTreeMap<GridId, Option<f64>>, CycleSummary)> {
    r.check_finite().map_err(|detail| Error::Anomaly {
        algorithm: algorithm.to_string(),
        cycle: t,
        detail,
    })?;
    counters.record(r);
    Ok((r.truths.iter().map(|(&g, e)| (g, e.value)).collect(), CycleSummary::of(r)))
}

/// Runs every selected algorithm over the configured world.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let world = cfg.build_world()?;
    run_on_world(cfg, &world)
}

/// Like [`run_experiment`] on an already built world.
pub fn run_on_world(cfg: &ExperimentConfig, world: &World) -> Result<RunRecord> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    pool.install(|| run_inner(cfg, world))
}

fn run_inner(cfg: &ExperimentConfig, world: &World) -> Result<RunRecord> {
    let grids = world.grid_ids();
    let thetas = build_theta_table(&world.grids, &cfg.spatial)?;
    let codec = Codec::new(cfg.masking.scale)?;
    let shared = Shared {
        cfg,
        grids: &grids,
        thetas: &thetas,
        codec: &codec,
    };
    let mut pipelines: Vec<(Algorithm, Pipeline)> = cfg
        .algorithms
        .iter()
        .map(|&a| (a, Pipeline::new(a, cfg, world.profiles.len())))
        .collect();
    let mut counters: BTreeMap<Algorithm, EventCounters> = BTreeMap::new();
    let mut summaries: BTreeMap<Algorithm, Vec<CycleSummary>> = BTreeMap::new();
    let mut rows: BTreeMap<Algorithm, Vec<TruthRow>> = BTreeMap::new();

    for c in 0..world.cycles {
        let t = c as Cycle;
        let obs = world.build_cycle(t);
        let mut by_source: BTreeMap<SourceId, Vec<(GridId, f64)>> = BTreeMap::new();
        for o in &obs {
            by_source.entry(o.source).or_default().push((o.grid, o.value));
        }
        let real = world.truths_at(t);
        for (algo, p) in &mut pipelines {
            let (est, summary) = p.step(&obs, &by_source, &shared, counters.entry(*algo).or_default(), t)?;
            summaries.entry(*algo).or_default().push(summary);
            let out = rows.entry(*algo).or_default();
            for &g in &grids {
                out.push(TruthRow {
                    cycle: t,
                    grid: g,
                    algo: algo.name().to_string(),
                    estimate: est.get(&g).copied().flatten(),
                    real: real[&g],
                });
            }
        }
        if (c + 1) % metrics::CYCLES_PER_DAY == 0 {
            log::info!("simulated day {} ({} cycles)", (c + 1) / metrics::CYCLES_PER_DAY, c + 1);
        }
    }

    let truths: Vec<TruthRow> = cfg
        .algorithms
        .iter()
        .flat_map(|a| rows.remove(a).unwrap_or_default())
        .collect();
    let table = MetricsTable::compute(&truths, &cfg.metrics.thresholds, cfg.metrics.base.name());
    Ok(RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        algorithms: cfg.algorithms.clone(),
        grids,
        cycles: summaries,
        truths,
        metrics: table,
        counters,
        thresholds: cfg.metrics.thresholds.clone(),
        base: cfg.metrics.base,
    })
}
