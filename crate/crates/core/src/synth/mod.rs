//! Ground truths and synthetic crowdsensing workloads.
//!
//! Traffic follows a Zipf law over grid ranks: the expected number of
//! pass-bys of each grid is the mean of a per-cycle Poisson count, and the
//! passing vehicles are drawn without replacement. Each vehicle has a fixed
//! multiplicative bias drawn from a truncated normal, and every reading adds
//! a little Gaussian noise on top.

mod dataset;
mod truth;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::ids::{Cycle, GridId, SourceId};
use crate::parties::SourceProfile;
use crate::rng;
use crate::truthdisc::Observation;

pub use dataset::{fill_gaps, interpolate_hourly, load_aqi_dataset, CYCLES_PER_HOUR, MAX_GAP_HOURS};
pub use truth::{synth_grid_layout, synth_truth_series, TruthModel, AQI_CEIL, AQI_FLOOR};

/// Real truths of one grid, one value per cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSeries {
    pub grid: GridId,
    pub values: Vec<f64>,
}

/// Truncated normal with bounds `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncNormal {
    pub upper: f64,
    pub lower: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl TruncNormal {
    pub const GOOD: TruncNormal = TruncNormal {
        upper: 1.5,
        lower: 0.5,
        mean: 1.0,
        sigma: 0.5,
    };
    pub const BAD: TruncNormal = TruncNormal {
        upper: 2.5,
        lower: 1.5,
        mean: 2.0,
        sigma: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper && self.lower > 0.0 && self.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid truncated normal {self:?}")));
        }
        if self.sigma == 0.0 && !(self.lower..=self.upper).contains(&self.mean) {
            return Err(Error::Config(format!("degenerate truncated normal outside its bounds {self:?}")));
        }
        Ok(())
    }

    /// Rejection sampling; gives up after a million tries.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        if self.sigma == 0.0 {
            return Ok(self.mean);
        }
        let normal = Normal::new(self.mean, self.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..1_000_000 {
            let x = normal.sample(rng);
            if (self.lower..=self.upper).contains(&x) {
                return Ok(x);
            }
        }
        Err(Error::Config(format!("truncated normal {self:?} has negligible mass")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    /// Number of vehicles.
    pub n: usize,
    /// Number of grids (ignored when a dataset supplies them).
    pub m: usize,
    pub cycles: usize,
    pub zipf_exponent: f64,
    /// Expected pass-bys per cycle over all grids; `None` means `10 * m`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_expected: Option<f64>,
    pub good: TruncNormal,
    pub bad: TruncNormal,
    /// Share of vehicles drawn from the bad law; they take the lowest ids.
    pub bad_fraction: f64,
    /// Variance of the per-reading Gaussian noise.
    pub noise_variance: f64,
    /// Side of the square the synthetic grids are scattered over.
    pub extent_km: f64,
    pub truth: TruthModel,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n: 500,
            m: 34,
            cycles: 2973,
            zipf_exponent: 1.0,
            total_expected: None,
            good: TruncNormal::GOOD,
            bad: TruncNormal::BAD,
            bad_fraction: 0.0,
            noise_variance: 0.2,
            extent_km: 30.0,
            truth: TruthModel::default(),
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 1 || self.cycles < 1 {
            return Err(Error::Config("world.n, world.m and world.cycles must be >= 1".into()));
        }
        if self.n > u32::MAX as usize || self.m > u32::MAX as usize {
            return Err(Error::Config("world.n and world.m must fit in 32 bits".into()));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!("world.zipf_exponent must be >= 0, got {}", self.zipf_exponent)));
        }
        if let Some(t) = self.total_expected {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("world.total_expected must be >= 0, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.bad_fraction) {
            return Err(Error::Config(format!("world.bad_fraction must be in [0, 1], got {}", self.bad_fraction)));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Config("world.noise_variance must be >= 0".into()));
        }
        if !(self.extent_km > 0.0) {
            return Err(Error::Config("world.extent_km must be > 0".into()));
        }
        self.good.validate()?;
        if self.bad_fraction > 0.0 {
            self.bad.validate()?;
        }
        self.truth.validate()
    }

    pub fn total_expected_for(&self, m: usize) -> f64 {
        self.total_expected.unwrap_or(10.0 * m as f64)
    }

    pub fn bad_count(&self) -> usize {
        (self.n as f64 * self.bad_fraction).round() as usize
    }
}

/// Expected pass-bys per rank: `total * r^-a / sum_r' r'^-a`.
pub fn zipf_expected_counts(m: usize, exponent: f64, total: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=m).map(|r| (r as f64).powf(-exponent)).collect();
    let h: f64 = raw.iter().sum();
    raw.into_iter().map(|x| total * x / h).collect()
}

/// Vehicles passing each grid in one cycle, sorted by id.
pub fn draw_passersby(expected: &[(GridId, f64)], n: usize, cycle: Cycle, seed: u64) -> BTreeMap<GridId, Vec<SourceId>> {
    expected
        .iter()
        .map(|&(g, lambda)| {
            let mut r = rng::stream(seed, "world/passersby", &[u64::from(cycle), u64::from(g.0)]);
            let k = match Poisson::new(lambda) {
                Ok(p) => p.sample(&mut r) as usize,
                Err(_) => 0,
            };
            let mut ids: Vec<SourceId> = index::sample(&mut r, n, k.min(n))
                .into_iter()
                .map(|i| SourceId(i as u32))
                .collect();
            ids.sort();
            (g, ids)
        })
        .collect()
}

/// Reliability profiles; the first `bad_count` ids are bad.
pub fn draw_reliability(params: &WorldParams, seed: u64) -> Result<Vec<SourceProfile>> {
    let bad = params.bad_count();
    (0..params.n)
        .map(|i| {
            let mut r = rng::stream(seed, "world/kappa", &[i as u64]);
            let is_bad = i < bad;
            let law = if is_bad { params.bad } else { params.good };
            Ok(SourceProfile {
                rid: SourceId(i as u32),
                kappa: law.sample(&mut r)?,
                bad: is_bad,
            })
        })
        .collect()
}

/// One reading from `N(kappa * truth, variance)`.
pub fn gen_observation<R: Rng + ?Sized>(truth: f64, kappa: f64, variance: f64, rng: &mut R) -> f64 {
    let mean = kappa * truth;
    if variance == 0.0 {
        return mean;
    }
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    mean + variance.sqrt() * z
}

/// Everything needed to replay a simulated month.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub grids: Vec<Grid>,
    /// Indexed like `grids`.
    pub truths: Vec<TruthSeries>,
    pub profiles: Vec<SourceProfile>,
    /// `(grid, expected pass-bys)`; the i-th grid has rank i + 1.
    pub expected: Vec<(GridId, f64)>,
    pub cycles: usize,
    pub noise_variance: f64,
    pub seed: u64,
}

impl World {
    /// Synthetic grids and truths.
    pub fn synthetic(params: &WorldParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let grids = synth_grid_layout(params.m, (39.9, 116.4), params.extent_km, seed)?;
        let truths = synth_truth_series(&grids, params.cycles, &params.truth, seed)?;
        Self::assemble(params, grids, truths, seed)
    }

    /// Grids and truths from a dataset, truncated to `params.cycles`.
    pub fn from_dataset(params: &WorldParams, grids: Vec<Grid>, mut truths: Vec<TruthSeries>, seed: u64) -> Result<Self> {
        params.validate()?;
        let available = truths.iter().map(|t| t.values.len()).min().unwrap_or(0);
        if available < params.cycles {
            return Err(Error::Dataset(format!(
                "dataset has {available} cycles, {} requested",
                params.cycles
            )));
        }
        for t in &mut truths {
            t.values.truncate(params.cycles);
        }
        Self::assemble(params, grids, truths, seed)
    }

    fn assemble(params: &WorldParams, grids: Vec<Grid>, truths: Vec<TruthSeries>, seed: u64) -> Result<Self> {
        if grids.len() != truths.len() || grids.iter().zip(&truths).any(|(g, t)| g.id != t.grid) {
            return Err(Error::Dataset("grids and truth series do not line up".into()));
        }
        let counts = zipf_expected_counts(grids.len(), params.zipf_exponent, params.total_expected_for(grids.len()));
        Ok(Self {
            expected: grids.iter().map(|g| g.id).zip(counts).collect(),
            profiles: draw_reliability(params, seed)?,
            grids,
            truths,
            cycles: params.cycles,
            noise_variance: params.noise_variance,
            seed,
        })
    }

    pub fn grid_ids(&self) -> Vec<GridId> {
        self.grids.iter().map(|g| g.id).collect()
    }

    /// Real truths at `cycle`, keyed by grid.
    pub fn truths_at(&self, cycle: Cycle) -> BTreeMap<GridId, f64> {
        self.truths
            .iter()
            .map(|t| (t.grid, t.values[cycle as usize]))
            .collect()
    }

    /// All readings of one cycle, ordered by (source, grid).
    pub fn build_cycle(&self, cycle: Cycle) -> Vec<Observation<SourceId>> {
        let truths = self.truths_at(cycle);
        let mut obs = Vec::new();
        for (g, sources) in draw_passersby(&self.expected, self.profiles.len(), cycle, self.seed) {
            for s in sources {
                let mut r = rng::stream(self.seed, "world/obs", &[u64::from(cycle), u64::from(g.0), u64::from(s.0)]);
                let kappa = self.profiles[s.0 as usize].kappa;
                obs.push(Observation {
                    source: s,
                    grid: g,
                    value: gen_observation(truths[&g], kappa, self.noise_variance, &mut r),
                    cycle,
                });
            }
        }
        obs.sort_by_key(|o| (o.source, o.grid));
        obs
    }

    /// JSON lines: one `grid`, `source` and `truth` record per item, then one
    /// `obs` record per reading of the first `cycles` cycles.
    pub fn dump_jsonl<W: Write>(&self, cycles: usize, mut out: W) -> Result<()> {
        let mut line = |v: serde_json::Value| -> Result<()> {
            serde_json::to_writer(&mut out, &v)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        for (g, &(_, e)) in self.grids.iter().zip(&self.expected) {
            line(serde_json::json!({"kind": "grid", "grid_id": g.id, "lat": g.latitude, "lon": g.longitude, "expected": e}))?;
        }
        for p in &self.profiles {
            line(serde_json::json!({"kind": "source", "rid": p.rid, "kappa": p.kappa, "bad": p.bad}))?;
        }
        for t in &self.truths {
            line(serde_json::json!({"kind": "truth", "grid_id": t.grid, "values": t.values}))?;
        }
        for c in 0..cycles.min(self.cycles) {
            for o in self.build_cycle(c as Cycle) {
                line(serde_json::json!({"kind": "obs", "cycle": o.cycle, "rid": o.source, "grid_id": o.grid, "value": o.value}))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zipf_examples() {
        let c = zipf_expected_counts(3, 1.0, 11.0);
        for (a, b) in c.iter().zip([6.0, 3.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(zipf_expected_counts(4, 0.0, 8.0).iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let c = zipf_expected_counts(34, 1.3, 340.0);
        assert!((c.iter().sum::<f64>() - 340.0).abs() < 1e-9);
    }

    #[test]
    fn top_eleven_carry_most_traffic() {
        let c = zipf_expected_counts(34, 1.0, 340.0);
        let top: f64 = c[..11].iter().sum();
        assert!(top / 340.0 >= 0.7, "{}", top / 340.0);
    }

    #[test]
    fn passersby_examples() {
        let none = draw_passersby(&[(GridId(0), 0.0)], 10, 0, 1);
        assert!(none[&GridId(0)].is_empty());
        let n = 10_000;
        let mut total = 0;
        for c in 0..n {
            let l = &draw_passersby(&[(GridId(0), 7.0)], 500, c, 1)[&GridId(0)];
            let mut d = l.clone();
            d.dedup();
            assert_eq!(d.len(), l.len());
            total += l.len();
        }
        let mean = total as f64 / f64::from(n);
        assert!((mean - 7.0).abs() < 3.0 * (7.0f64 / f64::from(n)).sqrt(), "{mean}");
        let capped = draw_passersby(&[(GridId(0), 50.0)], 3, 0, 1);
        assert!(capped[&GridId(0)].len() <= 3);
    }

    #[test]
    fn reliability_examples() {
        let mut p = WorldParams {
            n: 10_000,
            ..WorldParams::default()
        };
        let prof = draw_reliability(&p, 3).unwrap();
        assert!(prof.iter().all(|s| (0.5..=1.5).contains(&s.kappa) && !s.bad));
        let mean = prof.iter().map(|s| s.kappa).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        p.good.sigma = 1e-9;
        assert!(draw_reliability(&p, 3).unwrap().iter().all(|s| (s.kappa - 1.0).abs() < 1e-6));
        p.bad_fraction = 0.15;
        p.good.sigma = 0.5;
        let prof = draw_reliability(&p, 3).unwrap();
        assert_eq!(prof.iter().filter(|s| s.bad).count(), 1500);
        assert!(prof.iter().filter(|s| s.bad).all(|s| (1.5..=2.5).contains(&s.kappa)));
    }

    #[test]
    fn observation_moments() {
        assert_eq!(gen_observation(60.0, 1.2, 0.0, &mut rng::stream(0, "t", &[])), 72.0);
        let mut r = rng::stream(0, "t", &[1]);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| gen_observation(50.0, 0.8, 0.2, &mut r)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 40.0).abs() < 3.0 * (0.2f64 / n as f64).sqrt());
        assert!((var - 0.2).abs() < 0.02, "{var}");
    }

    #[test]
    fn cycle_structure() {
        let p = WorldParams {
            n: 20,
            m: 5,
            cycles: 3,
            ..WorldParams::default()
        };
        let w = World::synthetic(&p, 9).unwrap();
        let obs = w.build_cycle(1);
        let lists = draw_passersby(&w.expected, 20, 1, 9);
        assert_eq!(obs.len(), lists.values().map(Vec::len).sum::<usize>());
        assert_eq!(obs, w.build_cycle(1));
        let quiet = World {
            expected: w.expected.iter().map(|&(g, _)| (g, 0.0)).collect(),
            ..w.clone()
        };
        assert!(quiet.build_cycle(0).is_empty());
    }

    #[test]
    fn good_readings_stay_in_band() {
        let p = WorldParams {
            n: 200,
            m: 8,
            cycles: 40,
            ..WorldParams::default()
        };
        let w = World::synthetic(&p, 5).unwrap();
        let sd = p.noise_variance.sqrt();
        for c in 0..40 {
            let truths = w.truths_at(c);
            for o in w.build_cycle(c) {
                let v = truths[&o.grid];
                assert!(o.value >= 0.5 * v - 5.0 * sd && o.value <= 1.5 * v + 5.0 * sd);
            }
        }
    }

    #[test]
    fn dump_lists_every_kind() {
        let p = WorldParams {
            n: 4,
            m: 2,
            cycles: 2,
            ..WorldParams::default()
        };
        let w = World::synthetic(&p, 1).unwrap();
        let mut buf = Vec::new();
        w.dump_jsonl(2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for kind in ["grid", "source", "truth"] {
            assert!(text.contains(&format!("\"kind\":\"{kind}\"")));
        }
    }
}
