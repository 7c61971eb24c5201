//! Straight-line reference solvers and random instances for the integration tests.
//!
//! The reference code works on dense vectors indexed by position, keeps its
//! own histories, and computes its own distances and kernel. It shares no code
//! with the library beyond the public input/output types used by the callers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use airq::geo::{Grid, SpatialParams};
use airq::truthdisc::{Observation, SolverParams};
use airq::{GridId, SourceId};

/// A small world: grid positions and per-cycle observations.
#[derive(Clone, Debug)]
pub struct Instance {
    pub grids: Vec<Grid>,
    pub n: usize,
    pub cycles: Vec<Vec<Observation<SourceId>>>,
}

/// Random world with `n` sources, `m` grids and `c` cycles. Grids sit in a
/// 12 km box so some pairs correlate and some do not; every cycle has at
/// least one observation.
pub fn random_instance(seed: u64, n: usize, m: usize, c: usize) -> Instance {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let grids: Vec<Grid> = (0..m)
        .map(|i| {
            let lat = 39.9 + r.random_range(-0.055..0.055);
            let lon = 116.4 + r.random_range(-0.07..0.07);
            Grid::new(GridId(i as u32), lat, lon).unwrap()
        })
        .collect();
    let truths: Vec<f64> = (0..m).map(|_| r.random_range(30.0..90.0)).collect();
    let kappa: Vec<f64> = (0..n).map(|_| r.random_range(0.6..1.4)).collect();
    let mut cycles = Vec::new();
    for t in 0..c {
        let mut obs = Vec::new();
        for s in 0..n {
            for g in 0..m {
                if r.random_bool(0.45) {
                    obs.push(Observation {
                        source: SourceId(s as u32),
                        grid: GridId(g as u32),
                        value: kappa[s] * truths[g] + r.random_range(-2.0..2.0),
                        cycle: t as u32,
                    });
                }
            }
        }
        if obs.is_empty() {
            obs.push(Observation {
                source: SourceId(0),
                grid: GridId(0),
                value: truths[0],
                cycle: t as u32,
            });
        }
        cycles.push(obs);
    }
    Instance { grids, n, cycles }
}

fn haversine_km(a: &Grid, b: &Grid) -> f64 {
    let r = 6371.0;
    let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dp = p2 - p1;
    let dl = (b.longitude - a.longitude).to_radians();
    let s = (dp * 0.5).sin().powi(2) + p1.cos() * p2.cos() * (dl * 0.5).sin().powi(2);
    2.0 * r * s.sqrt().asin()
}

/// Dense `theta[origin][target]`.
pub fn dense_theta(grids: &[Grid], sp: &SpatialParams) -> Vec<Vec<f64>> {
    grids
        .iter()
        .map(|a| {
            grids
                .iter()
                .map(|b| {
                    if a.id == b.id {
                        return 1.0;
                    }
                    let d = haversine_km(a, b);
                    if d >= sp.cutoff_km {
                        0.0
                    } else {
                        (-(d * d) / (2.0 * sp.omega_km * sp.omega_km)).exp()
                    }
                })
                .collect()
        })
        .collect()
}

/// `(offset, scale)` of inverse-distance weighting with the current item at distance 1.
fn idw(hist: &[(u32, f64)], rho: f64, window: u32, t: u32) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 1.0;
    for &(c, v) in hist {
        if c + window < t {
            continue;
        }
        let k = 1.0 / (f64::from(t - c) + 1.0).powf(rho);
        num += k * v;
        den += k;
    }
    (num / den, 1.0 / den)
}

#[derive(Clone, Debug, Default)]
pub struct RefOutput {
    pub truths: Vec<Option<f64>>,
    /// `Some` for sources that reported this cycle.
    pub weights: Vec<Option<f64>>,
    /// Truths that came from history rather than data.
    pub carried: Vec<bool>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RefParams {
    pub rho_w: f64,
    pub rho_t: f64,
    pub window: u32,
    pub solver: SolverParams,
}

/// Reference solver state across cycles.
#[derive(Clone, Debug)]
pub struct Reference {
    pub n: usize,
    pub m: usize,
    /// `None` for SST/TD: observations only count for their own grid.
    pub theta: Option<Vec<Vec<f64>>>,
    /// Whether truth history feeds back into the solve (ST only).
    pub use_truth_history: bool,
    pub use_weight_history: bool,
    pub weight_hist: Vec<Vec<(u32, f64)>>,
    pub truth_hist: Vec<Vec<(u32, f64)>>,
    pub p: RefParams,
}

impl Reference {
    pub fn st(n: usize, theta: Vec<Vec<f64>>, p: RefParams) -> Self {
        Self::build(n, theta.len(), Some(theta), true, true, p)
    }

    pub fn sst(n: usize, m: usize, p: RefParams) -> Self {
        Self::build(n, m, None, false, true, p)
    }

    pub fn td(n: usize, m: usize, p: RefParams) -> Self {
        Self::build(n, m, None, false, false, p)
    }

    fn build(n: usize, m: usize, theta: Option<Vec<Vec<f64>>>, th: bool, wh: bool, p: RefParams) -> Self {
        Self {
            n,
            m,
            theta,
            use_truth_history: th,
            use_weight_history: wh,
            weight_hist: vec![Vec::new(); n],
            truth_hist: vec![Vec::new(); m],
            p,
        }
    }

    /// One cycle; appends weights and estimated truths to the reference histories.
    pub fn step(&mut self, obs: &[Observation<SourceId>], t: u32) -> RefOutput {
        let (n, m) = (self.n, self.m);
        let sp = self.p.solver;
        // terms: (source, target, theta, value)
        let mut terms: Vec<(usize, usize, f64, f64)> = Vec::new();
        let mut reported = vec![false; n];
        for o in obs {
            let (s, g) = (o.source.0 as usize, o.grid.0 as usize);
            reported[s] = true;
            match &self.theta {
                Some(th) => {
                    for (target, &theta) in th[g].iter().enumerate() {
                        if theta > 0.0 {
                            terms.push((s, target, theta, o.value));
                        }
                    }
                }
                None => terms.push((s, g, 1.0, o.value)),
            }
        }
        let mut reached = vec![false; m];
        for &(_, g, _, _) in &terms {
            reached[g] = true;
        }

        let wdelta: Vec<(f64, f64)> = (0..n)
            .map(|s| {
                if self.use_weight_history {
                    idw(&self.weight_hist[s], self.p.rho_w, self.p.window, t)
                } else {
                    (0.0, 1.0)
                }
            })
            .collect();
        let tdelta: Vec<(f64, f64)> = (0..m)
            .map(|g| {
                if self.use_truth_history {
                    idw(&self.truth_hist[g], self.p.rho_t, self.p.window, t)
                } else {
                    (0.0, 1.0)
                }
            })
            .collect();

        // initial temporary truths: theta-weighted mean of everything reaching the grid
        let mut v = vec![f64::NAN; m];
        for g in 0..m {
            let (mut a, mut b) = (0.0, 0.0);
            for &(_, tg, th, val) in &terms {
                if tg == g {
                    a += th * val;
                    b += th;
                }
            }
            if b > 0.0 {
                v[g] = a / b;
            }
        }
        let participants = reported.iter().filter(|&&r| r).count();
        let mut w = vec![0.0; n];
        let w0 = sp.initial_weight.unwrap_or(1.0 / participants.max(1) as f64);
        for s in 0..n {
            if reported[s] {
                w[s] = w0;
            }
        }

        let mut iterations = 0;
        if participants > 0 {
            while iterations < sp.max_iterations {
                iterations += 1;
                // weights
                let mut dist = vec![0.0; n];
                let mut resolution = vec![0.0; n];
                for &(s, g, th, val) in &terms {
                    let fb = tdelta[g].0 + tdelta[g].1 * v[g];
                    dist[s] += th * (val - fb) * (val - fb);
                    resolution[s] += th * (sp.tolerance * fb.abs().max(1.0)).powi(2);
                }
                let mut total = 0.0;
                for s in 0..n {
                    if reported[s] {
                        if dist[s] <= resolution[s] {
                            dist[s] = 0.0;
                        }
                        dist[s] = dist[s].max(sp.distance_floor);
                        total += dist[s];
                    }
                }
                for s in 0..n {
                    if reported[s] {
                        let fa = (total / dist[s]).ln().clamp(0.0, sp.weight_cap);
                        w[s] = (fa - wdelta[s].0) / wdelta[s].1;
                    }
                }
                // truths
                let mut num = vec![0.0; m];
                let mut den = vec![0.0; m];
                let mut num0 = vec![0.0; m];
                let mut den0 = vec![0.0; m];
                for &(s, g, th, val) in &terms {
                    let fa = wdelta[s].0 + wdelta[s].1 * w[s];
                    num[g] += fa * th * (val - tdelta[g].0);
                    den[g] += fa * th;
                    num0[g] += th * (val - tdelta[g].0);
                    den0[g] += th;
                }
                let mut change: f64 = 0.0;
                for g in 0..m {
                    if !reached[g] {
                        continue;
                    }
                    let nv = if den[g] > 0.0 {
                        num[g] / (tdelta[g].1 * den[g])
                    } else {
                        num0[g] / (tdelta[g].1 * den0[g])
                    };
                    let new = tdelta[g].0 + tdelta[g].1 * nv;
                    let old = tdelta[g].0 + tdelta[g].1 * v[g];
                    change = change.max((new - old).abs() / new.abs().max(1.0));
                    v[g] = nv;
                }
                if change < sp.tolerance {
                    break;
                }
            }
        }

        let mut out = RefOutput {
            truths: vec![None; m],
            weights: vec![None; n],
            carried: vec![false; m],
            iterations,
        };
        for g in 0..m {
            if reached[g] {
                let fin = tdelta[g].0 + tdelta[g].1 * v[g];
                out.truths[g] = Some(fin);
                self.truth_hist[g].push((t, fin));
            } else if self.theta.is_some() {
                if let Some(&(_, last)) = self.truth_hist[g].last() {
                    out.truths[g] = Some(last);
                    out.carried[g] = true;
                }
            }
        }
        for s in 0..n {
            if reported[s] {
                let fin = wdelta[s].0 + wdelta[s].1 * w[s];
                out.weights[s] = Some(fin);
                self.weight_hist[s].push((t, fin));
            }
        }
        out
    }
}

/// `|a - b| <= tol * max(|a|, |b|, 1)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
