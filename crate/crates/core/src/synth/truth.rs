use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{geographical_distance, Grid};
use crate::ids::GridId;
use crate::rng;

use super::dataset::{interpolate_hourly, CYCLES_PER_HOUR};
use super::TruthSeries;

pub const AQI_FLOOR: f64 = 20.0;
pub const AQI_CEIL: f64 = 100.0;

/// Hourly mean-reverting field: a city-wide component plus a spatially smooth
/// local one, clipped to `[20, 100]` and interpolated to 15-minute cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthModel {
    pub mean: f64,
    /// Stationary standard deviation before clipping.
    pub sd: f64,
    /// Hour-to-hour autocorrelation.
    pub phi: f64,
    /// Fraction of the variance that is local to a grid.
    pub local_share: f64,
    /// Length scale of the local component's spatial correlation.
    pub correlation_km: f64,
}

impl Default for TruthModel {
    fn default() -> Self {
        Self {
            mean: 60.0,
            sd: 15.0,
            phi: 0.95,
            local_share: 0.5,
            correlation_km: 3.0,
        }
    }
}

impl TruthModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sd >= 0.0
            && (0.0..1.0).contains(&self.phi)
            && (0.0..=1.0).contains(&self.local_share)
            && self.correlation_km > 0.0
            && self.mean.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid truth model {self:?}")));
        }
        Ok(())
    }
}

/// Scatters `m` grids uniformly over a square of side `extent_km` centred on
/// (`lat`, `lon`).
pub fn synth_grid_layout(m: usize, center: (f64, f64), extent_km: f64, seed: u64) -> Result<Vec<Grid>> {
    let mut r = rng::stream(seed, "world/layout", &[]);
    let km_per_deg_lat = 111.195;
    let km_per_deg_lon = km_per_deg_lat * center.0.to_radians().cos();
    (0..m)
        .map(|i| {
            let dy = (r.random::<f64>() - 0.5) * extent_km;
            let dx = (r.random::<f64>() - 0.5) * extent_km;
            Grid::new(GridId(i as u32), center.0 + dy / km_per_deg_lat, center.1 + dx / km_per_deg_lon)
        })
        .collect()
}

/// Synthetic 15-minute truths for `cycles` cycles over `grids`.
pub fn synth_truth_series(grids: &[Grid], cycles: usize, model: &TruthModel, seed: u64) -> Result<Vec<TruthSeries>> {
    model.validate()?;
    let m = grids.len();
    let hours = cycles.saturating_sub(1).div_ceil(CYCLES_PER_HOUR) + 1;
    // row-normalised Gaussian smoothing of white noise keeps unit variance per grid
    let kernel: Vec<Vec<f64>> = grids
        .iter()
        .map(|a| {
            let row: Vec<f64> = grids
                .iter()
                .map(|b| {
                    let d = geographical_distance(a, b) / model.correlation_km;
                    (-0.5 * d * d).exp()
                })
                .collect();
            let norm = row.iter().map(|k| k * k).sum::<f64>().sqrt();
            row.into_iter().map(|k| k / norm).collect()
        })
        .collect();
    let sd_common = model.sd * (1.0 - model.local_share).sqrt();
    let sd_local = model.sd * model.local_share.sqrt();
    let innovation = (1.0 - model.phi * model.phi).sqrt();

    let mut r = rng::stream(seed, "world/truth", &[]);
    let mut normal = || -> f64 { r.sample(StandardNormal) };
    let mut common = normal() * sd_common;
    let white: Vec<f64> = (0..m).map(|_| normal()).collect();
    let mut local: Vec<f64> = kernel
        .iter()
        .map(|row| sd_local * row.iter().zip(&white).map(|(k, z)| k * z).sum::<f64>())
        .collect();
    let mut hourly = vec![Vec::with_capacity(hours); m];
    for h in 0..hours {
        if h > 0 {
            common = model.phi * common + innovation * sd_common * normal();
            let white: Vec<f64> = (0..m).map(|_| normal()).collect();
            for (l, row) in local.iter_mut().zip(&kernel) {
                let shock: f64 = row.iter().zip(&white).map(|(k, z)| k * z).sum();
                *l = model.phi * *l + innovation * sd_local * shock;
            }
        }
        for (g, series) in hourly.iter_mut().enumerate() {
            series.push((model.mean + common + local[g]).clamp(AQI_FLOOR, AQI_CEIL));
        }
    }
    Ok(grids
        .iter()
        .zip(hourly)
        .map(|(g, h)| {
            let mut values = interpolate_hourly(&h);
            values.truncate(cycles);
            TruthSeries { grid: g.id, values }
        })
        .collect())
}
