//! Grid geometry and spatial correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::GridId;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A sensing cell, represented by a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub id: GridId,
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Grid {
    pub fn new(id: GridId, latitude: f64, longitude: f64) -> Result<Self> {
        let grid = Self {
            id,
            latitude,
            longitude,
            label: None,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::Config(format!(
                "grid {} has invalid coordinates ({}, {})",
                self.id, self.latitude, self.longitude
            )));
        }
        Ok(())
    }
}

/// Gaussian kernel width `omega` and cutoff `u`, both in kilometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialParams {
    pub omega_km: f64,
    pub cutoff_km: f64,
}

impl SpatialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_km > 0.0 && self.omega_km.is_finite()) {
            return Err(Error::Config(format!("spatial.omega_km must be > 0, got {}", self.omega_km)));
        }
        if !(self.cutoff_km > 0.0 && self.cutoff_km.is_finite()) {
            return Err(Error::Config(format!("spatial.cutoff_km must be > 0, got {}", self.cutoff_km)));
        }
        Ok(())
    }
}

impl Default for SpatialParams {
    fn default() -> Self {
        Self {
            omega_km: 4.0,
            cutoff_km: 10.0,
        }
    }
}

/// Great-circle (haversine) distance in kilometers.
pub fn geographical_distance(a: &Grid, b: &Grid) -> f64 {
    let (lat1, lat2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.longitude - a.longitude).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Gaussian kernel on distance, zero at and beyond the cutoff.
pub fn logical_distance(distance_km: f64, params: &SpatialParams) -> f64 {
    if distance_km < params.cutoff_km {
        (-distance_km * distance_km / (2.0 * params.omega_km * params.omega_km)).exp()
    } else {
        0.0
    }
}

/// Sparse, symmetric table of nonzero spatial correlations.
///
/// Each row lists the grids an observation made at the row's origin is
/// reused for, including the origin itself with coefficient 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaTable {
    grids: Vec<GridId>,
    rows: BTreeMap<GridId, Vec<(GridId, f64)>>,
}

impl ThetaTable {
    /// All grids of the world, in id order.
    pub fn grids(&self) -> &[GridId] {
        &self.grids
    }

    pub fn contains(&self, grid: GridId) -> bool {
        self.rows.contains_key(&grid)
    }

    /// Nonzero coefficients for observations made at `origin`, ordered by target id.
    pub fn row(&self, origin: GridId) -> Option<&[(GridId, f64)]> {
        self.rows.get(&origin).map(Vec::as_slice)
    }

    pub fn get(&self, origin: GridId, target: GridId) -> f64 {
        self.rows
            .get(&origin)
            .and_then(|row| {
                row.binary_search_by_key(&target, |&(g, _)| g)
                    .ok()
                    .map(|i| row[i].1)
            })
            .unwrap_or(0.0)
    }

    /// Number of stored (origin, target) pairs.
    pub fn nnz(&self) -> usize {
        self.rows.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GridId, GridId, f64)> + '_ {
        self.rows
            .iter()
            .flat_map(|(&o, row)| row.iter().map(move |&(t, theta)| (o, t, theta)))
    }

    /// Dumps `origin_id,target_id,theta` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["origin_id", "target_id", "theta"])?;
        for (o, t, theta) in self.iter() {
            w.write_record([o.to_string(), t.to_string(), theta.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_theta_table(grids: &[Grid], params: &SpatialParams) -> Result<ThetaTable> {
    params.validate()?;
    if grids.is_empty() {
        return Err(Error::Config("at least one grid is required".into()));
    }
    let mut seen = BTreeSet::new();
    for g in grids {
        g.validate()?;
        if !seen.insert(g.id) {
            return Err(Error::DuplicateGrid(g.id));
        }
    }
    let mut rows: BTreeMap<GridId, Vec<(GridId, f64)>> = BTreeMap::new();
    for a in grids {
        let mut row = Vec::new();
        for b in grids {
            let theta = if a.id == b.id {
                1.0
            } else {
                logical_distance(geographical_distance(a, b), params)
            };
            if theta > 0.0 {
                row.push((b.id, theta));
            }
        }
        row.sort_by_key(|&(g, _)| g);
        rows.insert(a.id, row);
    }
    Ok(ThetaTable {
        grids: seen.into_iter().collect(),
        rows,
    })
}
