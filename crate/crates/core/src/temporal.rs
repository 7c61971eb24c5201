//! Inverse-distance weighting of historical weights and truths.
//!
//! A combined value is a convex combination of the current temporary value
//! and past values, each weighted by `1 / distance^rho`. The current item sits
//! at temporal distance 1, the previous cycle at 2, and so on. Because the
//! combination is affine in the temporary value it can be written as
//! `offset + scale * temp`, which is what the solvers consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::Cycle;

/// Time series of `(cycle, value)` with strictly increasing cycles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    entries: Vec<(Cycle, f64)>,
}

/// Past weights of one source.
pub type WeightHistory = History;
/// Past truths of one grid.
pub type TruthHistory = History;

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(Cycle, f64)>) -> Result<Self> {
        let mut h = Self::new();
        for (c, v) in entries {
            h.push(c, v)?;
        }
        Ok(h)
    }

    /// Appends an entry; cycles must strictly increase.
    pub fn push(&mut self, cycle: Cycle, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if cycle <= last {
                return Err(Error::Ordering {
                    past: last,
                    current: cycle,
                });
            }
        }
        self.entries.push((cycle, value));
        Ok(())
    }

    pub fn entries(&self) -> &[(Cycle, f64)] {
        &self.entries
    }

    pub fn last(&self) -> Option<(Cycle, f64)> {
        self.entries.last().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries at most `window` cycles before `current`.
    fn window(&self, current: Cycle, window: u32) -> &[(Cycle, f64)] {
        let start = current.saturating_sub(window);
        let from = self.entries.partition_point(|&(c, _)| c < start);
        &self.entries[from..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalParams {
    /// Power parameter for historical weights.
    pub rho_w: f64,
    /// Power parameter for historical truths.
    pub rho_t: f64,
    /// Number of past cycles consulted.
    pub history_window: u32,
}

impl TemporalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_w > 0.0 && self.rho_w.is_finite()) {
            return Err(Error::Config(format!("temporal.rho_w must be > 0, got {}", self.rho_w)));
        }
        if !(self.rho_t > 0.0 && self.rho_t.is_finite()) {
            return Err(Error::Config(format!("temporal.rho_t must be > 0, got {}", self.rho_t)));
        }
        Ok(())
    }
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self {
            rho_w: 1.0,
            rho_t: 1.0,
            history_window: 96,
        }
    }
}

/// Affine form `offset + scale * temp` of a temporal combiner.
///
/// For truths the pair is (delta1, delta2); for weights (delta3, delta4).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub offset: f64,
    pub scale: f64,
}

impl Delta {
    pub const IDENTITY: Delta = Delta {
        offset: 0.0,
        scale: 1.0,
    };

    #[inline]
    pub fn apply(&self, temp: f64) -> f64 {
        self.offset + self.scale * temp
    }

    #[inline]
    pub fn invert(&self, combined: f64) -> f64 {
        (combined - self.offset) / self.scale
    }
}

impl Default for Delta {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub fn temporal_distance(current: Cycle, past: Cycle) -> Result<f64> {
    if past > current {
        return Err(Error::Ordering { past, current });
    }
    Ok(f64::from(current - past) + 1.0)
}

fn delta(hist: &History, rho: f64, window: u32, t: Cycle) -> Result<Delta> {
    let entries = hist.window(t, window);
    if entries.is_empty() {
        return Ok(Delta::IDENTITY);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(c, v) in entries {
        if c >= t {
            return Err(Error::Ordering { past: c, current: t });
        }
        let k = temporal_distance(t, c)?.powf(-rho);
        num += k * v;
        den += k;
    }
    // the current item has distance 1, so its coefficient is 1
    den += 1.0;
    Ok(Delta {
        offset: num / den,
        scale: 1.0 / den,
    })
}

/// (delta1, delta2) for a grid's truth history.
pub fn delta_for_truth(hist: &TruthHistory, p: &TemporalParams, t: Cycle) -> Result<Delta> {
    delta(hist, p.rho_t, p.history_window, t)
}

/// (delta3, delta4) for a source's weight history.
pub fn delta_for_weight(hist: &WeightHistory, p: &TemporalParams, t: Cycle) -> Result<Delta> {
    delta(hist, p.rho_w, p.history_window, t)
}

pub fn combine_weight(w_temp: f64, hist: &WeightHistory, p: &TemporalParams, t: Cycle) -> Result<f64> {
    Ok(delta_for_weight(hist, p, t)?.apply(w_temp))
}

pub fn combine_truth(v_temp: f64, hist: &TruthHistory, p: &TemporalParams, t: Cycle) -> Result<f64> {
    Ok(delta_for_truth(hist, p, t)?.apply(v_temp))
}
