use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{Cycle, GridId};
use crate::rng::{self, Stream};

use super::fixed::Fixed;

/// Which of the three per-grid sequences a mask stream feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// `theta * v`
    ThetaValue,
    /// `theta * v^2`
    ThetaSquare,
    /// `theta`
    Theta,
}

impl ValueKind {
    pub const ALL: [ValueKind; 3] = [ValueKind::ThetaValue, ValueKind::ThetaSquare, ValueKind::Theta];

    fn tag(self) -> u64 {
        match self {
            ValueKind::ThetaValue => 1,
            ValueKind::ThetaSquare => 2,
            ValueKind::Theta => 3,
        }
    }
}

/// A vehicle's private mask source for one cycle.
///
/// Streams are keyed by (seed, domain, real id, cycle, kind, grid); within a
/// stream each pair `(j, j')` consumes the next draw, so no key is ever
/// reused within an experiment.
#[derive(Clone, Debug)]
pub struct MaskState {
    seed: u64,
    label: String,
    rid: u64,
    cycle: Cycle,
}

impl MaskState {
    /// `domain` separates independent pipelines that share a seed.
    pub fn new(seed: u64, domain: &str, rid: u64, cycle: Cycle) -> Self {
        Self {
            seed,
            label: format!("mask/{domain}"),
            rid,
            cycle,
        }
    }

    pub fn stream(&self, kind: ValueKind, grid: GridId) -> Stream {
        rng::stream(
            self.seed,
            &self.label,
            &[self.rid, u64::from(self.cycle), kind.tag(), u64::from(grid.0)],
        )
    }
}

/// Blinds `values` with pairwise masks that cancel under summation.
///
/// Each output is `x_j + sum_{j<j'} a(j,j') - sum_{j'<j} a(j',j)`. Every
/// output costs `c - 1` ring additions, which are added to `additions`.
pub fn mask_sequence<R: Rng>(values: &[Fixed], masks: &mut R, additions: &mut u64) -> Vec<Fixed> {
    let c = values.len();
    let mut out = values.to_vec();
    for j in 0..c {
        for k in (j + 1)..c {
            let a = Fixed(masks.random());
            out[j] += a;
            out[k] = out[k] - a;
        }
    }
    *additions += (c as u64) * (c.saturating_sub(1) as u64);
    out
}
