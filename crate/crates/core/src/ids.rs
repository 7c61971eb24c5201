use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

/// Sensing-cycle index. Cycle 0 is the first simulated cycle.
pub type Cycle = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridId(pub u32);

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A vehicle's real identity (RID).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub u32);

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Anything a solver can key sources by: real ids in the plaintext and AirQ
/// settings, pseudonyms in EAirQ.
pub trait SourceKey: Copy + Ord + Hash + fmt::Debug + Send + Sync {}

impl<T: Copy + Ord + Hash + fmt::Debug + Send + Sync> SourceKey for T {}
