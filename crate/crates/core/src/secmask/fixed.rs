use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element of the ring Z / 2^128, read as a two's-complement fixed-point number.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fixed(pub u128);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);

    pub fn raw(self) -> u128 {
        self.0
    }
}

impl fmt::Debug for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fixed({})", self.0 as i128)
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0.wrapping_add(rhs.0))
    }
}

impl AddAssign for Fixed {
    fn add_assign(&mut self, rhs: Fixed) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, rhs: Fixed) -> Fixed {
        Fixed(self.0.wrapping_sub(rhs.0))
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed(self.0.wrapping_neg())
    }
}

impl Sum for Fixed {
    fn sum<I: Iterator<Item = Fixed>>(iter: I) -> Fixed {
        iter.fold(Fixed::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Fixed> for Fixed {
    fn sum<I: Iterator<Item = &'a Fixed>>(iter: I) -> Fixed {
        iter.copied().sum()
    }
}

/// Conversion between reals and ring elements at a fixed number of units per 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Codec {
    scale: f64,
}

impl Codec {
    pub const DEFAULT_SCALE: f64 = 1e15;

    pub fn new(scale: f64) -> Result<Self> {
        if !((1.0..=1e18).contains(&scale) && scale.fract() == 0.0) {
            return Err(Error::Config(format!("fixed-point scale must be an integer in [1, 1e18], got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest magnitude `encode` accepts. Leaves 2^26 values of headroom
    /// before a sum can wrap.
    pub fn max_abs(&self) -> f64 {
        2f64.powi(100) / self.scale
    }

    /// Worst-case rounding error of one encoded value.
    pub fn quantum(&self) -> f64 {
        0.5 / self.scale
    }

    pub fn encode(&self, v: f64) -> Result<Fixed> {
        if !v.is_finite() || v.abs() > self.max_abs() {
            return Err(Error::FixedPointRange(v));
        }
        Ok(Fixed((v * self.scale).round() as i128 as u128))
    }

    pub fn decode(&self, f: Fixed) -> f64 {
        f.0 as i128 as f64 / self.scale
    }
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            scale: Self::DEFAULT_SCALE,
        }
    }
}

impl TryFrom<f64> for Codec {
    type Error = Error;
    fn try_from(scale: f64) -> Result<Self> {
        Codec::new(scale)
    }
}

impl From<Codec> for f64 {
    fn from(c: Codec) -> f64 {
        c.scale
    }
}
