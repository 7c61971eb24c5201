use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ThetaTable;
use crate::ids::{Cycle, GridId, SourceKey};

use super::fixed::{Codec, Fixed};
use super::mask::{mask_sequence, MaskState, ValueKind};

/// The three masked sequences a vehicle uploads for one grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedEntry {
    pub grid: GridId,
    pub beta1: Vec<Fixed>,
    pub beta2: Vec<Fixed>,
    pub beta3: Vec<Fixed>,
}

impl MaskedEntry {
    fn check(&self) -> Result<usize> {
        let c = self.beta1.len();
        if c == 0 || self.beta2.len() != c || self.beta3.len() != c {
            return Err(Error::MalformedReport(format!(
                "grid {}: sequence lengths {}, {}, {}",
                self.grid,
                self.beta1.len(),
                self.beta2.len(),
                self.beta3.len()
            )));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedReport<S> {
    pub pseudo_id: S,
    pub cycle: Cycle,
    pub entries: Vec<MaskedEntry>,
}

/// Masks one vehicle's cycle of observations for every grid they reach.
///
/// `observations` are `(grid, value)` pairs of a single vehicle. Returns the
/// report and the number of ring additions spent on masking.
pub fn build_masked_report<S>(
    pseudo_id: S,
    observations: &[(GridId, f64)],
    thetas: &ThetaTable,
    masks: &MaskState,
    codec: &Codec,
    cycle: Cycle,
) -> Result<(MaskedReport<S>, u64)> {
    let mut obs = observations.to_vec();
    obs.sort_by_key(|&(g, _)| g);
    if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol(format!("two observations for grid {} in one report", w[0].0)));
    }
    let c = obs.len();
    // target grid -> theta per observation index
    let mut targets: BTreeMap<GridId, Vec<f64>> = BTreeMap::new();
    for (j, &(g, v)) in obs.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Protocol(format!("non-finite observation for grid {g}")));
        }
        let row = thetas
            .row(g)
            .ok_or_else(|| Error::Protocol(format!("no theta row for grid {g}")))?;
        for &(target, theta) in row {
            targets.entry(target).or_insert_with(|| vec![0.0; c])[j] = theta;
        }
    }
    let mut additions = 0;
    let mut entries = Vec::with_capacity(targets.len());
    for (grid, ths) in targets {
        if ths.iter().all(|&t| t == 0.0) {
            continue;
        }
        let mut x1 = Vec::with_capacity(c);
        let mut x2 = Vec::with_capacity(c);
        let mut x3 = Vec::with_capacity(c);
        for (&theta, &(_, v)) in ths.iter().zip(&obs) {
            x1.push(codec.encode(theta * v)?);
            x2.push(codec.encode(theta * v * v)?);
            x3.push(codec.encode(theta)?);
        }
        let mut seq = |kind, xs: &[Fixed]| mask_sequence(xs, &mut masks.stream(kind, grid), &mut additions);
        let beta1 = seq(ValueKind::ThetaValue, &x1);
        let beta2 = seq(ValueKind::ThetaSquare, &x2);
        let beta3 = seq(ValueKind::Theta, &x3);
        entries.push(MaskedEntry {
            grid,
            beta1,
            beta2,
            beta3,
        });
    }
    Ok((
        MaskedReport {
            pseudo_id,
            cycle,
            entries,
        },
        additions,
    ))
}

/// Ring sums of the three sequences of one (source, grid) entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RawChi {
    pub s1: Fixed,
    pub s2: Fixed,
    pub s3: Fixed,
    /// Sequence length `c`, needed for the rounding bound.
    pub len: usize,
}

/// Decoded sums: `chi1 = sum theta*v`, `chi2 = sum theta*v^2`, `chi3 = sum theta`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Chi {
    pub chi1: f64,
    pub chi2: f64,
    pub chi3: f64,
    pub len: usize,
}

/// Per-(source, grid) aggregates recovered from masked reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiSums<S: Ord> {
    codec: Codec,
    raw: BTreeMap<S, BTreeMap<GridId, RawChi>>,
}

impl<S: SourceKey> ChiSums<S> {
    pub fn new(codec: Codec) -> Self {
        Self {
            codec,
            raw: BTreeMap::new(),
        }
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    /// Folds one report in. A source may contribute only one report.
    pub fn add_report(&mut self, report: &MaskedReport<S>) -> Result<()> {
        if self.raw.contains_key(&report.pseudo_id) {
            return Err(Error::MalformedReport(format!("second report from {:?}", report.pseudo_id)));
        }
        let mut grids = BTreeMap::new();
        for e in &report.entries {
            let len = e.check()?;
            let raw = RawChi {
                s1: e.beta1.iter().sum(),
                s2: e.beta2.iter().sum(),
                s3: e.beta3.iter().sum(),
                len,
            };
            if grids.insert(e.grid, raw).is_some() {
                return Err(Error::MalformedReport(format!("grid {} listed twice", e.grid)));
            }
        }
        self.raw.insert(report.pseudo_id, grids);
        Ok(())
    }

    pub fn raw(&self, source: S, grid: GridId) -> Option<RawChi> {
        self.raw.get(&source)?.get(&grid).copied()
    }

    pub fn chi(&self, source: S, grid: GridId) -> Option<Chi> {
        self.raw(source, grid).map(|r| self.decode(r))
    }

    fn decode(&self, r: RawChi) -> Chi {
        Chi {
            chi1: self.codec.decode(r.s1),
            chi2: self.codec.decode(r.s2),
            chi3: self.codec.decode(r.s3),
            len: r.len,
        }
    }

    pub fn sources(&self) -> Vec<S> {
        self.raw.keys().copied().collect()
    }

    /// `(source, grid, chi)` in source-then-grid order.
    pub fn iter(&self) -> impl Iterator<Item = (S, GridId, Chi)> + '_ {
        self.raw
            .iter()
            .flat_map(move |(&s, grids)| grids.iter().map(move |(&g, &r)| (s, g, self.decode(r))))
    }

    pub fn is_empty(&self) -> bool {
        self.raw.values().all(BTreeMap::is_empty)
    }
}

/// Aggregates of a single report.
pub fn aggregate_chi<S: SourceKey>(report: &MaskedReport<S>, codec: &Codec) -> Result<ChiSums<S>> {
    let mut sums = ChiSums::new(*codec);
    sums.add_report(report)?;
    Ok(sums)
}

/// Aggregates of a batch of reports, one per source.
pub fn aggregate_reports<S: SourceKey>(reports: &[MaskedReport<S>], codec: &Codec) -> Result<ChiSums<S>> {
    let mut sums = ChiSums::new(*codec);
    for r in reports {
        sums.add_report(r)?;
    }
    Ok(sums)
}

#[derive(Serialize, Deserialize)]
struct MaskedRecord<S> {
    pseudo_id: S,
    cycle: Cycle,
    grid_id: GridId,
    beta1: Vec<Fixed>,
    beta2: Vec<Fixed>,
    beta3: Vec<Fixed>,
}

/// One JSON line per (report, grid); ring elements as unsigned integers.
pub fn write_masked_jsonl<S: Serialize + Clone, W: Write>(reports: &[MaskedReport<S>], mut out: W) -> Result<()> {
    for r in reports {
        for e in &r.entries {
            let rec = MaskedRecord {
                pseudo_id: r.pseudo_id.clone(),
                cycle: r.cycle,
                grid_id: e.grid,
                beta1: e.beta1.clone(),
                beta2: e.beta2.clone(),
                beta3: e.beta3.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Inverse of [`write_masked_jsonl`]; consecutive lines with the same
/// pseudo-id and cycle form one report. Reports without entries do not
/// survive the round trip.
pub fn read_masked_jsonl<S: DeserializeOwned + PartialEq, R: BufRead>(input: R) -> Result<Vec<MaskedReport<S>>> {
    let mut out: Vec<MaskedReport<S>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MaskedRecord<S> = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedReport(format!("line {}: {e}", i + 1)))?;
        let entry = MaskedEntry {
            grid: rec.grid_id,
            beta1: rec.beta1,
            beta2: rec.beta2,
            beta3: rec.beta3,
        };
        entry.check()?;
        match out.last_mut() {
            Some(last) if last.pseudo_id == rec.pseudo_id && last.cycle == rec.cycle => last.entries.push(entry),
            _ => out.push(MaskedReport {
                pseudo_id: rec.pseudo_id,
                cycle: rec.cycle,
                entries: vec![entry],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{build_theta_table, Grid, SpatialParams};

    fn world() -> ThetaTable {
        let grids = [
            Grid::new(GridId(0), 39.90, 116.40).unwrap(),
            Grid::new(GridId(1), 39.90, 116.41).unwrap(),
            Grid::new(GridId(2), 41.0, 116.40).unwrap(),
        ];
        build_theta_table(&grids, &SpatialParams { omega_km: 1.0, cutoff_km: 3.0 }).unwrap()
    }

    #[test]
    fn single_isolated_observation_is_plain() {
        let t = world();
        let codec = Codec::default();
        let m = MaskState::new(0, "t", 1, 0);
        let (r, ops) = build_masked_report(7u32, &[(GridId(2), 50.0)], &t, &m, &codec, 0).unwrap();
        assert_eq!(ops, 0);
        assert_eq!(r.entries.len(), 1);
        let e = &r.entries[0];
        assert_eq!(e.beta1, vec![codec.encode(50.0).unwrap()]);
        assert_eq!(e.beta2, vec![codec.encode(2500.0).unwrap()]);
        assert_eq!(e.beta3, vec![codec.encode(1.0).unwrap()]);
        let chi = aggregate_chi(&r, &codec).unwrap().chi(7, GridId(2)).unwrap();
        assert_eq!((chi.chi1, chi.chi2, chi.chi3), (50.0, 2500.0, 1.0));
    }

    #[test]
    fn two_observations_sum_to_plaintext() {
        let t = world();
        let codec = Codec::default();
        let m = MaskState::new(0, "t", 1, 0);
        let obs = [(GridId(0), 40.0), (GridId(1), 60.0)];
        let (r, _) = build_masked_report(1u32, &obs, &t, &m, &codec, 0).unwrap();
        let sums = aggregate_chi(&r, &codec).unwrap();
        for g in [GridId(0), GridId(1)] {
            let expect: Fixed = obs
                .iter()
                .map(|&(o, v)| codec.encode(t.get(o, g) * v).unwrap())
                .sum();
            assert_eq!(sums.raw(1, g).unwrap().s1, expect);
        }
        // grid 2 is out of reach of both observations
        assert!(sums.raw(1, GridId(2)).is_none());
    }

    #[test]
    fn empty_vehicle_gives_empty_report() {
        let t = world();
        let codec = Codec::default();
        let (r, ops) = build_masked_report(1u32, &[], &t, &MaskState::new(0, "t", 1, 0), &codec, 0).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(ops, 0);
        assert!(aggregate_chi(&r, &codec).unwrap().is_empty());
    }

    #[test]
    fn malformed_and_unknown_inputs_rejected() {
        let t = world();
        let codec = Codec::default();
        let m = MaskState::new(0, "t", 1, 0);
        assert!(build_masked_report(1u32, &[(GridId(9), 1.0)], &t, &m, &codec, 0).is_err());
        let bad = MaskedReport {
            pseudo_id: 1u32,
            cycle: 0,
            entries: vec![MaskedEntry {
                grid: GridId(0),
                beta1: vec![Fixed(1), Fixed(2)],
                beta2: vec![Fixed(1)],
                beta3: vec![Fixed(1), Fixed(2)],
            }],
        };
        assert!(matches!(aggregate_chi(&bad, &codec), Err(Error::MalformedReport(_))));
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let t = world();
        let codec = Codec::default();
        let obs = [(GridId(0), 40.0), (GridId(1), 60.0)];
        let (r, _) = build_masked_report(3u32, &obs, &t, &MaskState::new(5, "t", 3, 2), &codec, 2).unwrap();
        let mut buf = Vec::new();
        write_masked_jsonl(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"pseudo_id\":3,\"cycle\":2,\"grid_id\":0,\"beta1\":["));
        let back: Vec<MaskedReport<u32>> = read_masked_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![r]);
    }
}
