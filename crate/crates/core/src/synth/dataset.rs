use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::ids::GridId;

use super::TruthSeries;

/// Longest run of missing hours that is filled by linear interpolation.
pub const MAX_GAP_HOURS: usize = 4;

/// Cycles per hour after interpolation.
pub const CYCLES_PER_HOUR: usize = 4;

/// Inserts three evenly spaced values between consecutive hourly values.
pub fn interpolate_hourly(hourly: &[f64]) -> Vec<f64> {
    let Some(&last) = hourly.last() else { return Vec::new() };
    let mut out = Vec::with_capacity(CYCLES_PER_HOUR * (hourly.len() - 1) + 1);
    for w in hourly.windows(2) {
        let (a, b) = (w[0], w[1]);
        for k in 0..CYCLES_PER_HOUR {
            out.push(a + (b - a) * k as f64 / CYCLES_PER_HOUR as f64);
        }
    }
    out.push(last);
    out
}

/// Fills interior runs of `None` up to `max_gap` long by linear interpolation.
pub fn fill_gaps(values: &[Option<f64>], max_gap: usize) -> std::result::Result<Vec<f64>, String> {
    let first = values.iter().position(Option::is_some).ok_or("no values at all")?;
    let last = values.iter().rposition(Option::is_some).unwrap_or(first);
    if first != 0 {
        return Err(format!("missing first {first} hour(s)"));
    }
    if last != values.len() - 1 {
        return Err(format!("missing last {} hour(s)", values.len() - 1 - last));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut i = 0;
    while i < values.len() {
        match values[i] {
            Some(v) => {
                out.push(v);
                i += 1;
            }
            None => {
                let end = i + values[i..].iter().position(Option::is_some).unwrap_or(0);
                let gap = end - i;
                if gap > max_gap {
                    return Err(format!("gap of {gap} hours starting at hour {i}"));
                }
                let (a, b) = (out[i - 1], values[end].unwrap_or_default());
                for k in 1..=gap {
                    out.push(a + (b - a) * k as f64 / (gap + 1) as f64);
                }
                i = end;
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Row {
    station_id: String,
    lat: f64,
    lon: f64,
    timestamp: String,
    aqi: Option<f64>,
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M", "%Y%m%d%H"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Loads a long-form `station_id,lat,lon,timestamp,aqi` CSV of hourly AQI.
///
/// Stations are numbered in order of their ids (numerically when every id is
/// an integer). Every station must cover the full hourly span of the file;
/// interior gaps up to [`MAX_GAP_HOURS`] are filled, longer or edge gaps are
/// an error. Returns the grids and their 15-minute truth series.
pub fn load_aqi_dataset(path: &Path) -> Result<(Vec<Grid>, Vec<TruthSeries>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut stations: BTreeMap<String, ((f64, f64), BTreeMap<NaiveDateTime, Option<f64>>)> = BTreeMap::new();
    let headers = reader.headers()?.clone();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: Row = rec.deserialize(Some(&headers)).map_err(|e| parse_err(line, e.to_string()))?;
        let t = parse_time(&row.timestamp).ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", row.timestamp)))?;
        let aqi = row.aqi.filter(|v| v.is_finite());
        if let Some(v) = aqi {
            if v < 0.0 {
                return Err(parse_err(line, format!("negative AQI {v}")));
            }
        }
        let entry = stations
            .entry(row.station_id.clone())
            .or_insert(((row.lat, row.lon), BTreeMap::new()));
        if entry.1.insert(t, aqi).is_some() {
            return Err(parse_err(line, format!("duplicate timestamp for station {}", row.station_id)));
        }
    }
    if stations.is_empty() {
        return Err(Error::Dataset(format!("{} has no rows", path.display())));
    }
    let start = stations.values().filter_map(|s| s.1.keys().next()).min().copied().unwrap_or_default();
    let end = stations.values().filter_map(|s| s.1.keys().last()).max().copied().unwrap_or_default();
    let hours = usize::try_from((end - start).num_hours()).unwrap_or(0) + 1;

    let mut ids: Vec<String> = stations.keys().cloned().collect();
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
    }
    let mut grids = Vec::with_capacity(ids.len());
    let mut series = Vec::with_capacity(ids.len());
    for (i, sid) in ids.iter().enumerate() {
        let ((lat, lon), readings) = &stations[sid];
        let id = GridId(i as u32);
        grids.push(Grid::new(id, *lat, *lon)?.with_label(sid.clone()));
        let hourly: Vec<Option<f64>> = (0..hours)
            .map(|h| readings.get(&(start + TimeDelta::hours(h as i64))).copied().flatten())
            .collect();
        let filled = fill_gaps(&hourly, MAX_GAP_HOURS).map_err(|m| Error::Dataset(format!("station {sid}: {m}")))?;
        series.push(TruthSeries {
            grid: id,
            values: interpolate_hourly(&filled),
        });
    }
    Ok((grids, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_hourly(&[100.0, 104.0]), vec![100.0, 101.0, 102.0, 103.0, 104.0]);
        assert_eq!(interpolate_hourly(&[5.0; 4]), vec![5.0; 13]);
        assert_eq!(interpolate_hourly(&vec![1.0; 745]).len(), 2977);
        assert!(interpolate_hourly(&[]).is_empty());
        assert_eq!(interpolate_hourly(&[3.0]), vec![3.0]);
    }

    #[test]
    fn gaps_filled_up_to_limit() {
        let v = [Some(10.0), None, None, None, Some(50.0)];
        assert_eq!(fill_gaps(&v, 4).unwrap(), vec![10.0, 20.0, 30.0, 40.0, 50.0]);
        assert!(fill_gaps(&v, 2).is_err());
        assert!(fill_gaps(&[None, Some(1.0)], 4).is_err());
        assert!(fill_gaps(&[Some(1.0), None], 4).is_err());
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_long_form_csv() {
        let f = write(
            "station_id,lat,lon,timestamp,aqi\n\
             10,39.9,116.4,2020-01-01 00:00:00,100\n\
             10,39.9,116.4,2020-01-01 01:00:00,\n\
             10,39.9,116.4,2020-01-01 02:00:00,108\n\
             2,40.0,116.3,2020-01-01 00:00:00,50\n\
             2,40.0,116.3,2020-01-01 01:00:00,50\n\
             2,40.0,116.3,2020-01-01 02:00:00,50\n",
        );
        let (grids, series) = load_aqi_dataset(f.path()).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[0].label.as_deref(), Some("2"));
        assert_eq!(series[1].values.len(), 9);
        assert_eq!(series[1].values[4], 104.0);
        assert_eq!(series[1].values[2], 102.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write("station_id,lat,lon,timestamp,aqi\n1,39.9,116.4,2020-01-01 00:00:00,1\n1,abc,116.4,2020-01-01 01:00:00,2\n");
        match load_aqi_dataset(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write("station_id,lat,lon,timestamp,aqi\n1,39.9,116.4,yesterday,1\n");
        assert!(matches!(load_aqi_dataset(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn station_missing_edge_hours_is_rejected() {
        let f = write(
            "station_id,lat,lon,timestamp,aqi\n\
             a,39.9,116.4,2020-01-01 00:00:00,1\n\
             a,39.9,116.4,2020-01-01 01:00:00,1\n\
             b,39.9,116.5,2020-01-01 01:00:00,1\n",
        );
        assert!(matches!(load_aqi_dataset(f.path()), Err(Error::Dataset(_))));
    }
}
