use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{interpolate_pwv, Grid, GridSpec};
use crate::error::{Error, Result};

pub const STATION_CSV_HEADER: [&str; 5] = ["station_id", "lat", "lon", "epoch", "pwv_mm"];
/// Physical upper bound on precipitable water vapour.
pub const PWV_MAX_MM: f64 = 150.0;

#[derive(Clone, Debug, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub epoch: i64,
    pub pwv: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StationLoad {
    pub records: Vec<StationRecord>,
    /// Rows with a non-finite or out-of-range PWV value.
    pub dropped_pwv: usize,
    /// Rows located outside the domain.
    pub dropped_domain: usize,
}

/// Reads station rows; `domain` (when given) drops rows outside its bounds.
pub fn parse_station_csv<R: Read>(reader: R, domain: Option<&GridSpec>) -> Result<StationLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    match rows.next() {
        None => {
            return Err(Error::Csv {
                line: 1,
                reason: "missing header".into(),
            })
        }
        Some(Err(e)) => {
            return Err(Error::Csv {
                line: 1,
                reason: e.to_string(),
            })
        }
        Some(Ok(h)) => {
            if h.iter().map(str::trim).ne(STATION_CSV_HEADER) {
                return Err(Error::Csv {
                    line: 1,
                    reason: format!("expected header `{}`", STATION_CSV_HEADER.join(",")),
                });
            }
        }
    }
    let mut out = StationLoad::default();
    for row in rows {
        let row = row.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let err = |reason: String| Error::Csv { line, reason };
        if row.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", row.len())));
        }
        let id = row[0].trim();
        if id.is_empty() {
            return Err(err("empty station_id".into()));
        }
        let num = |i: usize| -> Result<f64> {
            row[i].trim().parse::<f64>().map_err(|_| {
                err(format!(
                    "{} `{}` is not a number",
                    STATION_CSV_HEADER[i], &row[i]
                ))
            })
        };
        let (lat, lon) = (num(1)?, num(2)?);
        if !lat.is_finite() || !lon.is_finite() {
            return Err(err("non-finite coordinate".into()));
        }
        let epoch = row[3]
            .trim()
            .parse::<i64>()
            .map_err(|_| err(format!("epoch `{}` is not an integer", &row[3])))?;
        let pwv = num(4)?;
        if !pwv.is_finite() || !(0.0..=PWV_MAX_MM).contains(&pwv) {
            out.dropped_pwv += 1;
            continue;
        }
        if domain.is_some_and(|d| !d.contains(lat, lon)) {
            out.dropped_domain += 1;
            continue;
        }
        out.records.push(StationRecord {
            station_id: id.to_owned(),
            lat,
            lon,
            epoch,
            pwv,
        });
    }
    Ok(out)
}

pub fn load_station_csv(path: &Path, domain: Option<&GridSpec>) -> Result<StationLoad> {
    parse_station_csv(File::open(path).map_err(Error::at(path))?, domain)
}

/// Writes records with shortest round-trip float formatting.
pub fn write_station_csv<W: Write>(writer: W, records: &[StationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(STATION_CSV_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.station_id.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            r.epoch.to_string(),
            r.pwv.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// One station's time series, sorted by epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StationSeries {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub samples: Vec<(i64, f64)>,
}

impl StationSeries {
    /// Latest sample at or before `epoch`, no older than `max_age` seconds.
    pub fn value_at(&self, epoch: i64, max_age: i64) -> Option<f64> {
        let idx = self.samples.partition_point(|&(t, _)| t <= epoch);
        let &(t, v) = self.samples.get(idx.checked_sub(1)?)?;
        (epoch - t <= max_age).then_some(v)
    }
}

/// Groups records by station id; a station's location is taken from its first row.
pub fn group_stations(records: &[StationRecord]) -> Vec<StationSeries> {
    let mut by_id: BTreeMap<&str, StationSeries> = BTreeMap::new();
    for r in records {
        by_id
            .entry(&r.station_id)
            .or_insert_with(|| StationSeries {
                station_id: r.station_id.clone(),
                lat: r.lat,
                lon: r.lon,
                samples: Vec::new(),
            })
            .samples
            .push((r.epoch, r.pwv));
    }
    by_id
        .into_values()
        .map(|mut s| {
            s.samples.sort_by_key(|&(t, _)| t);
            s.samples.dedup_by_key(|&mut (t, _)| t);
            s
        })
        .collect()
}

/// Interpolated PWV grid per epoch, carrying station values forward up to
/// `max_age` seconds. Epochs with no reporting station yield `None`.
/// Keeps stations reporting at no less than `min_fraction` of `epochs`.
pub fn screen_stations(
    series: Vec<StationSeries>,
    epochs: &[i64],
    min_fraction: f64,
) -> Vec<StationSeries> {
    if epochs.is_empty() {
        return series;
    }
    series
        .into_iter()
        .filter(|s| {
            let hits = epochs
                .iter()
                .filter(|&&t| s.samples.binary_search_by_key(&t, |&(e, _)| e).is_ok())
                .count();
            hits as f64 >= min_fraction * epochs.len() as f64
        })
        .collect()
}

pub fn pwv_grids(
    series: &[StationSeries],
    epochs: &[i64],
    spec: &GridSpec,
    max_age: i64,
) -> Result<Vec<Option<Grid>>> {
    epochs
        .iter()
        .map(|&t| {
            let points: Vec<(f64, f64, f64)> = series
                .iter()
                .filter_map(|s| s.value_at(t, max_age).map(|v| (s.lat, s.lon, v)))
                .collect();
            if points.is_empty() {
                Ok(None)
            } else {
                interpolate_pwv(&points, spec).map(Some)
            }
        })
        .collect()
}
