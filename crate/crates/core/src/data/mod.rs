//! Station ingestion, gridding, resampling, normalization, windowing and
//! synthetic scenes.

pub mod dataset;
pub mod fgrid;
mod interp;
mod normalize;
mod resample;
mod station;
pub mod synth;
mod window;

pub use interp::{haversine_km, interpolate_pwv, GridSpec, IDW_NEIGHBOURS, IDW_POWER};
pub use normalize::{
    denormalize_radar, normalize_pwv, normalize_radar, PWV_CLIP, PWV_SCALE_MM, RADAR_CLIP_MM_H,
};
pub use resample::{resample_temporal, MAX_GAP_SECS};
pub use station::{
    group_stations, load_station_csv, parse_station_csv, pwv_grids, screen_stations,
    write_station_csv, StationLoad, StationRecord, StationSeries, PWV_MAX_MM, STATION_CSV_HEADER,
};
pub use window::{make_windows, PriorSource, SampleWindow, Split, SplitRanges};

use crate::error::{Error, Result};

/// Default frame spacing in seconds.
pub const CADENCE_SECS: i64 = 600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unit {
    Mm,
    MmPerHour,
    Normalized,
}

impl Unit {
    pub fn tag(self) -> u8 {
        match self {
            Unit::Mm => 0,
            Unit::MmPerHour => 1,
            Unit::Normalized => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Unit::Mm),
            1 => Some(Unit::MmPerHour),
            2 => Some(Unit::Normalized),
            _ => None,
        }
    }
}

/// Square `n × n` field stored row-major, row 0 northmost.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    n: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::invalid_shape(
                "grid",
                format!("{} values for extent {n}", values.len()),
            ));
        }
        Ok(Grid { n, values })
    }

    pub fn filled(n: usize, v: f64) -> Self {
        Grid {
            n,
            values: vec![v; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                values.push(f(r, c));
            }
        }
        Grid { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.n + col] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Time-ordered frames; `None` marks a declared missing frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Option<Grid>>,
    pub epochs: Vec<i64>,
    pub cadence: i64,
    pub unit: Unit,
}

impl FrameSequence {
    /// Builds a complete, evenly spaced sequence starting at `start`.
    pub fn regular(frames: Vec<Grid>, start: i64, cadence: i64, unit: Unit) -> Result<Self> {
        if cadence <= 0 {
            return Err(Error::InvalidArgument(format!(
                "cadence must be positive, got {cadence}"
            )));
        }
        let epochs = (0..frames.len() as i64)
            .map(|k| start + k * cadence)
            .collect();
        let seq = FrameSequence {
            frames: frames.into_iter().map(Some).collect(),
            epochs,
            cadence,
            unit,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn extent(&self) -> Option<usize> {
        self.frames.iter().flatten().map(Grid::n).next()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.epochs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} epochs",
                self.frames.len(),
                self.epochs.len()
            )));
        }
        if self.epochs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "epochs must be strictly increasing".into(),
            ));
        }
        let n = self.extent();
        if self.frames.iter().flatten().any(|g| Some(g.n()) != n) {
            return Err(Error::InvalidArgument(
                "frames disagree on grid extent".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_is_row_major() {
        let g = Grid::from_fn(3, |r, c| (10 * r + c) as f64);
        assert_eq!(g.get(2, 1), 21.0);
        assert_eq!(g.values()[5], 12.0);
        assert!(Grid::new(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn regular_sequences_validate() {
        let s = FrameSequence::regular(vec![Grid::filled(2, 0.0); 3], 100, 600, Unit::MmPerHour)
            .unwrap();
        assert_eq!(s.epochs, vec![100, 700, 1300]);
        let mut bad = s.clone();
        bad.epochs[2] = 700;
        assert!(bad.validate().is_err());
        let mut mixed = s;
        mixed.frames[1] = Some(Grid::filled(3, 0.0));
        assert!(mixed.validate().is_err());
    }

    #[test]
    fn unit_tags_round_trip() {
        for u in [Unit::Mm, Unit::MmPerHour, Unit::Normalized] {
            assert_eq!(Unit::from_tag(u.tag()), Some(u));
        }
        assert_eq!(Unit::from_tag(9), None);
    }
}
