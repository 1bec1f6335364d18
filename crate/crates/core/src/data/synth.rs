//! Synthetic scenes where future rainfall depends on a latent moisture field.
//!
//! Gaussian rain cells drift with a scene-wide velocity across a smooth,
//! slowly moving moisture field `m ∈ [0, 1]`. Each frame a cell's amplitude is
//! multiplied by `exp(λ·(m(centre) − 0.5))`. Stations at fixed locations
//! report `10 + 50·m` mm plus Gaussian noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    FrameSequence, Grid, GridSpec, StationRecord, StationSeries, Unit, CADENCE_SECS, PWV_MAX_MM,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub frames: usize,
    pub n_cells: usize,
    /// Fixed `(u, v)` in px/frame (x east, y south); random direction when `None`.
    pub velocity: Option<(f64, f64)>,
    /// Speed range for random velocities, px/frame.
    pub speed: (f64, f64),
    /// Mean cell standard deviation, px.
    pub cell_sigma: f64,
    /// Per-frame growth coupling.
    pub lambda: f64,
    /// Peak intensity range (mm/h), sampled log-uniformly.
    pub amplitude: (f64, f64),
    pub n_stations: usize,
    /// Station noise standard deviation, mm.
    pub station_noise: f64,
    /// Seed of the station layout, shared by every scene.
    pub station_seed: u64,
    /// Half-width of the scene-wide moisture offset.
    pub moisture_offset: f64,
    /// Amplitude of each of the moisture field's Fourier modes.
    pub moisture_mode_amplitude: f64,
    pub moisture_modes: usize,
    /// Drift speed of the moisture field, px/frame.
    pub moisture_drift: f64,
    pub cadence: i64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n: 32,
            frames: 24,
            n_cells: 6,
            velocity: None,
            speed: (0.5, 1.25),
            cell_sigma: 2.5,
            lambda: 0.3,
            amplitude: (1.0, 12.0),
            n_stations: 40,
            station_noise: 1.0,
            station_seed: 7,
            moisture_offset: 0.25,
            moisture_mode_amplitude: 0.12,
            moisture_modes: 3,
            moisture_drift: 0.1,
            cadence: CADENCE_SECS,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic scene: {m}")));
        if self.n < 4 {
            return bad("grid extent must be at least 4");
        }
        if self.frames < 1 {
            return bad("frames must be at least 1");
        }
        if self.n_cells < 1 {
            return bad("n_cells must be at least 1");
        }
        if self.n_stations < 1 {
            return bad("n_stations must be at least 1");
        }
        if !(self.cell_sigma > 0.0) {
            return bad("cell_sigma must be positive");
        }
        let (a0, a1) = self.amplitude;
        if !(a0 > 0.0 && a1 >= a0) {
            return bad("amplitude range must be positive and ordered");
        }
        let (s0, s1) = self.speed;
        if !(s0 >= 0.0 && s1 >= s0) {
            return bad("speed range must be non-negative and ordered");
        }
        if !(self.station_noise >= 0.0) || !self.lambda.is_finite() || self.cadence <= 0 {
            return bad("noise, lambda or cadence out of range");
        }
        Ok(())
    }
}

/// Smooth moisture field built from a few low-wavenumber cosines.
#[derive(Clone, Debug)]
pub struct MoistureField {
    n: f64,
    offset: f64,
    modes: Vec<(f64, f64, f64, f64)>,
    drift: (f64, f64),
}

impl MoistureField {
    /// `m(x, y, t)` clamped to `[0, 1]`; `x`, `y` in pixels.
    pub fn at(&self, x: f64, y: f64, t: f64) -> f64 {
        let (xs, ys) = (x - self.drift.0 * t, y - self.drift.1 * t);
        let mut m = 0.5 + self.offset;
        for &(amp, kx, ky, phase) in &self.modes {
            m += amp * (TAU * (kx * xs + ky * ys) / self.n + phase).cos();
        }
        m.clamp(0.0, 1.0)
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Cell {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: GridSpec,
    /// Rain rate, mm/h.
    pub radar: FrameSequence,
    pub stations: Vec<StationSeries>,
    /// Latent moisture per frame.
    pub moisture: Vec<Grid>,
    /// Cell peak amplitudes per frame.
    pub amplitudes: Vec<Vec<f64>>,
    pub field: MoistureField,
}

impl SynthScene {
    pub fn station_records(&self) -> Vec<StationRecord> {
        let mut out = Vec::new();
        for (k, &t) in self.radar.epochs.iter().enumerate() {
            for s in &self.stations {
                out.push(StationRecord {
                    station_id: s.station_id.clone(),
                    lat: s.lat,
                    lon: s.lon,
                    epoch: t,
                    pwv: s.samples[k].1,
                });
            }
        }
        out
    }
}

/// Station positions in pixel coordinates, shared by all scenes with the same layout seed.
pub fn station_layout(p: &SynthParams) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.station_seed);
    let hi = p.n as f64 - 0.5;
    (0..p.n_stations)
        .map(|_| (rng.random_range(-0.5..hi), rng.random_range(-0.5..hi)))
        .collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        return lo;
    }
    rng.random_range(lo.ln()..hi.ln()).exp()
}

pub fn synth_scene(seed: u64, p: &SynthParams, start_epoch: i64) -> Result<SynthScene> {
    p.validate()?;
    let spec = GridSpec::default_with_extent(p.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.n as f64;

    let (u, v) = match p.velocity {
        Some(v) => v,
        None => {
            let speed = rng.random_range(p.speed.0..=p.speed.1);
            let dir = rng.random_range(0.0..TAU);
            (speed * dir.cos(), speed * dir.sin())
        }
    };

    let drift_dir = rng.random_range(0.0..TAU);
    let field = MoistureField {
        n,
        offset: rng.random_range(-p.moisture_offset..=p.moisture_offset),
        modes: (0..p.moisture_modes)
            .map(|_| {
                let kx = rng.random_range(-2i32..=2) as f64;
                let ky = rng.random_range(0i32..=2) as f64;
                let (kx, ky) = if kx == 0.0 && ky == 0.0 {
                    (1.0, 0.0)
                } else {
                    (kx, ky)
                };
                (
                    p.moisture_mode_amplitude,
                    kx,
                    ky,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect(),
        drift: (
            p.moisture_drift * drift_dir.cos(),
            p.moisture_drift * drift_dir.sin(),
        ),
    };

    // Start cells upstream so they cross the domain mid-scene.
    let half = p.frames as f64 / 2.0;
    let mut cells: Vec<Cell> = (0..p.n_cells)
        .map(|_| Cell {
            x: rng.random_range(0.0..n) - u * half,
            y: rng.random_range(0.0..n) - v * half,
            sigma: p.cell_sigma * rng.random_range(0.75..1.25),
            amplitude: log_uniform(&mut rng, p.amplitude),
        })
        .collect();

    let noise =
        Normal::new(0.0, p.station_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let layout = station_layout(p);
    let mut stations: Vec<StationSeries> = layout
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let (lat, lon) = spec.to_latlon(y, x);
            StationSeries {
                station_id: format!("G{k:03}"),
                lat,
                lon,
                samples: Vec::with_capacity(p.frames),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(p.frames);
    let mut moisture = Vec::with_capacity(p.frames);
    let mut amplitudes = Vec::with_capacity(p.frames);
    for k in 0..p.frames {
        let t = k as f64;
        let epoch = start_epoch + k as i64 * p.cadence;
        frames.push(Grid::from_fn(p.n, |r, c| {
            let (x, y) = (c as f64, r as f64);
            cells
                .iter()
                .map(|cell| {
                    let d2 = (x - cell.x).powi(2) + (y - cell.y).powi(2);
                    cell.amplitude * (-d2 / (2.0 * cell.sigma * cell.sigma)).exp()
                })
                .sum()
        }));
        moisture.push(Grid::from_fn(p.n, |r, c| field.at(c as f64, r as f64, t)));
        amplitudes.push(cells.iter().map(|c| c.amplitude).collect());
        for (s, &(x, y)) in stations.iter_mut().zip(&layout) {
            let pwv =
                (10.0 + 50.0 * field.at(x, y, t) + noise.sample(&mut rng)).clamp(0.0, PWV_MAX_MM);
            s.samples.push((epoch, pwv));
        }
        for cell in &mut cells {
            let m = field.at(cell.x, cell.y, t);
            cell.amplitude *= (p.lambda * (m - 0.5)).exp();
            cell.x += u;
            cell.y += v;
        }
    }

    Ok(SynthScene {
        spec,
        radar: FrameSequence::regular(frames, start_epoch, p.cadence, Unit::MmPerHour)?,
        stations,
        moisture,
        amplitudes,
        field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_amplitudes_stay_constant() {
        let p = SynthParams {
            lambda: 0.0,
            frames: 10,
            ..Default::default()
        };
        let s = synth_scene(3, &p, 0).unwrap();
        assert!(s.amplitudes.iter().all(|a| *a == s.amplitudes[0]));
    }

    #[test]
    fn still_decoupled_scene_is_frozen() {
        let p = SynthParams {
            lambda: 0.0,
            velocity: Some((0.0, 0.0)),
            frames: 6,
            ..Default::default()
        };
        let s = synth_scene(4, &p, 0).unwrap();
        let first = s.radar.frames[0].as_ref().unwrap();
        assert!(s.radar.frames.iter().all(|f| f.as_ref() == Some(first)));
    }

    #[test]
    fn same_seed_same_scene() {
        let p = SynthParams {
            frames: 5,
            ..Default::default()
        };
        let a = synth_scene(9, &p, 100).unwrap();
        let b = synth_scene(9, &p, 100).unwrap();
        assert_eq!(a.radar, b.radar);
        assert_eq!(a.stations, b.stations);
        let c = synth_scene(10, &p, 100).unwrap();
        assert_ne!(a.radar, c.radar);
    }

    #[test]
    fn stations_share_layout_across_scenes() {
        let p = SynthParams {
            frames: 2,
            ..Default::default()
        };
        let a = synth_scene(1, &p, 0).unwrap();
        let b = synth_scene(2, &p, 0).unwrap();
        for (x, y) in a.stations.iter().zip(&b.stations) {
            assert_eq!((x.lat, x.lon), (y.lat, y.lon));
            assert!(a.spec.contains(x.lat, x.lon));
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(synth_scene(
            0,
            &SynthParams {
                n_cells: 0,
                ..Default::default()
            },
            0
        )
        .is_err());
        assert!(synth_scene(
            0,
            &SynthParams {
                cell_sigma: 0.0,
                ..Default::default()
            },
            0
        )
        .is_err());
    }
}
