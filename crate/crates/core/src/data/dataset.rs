//! Scene corpora in memory and on disk.
//!
//! Directory layout:
//!
//! ```text
//! manifest.csv                  scene,seed,start_epoch,frames,cadence,n
//! stations.csv                  station rows for every scene epoch
//! radar/<epoch>.fgrid           rain rate, mm/h
//! pwv/<epoch>.fgrid             interpolated water vapour, mm
//! prior/<origin>/<epoch>.fgrid  extrapolated radar issued at <origin>
//! ```

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::fgrid::{self, Dtype};
use super::synth::{synth_scene, SynthParams, SynthScene};
use super::window::date_epoch;
use super::{
    group_stations, load_station_csv, make_windows, pwv_grids, screen_stations, write_station_csv,
    FrameSequence, Grid, GridSpec, PriorSource, SampleWindow, SplitRanges, Unit, MAX_GAP_SECS,
};
use crate::baselines::{generate_prior, PriorConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";
pub const STATIONS: &str = "stations.csv";
const MANIFEST_HEADER: [&str; 6] = ["scene", "seed", "start_epoch", "frames", "cadence", "n"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneMeta {
    pub index: usize,
    pub seed: u64,
    pub start_epoch: i64,
    pub frames: usize,
    pub cadence: i64,
    pub n: usize,
}

impl SceneMeta {
    pub fn epochs(&self) -> Vec<i64> {
        (0..self.frames as i64)
            .map(|k| self.start_epoch + k * self.cadence)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub meta: SceneMeta,
    pub radar: FrameSequence,
    /// Interpolated water vapour, mm; `None` when not loaded.
    pub pwv: Option<FrameSequence>,
}

/// Start of scene `i`: months cycle March, April, May, June, February of 2023
/// (three training months, one validation, one test), then days, then 4-hour slots.
pub fn scene_start_epoch(i: usize) -> i64 {
    const MONTHS: [u32; 5] = [3, 4, 5, 6, 2];
    let month = MONTHS[i % 5];
    let day = 1 + ((i / 5) % 28) as u32;
    let slot = ((i / 140) % 6) as i64;
    date_epoch(2023, month, day) + slot * 4 * 3600
}

/// Seed of scene `i` within a corpus seeded by `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (i as u64)
            .wrapping_add(1)
            .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn synth_corpus(
    seed: u64,
    scenes: usize,
    params: &SynthParams,
) -> Result<Vec<(SceneMeta, SynthScene)>> {
    (0..scenes)
        .into_par_iter()
        .map(|i| {
            let meta = SceneMeta {
                index: i,
                seed: scene_seed(seed, i),
                start_epoch: scene_start_epoch(i),
                frames: params.frames,
                cadence: params.cadence,
                n: params.n,
            };
            Ok((meta, synth_scene(meta.seed, params, meta.start_epoch)?))
        })
        .collect()
}

/// Runs the station → grid path on a synthetic scene.
pub fn scene_data(meta: SceneMeta, scene: &SynthScene) -> Result<SceneData> {
    let epochs = &scene.radar.epochs;
    let pwv = FrameSequence {
        frames: pwv_grids(&scene.stations, epochs, &scene.spec, MAX_GAP_SECS)?,
        epochs: epochs.clone(),
        cadence: scene.radar.cadence,
        unit: Unit::Mm,
    };
    Ok(SceneData {
        meta,
        radar: scene.radar.clone(),
        pwv: Some(pwv),
    })
}

pub fn synth_scene_data(seed: u64, scenes: usize, params: &SynthParams) -> Result<Vec<SceneData>> {
    synth_corpus(seed, scenes, params)?
        .par_iter()
        .map(|(meta, scene)| scene_data(*meta, scene))
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::at(path))
}

fn frame_path(dir: &Path, kind: &str, epoch: i64) -> PathBuf {
    dir.join(kind).join(format!("{epoch}.fgrid"))
}

/// Writes radar and interpolated water-vapour frames, the station table and the manifest.
pub fn write_dataset(dir: &Path, corpus: &[(SceneMeta, SynthScene)]) -> Result<()> {
    for kind in ["radar", "pwv"] {
        create_dir(&dir.join(kind))?;
    }
    let mut records = Vec::new();
    for (meta, scene) in corpus {
        let data = scene_data(*meta, scene)?;
        let pwv = data
            .pwv
            .as_ref()
            .expect("synthetic scenes carry water vapour");
        for (k, &t) in scene.radar.epochs.iter().enumerate() {
            if let Some(g) = &scene.radar.frames[k] {
                fgrid::save_grid(
                    &frame_path(dir, "radar", t),
                    g,
                    t,
                    Unit::MmPerHour,
                    Dtype::F64,
                )?;
            }
            if let Some(g) = &pwv.frames[k] {
                fgrid::save_grid(&frame_path(dir, "pwv", t), g, t, Unit::Mm, Dtype::F64)?;
            }
        }
        records.extend(scene.station_records());
    }
    let stations = dir.join(STATIONS);
    write_station_csv(
        File::create(&stations).map_err(Error::at(&stations))?,
        &records,
    )?;

    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for (m, _) in corpus {
        w.write_record([
            m.index.to_string(),
            m.seed.to_string(),
            m.start_epoch.to_string(),
            m.frames.to_string(),
            m.cadence.to_string(),
            m.n.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<SceneMeta>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(Error::at(&path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::format("manifest", e.to_string()))?
        .clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::format(
            "manifest",
            format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::format("manifest", e.to_string()))?;
        let field = |k: usize| -> Result<&str> {
            row.get(k)
                .ok_or_else(|| Error::format("manifest", format!("row {} is short", i + 2)))
        };
        let bad = |k: usize| {
            Error::format(
                "manifest",
                format!("row {}: bad {}", i + 2, MANIFEST_HEADER[k]),
            )
        };
        let meta = SceneMeta {
            index: field(0)?.parse().map_err(|_| bad(0))?,
            seed: field(1)?.parse().map_err(|_| bad(1))?,
            start_epoch: field(2)?.parse().map_err(|_| bad(2))?,
            frames: field(3)?.parse().map_err(|_| bad(3))?,
            cadence: field(4)?.parse().map_err(|_| bad(4))?,
            n: field(5)?.parse().map_err(|_| bad(5))?,
        };
        if meta.cadence <= 0 || meta.n < 2 {
            return Err(Error::format(
                "manifest",
                format!("row {}: bad cadence or extent", i + 2),
            ));
        }
        out.push(meta);
    }
    Ok(out)
}

fn load_sequence(dir: &Path, kind: &str, meta: &SceneMeta, unit: Unit) -> Result<FrameSequence> {
    let epochs = meta.epochs();
    let mut frames = Vec::with_capacity(epochs.len());
    for &t in &epochs {
        let path = frame_path(dir, kind, t);
        if !path.exists() {
            frames.push(None);
            continue;
        }
        let (h, g) = fgrid::load_grid(&path)?;
        if h.n != meta.n || h.epoch != t {
            return Err(Error::format(
                "fgrid",
                format!(
                    "{}: header (n={}, epoch={}) disagrees with manifest",
                    path.display(),
                    h.n,
                    h.epoch
                ),
            ));
        }
        frames.push(Some(g));
    }
    Ok(FrameSequence {
        frames,
        epochs,
        cadence: meta.cadence,
        unit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub with_pwv: bool,
    /// Station screening threshold applied when gridding `stations.csv`.
    pub min_station_availability: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            with_pwv: true,
            min_station_availability: 0.9,
        }
    }
}

/// Loads every manifest scene. Missing frame files become missing frames.
///
/// Water vapour comes from `pwv/` grids, falling back to screening and
/// interpolating `stations.csv` when that directory is absent.
pub fn load_dataset(dir: &Path, opts: &LoadOptions) -> Result<Vec<SceneData>> {
    let with_pwv = opts.with_pwv;
    if !dir.is_dir() {
        return Err(Error::Path {
            path: dir.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset directory not found",
            ),
        });
    }
    let metas = read_manifest(dir)?;
    let stations = if with_pwv && !dir.join("pwv").is_dir() {
        Some(group_stations(
            &load_station_csv(&dir.join(STATIONS), None)?.records,
        ))
    } else {
        None
    };
    metas
        .par_iter()
        .map(|meta| {
            let radar = load_sequence(dir, "radar", meta, Unit::MmPerHour)?;
            let pwv = match (&stations, with_pwv) {
                (_, false) => None,
                (None, true) => Some(load_sequence(dir, "pwv", meta, Unit::Mm)?),
                (Some(series), true) => {
                    let spec = GridSpec::default_with_extent(meta.n)?;
                    let kept = screen_stations(
                        series.clone(),
                        &radar.epochs,
                        opts.min_station_availability,
                    );
                    Some(FrameSequence {
                        frames: pwv_grids(&kept, &radar.epochs, &spec, MAX_GAP_SECS)?,
                        epochs: radar.epochs.clone(),
                        cadence: meta.cadence,
                        unit: Unit::Mm,
                    })
                }
            };
            Ok(SceneData {
                meta: *meta,
                radar,
                pwv,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum PriorMode {
    /// Extrapolate on the fly; the window's origin epoch seeds any perturbation.
    Generate(PriorConfig),
    /// Read `prior/<origin>/<epoch>.fgrid` under the given dataset directory.
    Stored(PathBuf),
}

fn stored_prior(dir: &Path, origin: i64, epochs: &[i64]) -> Result<Vec<Grid>> {
    epochs
        .iter()
        .map(|&t| {
            let path = dir
                .join("prior")
                .join(origin.to_string())
                .join(format!("{t}.fgrid"));
            Ok(fgrid::load_grid(&path)?.1)
        })
        .collect()
}

pub fn build_windows(
    scenes: &[SceneData],
    t_in: usize,
    t_out: usize,
    prior: &PriorMode,
    ranges: &SplitRanges,
) -> Result<Vec<SampleWindow>> {
    let per_scene: Vec<Vec<SampleWindow>> = scenes
        .par_iter()
        .map(|s| {
            let cadence = s.radar.cadence;
            let gen = |hist: &[Grid], epochs: &[i64]| -> Result<Vec<Grid>> {
                let origin = epochs[0] - cadence;
                match prior {
                    PriorMode::Generate(cfg) => {
                        generate_prior(hist, epochs.len(), cfg, origin as u64)
                    }
                    PriorMode::Stored(dir) => stored_prior(dir, origin, epochs),
                }
            };
            make_windows(
                &s.radar,
                s.pwv.as_ref(),
                PriorSource::Generator(&gen),
                t_in,
                t_out,
                ranges,
            )
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Generates and stores the prior of every window origin in the dataset.
pub fn write_priors(
    dir: &Path,
    scenes: &[SceneData],
    t_in: usize,
    t_out: usize,
    cfg: &PriorConfig,
) -> Result<usize> {
    let windows = build_windows(
        scenes,
        t_in,
        t_out,
        &PriorMode::Generate(*cfg),
        &SplitRanges::default(),
    )?;
    for w in &windows {
        let origin_dir = dir.join("prior").join(w.origin_epoch().to_string());
        create_dir(&origin_dir)?;
        for (g, &t) in w.prior.iter().zip(&w.prior_epochs) {
            fgrid::save_grid(
                &origin_dir.join(format!("{t}.fgrid")),
                g,
                t,
                Unit::MmPerHour,
                Dtype::F64,
            )?;
        }
    }
    Ok(windows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn small() -> SynthParams {
        SynthParams {
            n: 16,
            frames: 17,
            n_stations: 12,
            ..Default::default()
        }
    }

    #[test]
    fn scene_starts_cycle_months() {
        let splits: Vec<_> = (0..5)
            .map(|i| SplitRanges::default().assign(scene_start_epoch(i)))
            .collect();
        assert_eq!(
            splits,
            vec![
                Some(Split::Train),
                Some(Split::Train),
                Some(Split::Train),
                Some(Split::Val),
                Some(Split::Test)
            ]
        );
        let mut starts: Vec<_> = (0..840).map(scene_start_epoch).collect();
        starts.sort();
        starts.dedup();
        assert_eq!(starts.len(), 840);
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(3, 2, &small()).unwrap();
        write_dataset(dir.path(), &corpus).unwrap();
        let loaded = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((meta, scene), l) in corpus.iter().zip(&loaded) {
            assert_eq!(l.meta, *meta);
            assert_eq!(l.radar, scene.radar);
            let mem = scene_data(*meta, scene).unwrap();
            assert_eq!(l.pwv, mem.pwv);
        }

        // Station fallback reproduces the stored grids.
        fs::remove_dir_all(dir.path().join("pwv")).unwrap();
        let from_csv = load_dataset(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(from_csv[0].pwv, loaded[0].pwv);
    }

    #[test]
    fn stored_priors_match_generated() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(5, 1, &small()).unwrap();
        write_dataset(dir.path(), &corpus).unwrap();
        let scenes = load_dataset(
            dir.path(),
            &LoadOptions {
                with_pwv: false,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = PriorConfig::default();
        assert_eq!(write_priors(dir.path(), &scenes, 4, 12, &cfg).unwrap(), 2);
        let ranges = SplitRanges::default();
        let a = build_windows(&scenes, 4, 12, &PriorMode::Generate(cfg), &ranges).unwrap();
        let b = build_windows(
            &scenes,
            4,
            12,
            &PriorMode::Stored(dir.path().to_path_buf()),
            &ranges,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|w| w.pwv.is_none()));
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(load_dataset(
            Path::new("/nonexistent/fusioncast"),
            &LoadOptions::default()
        )
        .is_err());
    }
}
