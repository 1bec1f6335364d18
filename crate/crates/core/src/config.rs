//! Run configuration: `key = value` lines under `[section]` headers.
//!
//! ```text
//! [train]
//! epochs = 20   # trailing comments are allowed
//! ```
//!
//! Unknown sections and keys are errors. [`RunConfig::set`] applies the same
//! parsing to `section.key` overrides, and [`RunConfig::snapshot`] writes every
//! key back out in a fixed order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baselines::PriorConfig;
use crate::data::dataset::{build_windows, synth_scene_data, LoadOptions, PriorMode};
use crate::data::synth::SynthParams;
use crate::data::{GridSpec, SplitRanges};
use crate::error::{Error, Result};
use crate::metrics::EvalSpec;
use crate::model::{ModelConfig, Variant};
use crate::train::{AblationData, ExperimentPlan, TrainConfig};

pub const SECTIONS: [&str; 6] = ["grid", "data", "model", "train", "eval", "ablate"];

/// Every key with a one-line description, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("grid.n", "grid extent in pixels, divisible by 4"),
    ("grid.lat_min", "southern edge, degrees"),
    ("grid.lat_max", "northern edge, degrees"),
    ("grid.lon_min", "western edge, degrees"),
    ("grid.lon_max", "eastern edge, degrees"),
    ("data.dir", "dataset directory"),
    ("data.seed", "synthetic corpus seed"),
    ("data.scenes", "synthetic scenes"),
    ("data.frames", "frames per synthetic scene"),
    ("data.n_cells", "rain cells per scene"),
    ("data.cell_sigma", "mean cell radius, px"),
    ("data.lambda", "moisture growth coupling per frame"),
    ("data.speed_min", "slowest cell speed, px/frame"),
    ("data.speed_max", "fastest cell speed, px/frame"),
    ("data.n_stations", "water-vapour stations"),
    ("data.station_noise", "station noise standard deviation, mm"),
    ("data.station_seed", "seed of the station layout"),
    (
        "data.min_station_availability",
        "fraction of epochs a station must report",
    ),
    ("data.prior", "prior source: generate or stored"),
    (
        "data.prior_sigma",
        "flow perturbation standard deviation, px/frame",
    ),
    ("data.prior_seed", "seed of the flow perturbation"),
    ("data.max_train_windows", "training windows kept, 0 for all"),
    (
        "model.variant",
        "full, no_pwv, no_prior, no_rpf_concat or rpf_concat_fusion",
    ),
    ("model.t_in", "history frames"),
    ("model.t_out", "forecast frames"),
    (
        "model.branch_channels",
        "water-vapour and radar conv widths, two values",
    ),
    ("model.prior_channels", "prior conv widths, two values"),
    ("model.hidden", "water-vapour and radar ConvLSTM width"),
    ("model.prior_hidden", "prior ConvLSTM width"),
    ("model.proj_channels", "merged state and decoder width"),
    ("model.decoder_channels", "decoder conv widths, two values"),
    ("model.head_channels", "upsampling widths, two values"),
    ("model.mlp_reduction", "channel-attention reduction ratio"),
    (
        "model.share_hc_gates",
        "one gate set for hidden and cell maps",
    ),
    ("model.init_seed", "weight initialization seed"),
    ("train.lr", "learning rate"),
    ("train.beta1", "first-moment decay"),
    ("train.beta2", "second-moment decay"),
    ("train.eps", "denominator offset"),
    ("train.batch_size", "windows per step"),
    ("train.epochs", "passes over the training windows"),
    ("train.clip_norm", "global gradient-norm limit, 0 disables"),
    (
        "train.tf_start",
        "teacher-forcing probability in the first epoch",
    ),
    (
        "train.tf_end",
        "teacher-forcing probability in the last epoch",
    ),
    ("train.seed", "shuffling and teacher-forcing seed"),
    (
        "train.checkpoint_every",
        "extra checkpoint cadence in epochs, 0 disables",
    ),
    ("eval.thresholds", "event thresholds, mm/h"),
    ("eval.lead_frames", "scored lead frames, 1-based"),
    ("eval.csi_agg", "pooled or mean"),
    ("eval.strict", "fail when a scored cell is undefined"),
    (
        "ablate.seeds",
        "seeds, each reseeding data, weights and training",
    ),
    ("ablate.variants", "variants to compare"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSourceKind {
    Generate,
    Stored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub scenes: usize,
    pub synth: SynthParams,
    pub min_station_availability: f64,
    pub prior: PriorSourceKind,
    pub prior_config: PriorConfig,
    pub max_train_windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub strict: bool,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let n = model.grid;
        RunConfig {
            grid: GridSpec::default_with_extent(n).expect("default extent is valid"),
            data: DataConfig {
                dir: PathBuf::from("data"),
                seed: 0,
                scenes: 40,
                synth: SynthParams {
                    n,
                    ..Default::default()
                },
                min_station_availability: 0.9,
                prior: PriorSourceKind::Generate,
                prior_config: PriorConfig::default(),
                max_train_windows: 200,
            },
            model,
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            strict: false,
            ablate: AblateConfig {
                seeds: vec![1, 2, 3, 4, 5],
                variants: Variant::ALL.to_vec(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> std::result::Result<[usize; 2], String> {
    let list: Vec<usize> = parse_list(key, v)?;
    list.try_into()
        .map_err(|_| format!("`{key}`: expected two comma-separated values"))
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value.trim())
            .map_err(Error::InvalidArgument)
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "grid.n" => {
                let n = parse(key, v)?;
                self.grid.n = n;
                m.grid = n;
                d.synth.n = n;
            }
            "grid.lat_min" => self.grid.lat_min = parse(key, v)?,
            "grid.lat_max" => self.grid.lat_max = parse(key, v)?,
            "grid.lon_min" => self.grid.lon_min = parse(key, v)?,
            "grid.lon_max" => self.grid.lon_max = parse(key, v)?,
            "data.dir" => {
                if v.contains('#') {
                    return Err(format!(
                        "`{key}`: `#` starts a comment and cannot appear in a path"
                    ));
                }
                d.dir = PathBuf::from(v)
            }
            "data.seed" => d.seed = parse(key, v)?,
            "data.scenes" => d.scenes = parse(key, v)?,
            "data.frames" => d.synth.frames = parse(key, v)?,
            "data.n_cells" => d.synth.n_cells = parse(key, v)?,
            "data.cell_sigma" => d.synth.cell_sigma = parse(key, v)?,
            "data.lambda" => d.synth.lambda = parse(key, v)?,
            "data.speed_min" => d.synth.speed.0 = parse(key, v)?,
            "data.speed_max" => d.synth.speed.1 = parse(key, v)?,
            "data.n_stations" => d.synth.n_stations = parse(key, v)?,
            "data.station_noise" => d.synth.station_noise = parse(key, v)?,
            "data.station_seed" => d.synth.station_seed = parse(key, v)?,
            "data.min_station_availability" => d.min_station_availability = parse(key, v)?,
            "data.prior" => {
                d.prior = match v {
                    "generate" => PriorSourceKind::Generate,
                    "stored" => PriorSourceKind::Stored,
                    _ => return Err(format!("`{key}`: expected generate or stored, got `{v}`")),
                }
            }
            "data.prior_sigma" => d.prior_config.perturbation_sigma = parse(key, v)?,
            "data.prior_seed" => d.prior_config.seed = parse(key, v)?,
            "data.max_train_windows" => d.max_train_windows = parse(key, v)?,
            "model.variant" => m.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "model.t_in" => m.t_in = parse(key, v)?,
            "model.t_out" => m.t_out = parse(key, v)?,
            "model.branch_channels" => m.branch_channels = parse_pair(key, v)?,
            "model.prior_channels" => m.prior_channels = parse_pair(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.prior_hidden" => m.prior_hidden = parse(key, v)?,
            "model.proj_channels" => m.proj_channels = parse(key, v)?,
            "model.decoder_channels" => m.decoder_channels = parse_pair(key, v)?,
            "model.head_channels" => m.head_channels = parse_pair(key, v)?,
            "model.mlp_reduction" => m.mlp_reduction = parse(key, v)?,
            "model.share_hc_gates" => m.share_hc_gates = parse_bool(key, v)?,
            "model.init_seed" => m.init_seed = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.tf_start" => t.teacher_forcing.start = parse(key, v)?,
            "train.tf_end" => t.teacher_forcing.end = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "eval.thresholds" => self.eval.thresholds = parse_list(key, v)?,
            "eval.lead_frames" => self.eval.lead_frames = parse_list(key, v)?,
            "eval.csi_agg" => self.eval.agg = v.parse().map_err(|e: Error| e.to_string())?,
            "eval.strict" => self.strict = parse_bool(key, v)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(key, v)?,
            "ablate.variants" => {
                self.ablate.variants = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|e: Error| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a configuration file body on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut section: Option<&str> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| Error::Config {
                line: line_no,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section `[{name}]`")));
                }
                section =
                    Some(SECTIONS[SECTIONS.iter().position(|s| *s == name).expect("checked")]);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let sec = section.ok_or_else(|| err("key outside any [section]".into()))?;
            let key = format!("{sec}.{}", k.trim());
            if !seen.insert(key.clone()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            self.set_inner(&key, v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        Self::parse_str(&text)
    }

    /// Checks cross-field constraints once all settings are applied.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.data.synth.validate()?;
        if self.data.scenes == 0 {
            return Err(Error::InvalidArgument(
                "data.scenes must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.data.min_station_availability) {
            return Err(Error::InvalidArgument(
                "data.min_station_availability must lie in [0, 1]".into(),
            ));
        }
        if !(self.data.prior_config.perturbation_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "data.prior_sigma must be non-negative".into(),
            ));
        }
        if self.ablate.seeds.is_empty() || self.ablate.variants.is_empty() {
            return Err(Error::InvalidArgument(
                "ablate.seeds and ablate.variants must be non-empty".into(),
            ));
        }
        let mut vs = self.ablate.variants.clone();
        vs.sort();
        vs.dedup();
        if vs.len() != self.ablate.variants.len() {
            return Err(Error::InvalidArgument(
                "ablate.variants lists a variant twice".into(),
            ));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        match key {
            "grid.n" => self.grid.n.to_string(),
            "grid.lat_min" => self.grid.lat_min.to_string(),
            "grid.lat_max" => self.grid.lat_max.to_string(),
            "grid.lon_min" => self.grid.lon_min.to_string(),
            "grid.lon_max" => self.grid.lon_max.to_string(),
            "data.dir" => d.dir.display().to_string(),
            "data.seed" => d.seed.to_string(),
            "data.scenes" => d.scenes.to_string(),
            "data.frames" => d.synth.frames.to_string(),
            "data.n_cells" => d.synth.n_cells.to_string(),
            "data.cell_sigma" => d.synth.cell_sigma.to_string(),
            "data.lambda" => d.synth.lambda.to_string(),
            "data.speed_min" => d.synth.speed.0.to_string(),
            "data.speed_max" => d.synth.speed.1.to_string(),
            "data.n_stations" => d.synth.n_stations.to_string(),
            "data.station_noise" => d.synth.station_noise.to_string(),
            "data.station_seed" => d.synth.station_seed.to_string(),
            "data.min_station_availability" => d.min_station_availability.to_string(),
            "data.prior" => match d.prior {
                PriorSourceKind::Generate => "generate".into(),
                PriorSourceKind::Stored => "stored".into(),
            },
            "data.prior_sigma" => d.prior_config.perturbation_sigma.to_string(),
            "data.prior_seed" => d.prior_config.seed.to_string(),
            "data.max_train_windows" => d.max_train_windows.to_string(),
            "model.variant" => m.variant.to_string(),
            "model.t_in" => m.t_in.to_string(),
            "model.t_out" => m.t_out.to_string(),
            "model.branch_channels" => join(&m.branch_channels),
            "model.prior_channels" => join(&m.prior_channels),
            "model.hidden" => m.hidden.to_string(),
            "model.prior_hidden" => m.prior_hidden.to_string(),
            "model.proj_channels" => m.proj_channels.to_string(),
            "model.decoder_channels" => join(&m.decoder_channels),
            "model.head_channels" => join(&m.head_channels),
            "model.mlp_reduction" => m.mlp_reduction.to_string(),
            "model.share_hc_gates" => m.share_hc_gates.to_string(),
            "model.init_seed" => m.init_seed.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.tf_start" => t.teacher_forcing.start.to_string(),
            "train.tf_end" => t.teacher_forcing.end.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "eval.thresholds" => join(&self.eval.thresholds),
            "eval.lead_frames" => join(&self.eval.lead_frames),
            "eval.csi_agg" => self.eval.agg.to_string(),
            "eval.strict" => self.strict.to_string(),
            "ablate.seeds" => join(&self.ablate.seeds),
            "ablate.variants" => join(&self.ablate.variants),
            _ => unreachable!("KEYS lists only known keys"),
        }
    }

    /// Every key in a fixed order; parsing the snapshot reproduces `self`.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, _) in KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{sec}]").expect("string write");
                current = sec;
            }
            writeln!(out, "{name} = {}", self.value_of(key)).expect("string write");
        }
        out
    }

    /// First 16 hex digits of the snapshot's SHA-256.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_options(&self, with_pwv: bool) -> LoadOptions {
        LoadOptions {
            with_pwv,
            min_station_availability: self.data.min_station_availability,
        }
    }

    /// Data and plan for one ablation seed. The seed drives the synthetic
    /// corpus, weight initialization and training order of every variant alike.
    pub fn seed_plan(&self, seed: u64) -> Result<(ExperimentPlan, AblationData)> {
        let scenes = synth_scene_data(seed, self.data.scenes, &self.data.synth)?;
        let windows = build_windows(
            &scenes,
            self.model.t_in,
            self.model.t_out,
            &PriorMode::Generate(self.data.prior_config),
            &SplitRanges::default(),
        )?;
        let data = AblationData::from_windows(&windows, self.data.max_train_windows)?;
        let model = ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        };
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        let mut plan =
            ExperimentPlan::for_variants(&self.ablate.variants, &model, &train, self.eval.clone());
        plan.fingerprint = self.fingerprint();
        Ok((plan, data))
    }

    /// Help text listing every key.
    pub fn key_help() -> String {
        let mut s = String::from("Configuration keys ([section] then key = value):\n");
        for (k, doc) in KEYS {
            writeln!(s, "  {k:34} {doc}").expect("string write");
        }
        s
    }
}
