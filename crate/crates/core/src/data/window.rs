use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;

use super::{normalize_pwv, normalize_radar, FrameSequence, Grid};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Half-open epoch ranges `[start, end)` per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: (i64, i64),
    pub val: (i64, i64),
    pub test: (i64, i64),
}

pub(crate) fn date_epoch(y: i32, m: u32, d: u32) -> i64 {
    NaiveDate::from_ymd_opt(y, m, d)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid calendar date")
        .and_utc()
        .timestamp()
}

impl Default for SplitRanges {
    /// Train March–May 2023, validate June 2023, test February 2023.
    fn default() -> Self {
        SplitRanges {
            train: (date_epoch(2023, 3, 1), date_epoch(2023, 6, 1)),
            val: (date_epoch(2023, 6, 1), date_epoch(2023, 7, 1)),
            test: (date_epoch(2023, 2, 1), date_epoch(2023, 3, 1)),
        }
    }
}

impl SplitRanges {
    pub fn assign(&self, epoch: i64) -> Option<Split> {
        [
            (Split::Train, self.train),
            (Split::Val, self.val),
            (Split::Test, self.test),
        ]
        .into_iter()
        .find(|(_, (a, b))| (*a..*b).contains(&epoch))
        .map(|(s, _)| s)
    }
}

/// Builds prior frames for a window from its history and target epochs.
pub type PriorGenerator<'a> = dyn Fn(&[Grid], &[i64]) -> Result<Vec<Grid>> + 'a;

pub enum PriorSource<'a> {
    /// Prior frames looked up by epoch.
    Stored(&'a FrameSequence),
    Generator(&'a PriorGenerator<'a>),
}

/// One training or evaluation sample in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `None` when no water-vapour data was supplied.
    pub pwv: Option<Vec<Grid>>,
    pub hist: Vec<Grid>,
    pub prior: Vec<Grid>,
    pub target: Vec<Grid>,
    pub hist_epochs: Vec<i64>,
    pub target_epochs: Vec<i64>,
    pub prior_epochs: Vec<i64>,
    pub split: Option<Split>,
}

fn stack(frames: &[Grid], f: impl Fn(f64) -> Result<f64>) -> Result<Tensor> {
    let n = frames.first().map_or(0, Grid::n);
    let mut data = Vec::with_capacity(frames.len() * n * n);
    for g in frames {
        for &v in g.values() {
            data.push(f(v)?);
        }
    }
    Tensor::new([frames.len(), 1, n, n], data)
}

impl SampleWindow {
    pub fn extent(&self) -> usize {
        self.hist[0].n()
    }

    /// Epoch of the last observed frame.
    pub fn origin_epoch(&self) -> i64 {
        *self.hist_epochs.last().expect("non-empty history")
    }

    /// Normalized model inputs; missing water vapour becomes zeros.
    pub fn to_model_input(&self) -> Result<ModelInput> {
        let pwv = match &self.pwv {
            Some(p) => stack(p, |v| Ok(normalize_pwv(v)))?,
            None => {
                let n = self.extent();
                Tensor::zeros([self.hist.len(), 1, n, n])?
            }
        };
        Ok(ModelInput {
            pwv,
            hist: stack(&self.hist, normalize_radar)?,
            prior: stack(&self.prior, normalize_radar)?,
        })
    }

    /// Normalized targets, `[t_out, 1, n, n]`.
    pub fn target_tensor(&self) -> Result<Tensor> {
        stack(&self.target, normalize_radar)
    }
}

/// Sliding windows with stride 1; windows touching a missing frame are skipped.
pub fn make_windows(
    radar: &FrameSequence,
    pwv: Option<&FrameSequence>,
    prior: PriorSource<'_>,
    t_in: usize,
    t_out: usize,
    ranges: &SplitRanges,
) -> Result<Vec<SampleWindow>> {
    radar.validate()?;
    if t_in == 0 || t_out == 0 {
        return Err(Error::InvalidArgument(
            "t_in and t_out must be at least 1".into(),
        ));
    }
    if let Some(p) = pwv {
        p.validate()?;
        if p.epochs != radar.epochs {
            return Err(Error::InvalidArgument(
                "water-vapour and radar epochs are not aligned".into(),
            ));
        }
    }
    let span = t_in + t_out;
    if radar.len() < span {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    'windows: for s in 0..=radar.len() - span {
        let mut hist = Vec::with_capacity(t_in);
        let mut target = Vec::with_capacity(t_out);
        for k in s..s + span {
            let Some(f) = &radar.frames[k] else {
                continue 'windows;
            };
            if k < s + t_in {
                hist.push(f.clone())
            } else {
                target.push(f.clone())
            }
        }
        let pwv_frames = match pwv {
            Some(p) => {
                let mut v = Vec::with_capacity(t_in);
                for k in s..s + t_in {
                    let Some(f) = &p.frames[k] else {
                        continue 'windows;
                    };
                    v.push(f.clone());
                }
                Some(v)
            }
            None => None,
        };
        let hist_epochs = radar.epochs[s..s + t_in].to_vec();
        let target_epochs = radar.epochs[s + t_in..s + span].to_vec();
        let prior_frames = match &prior {
            PriorSource::Stored(seq) => {
                let mut v = Vec::with_capacity(t_out);
                for &t in &target_epochs {
                    let Ok(i) = seq.epochs.binary_search(&t) else {
                        continue 'windows;
                    };
                    let Some(f) = &seq.frames[i] else {
                        continue 'windows;
                    };
                    v.push(f.clone());
                }
                v
            }
            PriorSource::Generator(gen) => gen(&hist, &target_epochs)?,
        };
        if prior_frames.len() != t_out {
            return Err(Error::InvalidArgument(format!(
                "prior source produced {} frames, expected {t_out}",
                prior_frames.len()
            )));
        }
        out.push(SampleWindow {
            split: ranges.assign(hist_epochs[0]),
            pwv: pwv_frames,
            hist,
            prior: prior_frames,
            prior_epochs: target_epochs.clone(),
            target,
            hist_epochs,
            target_epochs,
        });
    }
    Ok(out)
}
