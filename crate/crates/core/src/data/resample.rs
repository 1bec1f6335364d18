use super::FrameSequence;
use crate::error::{Error, Result};

/// Source gaps longer than this (seconds) produce missing target frames.
pub const MAX_GAP_SECS: i64 = 3600;

/// Nearest-frame resampling onto `anchor + k·cadence`, anchored at the first epoch.
///
/// Ties go to the earlier source frame. A target inside a source gap longer
/// than [`MAX_GAP_SECS`], or whose nearest source frame is missing, is `None`.
pub fn resample_temporal(seq: &FrameSequence, cadence: i64) -> Result<FrameSequence> {
    if seq.is_empty() {
        return Err(Error::EmptySequence("resample_temporal"));
    }
    seq.validate()?;
    let src = seq.cadence;
    if cadence <= 0 || src <= 0 || (cadence % src != 0 && src % cadence != 0) {
        return Err(Error::InvalidArgument(format!(
            "source cadence {src}s and target cadence {cadence}s are not commensurate"
        )));
    }
    let epochs = &seq.epochs;
    let (first, last) = (epochs[0], *epochs.last().expect("non-empty"));
    let count = ((last - first) / cadence + 1) as usize;
    let mut out = FrameSequence {
        frames: Vec::with_capacity(count),
        epochs: Vec::with_capacity(count),
        cadence,
        unit: seq.unit,
    };
    for k in 0..count as i64 {
        let t = first + k * cadence;
        // First source epoch ≥ t.
        let hi = epochs.partition_point(|&e| e < t);
        let frame = if epochs.get(hi) == Some(&t) {
            seq.frames[hi].clone()
        } else {
            let (a, b) = (hi - 1, hi);
            let gap = epochs[b] - epochs[a];
            if gap > MAX_GAP_SECS {
                None
            } else {
                let nearest = if t - epochs[a] <= epochs[b] - t { a } else { b };
                seq.frames[nearest].clone()
            }
        };
        out.frames.push(frame);
        out.epochs.push(t);
    }
    Ok(out)
}
