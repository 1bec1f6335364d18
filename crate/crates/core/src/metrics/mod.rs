//! Forecast verification in physical units (mm/h).

mod report;

pub use report::{
    read_report, write_comparison, write_report, CATEGORICAL_CSV, COMPARISON_CSV, CONTINGENCY_CSV,
    CONTINUOUS_CSV, META_CSV,
};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Grid;
use crate::error::{Error, Result};

/// Light, moderate and heavy rain, mm/h.
pub const THRESHOLDS: [f64; 3] = [0.1, 1.0, 4.0];
/// Lead frames evaluated at a 10-minute cadence: 10, 40, 80 and 120 minutes.
pub const LEAD_FRAMES: [usize; 4] = [1, 4, 8, 12];
pub const FRAME_MINUTES: i64 = 10;

fn check_pair(p: &[Grid], g: &[Grid]) -> Result<usize> {
    if p.len() != g.len() {
        return Err(Error::shape("metrics", &[p.len()], &[g.len()]));
    }
    let mut n = 0;
    for (a, b) in p.iter().zip(g) {
        if a.n() != b.n() {
            return Err(Error::shape("metrics", &[a.n(), a.n()], &[b.n(), b.n()]));
        }
        n += a.values().len();
    }
    if n == 0 {
        return Err(Error::EmptySequence("metrics"));
    }
    Ok(n)
}

fn error_sums(p: &[Grid], g: &[Grid]) -> (f64, f64) {
    let (mut abs, mut sq) = (0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        for (x, y) in a.values().iter().zip(b.values()) {
            let d = x - y;
            abs += d.abs();
            sq += d * d;
        }
    }
    (abs, sq)
}

pub fn mae(p: &[Grid], g: &[Grid]) -> Result<f64> {
    let n = check_pair(p, g)?;
    Ok(error_sums(p, g).0 / n as f64)
}

pub fn rmse(p: &[Grid], g: &[Grid]) -> Result<f64> {
    let n = check_pair(p, g)?;
    Ok((error_sums(p, g).1 / n as f64).sqrt())
}

/// `value ≥ τ` is an event.
pub fn binarize(g: &Grid, tau: f64) -> Vec<bool> {
    g.values().iter().map(|&v| v >= tau).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ContingencyTable {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ContingencyTable {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl std::ops::Add for ContingencyTable {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

pub fn contingency(pred: &[bool], truth: &[bool]) -> Result<ContingencyTable> {
    if pred.len() != truth.len() {
        return Err(Error::shape("contingency", &[pred.len()], &[truth.len()]));
    }
    let mut t = ContingencyTable::default();
    for (&p, &o) in pred.iter().zip(truth) {
        match (p, o) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(t)
}

fn grid_table(p: &Grid, g: &Grid, tau: f64) -> ContingencyTable {
    let mut t = ContingencyTable::default();
    for (&x, &y) in p.values().iter().zip(g.values()) {
        match (x >= tau, y >= tau) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    t
}

/// `tp / (tp + fp + fn)`; `None` when nothing was forecast or observed.
pub fn csi(t: &ContingencyTable) -> Option<f64> {
    let den = t.tp + t.fp + t.fn_;
    (den > 0).then(|| t.tp as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CsiAgg {
    /// CSI of contingency tables summed over samples.
    #[default]
    Pooled,
    /// Mean of per-sample CSI, skipping undefined samples.
    Mean,
}

impl CsiAgg {
    pub fn name(self) -> &'static str {
        match self {
            CsiAgg::Pooled => "pooled",
            CsiAgg::Mean => "mean",
        }
    }
}

impl fmt::Display for CsiAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CsiAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(CsiAgg::Pooled),
            "mean" => Ok(CsiAgg::Mean),
            _ => Err(Error::InvalidArgument(format!(
                "unknown CSI aggregation `{s}` (pooled|mean)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub thresholds: Vec<f64>,
    /// 1-based lead frames.
    pub lead_frames: Vec<usize>,
    pub agg: CsiAgg,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            thresholds: THRESHOLDS.to_vec(),
            lead_frames: LEAD_FRAMES.to_vec(),
            agg: CsiAgg::Pooled,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.lead_frames.is_empty() {
            return Err(Error::InvalidArgument(
                "thresholds and lead frames must be non-empty".into(),
            ));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) || self.lead_frames.contains(&0) {
            return Err(Error::InvalidArgument(
                "thresholds must be finite and lead frames ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub thresholds: Vec<f64>,
    pub lead_frames: Vec<usize>,
    pub agg: CsiAgg,
    /// Pooled counts, `[threshold][lead]`.
    pub tables: Vec<Vec<ContingencyTable>>,
    /// Scores under `agg`, `[threshold][lead]`.
    pub csi: Vec<Vec<Option<f64>>>,
    pub mae: f64,
    pub rmse: f64,
    pub samples: usize,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn csi_at(&self, tau: f64, lead_frame: usize) -> Option<f64> {
        let i = self.thresholds.iter().position(|&t| t == tau)?;
        let j = self.lead_frames.iter().position(|&l| l == lead_frame)?;
        self.csi[i][j]
    }

    /// `(threshold, lead minutes)` of every undefined cell.
    pub fn undefined_cells(&self) -> Vec<(f64, i64)> {
        let mut out = Vec::new();
        for (i, &tau) in self.thresholds.iter().enumerate() {
            for (j, &lead) in self.lead_frames.iter().enumerate() {
                if self.csi[i][j].is_none() {
                    out.push((tau, lead as i64 * FRAME_MINUTES));
                }
            }
        }
        out
    }

    pub fn require_defined(&self) -> Result<()> {
        match self.undefined_cells().first() {
            Some(&(threshold, lead_minutes)) => Err(Error::UndefinedCsi {
                variant: self.variant.clone(),
                threshold,
                lead_minutes,
            }),
            None => Ok(()),
        }
    }
}

struct SampleScores {
    abs: f64,
    sq: f64,
    pixels: usize,
    tables: Vec<Vec<ContingencyTable>>,
}

/// Scores forecasts against observations, both in mm/h, one frame list per sample.
pub fn evaluate(
    preds: &[Vec<Grid>],
    truths: &[Vec<Grid>],
    spec: &EvalSpec,
) -> Result<MetricsReport> {
    spec.validate()?;
    if preds.len() != truths.len() {
        return Err(Error::shape("evaluate", &[preds.len()], &[truths.len()]));
    }
    if preds.is_empty() {
        return Err(Error::EmptySequence("evaluate"));
    }
    let per_sample: Vec<SampleScores> = preds
        .par_iter()
        .zip(truths)
        .map(|(p, g)| {
            let pixels = check_pair(p, g)?;
            if let Some(&lead) = spec.lead_frames.iter().find(|&&l| l > p.len()) {
                return Err(Error::InvalidArgument(format!(
                    "lead frame {lead} beyond a {}-frame forecast",
                    p.len()
                )));
            }
            let (abs, sq) = error_sums(p, g);
            let tables = spec
                .thresholds
                .iter()
                .map(|&tau| {
                    spec.lead_frames
                        .iter()
                        .map(|&l| grid_table(&p[l - 1], &g[l - 1], tau))
                        .collect()
                })
                .collect();
            Ok(SampleScores {
                abs,
                sq,
                pixels,
                tables,
            })
        })
        .collect::<Result<_>>()?;

    let (nt, nl) = (spec.thresholds.len(), spec.lead_frames.len());
    let mut tables = vec![vec![ContingencyTable::default(); nl]; nt];
    let (mut abs, mut sq, mut pixels) = (0.0, 0.0, 0usize);
    for s in &per_sample {
        abs += s.abs;
        sq += s.sq;
        pixels += s.pixels;
        for (row, srow) in tables.iter_mut().zip(&s.tables) {
            for (t, st) in row.iter_mut().zip(srow) {
                *t += *st;
            }
        }
    }
    let csi_grid = (0..nt)
        .map(|i| {
            (0..nl)
                .map(|j| match spec.agg {
                    CsiAgg::Pooled => csi(&tables[i][j]),
                    CsiAgg::Mean => {
                        let defined: Vec<f64> = per_sample
                            .iter()
                            .filter_map(|s| csi(&s.tables[i][j]))
                            .collect();
                        (!defined.is_empty())
                            .then(|| defined.iter().sum::<f64>() / defined.len() as f64)
                    }
                })
                .collect()
        })
        .collect();
    Ok(MetricsReport {
        variant: String::new(),
        thresholds: spec.thresholds.clone(),
        lead_frames: spec.lead_frames.clone(),
        agg: spec.agg,
        tables,
        csi: csi_grid,
        mae: abs / pixels as f64,
        rmse: (sq / pixels as f64).sqrt(),
        samples: preds.len(),
        fingerprint: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::persistence;

    fn g(v: &[f64]) -> Grid {
        let n = (v.len() as f64).sqrt() as usize;
        Grid::new(n, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_cases() {
        assert_eq!(
            mae(&[g(&[1.0, 3.0, 0.0, 0.0])], &[g(&[2.0, 2.0, 0.0, 0.0])]).unwrap(),
            0.5
        );
        let r = rmse(&[g(&[0.0, 0.0, 0.0, 0.0])], &[g(&[3.0, 4.0, 3.0, 4.0])]).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            mae(&[g(&[1.5])], &[g(&[-1.0])]).unwrap(),
            rmse(&[g(&[1.5])], &[g(&[-1.0])]).unwrap()
        );
        let t = |tp, fp, fn_| ContingencyTable { tp, fp, fn_, tn: 0 };
        assert_eq!(csi(&t(1, 0, 0)), Some(1.0));
        assert_eq!(csi(&t(2, 1, 1)), Some(0.5));
        assert_eq!(csi(&t(0, 0, 0)), None);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(
            binarize(&g(&[1.0, 0.999, 1.001, 0.0]), 1.0),
            vec![true, false, true, false]
        );
        assert!(binarize(&Grid::filled(3, 0.0), 0.1).iter().all(|b| !b));
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[Grid::filled(2, 0.0)], &[Grid::filled(3, 0.0)]).is_err());
        assert!(contingency(&[true], &[true, false]).is_err());
        let one = vec![vec![Grid::filled(2, 0.0)]];
        assert!(
            evaluate(&one, &one, &EvalSpec::default()).is_err(),
            "lead 12 needs 12 frames"
        );
    }

    #[test]
    fn persistence_on_static_scene_is_perfect() {
        let truth = Grid::from_fn(8, |r, c| (r * c) as f64 * 0.2);
        let preds = vec![persistence(&truth, 12)];
        let report = evaluate(&preds, &preds, &EvalSpec::default()).unwrap();
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.rmse, 0.0);
        for row in &report.csi {
            assert!(row.iter().all(|&c| c == Some(1.0)));
        }
    }

    #[test]
    fn persistence_decays_on_translating_scene() {
        let frame = |k: usize| {
            Grid::from_fn(32, |r, c| {
                let d2 = (c as f64 - 6.0 - k as f64).powi(2) + (r as f64 - 16.0).powi(2);
                8.0 * (-d2 / 18.0).exp()
            })
        };
        let truth: Vec<Grid> = (1..=12).map(frame).collect();
        let preds = vec![persistence(&frame(0), 12)];
        let spec = EvalSpec {
            lead_frames: (1..=12).collect(),
            ..Default::default()
        };
        let report = evaluate(&preds, &[truth], &spec).unwrap();
        for row in &report.csi {
            let v: Vec<f64> = row.iter().map(|c| c.unwrap_or(0.0)).collect();
            assert!(v.windows(2).all(|w| w[1] <= w[0]), "{v:?}");
            assert!(v[11] < v[0]);
        }
    }

    #[test]
    fn mean_aggregation_changes_scores_not_counts() {
        let a = vec![Grid::from_fn(4, |r, _| r as f64)];
        let b = vec![Grid::from_fn(4, |_, c| c as f64)];
        let preds = vec![a.clone(), b.clone()];
        let truths = vec![b, a.clone()];
        let spec = EvalSpec {
            lead_frames: vec![1],
            ..Default::default()
        };
        let pooled = evaluate(&preds, &truths, &spec).unwrap();
        let mean = evaluate(
            &preds,
            &truths,
            &EvalSpec {
                agg: CsiAgg::Mean,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(pooled.tables, mean.tables);
        assert_eq!(pooled.mae, mean.mae);
    }

    #[test]
    fn undefined_cells_are_reported() {
        let dry = vec![vec![Grid::filled(4, 0.0)]];
        let spec = EvalSpec {
            lead_frames: vec![1],
            ..Default::default()
        };
        let mut r = evaluate(&dry, &dry, &spec).unwrap();
        r.variant = "full".into();
        assert_eq!(r.undefined_cells().len(), 3);
        assert!(matches!(
            r.require_defined(),
            Err(Error::UndefinedCsi { .. })
        ));
    }
}
