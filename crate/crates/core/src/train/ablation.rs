//! Training and scoring several variants on identical data and seeds.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{evaluate_model, prepare, train, Prepared, TrainConfig};
use crate::data::{SampleWindow, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    write_comparison, write_report, EvalSpec, MetricsReport, COMPARISON_CSV, FRAME_MINUTES,
};
use crate::model::{FusionCast, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub entries: Vec<PlanEntry>,
    pub eval: EvalSpec,
    /// Copied into every report.
    pub fingerprint: String,
}

impl ExperimentPlan {
    /// One entry per variant, all sharing `model` (variant aside) and `train`.
    pub fn for_variants(
        variants: &[Variant],
        model: &ModelConfig,
        train: &TrainConfig,
        eval: EvalSpec,
    ) -> Self {
        ExperimentPlan {
            entries: variants
                .iter()
                .map(|&variant| PlanEntry {
                    model: ModelConfig {
                        variant,
                        ..model.clone()
                    },
                    train: train.clone(),
                })
                .collect(),
            eval,
            fingerprint: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument(
                "experiment plan has no entries".into(),
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.model.variant) {
                return Err(Error::InvalidArgument(format!(
                    "variant {} appears twice in the plan",
                    e.model.variant
                )));
            }
            e.model.validate()?;
            e.train.validate()?;
        }
        self.eval.validate()
    }
}

#[derive(Clone, Debug)]
pub struct AblationData {
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl AblationData {
    /// Splits windows by their assigned split, keeping at most `max_train`
    /// training windows spread evenly over the available ones.
    pub fn from_windows(windows: &[SampleWindow], max_train: usize) -> Result<Self> {
        let pick = |s: Split| {
            windows
                .iter()
                .filter(|w| w.split == Some(s))
                .cloned()
                .collect::<Vec<_>>()
        };
        let mut train = pick(Split::Train);
        if max_train > 0 && train.len() > max_train {
            let stride = train.len() as f64 / max_train as f64;
            train = (0..max_train)
                .map(|k| train[(k as f64 * stride) as usize].clone())
                .collect();
        }
        Ok(AblationData {
            train: prepare(&train)?,
            val: prepare(&pick(Split::Val))?,
            test: prepare(&pick(Split::Test))?,
        })
    }
}

/// Trains and tests every plan entry. With `out_dir`, each variant gets a
/// subdirectory with its log, checkpoint and report, and the directory gets a
/// comparison table.
pub fn run_ablation(
    plan: &ExperimentPlan,
    data: &AblationData,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    plan.validate()?;
    if data.test.is_empty() {
        return Err(Error::EmptySequence("ablation test split"));
    }
    let mut reports = Vec::with_capacity(plan.entries.len());
    for entry in &plan.entries {
        let name = entry.model.variant.name();
        let dir = out_dir.map(|d| d.join(name));
        let mut model = FusionCast::new(entry.model.clone())?;
        train(
            &mut model,
            &data.train,
            &data.val,
            &entry.train,
            dir.as_deref(),
        )?;
        let (mut report, _) = evaluate_model(&model, &data.test, &plan.eval)?;
        report.fingerprint = plan.fingerprint.clone();
        if let Some(d) = &dir {
            write_report(d, std::slice::from_ref(&report))?;
        }
        reports.push(report);
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(Error::at(d))?;
        write_comparison(&d.join(COMPARISON_CSV), &reports)?;
    }
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub reports: Vec<MetricsReport>,
}

impl SeedOutcome {
    pub fn csi(&self, variant: Variant, tau: f64, lead_frame: usize) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.variant == variant.name())?
            .csi_at(tau, lead_frame)
    }
}

/// Runs one ablation per seed; `make` builds the plan and data for a seed.
pub fn run_seeds<F>(seeds: &[u64], make: F, out_dir: Option<&Path>) -> Result<Vec<SeedOutcome>>
where
    F: Fn(u64) -> Result<(ExperimentPlan, AblationData)>,
{
    seeds
        .iter()
        .map(|&seed| {
            let (plan, data) = make(seed)?;
            let dir = out_dir.map(|d| d.join(format!("seed_{seed}")));
            Ok(SeedOutcome {
                seed,
                reports: run_ablation(&plan, &data, dir.as_deref())?,
            })
        })
        .collect()
}

/// Paired comparison of two score series over the same seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedSummary {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `a − b`.
    pub mean_diff: f64,
    /// Standard error of the mean difference (sample standard deviation / √n).
    pub se_diff: f64,
}

impl PairedSummary {
    /// `a` beats `b` by more than one standard error.
    pub fn clearly_better(&self) -> bool {
        self.mean_diff > self.se_diff
    }
}

pub fn paired_summary(a: &[f64], b: &[f64]) -> Result<PairedSummary> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired summary needs two equal series of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let var = d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PairedSummary {
        n: a.len(),
        mean_a: mean(a),
        mean_b: mean(b),
        mean_diff: md,
        se_diff: (var / n).sqrt(),
    })
}

/// Per-variant scores averaged over seeds. Counts are summed; a CSI cell is
/// undefined when any seed left it undefined.
pub fn mean_over_seeds(outcomes: &[SeedOutcome]) -> Result<Vec<MetricsReport>> {
    let first = outcomes
        .first()
        .ok_or(Error::EmptySequence("seed outcomes"))?;
    let k = outcomes.len() as f64;
    first
        .reports
        .iter()
        .map(|base| {
            let mut mean = base.clone();
            for o in &outcomes[1..] {
                let r = o
                    .reports
                    .iter()
                    .find(|r| r.variant == base.variant)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "seed {} has no report for {}",
                            o.seed, base.variant
                        ))
                    })?;
                if r.thresholds != base.thresholds || r.lead_frames != base.lead_frames {
                    return Err(Error::InvalidArgument(
                        "seed reports use different thresholds or leads".into(),
                    ));
                }
                for (ti, row) in r.csi.iter().enumerate() {
                    for (li, v) in row.iter().enumerate() {
                        mean.tables[ti][li] += r.tables[ti][li];
                        mean.csi[ti][li] = match (mean.csi[ti][li], v) {
                            (Some(a), Some(b)) => Some(a + b),
                            _ => None,
                        };
                    }
                }
                mean.mae += r.mae;
                mean.rmse += r.rmse;
                mean.samples += r.samples;
            }
            for row in &mut mean.csi {
                for v in row.iter_mut() {
                    *v = v.map(|x| x / k);
                }
            }
            mean.mae /= k;
            mean.rmse /= k;
            Ok(mean)
        })
        .collect()
}

/// One directional comparison between two variants at a threshold and lead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrast {
    pub better: Variant,
    pub worse: Variant,
    pub threshold: f64,
    pub lead_frame: usize,
}

/// Full model against each removed branch at 1 mm/h, and gated against
/// concatenated fusion at 4 mm/h, all at the last lead.
pub const CONTRASTS: [Contrast; 3] = [
    Contrast {
        better: Variant::Full,
        worse: Variant::NoPwv,
        threshold: 1.0,
        lead_frame: 12,
    },
    Contrast {
        better: Variant::Full,
        worse: Variant::NoPrior,
        threshold: 1.0,
        lead_frame: 12,
    },
    Contrast {
        better: Variant::Full,
        worse: Variant::RpfConcatFusion,
        threshold: 4.0,
        lead_frame: 12,
    },
];

impl Contrast {
    /// Paired CSI summary across seeds; undefined cells are an error.
    pub fn summarize(&self, outcomes: &[SeedOutcome]) -> Result<PairedSummary> {
        let series = |v: Variant| -> Result<Vec<f64>> {
            outcomes
                .iter()
                .map(|o| {
                    o.csi(v, self.threshold, self.lead_frame)
                        .ok_or_else(|| Error::UndefinedCsi {
                            variant: v.name().to_string(),
                            threshold: self.threshold,
                            lead_minutes: self.lead_frame as i64 * FRAME_MINUTES,
                        })
                })
                .collect()
        };
        paired_summary(&series(self.better)?, &series(self.worse)?)
    }
}

/// `contrast,threshold,lead_minutes,n,mean_a,mean_b,mean_diff,se_diff` rows.
pub fn write_contrasts(
    path: &Path,
    outcomes: &[SeedOutcome],
) -> Result<Vec<(Contrast, PairedSummary)>> {
    let mut out =
        String::from("contrast,threshold,lead_minutes,n,mean_a,mean_b,mean_diff,se_diff\n");
    let mut rows = Vec::new();
    for c in CONTRASTS {
        let present = |v: Variant| {
            outcomes.iter().all(|o| {
                o.reports.iter().any(|r| {
                    r.variant == v.name()
                        && r.thresholds.contains(&c.threshold)
                        && r.lead_frames.contains(&c.lead_frame)
                })
            })
        };
        if !present(c.better) || !present(c.worse) {
            continue;
        }
        let s = c.summarize(outcomes)?;
        out += &format!(
            "{}>{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            c.better,
            c.worse,
            c.threshold,
            c.lead_frame as i64 * FRAME_MINUTES,
            s.n,
            s.mean_a,
            s.mean_b,
            s.mean_diff,
            s.se_diff
        );
        rows.push((c, s));
    }
    fs::write(path, out).map_err(Error::at(path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_summary_hand_case() {
        let s = paired_summary(&[0.5, 0.6, 0.7], &[0.4, 0.4, 0.4]).unwrap();
        assert!((s.mean_diff - 0.2).abs() < 1e-12);
        // Differences 0.1, 0.2, 0.3: sd 0.1, se 0.1/√3.
        assert!((s.se_diff - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert!(s.clearly_better());
        assert!(paired_summary(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn duplicate_variants_are_rejected() {
        let plan = ExperimentPlan::for_variants(
            &[Variant::Full, Variant::Full],
            &ModelConfig::gradcheck(),
            &TrainConfig::default(),
            EvalSpec::default(),
        );
        assert!(plan.validate().is_err());
    }

    fn outcome(seed: u64, full: f64, no_pwv: f64) -> SeedOutcome {
        let report = |v: Variant, x: f64| {
            let truth = vec![vec![crate::data::Grid::filled(4, 2.0); 12]];
            let mut r = crate::metrics::evaluate(&truth, &truth, &EvalSpec::default()).unwrap();
            r.variant = v.name().into();
            r.csi[1][3] = Some(x);
            r
        };
        SeedOutcome {
            seed,
            reports: vec![report(Variant::Full, full), report(Variant::NoPwv, no_pwv)],
        }
    }

    #[test]
    fn seed_means_and_contrasts() {
        let outs = vec![outcome(1, 0.6, 0.4), outcome(2, 0.8, 0.5)];
        let mean = mean_over_seeds(&outs).unwrap();
        assert!((mean[0].csi[1][3].unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(mean[0].samples, 2);
        let s = CONTRASTS[0].summarize(&outs).unwrap();
        assert!((s.mean_diff - 0.25).abs() < 1e-12);
        assert!(CONTRASTS[1].summarize(&outs).is_err());
    }
}
