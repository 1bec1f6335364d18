//! Loss, optimizer and the training loop.

mod ablation;
mod suite;

pub use ablation::{
    mean_over_seeds, paired_summary, run_ablation, run_seeds, write_contrasts, AblationData,
    Contrast, ExperimentPlan, PairedSummary, PlanEntry, SeedOutcome, CONTRASTS,
};
pub use suite::{gradcheck_suite, SuiteCase, SuiteReport, END_TO_END_TOLERANCE, LAYER_TOLERANCE};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::baselines::persistence;
use crate::data::{denormalize_radar, Grid, SampleWindow};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CsiAgg, EvalSpec, MetricsReport};
use crate::model::{checkpoint, FusionCast, ModelInput, TeacherFeed};
use crate::params::{Graph, ParamGrads, ParamStore};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_csi_tau1_t120";
/// Threshold (mm/h) and lead frame that pick the best checkpoint.
pub const SELECTION_THRESHOLD: f64 = 1.0;
pub const SELECTION_LEAD: usize = 12;

/// Linear decay of the probability of feeding ground truth to the next decoder step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherForcing {
    pub start: f64,
    pub end: f64,
}

impl TeacherForcing {
    pub fn probability(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let f = epoch as f64 / (epochs - 1) as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip_norm: f64,
    pub teacher_forcing: TeacherForcing,
    pub seed: u64,
    /// Also save `epoch_<k>.ckpt` every this many epochs; `0` keeps only the best.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            epochs: 20,
            clip_norm: 1.0,
            teacher_forcing: TeacherForcing {
                start: 0.5,
                end: 0.0,
            },
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        let tf = self.teacher_forcing;
        if !((0.0..=1.0).contains(&tf.start) && (0.0..=1.0).contains(&tf.end)) {
            return bad("teacher-forcing probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean squared error over every pixel of every frame.
pub fn loss(g: &mut Graph<'_>, outputs: &[Var], target: &Tensor) -> Result<Var> {
    if outputs.is_empty() || target.shape()[0] != outputs.len() {
        return Err(Error::shape("loss", &[outputs.len()], &target.shape()[..1]));
    }
    let mut total = None;
    for (t, &y) in outputs.iter().enumerate() {
        let truth = g.input(target.index_outer(t)?);
        let d = g.tape.sub(y, truth)?;
        let sq = g.tape.mul(d, d)?;
        let m = g.tape.mean(sq);
        total = Some(match total {
            Some(acc) => g.tape.add(acc, m)?,
            None => m,
        });
    }
    let total = total.expect("non-empty outputs");
    Ok(g.tape.scale(total, 1.0 / outputs.len() as f64))
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to the global norm limit, then updates `store`.
    /// Returns the pre-clip global norm. Parameters without a gradient see zero.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: store.get(id).name.clone(),
                    });
                }
            }
        }
        let norm = grads
            .0
            .iter()
            .flatten()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let k = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.get_mut(id).value.data_mut();
            for j in 0..value.len() {
                let gj = g.map_or(0.0, |g| g[j] * k);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                value[j] -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(norm)
    }
}

/// A window converted to normalized tensors once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: ModelInput,
    pub target: Tensor,
    /// Observed targets in mm/h.
    pub truth: Vec<Grid>,
}

pub fn prepare(windows: &[SampleWindow]) -> Result<Vec<Prepared>> {
    windows
        .par_iter()
        .map(|w| {
            Ok(Prepared {
                input: w.to_model_input()?,
                target: w.target_tensor()?,
                truth: w.target.clone(),
            })
        })
        .collect()
}

/// Forecast frames in mm/h.
pub fn predict_physical(model: &FusionCast, input: &ModelInput) -> Result<Vec<Grid>> {
    let out = model.predict(input)?;
    let n = model.config.grid;
    (0..out.shape()[0])
        .map(|t| {
            Grid::new(
                n,
                out.data()[t * n * n..(t + 1) * n * n]
                    .iter()
                    .map(|&y| denormalize_radar(y))
                    .collect(),
            )
        })
        .collect()
}

/// Scores `model` on prepared windows; also returns the mean normalized loss.
pub fn evaluate_model(
    model: &FusionCast,
    data: &[Prepared],
    spec: &EvalSpec,
) -> Result<(MetricsReport, f64)> {
    let outs: Vec<(Vec<Grid>, f64)> = data
        .par_iter()
        .map(|p| {
            let mut g = Graph::new(&model.params);
            let frames = model.forward(&mut g, &p.input, None)?;
            let l = loss(&mut g, &frames, &p.target)?;
            let l = g.value(l).item();
            let n = model.config.grid;
            let grids = frames
                .iter()
                .map(|&f| {
                    Grid::new(
                        n,
                        g.value(f)
                            .data()
                            .iter()
                            .map(|&y| denormalize_radar(y))
                            .collect(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((grids, l))
        })
        .collect::<Result<_>>()?;
    let mean_loss = outs.iter().map(|o| o.1).sum::<f64>() / outs.len().max(1) as f64;
    let (preds, _): (Vec<Vec<Grid>>, Vec<f64>) = outs.into_iter().unzip();
    let truths: Vec<Vec<Grid>> = data.iter().map(|p| p.truth.clone()).collect();
    let mut report = evaluate(&preds, &truths, spec)?;
    report.variant = model.config.variant.name().to_string();
    Ok((report, mean_loss))
}

/// Scores persistence of the last observation and the extrapolated prior on
/// the same windows, as reports named `persistence` and `prior`.
pub fn evaluate_baselines(windows: &[SampleWindow], spec: &EvalSpec) -> Result<Vec<MetricsReport>> {
    let truths: Vec<Vec<Grid>> = windows.iter().map(|w| w.target.clone()).collect();
    let persist: Vec<Vec<Grid>> = windows
        .iter()
        .map(|w| persistence(w.hist.last().expect("non-empty history"), w.target.len()))
        .collect();
    let prior: Vec<Vec<Grid>> = windows.iter().map(|w| w.prior.clone()).collect();
    let mut a = evaluate(&persist, &truths, spec)?;
    a.variant = "persistence".into();
    let mut b = evaluate(&prior, &truths, spec)?;
    b.variant = "prior".into();
    Ok(vec![a, b])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_csi: Option<f64>,
}

pub fn format_log(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.8}"));
    for r in rows {
        writeln!(
            s,
            "{},{:.8},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_csi)
        )
        .expect("string write");
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_csi: Option<f64>,
}

fn selection_spec(t_out: usize) -> EvalSpec {
    EvalSpec {
        thresholds: vec![SELECTION_THRESHOLD],
        lead_frames: vec![SELECTION_LEAD.min(t_out)],
        agg: CsiAgg::Pooled,
    }
}

fn batch_gradients(
    model: &FusionCast,
    batch: &[(&Prepared, Vec<bool>)],
) -> Result<(ParamGrads, f64)> {
    let per: Vec<(ParamGrads, f64)> = batch
        .par_iter()
        .map(|(p, use_truth)| {
            let mut g = Graph::new(&model.params);
            let feed = TeacherFeed {
                targets: p.target.clone(),
                use_truth: use_truth.clone(),
            };
            let frames = model.forward(&mut g, &p.input, Some(&feed))?;
            let l = loss(&mut g, &frames, &p.target)?;
            let value = g.value(l).item();
            Ok((g.backward(l)?, value))
        })
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::default();
    let mut loss_sum = 0.0;
    for (gr, l) in &per {
        total.add_assign(gr);
        loss_sum += l;
    }
    let k = 1.0 / per.len() as f64;
    total.scale(k);
    Ok((total, loss_sum * k))
}

/// Trains in place, leaving the best-scoring parameters in `model`.
///
/// With `out_dir`, writes `train_log.csv` and `best.ckpt` there.
pub fn train(
    model: &mut FusionCast,
    train_set: &[Prepared],
    val_set: &[Prepared],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySequence("train"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let t_out = model.config.t_out;
    let spec = selection_spec(t_out);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407),
        );
        order.shuffle(&mut rng);
        let p_truth = cfg.teacher_forcing.probability(epoch - 1, cfg.epochs);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Prepared, Vec<bool>)> = chunk
                .iter()
                .map(|&i| {
                    (
                        &train_set[i],
                        (0..t_out).map(|_| rng.random_bool(p_truth)).collect(),
                    )
                })
                .collect();
            let (grads, l) = batch_gradients(model, &batch)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut model.params, &grads, cfg)?;
            loss_sum += l * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        let (val_loss, val_csi) = if val_set.is_empty() {
            (None, None)
        } else {
            let (report, l) = evaluate_model(model, val_set, &spec)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            (Some(l), report.csi[0][0])
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_csi,
        });

        // Undefined validation CSI ranks below any score; ties keep the earlier epoch.
        let score = val_csi.unwrap_or(f64::NEG_INFINITY);
        let improve = match &best {
            None => true,
            Some((s, _, _)) => val_set.is_empty() || score > *s,
        };
        if improve {
            best = Some((score, epoch, model.params.clone()));
        }
        if let Some(dir) = out_dir {
            fs::write(dir.join("train_log.csv"), format_log(&log))
                .map_err(Error::at(dir.join("train_log.csv")))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&model.params, &dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }

    let (score, best_epoch, params) = best.expect("epochs >= 1");
    model.params = params;
    if let Some(dir) = out_dir {
        checkpoint::save(&model.params, &dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_csi: score.is_finite().then_some(score),
    })
}
