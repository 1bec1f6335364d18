//! Finite-difference checks over every layer and the end-to-end model.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Var};
use crate::error::Result;
use crate::gradcheck::{finite_difference_check_with_fault, jitter, GradCheckReport};
use crate::layers::{
    channel_pool, conv2d, convlstm_step, deconv2d, encode_sequence, global_pool, mlp_apply,
    BranchState, Conv2dLayer, ConvLstmCell, Deconv2dLayer, SharedMlp,
};
use crate::model::{FusionCast, ModelConfig, ModelInput, TeacherFeed, Variant};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rpf::{
    channel_attention, gated_fuse, refine_radar, rpf_fuse, spatial_attention, RpfModule,
};
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const LAYER_EPS: f64 = 1e-5;
const MODEL_EPS: f64 = 1e-4;
/// Probes that cross a ReLU or max switch may be skipped, but only rarely.
const MAX_KINK_FRACTION: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        let kinks_ok =
            (self.report.skipped_kinks as f64) <= MAX_KINK_FRACTION * self.report.checked as f64;
        self.report.checked > 0 && self.report.max_rel_err < self.tolerance && kinks_ok
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<SuiteCase>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(SuiteCase::passed)
    }

    pub fn worst(&self) -> Option<&SuiteCase> {
        self.cases.iter().max_by(|a, b| {
            (a.report.max_rel_err / a.tolerance).total_cmp(&(b.report.max_rel_err / b.tolerance))
        })
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("valid shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(random(g.tape.shape(out), &mut rng));
    let p = g.tape.mul(out, r)?;
    Ok(g.tape.sum(p))
}

type Body = Box<dyn Fn(&mut Graph<'_>) -> Result<Var> + Sync>;

struct Case {
    name: &'static str,
    store: ParamStore,
    body: Body,
}

fn layer_cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = Vec::new();
    let input = |store: &mut ParamStore,
                 name: &str,
                 shape: &[usize],
                 rng: &mut ChaCha8Rng|
     -> Result<ParamId> { store.add(name, random(shape, rng)) };

    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[2, 8, 8], &mut rng)?;
        let conv = Conv2dLayer::new(&mut s, "conv", 2, 3, 3, 2, 1, &mut rng)?;
        cases.push(Case {
            name: "conv2d k3 s2 p1",
            store: s,
            body: Box::new(move |g| {
                let xv = g.param(x);
                let y = conv2d(g, xv, &conv)?;
                project(g, y, 1)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[3, 5, 5], &mut rng)?;
        let conv = Conv2dLayer::new(&mut s, "conv", 3, 2, 1, 1, 0, &mut rng)?;
        cases.push(Case {
            name: "conv2d 1x1",
            store: s,
            body: Box::new(move |g| {
                let xv = g.param(x);
                let y = conv2d(g, xv, &conv)?;
                project(g, y, 2)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[3, 4, 4], &mut rng)?;
        let deconv = Deconv2dLayer::new(&mut s, "deconv", 3, 2, 4, 2, 1, &mut rng)?;
        cases.push(Case {
            name: "deconv2d k4 s2 p1",
            store: s,
            body: Box::new(move |g| {
                let xv = g.param(x);
                let y = deconv2d(g, xv, &deconv)?;
                project(g, y, 3)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[3, 6, 6], &mut rng)?;
        cases.push(Case {
            name: "channel_pool",
            store: s,
            body: Box::new(move |g| {
                let xv = g.param(x);
                let y = channel_pool(g, xv)?;
                project(g, y, 4)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[4, 5, 5], &mut rng)?;
        cases.push(Case {
            name: "global_pool",
            store: s,
            body: Box::new(move |g| {
                let xv = g.param(x);
                let (avg, max) = global_pool(g, xv)?;
                let both = g.tape.concat(&[avg, max])?;
                project(g, both, 5)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let v = input(&mut s, "v", &[8], &mut rng)?;
        let mlp = SharedMlp::new(&mut s, "mlp", 8, 2, &mut rng)?;
        cases.push(Case {
            name: "shared_mlp",
            store: s,
            body: Box::new(move |g| {
                let vv = g.param(v);
                let y = mlp_apply(g, vv, &mlp)?;
                project(g, y, 6)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let a = input(&mut s, "a", &[2, 3, 3], &mut rng)?;
        let b = input(&mut s, "b", &[2, 3, 3], &mut rng)?;
        cases.push(Case {
            name: "elementwise",
            store: s,
            body: Box::new(move |g| {
                let (av, bv) = (g.param(a), g.param(b));
                let s1 = g.tape.sigmoid(av);
                let t1 = g.tape.tanh(bv);
                let r1 = g.tape.relu(av);
                let m = g.tape.mul(s1, t1)?;
                let d = g.tape.sub(m, r1)?;
                let e = g.tape.add(d, bv)?;
                let e = g.tape.scale(e, 0.7);
                let m = g.tape.mean(e);
                let p = project(g, e, 7)?;
                g.tape.add(p, m)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let x = input(&mut s, "x", &[2, 6, 6], &mut rng)?;
        let h = input(&mut s, "h0", &[3, 6, 6], &mut rng)?;
        let c = input(&mut s, "c0", &[3, 6, 6], &mut rng)?;
        let cell = ConvLstmCell::new(&mut s, "lstm", 2, 3, &mut rng)?;
        cases.push(Case {
            name: "convlstm_step",
            store: s,
            body: Box::new(move |g| {
                let (xv, hv, cv) = (g.param(x), g.param(h), g.param(c));
                let st = convlstm_step(g, xv, Some(BranchState { h: hv, c: cv }), &cell)?;
                let both = g.tape.concat(&[st.h, st.c])?;
                project(g, both, 8)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let frames: Vec<ParamId> = (0..3)
            .map(|t| input(&mut s, &format!("x{t}"), &[1, 5, 5], &mut rng))
            .collect::<Result<_>>()?;
        let cell = ConvLstmCell::new(&mut s, "lstm", 1, 2, &mut rng)?;
        cases.push(Case {
            name: "convlstm_sequence",
            store: s,
            body: Box::new(move |g| {
                let xs: Vec<Var> = frames.iter().map(|&f| g.param(f)).collect();
                let st = encode_sequence(g, &xs, &cell)?;
                let both = g.tape.concat(&[st.h, st.c])?;
                project(g, both, 9)
            }),
        });
    }
    {
        let mut s = ParamStore::new();
        let pwv = input(&mut s, "f_pwv", &[3, 6, 6], &mut rng)?;
        let radar = input(&mut s, "f_radar", &[4, 6, 6], &mut rng)?;
        let module = RpfModule::new(&mut s, "rpf", 4, 2, true, &mut rng)?;
        let gates = module.hidden.clone();
        cases.push(Case {
            name: "spatial_attention",
            store: s.clone(),
            body: Box::new({
                let gates = gates.clone();
                move |g| {
                    let p = g.param(pwv);
                    let m = spatial_attention(g, p, &gates.spatial)?;
                    project(g, m, 10)
                }
            }),
        });
        cases.push(Case {
            name: "channel_attention+refine",
            store: s.clone(),
            body: Box::new({
                let gates = gates.clone();
                move |g| {
                    let r = g.param(radar);
                    let w = channel_attention(g, r, &gates.channel)?;
                    let refined = refine_radar(g, r, w)?;
                    project(g, refined, 11)
                }
            }),
        });
        let mut gs = ParamStore::new();
        let m = gs.add("m", random(&[1, 5, 5], &mut rng).map(|v| 0.5 + 0.4 * v))?;
        let refined = input(&mut gs, "refined", &[3, 5, 5], &mut rng)?;
        let fr = input(&mut gs, "f_radar", &[3, 5, 5], &mut rng)?;
        cases.push(Case {
            name: "gated_fuse",
            store: gs,
            body: Box::new(move |g| {
                let (mv, rv, fv) = (g.param(m), g.param(refined), g.param(fr));
                let y = gated_fuse(g, mv, rv, fv)?;
                project(g, y, 12)
            }),
        });
        let ph = input(&mut s, "pwv.c", &[4, 6, 6], &mut rng)?;
        let rh = input(&mut s, "radar.c", &[4, 6, 6], &mut rng)?;
        let pwv_h = input(&mut s, "pwv.h", &[4, 6, 6], &mut rng)?;
        cases.push(Case {
            name: "rpf_fuse",
            store: s,
            body: Box::new(move |g| {
                let pw = BranchState {
                    h: g.param(pwv_h),
                    c: g.param(ph),
                };
                let rd = BranchState {
                    h: g.param(radar),
                    c: g.param(rh),
                };
                let f = rpf_fuse(g, pw, rd, &module)?;
                let both = g.tape.concat(&[f.h, f.c])?;
                project(g, both, 13)
            }),
        });
    }
    Ok(cases)
}

fn model_input(cfg: &ModelConfig, seed: u64) -> Result<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.grid;
    let mut mk = |t: usize| {
        Tensor::new(
            [t, 1, n, n],
            (0..t * n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    };
    Ok(ModelInput {
        pwv: mk(cfg.t_in)?,
        hist: mk(cfg.t_in)?,
        prior: mk(cfg.t_out)?,
    })
}

fn run_case(
    name: String,
    store: &ParamStore,
    eps: f64,
    tolerance: f64,
    fault: Option<Fault>,
    f: &(dyn Fn(&mut Graph<'_>) -> Result<Var> + Sync),
) -> Result<SuiteCase> {
    let start = Instant::now();
    let report = finite_difference_check_with_fault(store, eps, fault, f)?;
    Ok(SuiteCase {
        name,
        tolerance,
        report,
        elapsed: start.elapsed(),
    })
}

/// Layers at 1e-4, then every variant end to end at 16×16, `T_in = T_out = 2`, at 1e-3.
///
/// `fault` corrupts one adjoint rule on the analytic side, for negative controls.
pub fn gradcheck_suite(fault: Option<Fault>) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for mut case in layer_cases()? {
        jitter(&mut case.store, 0.05, 21);
        cases.push(run_case(
            case.name.to_string(),
            &case.store,
            LAYER_EPS,
            LAYER_TOLERANCE,
            fault,
            &*case.body,
        )?);
    }
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            init_seed: 5,
            ..ModelConfig::gradcheck()
        };
        let mut model = FusionCast::new(cfg.clone())?;
        jitter(&mut model.params, 0.3, 8);
        let input = model_input(&cfg, 6)?;
        let target = model_input(&cfg, 7)?.prior;
        let teacher = (variant == Variant::Full).then(|| TeacherFeed {
            targets: target.clone(),
            use_truth: vec![true; cfg.t_out],
        });
        let body = |g: &mut Graph<'_>| -> Result<Var> {
            let out = model.forward(g, &input, teacher.as_ref())?;
            super::loss(g, &out, &target)
        };
        cases.push(run_case(
            format!("end_to_end {variant}"),
            &model.params,
            MODEL_EPS,
            END_TO_END_TOLERANCE,
            fault,
            &body,
        )?);
    }
    Ok(SuiteReport {
        cases,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_cases_pass_and_corruption_is_caught() {
        for case in layer_cases().unwrap() {
            let mut store = case.store.clone();
            jitter(&mut store, 0.05, 21);
            let ok = run_case(
                case.name.into(),
                &store,
                LAYER_EPS,
                LAYER_TOLERANCE,
                None,
                &*case.body,
            )
            .unwrap();
            assert!(ok.passed(), "{}: {:?}", ok.name, ok.report);
        }
        let bad = layer_cases()
            .unwrap()
            .into_iter()
            .find(|c| c.name == "elementwise")
            .unwrap();
        let r = run_case(
            "faulted".into(),
            &bad.store,
            LAYER_EPS,
            LAYER_TOLERANCE,
            Some(Fault::SigmoidAdjointScale(1.5)),
            &*bad.body,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.report.worst_param, "a");
    }
}
