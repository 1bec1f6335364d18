//! One pass/fail line per acceptance criterion. Tolerances are pinned below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusioncast::autodiff::Tape;
use fusioncast::baselines::{
    advect, estimate_flow, generate_prior, FlowField, FlowParams, PriorConfig,
};
use fusioncast::config::RunConfig;
use fusioncast::data::fgrid::{decode, encode, Dtype};
use fusioncast::data::{parse_station_csv, write_station_csv, Grid, StationRecord, Unit};
use fusioncast::layers::BranchState;
use fusioncast::metrics::{
    binarize, contingency, csi, evaluate, mae, read_report, rmse, write_report, ContingencyTable,
    EvalSpec, CATEGORICAL_CSV,
};
use fusioncast::model::{checkpoint, FusionCast, ModelConfig, ModelInput, Variant};
use fusioncast::params::{Graph, ParamStore};
use fusioncast::rpf::{channel_attention, gated_fuse, rpf_fuse, spatial_attention, RpfModule};
use fusioncast::tensor::Tensor;
use fusioncast::train::{
    evaluate_model, gradcheck_suite, mean_over_seeds, run_seeds, train, AblationData, TrainConfig,
    CONTRASTS, END_TO_END_TOLERANCE, LAYER_TOLERANCE,
};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 200;
const KERNEL_TOL: f64 = 1e-12;
const ADJOINT_TOL: f64 = 1e-10;
const KERNEL_INSTANCES: usize = 200;
const FLOW_U_TOL: f64 = 0.5;
const PRIOR_DRIFT_PER_STEP: f64 = 1.0;
/// Full ablation budget on four cores, scaled by 4 / cores when fewer are available.
const ABLATION_BUDGET_4_CORES: Duration = Duration::from_secs(45 * 60);
const MIN_SEEDS: usize = 5;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// 1. Gradient correctness.
fn gradients() -> Outcome {
    let report = gradcheck_suite(None).map_err(|e| e.to_string())?;
    let worst = |prefix: bool| {
        report
            .cases
            .iter()
            .filter(|c| c.name.starts_with("end_to_end") == prefix)
            .map(|c| c.report.max_rel_err)
            .fold(0.0, f64::max)
    };
    let failing: Vec<_> = report
        .cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.clone())
        .collect();
    check(
        failing.is_empty() && report.elapsed < GRADCHECK_BUDGET,
        format!(
            "{} cases, layers max {:.2e} < {LAYER_TOLERANCE:.0e}, end-to-end max {:.2e} < {END_TO_END_TOLERANCE:.0e}, {:.1}s < {}s{}",
            report.cases.len(),
            worst(false),
            worst(true),
            report.elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs(),
            if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }
        ),
    )
}

// 2. Shape contract at 64×64.
fn shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::default()
        };
        let model = FusionCast::new(cfg.clone()).map_err(|e| e.to_string())?;
        let frames = |t: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(
                [t, 1, 64, 64],
                (0..t * 4096).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        let input = ModelInput {
            pwv: frames(cfg.t_in, &mut rng),
            hist: frames(cfg.t_in, &mut rng),
            prior: frames(cfg.t_out, &mut rng),
        };
        let mut g = Graph::new(&model.params);
        let hist = model
            .encode_hist(&mut g, &input.hist)
            .map_err(|e| e.to_string())?;
        let mut states = vec![g.tape.shape(hist.h).to_vec(), g.tape.shape(hist.c).to_vec()];
        if let Some(p) = model
            .encode_pwv(&mut g, &input.pwv)
            .map_err(|e| e.to_string())?
        {
            states.push(g.tape.shape(p.h).to_vec());
        }
        if let Some(p) = model
            .encode_prior(&mut g, &input.prior)
            .map_err(|e| e.to_string())?
        {
            states.push(g.tape.shape(p.h).to_vec());
        }
        let fused = model.encode(&mut g, &input).map_err(|e| e.to_string())?;
        states.push(g.tape.shape(fused.h).to_vec());
        let out = model
            .forward(&mut g, &input, None)
            .map_err(|e| e.to_string())?;
        let states_ok = states.iter().all(|s| s.len() == 3 && s[1..] == [16, 16]);
        let out_ok = out.len() == cfg.t_out && out.iter().all(|&v| g.tape.shape(v) == [1, 64, 64]);
        if !(states_ok && out_ok) {
            return Err(format!(
                "{variant}: states {states:?}, {} outputs",
                out.len()
            ));
        }
        notes.push(variant.name());
    }
    Ok(format!(
        "16×16 states and 12 × 64×64 outputs for {}",
        notes.join(", ")
    ))
}

// 3. Fusion identities.
fn fusion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, n) = (6, 8);
    let store = ParamStore::new();

    // M = 0 passes the radar features through bit for bit.
    let mut g = Graph::new(&store);
    let m = g.input(Tensor::zeros([1, n, n]).unwrap());
    let refined = g.input(Tensor::new([c, n, n], rand_vec(&mut rng, c * n * n)).unwrap());
    let radar_t = Tensor::new([c, n, n], rand_vec(&mut rng, c * n * n)).unwrap();
    let radar = g.input(radar_t.clone());
    let out = gated_fuse(&mut g, m, refined, radar).map_err(|e| e.to_string())?;
    let passthrough = g
        .value(out)
        .data()
        .iter()
        .zip(radar_t.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Zero gates: M = W = 1/2, so the fused map is 1.25 × radar.
    let mut store = ParamStore::new();
    let module = RpfModule::new(
        &mut store,
        "rpf",
        c,
        2,
        true,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut g = Graph::new(&store);
    let state = |g: &mut Graph<'_>, rng: &mut ChaCha8Rng| {
        let h = Tensor::new([c, n, n], rand_vec(rng, c * n * n)).unwrap();
        let cc = Tensor::new([c, n, n], rand_vec(rng, c * n * n)).unwrap();
        (
            BranchState {
                h: g.input(h.clone()),
                c: g.input(cc.clone()),
            },
            h,
            cc,
        )
    };
    let (pwv, _, _) = state(&mut g, &mut rng);
    let (radar, rh, rc) = state(&mut g, &mut rng);
    let fused = rpf_fuse(&mut g, pwv, radar, &module).map_err(|e| e.to_string())?;
    let want_h: Vec<f64> = rh.data().iter().map(|x| 1.25 * x).collect();
    let want_c: Vec<f64> = rc.data().iter().map(|x| 1.25 * x).collect();
    let closed_form =
        diff(g.value(fused.h).data(), &want_h).max(diff(g.value(fused.c).data(), &want_c));

    // Random gates and inputs keep both attentions strictly inside (0, 1).
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let module = RpfModule::new(
            &mut store,
            "rpf",
            c,
            2,
            true,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(
            Tensor::new(
                [c, n, n],
                rand_vec(&mut rng, c * n * n)
                    .iter()
                    .map(|v| 4.0 * v)
                    .collect(),
            )
            .unwrap(),
        );
        let m = spatial_attention(&mut g, x, &module.hidden.spatial).map_err(|e| e.to_string())?;
        let w = channel_attention(&mut g, x, &module.hidden.channel).map_err(|e| e.to_string())?;
        for &v in g.value(m).data().iter().chain(g.value(w).data()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    check(
        passthrough && closed_form == 0.0 && lo > 0.0 && hi < 1.0,
        format!(
            "M=0 passthrough bit-exact: {passthrough}; zero gates vs 1.25·radar max diff {closed_form:.1e}; attention range [{lo:.3e}, {hi:.6}]"
        ),
    )
}

// 4. Metric oracles.
fn rain(rng: &mut ChaCha8Rng, n: usize) -> Grid {
    Grid::from_fn(n, |_, _| {
        if rng.random_bool(0.35) {
            0.0
        } else {
            rng.random_range(0.0..8.0)
        }
    })
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut count_mismatch = 0usize;
    for _ in 0..METRIC_INSTANCES {
        let n = rng.random_range(1..=16);
        let t = rng.random_range(1..=3);
        let p: Vec<Grid> = (0..t).map(|_| rain(&mut rng, n)).collect();
        let o: Vec<Grid> = (0..t).map(|_| rain(&mut rng, n)).collect();
        let (mut s1, mut s2, mut k) = (0.0, 0.0, 0.0);
        for f in 0..t {
            for i in 0..n * n {
                let d = p[f].values()[i] - o[f].values()[i];
                s1 += d.abs();
                s2 += d * d;
                k += 1.0;
            }
        }
        worst = worst.max((mae(&p, &o).unwrap() - s1 / k).abs());
        worst = worst.max((rmse(&p, &o).unwrap() - (s2 / k).sqrt()).abs());
        for tau in [0.1, 1.0, 4.0] {
            let (bp, bo) = (binarize(&p[0], tau), binarize(&o[0], tau));
            let (mut tp, mut fp, mut fn_, mut tn, mut pos) = (0u64, 0u64, 0u64, 0u64, 0usize);
            for i in 0..n * n {
                let a = p[0].values()[i] >= tau;
                let b = o[0].values()[i] >= tau;
                pos += a as usize;
                match (a, b) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            if bp.iter().filter(|&&x| x).count() != pos {
                count_mismatch += 1;
            }
            let table = contingency(&bp, &bo).unwrap();
            if (table.tp, table.fp, table.fn_, table.tn) != (tp, fp, fn_, tn) {
                count_mismatch += 1;
            }
            match (csi(&table), tp + fp + fn_) {
                (None, 0) => {}
                (Some(v), d) if d > 0 => worst = worst.max((v - tp as f64 / d as f64).abs()),
                _ => count_mismatch += 1,
            }
        }
    }
    let hand = |tp, fp, fn_| csi(&ContingencyTable { tp, fp, fn_, tn: 7 });
    let hand_ok = hand(1, 0, 0) == Some(1.0) && hand(2, 1, 1) == Some(0.5);
    check(
        worst <= METRIC_TOL && count_mismatch == 0 && hand_ok,
        format!(
            "{METRIC_INSTANCES} instances: max diff {worst:.1e} <= {METRIC_TOL:.0e}, {count_mismatch} count mismatches, hand cases (1,0,0)→1.0 and (2,1,1)→0.5: {hand_ok}"
        ),
    )
}

// 5. Convolution and pooling oracles.
#[allow(clippy::too_many_arguments)]
fn loop_conv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    o: usize,
    ks: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let oh = (h + 2 * p - ks) / s + 1;
    let ow = (w + 2 * p - ks) / s + 1;
    let mut out = vec![0.0; o * oh * ow];
    for a in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for b in 0..c {
                    for di in 0..ks {
                        for dj in 0..ks {
                            let (r, q) = (
                                (i * s + di) as i64 - p as i64,
                                (j * s + dj) as i64 - p as i64,
                            );
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                acc += k[((a * c + b) * ks + di) * ks + dj]
                                    * x[(b * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                }
                out[(a * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn loop_deconv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: &[f64],
    o: usize,
    ks: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let oh = (h - 1) * s + ks - 2 * p;
    let ow = (w - 1) * s + ks - 2 * p;
    let mut out = vec![0.0; o * oh * ow];
    for b in 0..c {
        for i in 0..h {
            for j in 0..w {
                for a in 0..o {
                    for di in 0..ks {
                        for dj in 0..ks {
                            let (r, q) = (
                                (i * s + di) as i64 - p as i64,
                                (j * s + dj) as i64 - p as i64,
                            );
                            if r >= 0 && q >= 0 && (r as usize) < oh && (q as usize) < ow {
                                out[(a * oh + r as usize) * ow + q as usize] +=
                                    x[(b * h + i) * w + j] * k[((b * o + a) * ks + di) * ks + dj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut conv, mut deconv, mut adj, mut pool) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < KERNEL_INSTANCES {
        let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let ks = rng.random_range(1..=4);
        let s = rng.random_range(1..=2);
        let p = rng.random_range(0..ks);
        if h + 2 * p < ks
            || w + 2 * p < ks
            || (h - 1) * s + ks <= 2 * p
            || (w - 1) * s + ks <= 2 * p
        {
            continue;
        }
        done += 1;
        let x = rand_vec(&mut rng, c * h * w);
        let kc = rand_vec(&mut rng, o * c * ks * ks);
        let kd = rand_vec(&mut rng, c * o * ks * ks);
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new([c, h, w], x.clone()).unwrap());
        let kcv = t.constant(Tensor::new([o, c, ks, ks], kc.clone()).unwrap());
        let kdv = t.constant(Tensor::new([c, o, ks, ks], kd.clone()).unwrap());
        let y = t.conv2d(xv, kcv, None, s, p).unwrap();
        conv = conv.max(diff(
            t.value(y).data(),
            &loop_conv(&x, c, h, w, &kc, o, ks, s, p),
        ));
        let d = t.deconv2d(xv, kdv, None, s, p).unwrap();
        let dd = loop_deconv(&x, c, h, w, &kd, o, ks, s, p);
        deconv = deconv.max(diff(t.value(d).data(), &dd));

        // <deconv(x), z> against <x, conv(z)> with the same kernel.
        let (oh, ow) = ((h - 1) * s + ks - 2 * p, (w - 1) * s + ks - 2 * p);
        let z = rand_vec(&mut rng, o * oh * ow);
        let cz = loop_conv(&z, o, oh, ow, &kd, c, ks, s, p);
        let lhs: f64 = dd.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&cz).map(|(a, b)| a * b).sum();
        adj = adj.max((lhs - rhs).abs());
        let zv = t.constant(Tensor::new([o, oh, ow], z).unwrap());
        let czt = t.conv2d(zv, kdv, None, s, p).unwrap();
        adj = adj.max(diff(t.value(czt).data(), &cz));

        let cp = t.channel_pool(xv).unwrap();
        let ga = t.global_avg_pool(xv).unwrap();
        let gm = t.global_max_pool(xv).unwrap();
        let mut want_cp = vec![0.0; 2 * h * w];
        for i in 0..h * w {
            let vals: Vec<f64> = (0..c).map(|b| x[b * h * w + i]).collect();
            want_cp[i] = vals.iter().sum::<f64>() / c as f64;
            want_cp[h * w + i] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let plane = |b: usize| &x[b * h * w..(b + 1) * h * w];
        let want_avg: Vec<f64> = (0..c)
            .map(|b| plane(b).iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let want_max: Vec<f64> = (0..c)
            .map(|b| plane(b).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        pool = pool
            .max(diff(t.value(cp).data(), &want_cp))
            .max(diff(t.value(ga).data(), &want_avg))
            .max(diff(t.value(gm).data(), &want_max));
    }
    check(
        conv <= KERNEL_TOL && deconv <= KERNEL_TOL && pool <= KERNEL_TOL && adj <= ADJOINT_TOL,
        format!(
            "{KERNEL_INSTANCES} cases ≤8×8: conv {conv:.1e}, deconv {deconv:.1e}, pools {pool:.1e} (<= {KERNEL_TOL:.0e}); adjoint {adj:.1e} (<= {ADJOINT_TOL:.0e})"
        ),
    )
}

// 6. Optical flow, advection and prior tracking.
fn blob(n: usize, cx: f64, cy: f64, sigma: f64) -> Grid {
    Grid::from_fn(n, |r, c| {
        5.0 * (-((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

fn centroid(g: &Grid) -> (f64, f64) {
    let n = g.n();
    let (mut m, mut x, mut y) = (0.0, 0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            let v = g.get(r, c);
            m += v;
            x += v * c as f64;
            y += v * r as f64;
        }
    }
    (x / m, y / m)
}

fn flow_fixture() -> Outcome {
    let n = 32;
    let (a, b) = (blob(n, 13.0, 16.0, 3.0), blob(n, 15.0, 16.0, 3.0));
    let flow = estimate_flow(&a, &b, &FlowParams::default()).map_err(|e| e.to_string())?;
    let mut u_err: f64 = 0.0;
    for r in 0..n {
        for c in 0..n {
            if b.get(r, c) >= 0.1 * 5.0 {
                u_err = u_err.max((flow.u.get(r, c) - 2.0).abs());
            }
        }
    }

    let shift = 3;
    let g = Grid::from_fn(n, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.37);
    let adv =
        advect(&g, &FlowField::uniform(n, shift as f64, 0.0), 2).map_err(|e| e.to_string())?;
    let exact = (1..=2).all(|k| {
        let want = Grid::from_fn(n, |r, c| {
            if c >= shift * k {
                g.get(r, c - shift * k)
            } else {
                0.0
            }
        });
        adv[k - 1] == want
    });

    let n = 48;
    let (u, v) = (1.3, -0.7);
    let at = |k: f64| blob(n, 10.0 + u * k, 30.0 + v * k, 3.0);
    let hist: Vec<Grid> = (0..4).map(|k| at(k as f64)).collect();
    let prior = generate_prior(&hist, 12, &PriorConfig::default(), 0).map_err(|e| e.to_string())?;
    let mut drift: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for (k, p) in prior.iter().enumerate() {
        let step = (k + 1) as f64;
        let (px, py) = centroid(p);
        let (tx, ty) = centroid(&at(3.0 + step));
        let e = ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
        worst_abs = worst_abs.max(e);
        drift = drift.max(e / step);
    }
    check(
        u_err < FLOW_U_TOL && exact && drift < PRIOR_DRIFT_PER_STEP,
        format!(
            "blob u error {u_err:.3} px < {FLOW_U_TOL}; integer advection exact: {exact}; prior centroid drift {drift:.3} px/step < {PRIOR_DRIFT_PER_STEP} (worst {worst_abs:.2} px over 12 steps)"
        ),
    )
}

// 7. Ablation directionality.
fn ablation() -> Outcome {
    let cfg = RunConfig::default();
    let seeds = cfg.ablate.seeds.clone();
    if seeds.len() < MIN_SEEDS {
        return Err(format!("only {} seeds configured", seeds.len()));
    }
    let cores = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(4);
    let budget = ABLATION_BUDGET_4_CORES * 4 / cores as u32;
    let start = Instant::now();
    let outcomes = run_seeds(&seeds, |s| cfg.seed_plan(s), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mean = mean_over_seeds(&outcomes).map_err(|e| e.to_string())?;
    let mut detail = String::new();
    for r in &mean {
        detail += &format!(
            "\n    {:18} csi τ1/120m {}  τ4/120m {}",
            r.variant,
            r.csi_at(1.0, 12).map_or("NA".into(), |v| format!("{v:.4}")),
            r.csi_at(4.0, 12).map_or("NA".into(), |v| format!("{v:.4}"))
        );
    }
    let mut ok = elapsed <= budget;
    for (i, c) in CONTRASTS.iter().enumerate() {
        let s = c.summarize(&outcomes).map_err(|e| e.to_string())?;
        // The first two need a margin beyond one standard error; gated vs concatenated fusion only ≥.
        let pass = if i < 2 {
            s.clearly_better()
        } else {
            s.mean_diff >= 0.0
        };
        ok &= pass;
        detail += &format!(
            "\n    {} > {} at {} mm/h: diff {:+.4}, se {:.4} [{}]",
            c.better,
            c.worse,
            c.threshold,
            s.mean_diff,
            s.se_diff,
            if pass { "ok" } else { "no" }
        );
    }
    let head = format!(
        "{} seeds in {:.1} min on {cores} core(s), budget {:.0} min",
        seeds.len(),
        elapsed.as_secs_f64() / 60.0,
        budget.as_secs_f64() / 60.0
    );
    check(ok, head + &detail)
}

// 8. Determinism and persistence.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("grid.n", "16"),
        ("data.scenes", "5"),
        ("data.frames", "8"),
        ("data.n_stations", "12"),
        ("model.t_in", "2"),
        ("model.t_out", "2"),
        ("model.branch_channels", "2,3"),
        ("model.prior_channels", "2,4"),
        ("model.hidden", "3"),
        ("model.prior_hidden", "3"),
        ("model.proj_channels", "3"),
        ("model.decoder_channels", "2,3"),
        ("model.head_channels", "2,2"),
        ("train.epochs", "2"),
        ("train.batch_size", "2"),
        ("eval.lead_frames", "1,2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let (plan, data): (_, AblationData) = cfg.seed_plan(11).map_err(|e| e.to_string())?;
        let entry = &plan.entries[0];
        let mut model = FusionCast::new(entry.model.clone()).map_err(|e| e.to_string())?;
        train(
            &mut model,
            &data.train,
            &data.val,
            &TrainConfig {
                ..entry.train.clone()
            },
            Some(&dir),
        )
        .map_err(|e| e.to_string())?;
        let (mut report, _) =
            evaluate_model(&model, &data.test, &cfg.eval).map_err(|e| e.to_string())?;
        report.fingerprint = cfg.fingerprint();
        write_report(&dir.join("report"), std::slice::from_ref(&report))
            .map_err(|e| e.to_string())?;

        // Reload the checkpoint into a fresh model; evaluation must not move a bit.
        let mut fresh = FusionCast::new(entry.model.clone()).map_err(|e| e.to_string())?;
        let best = dir.join("best.ckpt");
        checkpoint::load_into(&mut fresh.params, &best).map_err(|e| e.to_string())?;
        let mut trained = FusionCast::new(entry.model.clone()).map_err(|e| e.to_string())?;
        trained.params =
            checkpoint::decode(&std::fs::read(&best).unwrap()).map_err(|e| e.to_string())?;
        let (r1, l1) =
            evaluate_model(&trained, &data.test, &cfg.eval).map_err(|e| e.to_string())?;
        let (r2, l2) = evaluate_model(&fresh, &data.test, &cfg.eval).map_err(|e| e.to_string())?;
        let same_eval = r1.tables == r2.tables
            && r1.rmse.to_bits() == r2.rmse.to_bits()
            && r1.mae.to_bits() == r2.mae.to_bits()
            && l1.to_bits() == l2.to_bits();
        let encoded = checkpoint::encode(&fresh.params);
        let ckpt_round_trip = encoded == std::fs::read(&best).unwrap();
        runs.push((dir, same_eval && ckpt_round_trip));
    }
    let files = [
        "train_log.csv",
        "best.ckpt",
        "report/categorical.csv",
        "report/continuous.csv",
        "report/contingency.csv",
    ];
    let identical = files
        .iter()
        .all(|f| std::fs::read(runs[0].0.join(f)).ok() == std::fs::read(runs[1].0.join(f)).ok());
    let reloaded = runs.iter().all(|r| r.1);
    let parsed = read_report(&runs[0].0.join("report")).map_err(|e| e.to_string())?;

    // fgrid and station CSV round trips on random content.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fgrid_ok = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let g = Grid::from_fn(n, |_, _| rng.random_range(-1e6..1e6));
        let epoch = rng.random_range(-1_000_000_000i64..2_000_000_000);
        let (h, back) =
            decode(&encode(&g, epoch, Unit::Mm, Dtype::F64)).map_err(|e| e.to_string())?;
        fgrid_ok &= h.epoch == epoch
            && back
                .values()
                .iter()
                .zip(g.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let records: Vec<StationRecord> = (0..100)
        .map(|i| StationRecord {
            station_id: format!("S{:03}", i % 17),
            lat: rng.random_range(30.0..45.0),
            lon: rng.random_range(-100.0..-85.0),
            epoch: 1_677_628_800 + 600 * (i as i64 / 17),
            pwv: rng.random_range(0.0..70.0),
        })
        .collect();
    let mut buf = Vec::new();
    write_station_csv(&mut buf, &records).map_err(|e| e.to_string())?;
    let csv_ok = parse_station_csv(buf.as_slice(), None)
        .map_err(|e| e.to_string())?
        .records
        == records;
    check(
        identical && reloaded && fgrid_ok && csv_ok && parsed.len() == 1,
        format!(
            "repeat run byte-identical ({}): {identical}; checkpoint reload evaluates bit-exactly: {reloaded}; fgrid round trip: {fgrid_ok}; station CSV round trip: {csv_ok}",
            files.join(", ")
        ),
    )
}

// 9. Report layout.
fn report_layout() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth: Vec<Vec<Grid>> = (0..3)
        .map(|_| (0..12).map(|_| rain(&mut rng, 8)).collect())
        .collect();
    let preds: Vec<Vec<Grid>> = (0..3)
        .map(|_| (0..12).map(|_| rain(&mut rng, 8)).collect())
        .collect();
    let mut report = evaluate(&preds, &truth, &EvalSpec::default()).map_err(|e| e.to_string())?;
    report.variant = "full".into();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_report(tmp.path(), &[report]).map_err(|e| e.to_string())?;
    let text =
        std::fs::read_to_string(tmp.path().join(CATEGORICAL_CSV)).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let thresholds: Vec<f64> = lines
        .filter_map(|l| l.split(',').next()?.parse().ok())
        .collect();
    let ok = header == "threshold,variant,csi_t10,csi_t40,csi_t80,csi_t120"
        && thresholds == [0.1, 1.0, 4.0];
    check(
        ok,
        format!("header `{header}`, threshold rows {thresholds:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("shape contract", shapes),
        ("fusion identities", fusion_identities),
        ("metric oracles", metric_oracles),
        ("convolution and pooling oracles", kernel_oracles),
        ("optical flow fixture", flow_fixture),
        ("ablation directionality", ablation),
        ("determinism and persistence", determinism),
        ("report layout", report_layout),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {k} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {k} {name}: FAIL ({secs:.1}s) {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
