//! Reference implementations written as plain loops, and suites comparing the
//! fast kernels and metric functions against them on random instances.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::Grid;
use crate::error::Result;
use crate::metrics::{binarize, contingency, csi, mae, rmse, ContingencyTable};
use crate::tensor::Tensor;

pub const KERNEL_TOLERANCE: f64 = 1e-12;
pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const METRIC_TOLERANCE: f64 = 1e-12;
pub const KERNEL_INSTANCES: usize = 100;
pub const METRIC_INSTANCES: usize = 200;

#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.max_err <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct OracleSuite {
    pub name: &'static str,
    pub checks: Vec<OracleCheck>,
    pub elapsed: Duration,
}

impl OracleSuite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(OracleCheck::passed)
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    max_err: f64,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker {
            name,
            tolerance,
            instances: 0,
            max_err: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        // NaN must fail the check.
        if !(err <= self.max_err) {
            self.max_err = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    fn finish(self) -> OracleCheck {
        OracleCheck {
            name: self.name,
            instances: self.instances,
            max_err: self.max_err,
            tolerance: self.tolerance,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Cross-correlation of `x: [c, h, w]` with `k: [o, c, kh, kw]`, zero padding.
pub fn naive_conv2d(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += k[((oc * c + ic) * kh + ky) * kw + kx]
                                * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Transposed convolution of `x: [c, h, w]` with `k: [c, o, kh, kw]`, by scattering.
pub fn naive_deconv2d(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; o * oh * ow];
    for ic in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ic * h + y) * w + xx];
                for oc in 0..o {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let ty = (y * stride + ky) as isize - pad as isize;
                            let tx = (xx * stride + kx) as isize - pad as isize;
                            if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                continue;
                            }
                            out[(oc * oh + ty as usize) * ow + tx as usize] +=
                                v * k[((ic * o + oc) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for oc in 0..o {
            for i in 0..oh * ow {
                out[oc * oh * ow + i] += b[oc];
            }
        }
    }
    (out, oh, ow)
}

/// Per-pixel mean then max over channels.
pub fn naive_channel_pool(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; 2 * h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = x[(ch * h + y) * w + xx];
                sum += v;
                if v > max {
                    max = v;
                }
            }
            out[y * w + xx] = sum / c as f64;
            out[h * w + y * w + xx] = max;
        }
    }
    out
}

/// Per-channel spatial mean and max.
pub fn naive_global_pool(x: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ch * h + y) * w + xx];
                avg[ch] += v;
                if v > max[ch] {
                    max[ch] = v;
                }
            }
        }
        avg[ch] /= (h * w) as f64;
    }
    (avg, max)
}

struct ConvCase {
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let k = rng.random_range(1..=4);
        let case = ConvCase {
            c: rng.random_range(1..=3),
            o: rng.random_range(1..=3),
            h: rng.random_range(1..=8),
            w: rng.random_range(1..=8),
            k,
            stride: rng.random_range(1..=2),
            pad: rng.random_range(0..k),
        };
        if case.h + 2 * case.pad >= k && case.w + 2 * case.pad >= k {
            return case;
        }
    }
}

fn deconv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let case = conv_case(rng);
        let oh = (case.h - 1) * case.stride + case.k;
        let ow = (case.w - 1) * case.stride + case.k;
        if oh > 2 * case.pad && ow > 2 * case.pad {
            return case;
        }
    }
}

/// conv2d, deconv2d, channel_pool and global_pool against loop references on
/// random inputs up to 8×8, plus the conv/deconv inner-product identity.
pub fn kernel_oracles(seed: u64) -> Result<OracleSuite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = Tracker::new("conv2d", KERNEL_TOLERANCE);
    let mut deconv = Tracker::new("deconv2d", KERNEL_TOLERANCE);
    let mut adjoint = Tracker::new("deconv/conv adjoint", ADJOINT_TOLERANCE);
    let mut cpool = Tracker::new("channel_pool", KERNEL_TOLERANCE);
    let mut gpool = Tracker::new("global_pool", KERNEL_TOLERANCE);

    for _ in 0..KERNEL_INSTANCES {
        let s = conv_case(&mut rng);
        let x = random_vec(s.c * s.h * s.w, &mut rng);
        let k = random_vec(s.o * s.c * s.k * s.k, &mut rng);
        let b = random_vec(s.o, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new([s.c, s.h, s.w], x.clone())?);
        let kv = t.constant(Tensor::new([s.o, s.c, s.k, s.k], k.clone())?);
        let bv = t.constant(Tensor::new([s.o], b.clone())?);
        let y = t.conv2d(xv, kv, Some(bv), s.stride, s.pad)?;
        let (want, _, _) = naive_conv2d(
            &x,
            (s.c, s.h, s.w),
            &k,
            (s.o, s.k, s.k),
            Some(&b),
            s.stride,
            s.pad,
        );
        conv.record(max_abs_diff(t.value(y).data(), &want));

        let cp = t.channel_pool(xv)?;
        cpool.record(max_abs_diff(
            t.value(cp).data(),
            &naive_channel_pool(&x, (s.c, s.h, s.w)),
        ));
        let (avg, max) = naive_global_pool(&x, (s.c, s.h, s.w));
        let ga = t.global_avg_pool(xv)?;
        let gm = t.global_max_pool(xv)?;
        gpool.record(
            max_abs_diff(t.value(ga).data(), &avg).max(max_abs_diff(t.value(gm).data(), &max)),
        );
    }

    for _ in 0..KERNEL_INSTANCES {
        let s = deconv_case(&mut rng);
        let x = random_vec(s.c * s.h * s.w, &mut rng);
        let k = random_vec(s.c * s.o * s.k * s.k, &mut rng);
        let b = random_vec(s.o, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new([s.c, s.h, s.w], x.clone())?);
        let kv = t.constant(Tensor::new([s.c, s.o, s.k, s.k], k.clone())?);
        let bv = t.constant(Tensor::new([s.o], b.clone())?);
        let y = t.deconv2d(xv, kv, Some(bv), s.stride, s.pad)?;
        let (want, oh, ow) = naive_deconv2d(
            &x,
            (s.c, s.h, s.w),
            &k,
            (s.o, s.k, s.k),
            Some(&b),
            s.stride,
            s.pad,
        );
        deconv.record(max_abs_diff(t.value(y).data(), &want));

        // <deconv(x), z> = <x, conv(z)> with the same kernel tensor and no bias.
        let z = random_vec(s.o * oh * ow, &mut rng);
        let d = t.deconv2d(xv, kv, None, s.stride, s.pad)?;
        let zv = t.constant(Tensor::new([s.o, oh, ow], z.clone())?);
        let cz = t.conv2d(zv, kv, None, s.stride, s.pad)?;
        let lhs: f64 = t.value(d).data().iter().zip(&z).map(|(a, b)| a * b).sum();
        let cz = t.value(cz).data();
        let rhs: f64 = if cz.len() == x.len() {
            x.iter().zip(cz).map(|(a, b)| a * b).sum()
        } else {
            f64::NAN
        };
        adjoint.record((lhs - rhs).abs());
    }

    Ok(OracleSuite {
        name: "kernel oracles",
        checks: vec![
            conv.finish(),
            deconv.finish(),
            adjoint.finish(),
            cpool.finish(),
            gpool.finish(),
        ],
        elapsed: start.elapsed(),
    })
}

pub fn naive_contingency(pred: &[f64], truth: &[f64], tau: f64) -> [u64; 4] {
    let mut t = [0u64; 4];
    for i in 0..pred.len() {
        let (p, o) = (pred[i] >= tau, truth[i] >= tau);
        let slot = match (p, o) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        t[slot] += 1;
    }
    t
}

fn random_rain(n: usize, rng: &mut ChaCha8Rng) -> Grid {
    Grid::from_fn(n, |_, _| {
        if rng.random_bool(0.4) {
            0.0
        } else {
            -rng.random_range(f64::EPSILON..1.0f64).ln() * 2.0
        }
    })
}

/// MAE, RMSE, binarize, contingency and CSI against loop references on random
/// grids up to 16×16, plus two hand cases.
pub fn metric_oracles(seed: u64) -> Result<OracleSuite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mae_t = Tracker::new("mae", METRIC_TOLERANCE);
    let mut rmse_t = Tracker::new("rmse", METRIC_TOLERANCE);
    let mut bin_t = Tracker::new("binarize", 0.0);
    let mut cont_t = Tracker::new("contingency", 0.0);
    let mut csi_t = Tracker::new("csi", METRIC_TOLERANCE);
    let thresholds = [0.1, 1.0, 4.0];

    for _ in 0..METRIC_INSTANCES {
        let n = rng.random_range(1..=16);
        let frames = rng.random_range(1..=3);
        let pred: Vec<Grid> = (0..frames).map(|_| random_rain(n, &mut rng)).collect();
        let truth: Vec<Grid> = (0..frames).map(|_| random_rain(n, &mut rng)).collect();

        let (mut abs, mut sq, mut count) = (0.0, 0.0, 0usize);
        for (p, g) in pred.iter().zip(&truth) {
            for i in 0..n * n {
                let d = p.values()[i] - g.values()[i];
                abs += d.abs();
                sq += d * d;
                count += 1;
            }
        }
        mae_t.record((mae(&pred, &truth)? - abs / count as f64).abs());
        rmse_t.record((rmse(&pred, &truth)? - (sq / count as f64).sqrt()).abs());

        for &tau in &thresholds {
            let (p, g) = (&pred[0], &truth[0]);
            let positives = p.values().iter().filter(|&&v| v >= tau).count();
            let bp = binarize(p, tau);
            bin_t.record((bp.iter().filter(|&&b| b).count() as f64 - positives as f64).abs());
            let table = contingency(&bp, &binarize(g, tau))?;
            let want = naive_contingency(p.values(), g.values(), tau);
            let got = [table.tp, table.fp, table.fn_, table.tn];
            cont_t.record(if got == want { 0.0 } else { 1.0 });
            let denom = want[0] + want[1] + want[2];
            match (csi(&table), denom) {
                (None, 0) => csi_t.record(0.0),
                (Some(v), d) if d > 0 => csi_t.record((v - want[0] as f64 / d as f64).abs()),
                _ => csi_t.record(f64::INFINITY),
            }
        }
    }

    let mut hand = Tracker::new("csi hand cases", METRIC_TOLERANCE);
    let case = |tp, fp, fn_| ContingencyTable { tp, fp, fn_, tn: 0 };
    hand.record(csi(&case(1, 0, 0)).map_or(f64::INFINITY, |v| (v - 1.0).abs()));
    hand.record(csi(&case(2, 1, 1)).map_or(f64::INFINITY, |v| (v - 0.5).abs()));

    Ok(OracleSuite {
        name: "metric oracles",
        checks: vec![
            mae_t.finish(),
            rmse_t.finish(),
            bin_t.finish(),
            cont_t.finish(),
            csi_t.finish(),
            hand.finish(),
        ],
        elapsed: start.elapsed(),
    })
}
