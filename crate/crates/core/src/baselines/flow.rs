//! Damped pyramidal Lucas–Kanade optical flow.

use crate::data::Grid;
use crate::error::{Error, Result};

/// Per-pixel displacement in px/frame; `u` points east (columns), `v` south (rows).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Grid,
    pub v: Grid,
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField {
            u: Grid::filled(n, 0.0),
            v: Grid::filled(n, 0.0),
        }
    }

    pub fn uniform(n: usize, u: f64, v: f64) -> Self {
        FlowField {
            u: Grid::filled(n, u),
            v: Grid::filled(n, v),
        }
    }

    pub fn n(&self) -> usize {
        self.u.n()
    }

    pub fn max_speed_component(&self) -> f64 {
        self.u
            .values()
            .iter()
            .chain(self.v.values())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    /// Pre-smoothing standard deviation, px.
    pub smoothing_sigma: f64,
    /// Standard deviation of the Gaussian integration window, px.
    pub window_sigma: f64,
    pub levels: usize,
    pub warp_iterations: usize,
    /// Tikhonov damping added to the structure tensor diagonal.
    pub damping: f64,
    pub v_max: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            smoothing_sigma: 1.5,
            window_sigma: 2.0,
            levels: 2,
            warp_iterations: 3,
            damping: 1e-3,
            v_max: 10.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur with weights renormalized at the borders.
pub(crate) fn gaussian_blur(g: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return g.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = g.n() as isize;
    let pass = |src: &Grid, horizontal: bool| {
        Grid::from_fn(src.n(), |row, col| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, &w) in k.iter().enumerate() {
                let off = j as isize - r;
                let (rr, cc) = if horizontal {
                    (row as isize, col as isize + off)
                } else {
                    (row as isize + off, col as isize)
                };
                if (0..n).contains(&rr) && (0..n).contains(&cc) {
                    acc += w * src.get(rr as usize, cc as usize);
                    wsum += w;
                }
            }
            acc / wsum
        })
    };
    pass(&pass(g, true), false)
}

/// Bilinear sample at fractional `(row, col)`, clamping to the border.
pub(crate) fn sample_clamped(g: &Grid, row: f64, col: f64) -> f64 {
    let max = (g.n() - 1) as f64;
    let (y, x) = (row.clamp(0.0, max), col.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g.n() - 1), (x0 + 1).min(g.n() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
    let bottom = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn downsample(g: &Grid) -> Grid {
    let m = g.n().div_ceil(2);
    let n = g.n();
    Grid::from_fn(m, |r, c| {
        let (mut acc, mut cnt) = (0.0, 0.0);
        for rr in 2 * r..(2 * r + 2).min(n) {
            for cc in 2 * c..(2 * c + 2).min(n) {
                acc += g.get(rr, cc);
                cnt += 1.0;
            }
        }
        acc / cnt
    })
}

fn upsample_flow(f: &FlowField, n: usize) -> FlowField {
    let up = |g: &Grid| {
        Grid::from_fn(n, |r, c| {
            2.0 * sample_clamped(g, (r as f64 - 0.5) / 2.0, (c as f64 - 0.5) / 2.0)
        })
    };
    FlowField {
        u: up(&f.u),
        v: up(&f.v),
    }
}

fn warp_back(g: &Grid, flow: &FlowField) -> Grid {
    Grid::from_fn(g.n(), |r, c| {
        sample_clamped(g, r as f64 - flow.v.get(r, c), c as f64 - flow.u.get(r, c))
    })
}

fn central_diff(g: &Grid, row: usize, col: usize, horizontal: bool) -> f64 {
    let n = g.n();
    let (lo, hi) = if horizontal {
        (
            g.get(row, col.saturating_sub(1)),
            g.get(row, (col + 1).min(n - 1)),
        )
    } else {
        (
            g.get(row.saturating_sub(1), col),
            g.get((row + 1).min(n - 1), col),
        )
    };
    let span = if horizontal {
        ((col + 1).min(n - 1) - col.saturating_sub(1)) as f64
    } else {
        ((row + 1).min(n - 1) - row.saturating_sub(1)) as f64
    };
    if span == 0.0 {
        0.0
    } else {
        (hi - lo) / span
    }
}

/// One damped Lucas–Kanade increment for `prev` already warped towards `curr`.
fn lk_increment(prev: &Grid, curr: &Grid, p: &FlowParams) -> FlowField {
    let n = prev.n();
    let mean = Grid::from_fn(n, |r, c| 0.5 * (prev.get(r, c) + curr.get(r, c)));
    let ix = Grid::from_fn(n, |r, c| central_diff(&mean, r, c, true));
    let iy = Grid::from_fn(n, |r, c| central_diff(&mean, r, c, false));
    let it = Grid::from_fn(n, |r, c| curr.get(r, c) - prev.get(r, c));
    let prod = |a: &Grid, b: &Grid| Grid::from_fn(n, |r, c| a.get(r, c) * b.get(r, c));
    let w = |g: Grid| gaussian_blur(&g, p.window_sigma);
    let (sxx, sxy, syy) = (w(prod(&ix, &ix)), w(prod(&ix, &iy)), w(prod(&iy, &iy)));
    let (sxt, syt) = (w(prod(&ix, &it)), w(prod(&iy, &it)));
    let mut out = FlowField::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let a = sxx.get(r, c) + p.damping;
            let b = sxy.get(r, c);
            let d = syy.get(r, c) + p.damping;
            let (bx, by) = (-sxt.get(r, c), -syt.get(r, c));
            let det = a * d - b * b;
            out.u.set(r, c, (d * bx - b * by) / det);
            out.v.set(r, c, (a * by - b * bx) / det);
        }
    }
    out
}

fn clamp_flow(f: &mut FlowField, v_max: f64) {
    for x in f.u.values_mut().iter_mut().chain(f.v.values_mut()) {
        *x = if x.is_finite() {
            x.clamp(-v_max, v_max)
        } else {
            0.0
        };
    }
}

/// Dense flow carrying `prev` onto `curr`.
pub fn estimate_flow(prev: &Grid, curr: &Grid, p: &FlowParams) -> Result<FlowField> {
    if prev.n() != curr.n() {
        return Err(Error::shape("estimate_flow", &[prev.n()], &[curr.n()]));
    }
    if p.levels == 0 || !(p.damping > 0.0) || !(p.v_max > 0.0) {
        return Err(Error::InvalidArgument(
            "flow needs ≥ 1 level, positive damping and v_max".into(),
        ));
    }
    let mut pyramid = vec![(
        gaussian_blur(prev, p.smoothing_sigma),
        gaussian_blur(curr, p.smoothing_sigma),
    )];
    for _ in 1..p.levels {
        let (a, b) = pyramid.last().expect("non-empty");
        if a.n() < 8 {
            break;
        }
        pyramid.push((downsample(a), downsample(b)));
    }
    let mut flow: Option<FlowField> = None;
    for (a, b) in pyramid.iter().rev() {
        let mut f = match flow {
            Some(coarse) => upsample_flow(&coarse, a.n()),
            None => FlowField::zeros(a.n()),
        };
        for _ in 0..p.warp_iterations.max(1) {
            let warped = warp_back(a, &f);
            let inc = lk_increment(&warped, b, p);
            for (x, d) in f.u.values_mut().iter_mut().zip(inc.u.values()) {
                *x += d;
            }
            for (x, d) in f.v.values_mut().iter_mut().zip(inc.v.values()) {
                *x += d;
            }
            clamp_flow(&mut f, p.v_max);
        }
        flow = Some(f);
    }
    Ok(flow.expect("at least one level"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize, cx: f64, cy: f64, sigma: f64) -> Grid {
        Grid::from_fn(n, |r, c| {
            let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
            5.0 * (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let g = blob(24, 11.0, 12.0, 3.0);
        let f = estimate_flow(&g, &g, &FlowParams::default()).unwrap();
        assert_eq!(f.max_speed_component(), 0.0);
    }

    #[test]
    fn featureless_frames_give_zero_flow() {
        let g = Grid::filled(16, 3.0);
        let f = estimate_flow(&g, &g.map(|x| x + 0.0), &FlowParams::default()).unwrap();
        assert_eq!(f.max_speed_component(), 0.0);
    }

    #[test]
    fn shifted_blob_is_tracked() {
        let (a, b) = (blob(32, 13.0, 16.0, 3.0), blob(32, 15.0, 16.0, 3.0));
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        for r in 12..=20 {
            for c in 11..=19 {
                assert!(
                    (f.u.get(r, c) - 2.0).abs() < 0.5,
                    "u({r},{c}) = {}",
                    f.u.get(r, c)
                );
                assert!(f.v.get(r, c).abs() < 0.5);
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let g = Grid::filled(9, 2.5);
        assert!(gaussian_blur(&g, 1.5)
            .values()
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_mismatched_frames() {
        assert!(estimate_flow(
            &Grid::filled(8, 0.0),
            &Grid::filled(9, 0.0),
            &FlowParams::default()
        )
        .is_err());
    }
}
