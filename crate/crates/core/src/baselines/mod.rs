//! Optical-flow extrapolation (also the prior generator) and persistence.

mod flow;

pub use flow::{estimate_flow, FlowField, FlowParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Grid;
use crate::error::{Error, Result};

/// Bilinear sample that reads 0 outside the domain.
fn sample_zero(g: &Grid, row: f64, col: f64) -> f64 {
    let n = g.n() as isize;
    let (y0, x0) = (row.floor(), col.floor());
    let (fy, fx) = (row - y0, col - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| {
        if (0..n).contains(&r) && (0..n).contains(&c) {
            g.get(r as usize, c as usize)
        } else {
            0.0
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wy * wx;
            if w != 0.0 {
                v += w * at(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Backward semi-Lagrangian advection applied `steps` times.
pub fn advect(frame: &Grid, flow: &FlowField, steps: usize) -> Result<Vec<Grid>> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "advect needs at least one step".into(),
        ));
    }
    if flow.n() != frame.n() {
        return Err(Error::shape("advect", &[frame.n()], &[flow.n()]));
    }
    let mut out = Vec::with_capacity(steps);
    let mut cur = frame.clone();
    for _ in 0..steps {
        cur = Grid::from_fn(frame.n(), |r, c| {
            sample_zero(
                &cur,
                r as f64 - flow.v.get(r, c),
                c as f64 - flow.u.get(r, c),
            )
        });
        out.push(cur.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub flow: FlowParams,
    /// Standard deviation (px/frame) of a global offset added to the flow.
    pub perturbation_sigma: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            flow: FlowParams::default(),
            perturbation_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Extrapolates the last history frame along the flow between the last two.
///
/// `stream` decorrelates the perturbation across windows sharing one config.
pub fn generate_prior(
    hist: &[Grid],
    t_out: usize,
    cfg: &PriorConfig,
    stream: u64,
) -> Result<Vec<Grid>> {
    let [.., prev, last] = hist else {
        return Err(Error::InvalidArgument(format!(
            "prior generation needs at least 2 history frames, got {}",
            hist.len()
        )));
    };
    let mut flow = estimate_flow(prev, last, &cfg.flow)?;
    if cfg.perturbation_sigma > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, cfg.perturbation_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (du, dv) = (normal.sample(&mut rng), normal.sample(&mut rng));
        flow.u.values_mut().iter_mut().for_each(|x| *x += du);
        flow.v.values_mut().iter_mut().for_each(|x| *x += dv);
    }
    advect(last, &flow, t_out)
}

pub fn persistence(last: &Grid, t_out: usize) -> Vec<Grid> {
    vec![last.clone(); t_out]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(n: usize, cx: f64, cy: f64) -> Grid {
        Grid::from_fn(n, |r, c| {
            let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
            4.0 * (-d2 / 18.0).exp()
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let g = blob(12, 5.0, 6.0);
        let out = advect(&g, &FlowField::zeros(12), 3).unwrap();
        assert!(out.iter().all(|f| *f == g));
    }

    #[test]
    fn integer_flow_shifts_exactly() {
        let g = Grid::from_fn(6, |r, c| (r * 6 + c + 1) as f64);
        let out = advect(&g, &FlowField::uniform(6, 1.0, 0.0), 2).unwrap();
        for r in 0..6 {
            assert_eq!(out[0].get(r, 0), 0.0);
            assert_eq!(out[1].get(r, 1), 0.0);
            for c in 1..6 {
                assert_eq!(out[0].get(r, c), g.get(r, c - 1));
            }
            for c in 2..6 {
                assert_eq!(out[1].get(r, c), g.get(r, c - 2));
            }
        }
    }

    #[test]
    fn advection_keeps_non_negativity() {
        let g = blob(16, 7.0, 8.0);
        let flow = FlowField {
            u: Grid::from_fn(16, |r, _| (r as f64 * 0.37).sin() * 1.7),
            v: Grid::from_fn(16, |_, c| (c as f64 * 0.21).cos() * 0.9),
        };
        for f in advect(&g, &flow, 4).unwrap() {
            assert!(f.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn interior_mass_is_conserved_under_smooth_flow() {
        let g = blob(40, 18.0, 20.0);
        let out = advect(&g, &FlowField::uniform(40, 0.6, -0.3), 3).unwrap();
        let mut prev = g.sum();
        for f in &out {
            assert!((f.sum() - prev).abs() / prev < 0.01);
            prev = f.sum();
        }
    }

    #[test]
    fn static_scene_prior_repeats_last_frame() {
        let g = blob(16, 8.0, 8.0);
        let out = generate_prior(&[g.clone(), g.clone()], 4, &PriorConfig::default(), 0).unwrap();
        assert!(out.iter().all(|f| *f == g));
        assert!(generate_prior(&[g], 4, &PriorConfig::default(), 0).is_err());
    }

    #[test]
    fn zero_perturbation_matches_deterministic_path() {
        let hist = [blob(24, 9.0, 12.0), blob(24, 10.0, 12.0)];
        let cfg = PriorConfig::default();
        let a = generate_prior(&hist, 3, &cfg, 1).unwrap();
        let b = generate_prior(&hist, 3, &PriorConfig { seed: 99, ..cfg }, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_prior(
            &hist,
            3,
            &PriorConfig {
                perturbation_sigma: 0.5,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn persistence_copies() {
        let g = blob(8, 3.0, 3.0);
        let out = persistence(&g, 5);
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|f| *f == g));
    }
}
