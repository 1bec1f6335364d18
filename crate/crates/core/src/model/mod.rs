//! Three encoder branches, the radar merge, fusion and the autoregressive decoder.

pub mod checkpoint;
mod config;

pub use config::{ModelConfig, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{
    conv2d, convlstm_step, deconv2d, encode_sequence, BranchState, Conv2dLayer, ConvLstmCell,
    Deconv2dLayer,
};
use crate::params::{Graph, ParamStore};
use crate::rpf::{
    channel_attention, refine_radar, rpf_fuse, spatial_attention, FusedState, RpfModule,
};
use crate::tensor::Tensor;

/// Normalized model inputs, each shaped `[T, 1, grid, grid]`.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub pwv: Tensor,
    pub hist: Tensor,
    pub prior: Tensor,
}

impl ModelInput {
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let g = cfg.grid;
        for (name, t, len) in [
            ("pwv", &self.pwv, cfg.t_in),
            ("hist", &self.hist, cfg.t_in),
            ("prior", &self.prior, cfg.t_out),
        ] {
            if t.shape() != [len, 1, g, g] {
                return Err(Error::ShapeMismatch {
                    op: name_of(name),
                    lhs: t.shape().to_vec(),
                    rhs: vec![len, 1, g, g],
                });
            }
        }
        Ok(())
    }

    /// The last observed radar frame, `[1, grid, grid]`.
    pub fn last_observation(&self) -> Result<Tensor> {
        self.hist.index_outer(self.hist.shape()[0] - 1)
    }
}

fn name_of(branch: &str) -> &'static str {
    match branch {
        "pwv" => "input pwv",
        "hist" => "input hist",
        _ => "input prior",
    }
}

/// Ground-truth frames substituted for the decoder's previous prediction.
#[derive(Clone, Debug)]
pub struct TeacherFeed {
    /// `[t_out, 1, grid, grid]` normalized targets.
    pub targets: Tensor,
    /// `use_truth[t]` feeds target `t` (instead of prediction `t`) into step `t + 1`.
    pub use_truth: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Encoder {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    cell: ConvLstmCell,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: [usize; 2],
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Encoder {
            conv1: Conv2dLayer::new(
                store,
                &format!("{name}.conv1"),
                1,
                channels[0],
                3,
                2,
                1,
                rng,
            )?,
            conv2: Conv2dLayer::new(
                store,
                &format!("{name}.conv2"),
                channels[0],
                channels[1],
                3,
                2,
                1,
                rng,
            )?,
            cell: ConvLstmCell::new(store, &format!("{name}.lstm"), channels[1], hidden, rng)?,
        })
    }

    /// conv → ReLU → conv → ReLU, applied to one `[1, G, G]` frame.
    fn downsample(&self, g: &mut Graph<'_>, frame: Var) -> Result<Var> {
        downsample(g, frame, &self.conv1, &self.conv2)
    }

    fn encode(&self, g: &mut Graph<'_>, frames: &Tensor) -> Result<BranchState> {
        let mut feats = Vec::with_capacity(frames.shape()[0]);
        for t in 0..frames.shape()[0] {
            let x = g.input(frames.index_outer(t)?);
            feats.push(self.downsample(g, x)?);
        }
        encode_sequence(g, &feats, &self.cell)
    }
}

fn downsample(g: &mut Graph<'_>, frame: Var, c1: &Conv2dLayer, c2: &Conv2dLayer) -> Result<Var> {
    let y = conv2d(g, frame, c1)?;
    let y = g.tape.relu(y);
    let y = conv2d(g, y, c2)?;
    Ok(g.tape.relu(y))
}

#[derive(Clone, Debug)]
struct Decoder {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    cell: ConvLstmCell,
    up1: Deconv2dLayer,
    up2: Deconv2dLayer,
    out: Conv2dLayer,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [d0, d1] = cfg.decoder_channels;
        let [h0, h1] = cfg.head_channels;
        Ok(Decoder {
            conv1: Conv2dLayer::new(store, "decoder.conv1", 1, d0, 3, 2, 1, rng)?,
            conv2: Conv2dLayer::new(store, "decoder.conv2", d0, d1, 3, 2, 1, rng)?,
            cell: ConvLstmCell::new(store, "decoder.lstm", d1, cfg.proj_channels, rng)?,
            up1: Deconv2dLayer::new(store, "decoder.up1", cfg.proj_channels, h0, 4, 2, 1, rng)?,
            up2: Deconv2dLayer::new(store, "decoder.up2", h0, h1, 4, 2, 1, rng)?,
            out: Conv2dLayer::new(store, "decoder.out", h1, 1, 1, 1, 0, rng)?,
        })
    }

    fn head(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let y = deconv2d(g, h, &self.up1)?;
        let y = g.tape.relu(y);
        let y = deconv2d(g, y, &self.up2)?;
        let y = g.tape.relu(y);
        let y = conv2d(g, y, &self.out)?;
        Ok(g.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    /// Merged radar state seeds the decoder directly.
    None,
    Gated(RpfModule),
    /// Concatenate all three branch states, then a 1×1 projection.
    ConcatStates(Conv2dLayer),
    /// Concatenate `M ⊗ F_pwv` with `F_radar ⊗ W`, project, add `F_radar`.
    ConcatAttention {
        gates: RpfModule,
        proj: Conv2dLayer,
    },
}

#[derive(Clone, Debug)]
pub struct FusionCast {
    pub config: ModelConfig,
    pub params: ParamStore,
    pwv: Option<Encoder>,
    hist: Encoder,
    prior: Option<Encoder>,
    merge: Option<Conv2dLayer>,
    fusion: Fusion,
    decoder: Decoder,
}

/// Starting bias of the output head, in normalized units (about 0.27 mm/h).
/// Keeps the final ReLU active at initialisation whatever the random draw.
pub const HEAD_BIAS_INIT: f64 = 0.05;

/// Initialisation stream for one named module.
fn module_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    rng
}

impl FusionCast {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        // One stream per module, so modules shared across variants start identical.
        let rng = |name: &str| module_rng(cfg.init_seed, name);
        let mut store = ParamStore::new();
        let v = cfg.variant;

        let pwv = v
            .uses_pwv()
            .then(|| {
                Encoder::new(
                    &mut store,
                    "encoder.pwv",
                    cfg.branch_channels,
                    cfg.hidden,
                    &mut rng("encoder.pwv"),
                )
            })
            .transpose()?;
        let hist = Encoder::new(
            &mut store,
            "encoder.hist",
            cfg.branch_channels,
            cfg.hidden,
            &mut rng("encoder.hist"),
        )?;
        let prior = v
            .uses_prior()
            .then(|| {
                Encoder::new(
                    &mut store,
                    "encoder.prior",
                    cfg.prior_channels,
                    cfg.prior_hidden,
                    &mut rng("encoder.prior"),
                )
            })
            .transpose()?;
        let merge = (v.uses_prior() && v != Variant::NoRpfConcat)
            .then(|| {
                Conv2dLayer::new(
                    &mut store,
                    "merge.proj",
                    cfg.hidden + cfg.prior_hidden,
                    cfg.proj_channels,
                    1,
                    1,
                    0,
                    &mut rng("merge.proj"),
                )
            })
            .transpose()?;
        let fusion = match v {
            Variant::NoPwv => Fusion::None,
            Variant::Full | Variant::NoPrior => Fusion::Gated(RpfModule::new(
                &mut store,
                "rpf",
                cfg.proj_channels,
                cfg.mlp_reduction,
                cfg.share_hc_gates,
                &mut rng("rpf"),
            )?),
            Variant::NoRpfConcat => Fusion::ConcatStates(Conv2dLayer::new(
                &mut store,
                "concat.proj",
                2 * cfg.hidden + cfg.prior_hidden,
                cfg.proj_channels,
                1,
                1,
                0,
                &mut rng("concat.proj"),
            )?),
            Variant::RpfConcatFusion => {
                let gates = RpfModule::new(
                    &mut store,
                    "rpf",
                    cfg.proj_channels,
                    cfg.mlp_reduction,
                    cfg.share_hc_gates,
                    &mut rng("rpf"),
                )?;
                let proj = Conv2dLayer::new(
                    &mut store,
                    "rpf.concat.proj",
                    cfg.hidden + cfg.proj_channels,
                    cfg.proj_channels,
                    1,
                    1,
                    0,
                    &mut rng("rpf.concat.proj"),
                )?;
                Fusion::ConcatAttention { gates, proj }
            }
        };
        let decoder = Decoder::new(&mut store, cfg, &mut rng("decoder"))?;
        if let Some(b) = decoder.out.bias {
            store.get_mut(b).value.data_mut().fill(HEAD_BIAS_INIT);
        }
        Ok(FusionCast {
            config,
            params: store,
            pwv,
            hist,
            prior,
            merge,
            fusion,
            decoder,
        })
    }

    pub fn encode_pwv(&self, g: &mut Graph<'_>, x_pwv: &Tensor) -> Result<Option<BranchState>> {
        self.pwv.as_ref().map(|e| e.encode(g, x_pwv)).transpose()
    }

    pub fn encode_hist(&self, g: &mut Graph<'_>, x_hist: &Tensor) -> Result<BranchState> {
        self.hist.encode(g, x_hist)
    }

    pub fn encode_prior(&self, g: &mut Graph<'_>, x_prior: &Tensor) -> Result<Option<BranchState>> {
        self.prior
            .as_ref()
            .map(|e| e.encode(g, x_prior))
            .transpose()
    }

    /// Projects `[H_hist; H_prior]` (and likewise the cell maps) to the decoder
    /// width. Without a prior branch the historical state passes through.
    pub fn merge_radar_states(
        &self,
        g: &mut Graph<'_>,
        hist: BranchState,
        prior: Option<BranchState>,
    ) -> Result<BranchState> {
        let (Some(proj), Some(prior)) = (&self.merge, prior) else {
            return Ok(hist);
        };
        let mut merged = [hist.h; 2];
        for (slot, (a, b)) in merged
            .iter_mut()
            .zip([(hist.h, prior.h), (hist.c, prior.c)])
        {
            let (sa, sb) = (g.tape.shape(a), g.tape.shape(b));
            if sa[1..] != sb[1..] {
                return Err(Error::shape("merge_radar_states", sa, sb));
            }
            let cat = g.tape.concat(&[a, b])?;
            *slot = conv2d(g, cat, proj)?;
        }
        Ok(BranchState {
            h: merged[0],
            c: merged[1],
        })
    }

    fn fuse(
        &self,
        g: &mut Graph<'_>,
        pwv: Option<BranchState>,
        hist: BranchState,
        prior: Option<BranchState>,
    ) -> Result<FusedState> {
        let missing = || Error::InvalidArgument("variant requires the water-vapour branch".into());
        match &self.fusion {
            Fusion::None => {
                let radar = self.merge_radar_states(g, hist, prior)?;
                Ok(FusedState {
                    h: radar.h,
                    c: radar.c,
                })
            }
            Fusion::Gated(module) => {
                let radar = self.merge_radar_states(g, hist, prior)?;
                rpf_fuse(g, pwv.ok_or_else(missing)?, radar, module)
            }
            Fusion::ConcatStates(proj) => {
                let pwv = pwv.ok_or_else(missing)?;
                let prior = prior.ok_or_else(|| {
                    Error::InvalidArgument("variant requires the prior branch".into())
                })?;
                let h = g.tape.concat(&[pwv.h, hist.h, prior.h])?;
                let c = g.tape.concat(&[pwv.c, hist.c, prior.c])?;
                Ok(FusedState {
                    h: conv2d(g, h, proj)?,
                    c: conv2d(g, c, proj)?,
                })
            }
            Fusion::ConcatAttention { gates, proj } => {
                let pwv = pwv.ok_or_else(missing)?;
                let radar = self.merge_radar_states(g, hist, prior)?;
                let mut out = [radar.h; 2];
                let pairs = [
                    (pwv.h, radar.h, &gates.hidden),
                    (pwv.c, radar.c, gates.cell_gates()),
                ];
                for (slot, (p, r, gate)) in out.iter_mut().zip(pairs) {
                    let m = spatial_attention(g, p, &gate.spatial)?;
                    let attended = g.tape.mul(p, m)?;
                    let w = channel_attention(g, r, &gate.channel)?;
                    let refined = refine_radar(g, r, w)?;
                    let cat = g.tape.concat(&[attended, refined])?;
                    let projected = conv2d(g, cat, proj)?;
                    *slot = g.tape.add(projected, r)?;
                }
                Ok(FusedState {
                    h: out[0],
                    c: out[1],
                })
            }
        }
    }

    /// Encodes all branches and fuses them into the decoder's initial state.
    pub fn encode(&self, g: &mut Graph<'_>, input: &ModelInput) -> Result<FusedState> {
        input.check(&self.config)?;
        let pwv = self.encode_pwv(g, &input.pwv)?;
        let hist = self.encode_hist(g, &input.hist)?;
        let prior = self.encode_prior(g, &input.prior)?;
        self.fuse(g, pwv, hist, prior)
    }

    /// Rolls the decoder for `t_out` steps from `fused`, starting from `last_obs`.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        fused: FusedState,
        last_obs: &Tensor,
        teacher: Option<&TeacherFeed>,
    ) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if last_obs.shape() != [1, cfg.grid, cfg.grid] {
            return Err(Error::shape(
                "decode last frame",
                last_obs.shape(),
                &[1, cfg.grid, cfg.grid],
            ));
        }
        let d = &self.decoder;
        let mut state = BranchState {
            h: fused.h,
            c: fused.c,
        };
        let mut prev = g.input(last_obs.clone());
        let mut outputs = Vec::with_capacity(cfg.t_out);
        for t in 0..cfg.t_out {
            let feat = downsample(g, prev, &d.conv1, &d.conv2)?;
            state = convlstm_step(g, feat, Some(state), &d.cell)?;
            let y = d.head(g, state.h)?;
            outputs.push(y);
            prev = match teacher {
                Some(tf) if tf.use_truth.get(t).copied().unwrap_or(false) => {
                    g.input(tf.targets.index_outer(t)?)
                }
                _ => y,
            };
        }
        Ok(outputs)
    }

    /// Full pass; returns `t_out` normalized `[1, grid, grid]` frames.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        input: &ModelInput,
        teacher: Option<&TeacherFeed>,
    ) -> Result<Vec<Var>> {
        let fused = self.encode(g, input)?;
        self.decode(g, fused, &input.last_observation()?, teacher)
    }

    /// Inference without gradients; returns `[t_out, grid, grid]` normalized intensities.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let frames = self.forward(&mut g, input, None)?;
        let n = self.config.grid;
        let mut data = Vec::with_capacity(frames.len() * n * n);
        for f in &frames {
            data.extend_from_slice(g.value(*f).data());
        }
        Tensor::new([frames.len(), n, n], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input_for(cfg: &ModelConfig, seed: u64) -> ModelInput {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = cfg.grid;
        let mut mk = |t: usize| {
            let data = (0..t * g * g).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new([t, 1, g, g], data).unwrap()
        };
        ModelInput {
            pwv: mk(cfg.t_in),
            hist: mk(cfg.t_in),
            prior: mk(cfg.t_out),
        }
    }

    #[test]
    fn every_variant_produces_nonnegative_frames() {
        for variant in Variant::ALL {
            let cfg = ModelConfig {
                variant,
                ..ModelConfig::gradcheck()
            };
            let model = FusionCast::new(cfg.clone()).unwrap();
            let out = model.predict(&input_for(&cfg, 1)).unwrap();
            assert_eq!(out.shape(), &[cfg.t_out, cfg.grid, cfg.grid]);
            assert!(out.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn zero_params_give_relu_of_head_bias() {
        let cfg = ModelConfig::gradcheck();
        let mut model = FusionCast::new(cfg.clone()).unwrap();
        for p in model.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let bias = model.params.id("decoder.out.bias").unwrap();
        model.params.get_mut(bias).value = Tensor::full([1], 0.75).unwrap();
        let out = model.predict(&input_for(&cfg, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
        model.params.get_mut(bias).value = Tensor::full([1], -0.5).unwrap();
        let out = model.predict(&input_for(&cfg, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_inconsistent_input() {
        let cfg = ModelConfig::gradcheck();
        let model = FusionCast::new(cfg.clone()).unwrap();
        let mut input = input_for(&cfg, 3);
        input.prior = Tensor::zeros([cfg.t_out + 1, 1, cfg.grid, cfg.grid]).unwrap();
        assert!(model.predict(&input).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::gradcheck();
        let a = FusionCast::new(cfg.clone())
            .unwrap()
            .predict(&input_for(&cfg, 4))
            .unwrap();
        let b = FusionCast::new(cfg.clone())
            .unwrap()
            .predict(&input_for(&cfg, 4))
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shared_modules_start_identical_across_variants() {
        let full = FusionCast::new(ModelConfig::gradcheck()).unwrap();
        for variant in Variant::ALL {
            let other = FusionCast::new(ModelConfig { variant, ..ModelConfig::gradcheck() }).unwrap();
            let mut shared = 0;
            for p in other.params.iter() {
                if let Some(id) = full.params.id(&p.name) {
                    assert_eq!(full.params.get(id).value, p.value, "{variant}: {}", p.name);
                    shared += 1;
                }
            }
            assert!(shared > 0);
        }
    }

    fn mse_loss(g: &mut Graph<'_>, outputs: &[Var], target: &Tensor) -> Result<Var> {
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
        Ok(total.expect("t_out >= 1"))
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for variant in Variant::ALL {
            let cfg = ModelConfig {
                variant,
                init_seed: 5,
                ..ModelConfig::gradcheck()
            };
            let mut model = FusionCast::new(cfg.clone()).unwrap();
            crate::gradcheck::jitter(&mut model.params, 0.3, 8);
            let input = input_for(&cfg, 6);
            let target = input_for(&cfg, 7).prior;
            let report = crate::gradcheck::finite_difference_check(&model.params, 1e-4, |g| {
                let out = model.forward(g, &input, None)?;
                mse_loss(g, &out, &target)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "{variant}: {report:?}");
            assert!(
                report.checked > 100 * report.skipped_kinks.max(1),
                "{report:?}"
            );
        }
    }
}
