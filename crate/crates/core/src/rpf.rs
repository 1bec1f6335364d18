//! Radar–water-vapour fusion.
//!
//! The water-vapour branch produces a spatial gate `M ∈ (0,1)^{H×W}` from its
//! channel-pooled features through a 7×7 convolution and a sigmoid. The radar
//! branch is reweighted per channel by `W = σ(MLP(avg) + MLP(max))`. The fused
//! map is `M ⊗ (F_radar ⊗ W) + F_radar`: where `M → 0` the radar features pass
//! through unchanged, where `M → 1` the refined features are added on top.
//!
//! Fusion runs once on the hidden maps and once on the cell maps.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{
    channel_pool, conv2d, global_pool, mlp_apply, BranchState, Conv2dLayer, SharedMlp,
};
use crate::params::{Graph, ParamStore};

#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub conv: Conv2dLayer,
}

impl SpatialGate {
    pub const KERNEL: usize = 7;

    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv2dLayer::new(
            store,
            &format!("{name}.conv"),
            2,
            1,
            Self::KERNEL,
            1,
            Self::KERNEL / 2,
            rng,
        )?;
        Ok(SpatialGate { conv })
    }
}

#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub mlp: SharedMlp,
}

impl ChannelGate {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ChannelGate {
            mlp: SharedMlp::new(store, &format!("{name}.mlp"), channels, reduction, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RpfGates {
    pub spatial: SpatialGate,
    pub channel: ChannelGate,
}

impl RpfGates {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        radar_channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(RpfGates {
            spatial: SpatialGate::new(store, &format!("{name}.spatial"), rng)?,
            channel: ChannelGate::new(
                store,
                &format!("{name}.channel"),
                radar_channels,
                reduction,
                rng,
            )?,
        })
    }
}

/// Gate parameters for one fusion block: shared between the hidden and cell
/// maps, or one set each.
#[derive(Clone, Debug)]
pub struct RpfModule {
    pub hidden: RpfGates,
    pub cell: Option<RpfGates>,
}

impl RpfModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        radar_channels: usize,
        reduction: usize,
        share_hc_gates: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if share_hc_gates {
            Ok(RpfModule {
                hidden: RpfGates::new(store, name, radar_channels, reduction, rng)?,
                cell: None,
            })
        } else {
            Ok(RpfModule {
                hidden: RpfGates::new(store, &format!("{name}.h"), radar_channels, reduction, rng)?,
                cell: Some(RpfGates::new(
                    store,
                    &format!("{name}.c"),
                    radar_channels,
                    reduction,
                    rng,
                )?),
            })
        }
    }

    pub fn cell_gates(&self) -> &RpfGates {
        self.cell.as_ref().unwrap_or(&self.hidden)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedState {
    pub h: Var,
    pub c: Var,
}

/// `σ(conv7×7([mean_c(x); max_c(x)]))`, a `1×H×W` map.
pub fn spatial_attention(g: &mut Graph<'_>, f_pwv: Var, gate: &SpatialGate) -> Result<Var> {
    let pooled = channel_pool(g, f_pwv)?;
    let logits = conv2d(g, pooled, &gate.conv)?;
    Ok(g.tape.sigmoid(logits))
}

/// `σ(MLP(avg(x)) + MLP(max(x)))` with one MLP serving both pooled vectors.
pub fn channel_attention(g: &mut Graph<'_>, f_radar: Var, gate: &ChannelGate) -> Result<Var> {
    let c = g.tape.shape(f_radar)[0];
    if c != gate.mlp.channels {
        return Err(Error::shape(
            "channel_attention",
            &[c],
            &[gate.mlp.channels],
        ));
    }
    let (avg, max) = global_pool(g, f_radar)?;
    let a = mlp_apply(g, avg, &gate.mlp)?;
    let m = mlp_apply(g, max, &gate.mlp)?;
    let sum = g.tape.add(a, m)?;
    Ok(g.tape.sigmoid(sum))
}

/// Scales each radar channel by its weight.
pub fn refine_radar(g: &mut Graph<'_>, f_radar: Var, weights: Var) -> Result<Var> {
    let (s, w) = (g.tape.shape(f_radar), g.tape.shape(weights));
    if s.len() != 3 || w != [s[0]] {
        return Err(Error::shape("refine_radar", s, w));
    }
    g.tape.mul(f_radar, weights)
}

/// `M ⊗ F' + F` with `M` broadcast over channels.
pub fn gated_fuse(g: &mut Graph<'_>, gate_map: Var, refined: Var, radar: Var) -> Result<Var> {
    let (m, r, f) = (
        g.tape.shape(gate_map),
        g.tape.shape(refined),
        g.tape.shape(radar),
    );
    if r != f || r.len() != 3 || m != [1, r[1], r[2]] {
        return Err(Error::shape("gated_fuse", m, r));
    }
    let corrected = g.tape.mul(refined, gate_map)?;
    g.tape.add(corrected, radar)
}

fn fuse_one(g: &mut Graph<'_>, pwv: Var, radar: Var, gates: &RpfGates) -> Result<Var> {
    let m = spatial_attention(g, pwv, &gates.spatial)?;
    let w = channel_attention(g, radar, &gates.channel)?;
    let refined = refine_radar(g, radar, w)?;
    gated_fuse(g, m, refined, radar)
}

pub fn rpf_fuse(
    g: &mut Graph<'_>,
    pwv: BranchState,
    radar: BranchState,
    module: &RpfModule,
) -> Result<FusedState> {
    let (ps, rs) = (g.tape.shape(pwv.h), g.tape.shape(radar.h));
    if ps.len() != 3 || rs.len() != 3 || ps[1..] != rs[1..] {
        return Err(Error::shape("rpf_fuse spatial extent", ps, rs));
    }
    let h = fuse_one(g, pwv.h, radar.h, &module.hidden)?;
    let c = fuse_one(g, pwv.c, radar.c, module.cell_gates())?;
    Ok(FusedState { h, c })
}
