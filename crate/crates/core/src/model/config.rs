use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture variants, including the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Three branches, radar merge, gated fusion.
    Full,
    /// Water-vapour branch removed; the decoder starts from the merged radar state.
    NoPwv,
    /// Prior branch removed; the historical radar state is fused directly.
    NoPrior,
    /// Fusion replaced by concatenating all three states and a 1×1 projection.
    NoRpfConcat,
    /// Both attentions kept, gating replaced by concatenation and a 1×1 projection.
    RpfConcatFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPwv,
        Variant::NoPrior,
        Variant::NoRpfConcat,
        Variant::RpfConcatFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPwv => "no_pwv",
            Variant::NoPrior => "no_prior",
            Variant::NoRpfConcat => "no_rpf_concat",
            Variant::RpfConcatFusion => "rpf_concat_fusion",
        }
    }

    pub fn uses_pwv(self) -> bool {
        self != Variant::NoPwv
    }

    pub fn uses_prior(self) -> bool {
        self != Variant::NoPrior
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square grid extent in pixels; must be divisible by 4.
    pub grid: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Conv stack widths of the water-vapour and historical-radar encoders.
    pub branch_channels: [usize; 2],
    /// Conv stack widths of the prior encoder.
    pub prior_channels: [usize; 2],
    /// ConvLSTM width of the water-vapour and historical-radar encoders.
    pub hidden: usize,
    pub prior_hidden: usize,
    /// Width of the merged radar state and of the decoder ConvLSTM.
    pub proj_channels: usize,
    /// Conv stack widths that downsample the decoder's previous frame.
    pub decoder_channels: [usize; 2],
    /// Output widths of the two upsampling blocks.
    pub head_channels: [usize; 2],
    pub mlp_reduction: usize,
    pub share_hc_gates: bool,
    pub variant: Variant,
    /// Seed of the weight initializer.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: 64,
            t_in: 4,
            t_out: 12,
            branch_channels: [32, 64],
            prior_channels: [32, 128],
            hidden: 64,
            prior_hidden: 128,
            proj_channels: 64,
            decoder_channels: [32, 64],
            head_channels: [32, 16],
            mlp_reduction: 4,
            share_hc_gates: true,
            variant: Variant::Full,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small enough that every parameter tensor fits the finite-difference checker.
    pub fn gradcheck() -> Self {
        ModelConfig {
            grid: 16,
            t_in: 2,
            t_out: 2,
            branch_channels: [2, 3],
            prior_channels: [2, 4],
            hidden: 3,
            prior_hidden: 3,
            proj_channels: 3,
            decoder_channels: [2, 3],
            head_channels: [2, 2],
            ..Default::default()
        }
    }

    /// Desk-scale configuration used for the ablation experiments.
    pub fn desk() -> Self {
        ModelConfig {
            grid: 32,
            branch_channels: [8, 12],
            prior_channels: [8, 16],
            hidden: 12,
            prior_hidden: 16,
            proj_channels: 12,
            decoder_channels: [8, 12],
            head_channels: [8, 8],
            ..Default::default()
        }
    }

    pub fn state_extent(&self) -> usize {
        self.grid / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.grid < 4 || !self.grid.is_multiple_of(4) {
            return bad(format!(
                "grid extent {} must be a positive multiple of 4",
                self.grid
            ));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return bad("t_in and t_out must be at least 1".into());
        }
        let widths = [
            self.branch_channels.as_slice(),
            &self.prior_channels,
            &self.decoder_channels,
            &self.head_channels,
            &[
                self.hidden,
                self.prior_hidden,
                self.proj_channels,
                self.mlp_reduction,
            ],
        ];
        if widths.iter().flat_map(|w| w.iter()).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.hidden != self.proj_channels {
            return bad(format!(
                "hidden ({}) must equal proj_channels ({}) so the historical state can seed the decoder",
                self.hidden, self.proj_channels
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("concat".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::gradcheck().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
        let odd = ModelConfig {
            grid: 30,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let no_out = ModelConfig {
            t_out: 0,
            ..Default::default()
        };
        assert!(no_out.validate().is_err());
    }
}
