use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{conv_out_bins, KF, KT};
use crate::dsp::FREQ_BINS;
use crate::error::{Error, Result};

pub const NUM_LEVELS: usize = 4;
/// Real and imaginary parts of both microphones.
pub const IN_CHANNELS: usize = 4;
/// Real and imaginary parts of the mask.
pub const OUT_CHANNELS: usize = 2;
pub const GRU_GROUPS: usize = 4;
pub const PRELU_INIT: f32 = 0.25;

/// How the mask is produced. The fixed variants bypass the network and are
/// used as reference separators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Learned,
    /// `Q = 1 + 0i`: output equals the channel average.
    Unit,
    /// `Q = 0`.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CruseConfig {
    pub enc_filters: [usize; NUM_LEVELS],
    #[serde(default = "in_channels")]
    pub in_channels: usize,
    #[serde(default = "out_channels")]
    pub out_channels: usize,
    #[serde(default = "gru_groups")]
    pub gru_groups: usize,
    #[serde(default = "freq_bins")]
    pub freq_bins: usize,
    #[serde(default)]
    pub mask: MaskMode,
}

fn in_channels() -> usize {
    IN_CHANNELS
}

fn out_channels() -> usize {
    OUT_CHANNELS
}

fn gru_groups() -> usize {
    GRU_GROUPS
}

fn freq_bins() -> usize {
    FREQ_BINS
}

impl CruseConfig {
    pub fn with_filters(enc_filters: [usize; NUM_LEVELS]) -> Self {
        Self {
            enc_filters,
            in_channels: IN_CHANNELS,
            out_channels: OUT_CHANNELS,
            gru_groups: GRU_GROUPS,
            freq_bins: FREQ_BINS,
            mask: MaskMode::Learned,
        }
    }

    pub fn light() -> Self {
        Self::with_filters([32, 64, 64, 64])
    }

    pub fn heavy() -> Self {
        Self::with_filters([32, 64, 128, 256])
    }

    pub fn toy() -> Self {
        Self::with_filters([8, 16, 16, 16])
    }

    /// Frequency bins at each level: input, then after each encoder layer.
    pub fn bins(&self) -> [usize; NUM_LEVELS + 1] {
        let mut out = [self.freq_bins; NUM_LEVELS + 1];
        for l in 0..NUM_LEVELS {
            out[l + 1] = conv_out_bins(out[l]);
        }
        out
    }

    /// Channel counts at each level, input first.
    pub fn channels(&self) -> [usize; NUM_LEVELS + 1] {
        let f = self.enc_filters;
        [self.in_channels, f[0], f[1], f[2], f[3]]
    }

    /// Output channels of decoder layer `level` (1-based, matching the encoder).
    pub fn dec_out_channels(&self, level: usize) -> usize {
        if level == 1 {
            self.out_channels
        } else {
            self.enc_filters[level - 2]
        }
    }

    pub fn bottleneck_features(&self) -> usize {
        self.enc_filters[NUM_LEVELS - 1] * self.bins()[NUM_LEVELS]
    }

    pub fn gru_group_size(&self) -> usize {
        self.bottleneck_features() / self.gru_groups.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != IN_CHANNELS {
            return Err(Error::Config(format!("in_channels: must be {IN_CHANNELS}, got {}", self.in_channels)));
        }
        if self.out_channels != OUT_CHANNELS {
            return Err(Error::Config(format!(
                "out_channels: must be {OUT_CHANNELS}, got {}",
                self.out_channels
            )));
        }
        if self.freq_bins != FREQ_BINS {
            return Err(Error::Config(format!("freq_bins: must be {FREQ_BINS}, got {}", self.freq_bins)));
        }
        if let Some(i) = self.enc_filters.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("enc_filters[{i}]: must be positive")));
        }
        if self.gru_groups == 0 || !self.bottleneck_features().is_multiple_of(self.gru_groups) {
            return Err(Error::Config(format!(
                "gru_groups: {} does not divide the {} bottleneck features",
                self.gru_groups,
                self.bottleneck_features()
            )));
        }
        Ok(())
    }
}

impl FromStr for CruseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Self::light()),
            "heavy" => Ok(Self::heavy()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown model {s:?}; expected light, heavy or toy"))),
        }
    }
}

/// Trainable weights excluding the PReLU slopes, from the layer inventory.
pub fn count_params(config: &CruseConfig) -> usize {
    let c = config.channels();
    let kernel = KT * KF;
    let conv = |cin: usize, cout: usize| cin * cout * kernel + cout;
    let enc: usize = (1..=NUM_LEVELS).map(|l| conv(c[l - 1], c[l])).sum();
    let dec: usize = (1..=NUM_LEVELS).map(|l| conv(c[l], config.dec_out_channels(l))).sum();
    let skip: usize = (1..=NUM_LEVELS).map(|l| c[l] * c[l] + c[l]).sum();
    let g = config.gru_group_size();
    let gru = config.gru_groups * 3 * (g * g + g * g + g);
    enc + dec + skip + gru
}

/// Floating-point operations (2 per multiply-accumulate) for `frames` frames:
/// convolutions per output position, transposed convolutions per input
/// position, 1x1 skips, GRU matrix products and the complex mask product.
pub fn count_flops(config: &CruseConfig, frames: usize) -> u64 {
    let c = config.channels();
    let bins = config.bins();
    let kernel = (KT * KF) as u64;
    let mut macs = 0u64;
    for l in 1..=NUM_LEVELS {
        let (cin, cout, f) = (c[l - 1] as u64, c[l] as u64, bins[l] as u64);
        macs += cin * cout * kernel * f;
        macs += cout * config.dec_out_channels(l) as u64 * kernel * f;
        macs += cout * cout * f;
    }
    let g = config.gru_group_size() as u64;
    macs += config.gru_groups as u64 * 3 * 2 * g * g;
    macs += (config.out_channels / 2) as u64 * config.freq_bins as u64 * 4;
    2 * macs * frames as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_and_groups() {
        assert_eq!(CruseConfig::light().bins(), [161, 80, 39, 19, 9]);
        assert_eq!(CruseConfig::light().gru_group_size(), 144);
        assert_eq!(CruseConfig::heavy().gru_group_size(), 576);
        assert_eq!(CruseConfig::toy().gru_group_size(), 36);
        assert!(CruseConfig::light().validate().is_ok());
        let mut bad = CruseConfig::light();
        bad.gru_groups = 5;
        assert!(bad.validate().unwrap_err().to_string().contains("gru_groups"));
    }

    #[test]
    fn json_defaults() {
        let c: CruseConfig = serde_json::from_str(r#"{"enc_filters":[8,16,16,16]}"#).unwrap();
        assert_eq!(c, CruseConfig::toy());
        assert_eq!("heavy".parse::<CruseConfig>().unwrap(), CruseConfig::heavy());
        assert!("medium".parse::<CruseConfig>().is_err());
    }

    #[test]
    fn flops_scale_and_vanish() {
        let light = CruseConfig::light();
        assert_eq!(count_flops(&light, 2002), 2 * count_flops(&light, 1001));
        let mut zero = CruseConfig::with_filters([0; 4]);
        zero.out_channels = 0;
        assert_eq!(count_flops(&zero, 1001), 0);
    }
}
