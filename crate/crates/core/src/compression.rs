//! Discrete per-layer compression configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::LayerSpec;
use crate::error::{Error, Result};
use crate::quantizer::BitLadder;

/// Bitwidths of full-precision layers. Anything at or above this passes
/// through the quantizer untouched.
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerConfig {
    pub name: String,
    pub w_bits: u32,
    pub a_bits: u32,
    /// Indices of the surviving filter groups, ascending.
    pub kept_groups: Vec<usize>,
}

impl LayerConfig {
    /// Output channels kept, counting a trailing short group by its size.
    pub fn kept_channels(&self, out_channels: usize, group_size: usize) -> usize {
        self.kept_groups
            .iter()
            .map(|&c| {
                let start = c * group_size;
                ((c + 1) * group_size).min(out_channels) - start.min(out_channels)
            })
            .sum()
    }

    /// Fraction of output channels removed.
    pub fn pruning_rate(&self, out_channels: usize, group_size: usize) -> f64 {
        1.0 - self.kept_channels(out_channels, group_size) as f64 / out_channels as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub layers: Vec<LayerConfig>,
}

impl CompressionConfig {
    /// Every layer at `bits` (fixed-bit layers keep their own), no pruning.
    pub fn uniform(specs: &[LayerSpec], bits: u32, group_size: usize) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| {
                    let b = s.fixed_bits.unwrap_or(bits);
                    LayerConfig {
                        name: s.name.clone(),
                        w_bits: b,
                        a_bits: b,
                        kept_groups: (0..s.groups(group_size)).collect(),
                    }
                })
                .collect(),
        }
    }

    /// The uncompressed reference: 32-bit everywhere, nothing pruned.
    pub fn reference(specs: &[LayerSpec], group_size: usize) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| LayerConfig {
                    name: s.name.clone(),
                    w_bits: FULL_PRECISION_BITS,
                    a_bits: FULL_PRECISION_BITS,
                    kept_groups: (0..s.groups(group_size)).collect(),
                })
                .collect(),
        }
    }

    /// Check names, group indices and bitwidths against the layer specs.
    pub fn validate(
        &self,
        specs: &[LayerSpec],
        ladder: &BitLadder,
        group_size: usize,
    ) -> Result<()> {
        if self.layers.len() != specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} layers in config, {} in network",
                self.layers.len(),
                specs.len()
            )));
        }
        for (lc, spec) in self.layers.iter().zip(specs) {
            if lc.name != spec.name {
                return Err(Error::ConfigMismatch(format!(
                    "layer `{}` where `{}` was expected",
                    lc.name, spec.name
                )));
            }
            let groups = spec.groups(group_size);
            if lc.kept_groups.is_empty() {
                return Err(Error::ConfigMismatch(format!(
                    "layer `{}` keeps no groups",
                    lc.name
                )));
            }
            if let Some(&bad) = lc.kept_groups.iter().find(|&&c| c >= groups) {
                return Err(Error::GroupIndex { index: bad, groups });
            }
            if lc.kept_groups.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::ConfigMismatch(format!(
                    "layer `{}` groups are not strictly ascending",
                    lc.name
                )));
            }
            if !spec.prunable && lc.kept_groups.len() != groups {
                return Err(Error::ConfigMismatch(format!(
                    "layer `{}` cannot be pruned",
                    lc.name
                )));
            }
            let allowed = |b: u32| match spec.fixed_bits {
                Some(f) => b == f,
                None => ladder.contains(b) || b >= FULL_PRECISION_BITS,
            };
            if !allowed(lc.w_bits) || !allowed(lc.a_bits) {
                return Err(Error::ConfigMismatch(format!(
                    "layer `{}` bitwidths {}/{} not allowed",
                    lc.name, lc.w_bits, lc.a_bits
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_channels_with_short_tail() {
        let lc = LayerConfig {
            name: "fc".into(),
            w_bits: 4,
            a_bits: 4,
            kept_groups: vec![0, 2],
        };
        assert_eq!(lc.kept_channels(10, 4), 6);
        assert!((lc.pruning_rate(10, 4) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let specs = vec![
            LayerSpec::linear("a", 4, 8),
            LayerSpec::linear("b", 8, 2).pinned(8),
        ];
        let l = BitLadder::default();
        let mut cfg = CompressionConfig::uniform(&specs, 4, 4);
        cfg.validate(&specs, &l, 4).unwrap();
        assert_eq!(cfg.layers[1].w_bits, 8);

        cfg.layers[0].kept_groups = vec![2];
        assert!(matches!(
            cfg.validate(&specs, &l, 4),
            Err(Error::GroupIndex { .. })
        ));
        cfg.layers[0].kept_groups = vec![1];
        cfg.layers[0].w_bits = 3;
        assert!(cfg.validate(&specs, &l, 4).is_err());
        cfg.layers[0].w_bits = 2;
        cfg.validate(&specs, &l, 4).unwrap();
        cfg.layers[1].kept_groups = vec![];
        assert!(cfg.validate(&specs, &l, 4).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let specs = vec![LayerSpec::linear("a", 4, 8)];
        let cfg = CompressionConfig::uniform(&specs, 2, 4);
        assert_eq!(
            CompressionConfig::from_json(&cfg.to_json().unwrap()).unwrap(),
            cfg
        );
    }
}
