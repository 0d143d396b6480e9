//! Cost accounting: the differentiable gated cost used during search, the
//! discrete BOP/memory report of a fixed configuration, and the size of the
//! configuration space.
//!
//! BOPs are `MACs * b_w * b_a`. During search a layer's cost is
//! `sum_c share_c * g_c * w_eff * a_eff`, where `share_c` is the fraction of
//! the layer's MACs owned by group `c` and the effective bitwidths telescope
//! through the nested bit gates:
//! `w_eff = b_1 + g_2 ((b_2 - b_1) + g_3 ((b_3 - b_2) + ...))`.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compression::{CompressionConfig, FULL_PRECISION_BITS};
use crate::error::{Error, Result};
use crate::gates::GateState;
use crate::quantizer::BitLadder;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Multiply-accumulates per inference.
    pub macs: u64,
    pub weight_count: u64,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output elements at the reference input shape.
    pub activation_count: u64,
    /// Bitwidth pinned outside the search.
    pub fixed_bits: Option<u32>,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn linear(name: &str, inputs: usize, outputs: usize) -> Self {
        let n = (inputs * outputs) as u64;
        Self {
            name: name.to_string(),
            macs: n,
            weight_count: n,
            in_channels: inputs,
            out_channels: outputs,
            activation_count: outputs as u64,
            fixed_bits: None,
            prunable: true,
        }
    }

    /// `k x k` convolution producing an `h x w` output map.
    pub fn conv(name: &str, inputs: usize, outputs: usize, k: usize, h: usize, w: usize) -> Self {
        let weights = (inputs * outputs * k * k) as u64;
        Self {
            name: name.to_string(),
            macs: weights * (h * w) as u64,
            weight_count: weights,
            in_channels: inputs,
            out_channels: outputs,
            activation_count: (outputs * h * w) as u64,
            fixed_bits: None,
            prunable: true,
        }
    }

    pub fn pinned(mut self, bits: u32) -> Self {
        self.fixed_bits = Some(bits);
        self
    }

    pub fn unprunable(mut self) -> Self {
        self.prunable = false;
        self
    }

    /// `G = ceil(C_out / B)`.
    pub fn groups(&self, group_size: usize) -> usize {
        self.out_channels.div_ceil(group_size)
    }

    /// Fraction of output channels in each group.
    pub fn group_shares(&self, group_size: usize) -> Vec<f64> {
        (0..self.groups(group_size))
            .map(|c| {
                let size = ((c + 1) * group_size).min(self.out_channels) - c * group_size;
                size as f64 / self.out_channels as f64
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.macs == 0 || self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid(
                "layer",
                format!("`{}` needs positive MACs and channel counts", self.name),
            ));
        }
        Ok(())
    }
}

/// Gate nodes of one layer on a graph.
#[derive(Debug, Clone)]
pub struct LayerGateVars {
    /// `[G]` prune gates.
    pub prune: Var,
    pub bits_w: Vec<Var>,
    pub bits_x: Vec<Var>,
}

/// `b_1 + g_2 ((b_2 - b_1) + g_3 (...))` on plain values.
pub fn telescoped_bits(ladder: &BitLadder, gates: &[f64]) -> f64 {
    let b = ladder.bits();
    let mut inner = 0.0;
    for j in (1..b.len()).rev() {
        inner = gates[j - 1] * ((b[j] - b[j - 1]) as f64 + inner);
    }
    b[0] as f64 + inner
}

fn telescoped_bits_var(g: &mut Graph, ladder: &BitLadder, gates: &[Var]) -> Result<Var> {
    let b = ladder.bits();
    let mut inner: Option<Var> = None;
    for j in (1..b.len()).rev() {
        let step = g.scalar((b[j] - b[j - 1]) as f64);
        let t = match inner {
            Some(i) => g.add(step, i)?,
            None => step,
        };
        inner = Some(g.mul(gates[j - 1], t)?);
    }
    Ok(match inner {
        Some(i) => g.offset(i, b[0] as f64),
        None => g.scalar(b[0] as f64),
    })
}

/// Gated cost on the graph; differentiable through every gate node.
pub fn gated_cost_var(
    g: &mut Graph,
    layers: &[LayerSpec],
    gates: &[LayerGateVars],
    ladder: &BitLadder,
    group_size: usize,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("layers", "empty layer list"));
    }
    if layers.len() != gates.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} layers, {} gate sets",
            layers.len(),
            gates.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (spec, lg) in layers.iter().zip(gates) {
        let shares: Vec<f64> = spec
            .group_shares(group_size)
            .iter()
            .map(|s| s * spec.macs as f64)
            .collect();
        let shares = g.constant(Tensor::vector(shares));
        let kept = g.mul(lg.prune, shares)?;
        let kept = g.sum(kept);
        let (w_eff, a_eff) = match spec.fixed_bits {
            Some(b) => (g.scalar(b as f64), g.scalar(b as f64)),
            None => (
                telescoped_bits_var(g, ladder, &lg.bits_w)?,
                telescoped_bits_var(g, ladder, &lg.bits_x)?,
            ),
        };
        let bits = g.mul(w_eff, a_eff)?;
        let r = g.mul(kept, bits)?;
        total = Some(match total {
            Some(t) => g.add(t, r)?,
            None => r,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Gated cost evaluated at hard gate values.
pub fn gated_cost(
    layers: &[LayerSpec],
    gates: &[GateState],
    ladder: &BitLadder,
    group_size: usize,
) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::invalid("layers", "empty layer list"));
    }
    if layers.len() != gates.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} layers, {} gate sets",
            layers.len(),
            gates.len()
        )));
    }
    let as_f = |v: &[bool]| {
        v.iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    for (spec, st) in layers.iter().zip(gates) {
        let shares = spec.group_shares(group_size);
        if st.prune.len() != shares.len() {
            return Err(Error::ConfigMismatch(format!(
                "layer `{}` has {} groups, {} prune gates",
                spec.name,
                shares.len(),
                st.prune.len()
            )));
        }
        let kept: f64 = shares
            .iter()
            .zip(&st.prune)
            .filter(|(_, &g)| g)
            .map(|(s, _)| s * spec.macs as f64)
            .sum();
        let (w, a) = match spec.fixed_bits {
            Some(b) => (b as f64, b as f64),
            None => (
                telescoped_bits(ladder, &as_f(&st.bits_w)),
                telescoped_bits(ladder, &as_f(&st.bits_x)),
            ),
        };
        total += kept * w * a;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    /// Scale a layer's cost by the kept fraction of the previous layer's
    /// output channels when that layer feeds it directly.
    pub couple_in_channels: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            couple_in_channels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub pruning_rate: f64,
    pub bops: f64,
    pub memory_kb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub bops: f64,
    pub memory_kb: f64,
    pub bop_ratio: f64,
    pub memory_ratio: f64,
    pub per_layer: Vec<LayerCost>,
}

fn raw_cost(
    layers: &[LayerSpec],
    config: &CompressionConfig,
    group_size: usize,
    opts: CostOptions,
) -> Result<Vec<LayerCost>> {
    if layers.is_empty() {
        return Err(Error::invalid("layers", "empty layer list"));
    }
    if layers.len() != config.layers.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} layers in config, {} in network",
            config.layers.len(),
            layers.len()
        )));
    }
    let mut prev_out: Option<(usize, f64)> = None;
    let mut out = Vec::with_capacity(layers.len());
    for (spec, lc) in layers.iter().zip(&config.layers) {
        if lc.name != spec.name {
            return Err(Error::ConfigMismatch(format!(
                "layer `{}` where `{}` was expected",
                lc.name, spec.name
            )));
        }
        let groups = spec.groups(group_size);
        if let Some(&bad) = lc.kept_groups.iter().find(|&&c| c >= groups) {
            return Err(Error::GroupIndex { index: bad, groups });
        }
        let out_frac =
            lc.kept_channels(spec.out_channels, group_size) as f64 / spec.out_channels as f64;
        let in_frac = match prev_out {
            Some((ch, f)) if opts.couple_in_channels && ch == spec.in_channels => f,
            _ => 1.0,
        };
        let (w, a) = (lc.w_bits as f64, lc.a_bits as f64);
        let bops = out_frac * in_frac * spec.macs as f64 * w * a;
        let bytes = spec.weight_count as f64 * out_frac * in_frac * w / 8.0
            + spec.activation_count as f64 * out_frac * a / 8.0;
        out.push(LayerCost {
            name: spec.name.clone(),
            w_bits: lc.w_bits,
            a_bits: lc.a_bits,
            pruning_rate: 1.0 - out_frac,
            bops,
            memory_kb: bytes / 1024.0,
        });
        prev_out = Some((spec.out_channels, out_frac));
    }
    Ok(out)
}

/// BOPs and memory of a fixed configuration, with ratios against the
/// 32-bit unpruned network.
pub fn discrete_cost(
    layers: &[LayerSpec],
    config: &CompressionConfig,
    group_size: usize,
    opts: CostOptions,
) -> Result<CostReport> {
    let per_layer = raw_cost(layers, config, group_size, opts)?;
    let reference = raw_cost(
        layers,
        &CompressionConfig::reference(layers, group_size),
        group_size,
        opts,
    )?;
    let total = |v: &[LayerCost]| {
        v.iter()
            .fold((0.0, 0.0), |(b, m), l| (b + l.bops, m + l.memory_kb))
    };
    let (bops, memory_kb) = total(&per_layer);
    let (ref_bops, ref_mem) = total(&reference);
    debug_assert!(reference.iter().all(|l| l.w_bits == FULL_PRECISION_BITS));
    Ok(CostReport {
        bops,
        memory_kb,
        bop_ratio: ref_bops / bops,
        memory_ratio: ref_mem / memory_kb,
        per_layer,
    })
}

/// Number of distinct configurations: each layer contributes
/// `K^2 * G` (`1` for the bit factor of a pinned layer, `1` for the group
/// factor of an unprunable one).
pub fn search_space_size(layers: &[LayerSpec], ladder: &BitLadder, group_size: usize) -> BigUint {
    layers.iter().fold(BigUint::from(1u32), |acc, spec| {
        let k = if spec.fixed_bits.is_some() {
            1
        } else {
            ladder.len() as u64
        };
        let g = if spec.prunable {
            spec.groups(group_size) as u64
        } else {
            1
        };
        acc * BigUint::from(k * k * g)
    })
}

/// ResNet-18 on 224x224 inputs: the stem, sixteen block convolutions and
/// the classifier. Shortcut projections carry no searchable configuration
/// and are left out; the classifier's outputs are class scores and cannot
/// be pruned.
pub fn resnet18_layers() -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::conv("conv1", 3, 64, 7, 112, 112)];
    let stages = [(64, 56), (128, 28), (256, 14), (512, 7)];
    let mut in_ch = 64;
    for (s, &(ch, hw)) in stages.iter().enumerate() {
        for block in 0..2 {
            for conv in 0..2 {
                let name = format!("layer{}.{}.conv{}", s + 1, block, conv + 1);
                layers.push(LayerSpec::conv(&name, in_ch, ch, 3, hw, hw));
                in_ch = ch;
            }
        }
    }
    layers.push(LayerSpec::linear("fc", 512, 1000).unprunable());
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::LayerConfig;

    fn approx(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn gated_cost_examples() {
        let l = BitLadder::default();
        let layers = vec![LayerSpec::linear("a", 5, 8), LayerSpec::linear("b", 8, 4)];
        let open: Vec<GateState> = layers
            .iter()
            .map(|s| GateState::all_open(s.groups(4), &l))
            .collect();
        let r = gated_cost(&layers, &open, &l, 4).unwrap();
        assert_eq!(r, (40 + 32) as f64 * 64.0);

        let base: Vec<GateState> = open
            .iter()
            .map(|s| GateState {
                prune: s.prune.clone(),
                bits_w: vec![false; 2],
                bits_x: vec![false; 2],
            })
            .collect();
        assert_eq!(gated_cost(&layers, &base, &l, 4).unwrap(), 72.0 * 4.0);

        let l24 = BitLadder::new(vec![2, 4]).unwrap();
        let mut spec = LayerSpec::linear("c", 1, 2);
        spec.macs = 100;
        let st = GateState {
            prune: vec![true, false],
            bits_w: vec![true],
            bits_x: vec![true],
        };
        assert_eq!(gated_cost(&[spec], &[st], &l24, 1).unwrap(), 800.0);

        assert!(gated_cost(&[], &[], &l, 4).is_err());
    }

    #[test]
    fn graph_cost_matches_plain_cost() {
        let l = BitLadder::default();
        let layers = vec![
            LayerSpec::linear("a", 5, 10),
            LayerSpec::linear("b", 10, 3).pinned(8),
        ];
        let states = vec![
            GateState {
                prune: vec![true, false, true],
                bits_w: vec![true, false],
                bits_x: vec![true, true],
            },
            GateState {
                prune: vec![true],
                bits_w: vec![false, false],
                bits_x: vec![false, false],
            },
        ];
        let mut g = Graph::new();
        let vars: Vec<LayerGateVars> = states
            .iter()
            .map(|st| {
                let f = |b: &bool| if *b { 1.0 } else { 0.0 };
                let prune = g.param(Tensor::vector(st.prune.iter().map(f).collect()));
                let bits_w = st
                    .bits_w
                    .iter()
                    .map(|b| g.param(Tensor::scalar(f(b))))
                    .collect();
                let bits_x = st
                    .bits_x
                    .iter()
                    .map(|b| g.param(Tensor::scalar(f(b))))
                    .collect();
                LayerGateVars {
                    prune,
                    bits_w,
                    bits_x,
                }
            })
            .collect();
        let r = gated_cost_var(&mut g, &layers, &vars, &l, 4).unwrap();
        let plain = gated_cost(&layers, &states, &l, 4).unwrap();
        assert!(approx(g.scalar_value(r), plain, 1e-12));
        // Groups of 4, 4, 2 over 10 channels; group 1 pruned; w 4-bit, a 8-bit.
        assert!(approx(plain, 50.0 * 0.6 * 32.0 + 30.0 * 64.0, 1e-12));
    }

    #[test]
    fn uniform_four_bit_ratio() {
        let layers = vec![
            LayerSpec::linear("a", 7, 16),
            LayerSpec::linear("b", 16, 16),
            LayerSpec::linear("c", 16, 3),
        ];
        let cfg = CompressionConfig::uniform(&layers, 4, 4);
        let rep = discrete_cost(&layers, &cfg, 4, CostOptions::default()).unwrap();
        assert_eq!(rep.bop_ratio, 64.0);
        let rep = discrete_cost(
            &layers,
            &CompressionConfig::reference(&layers, 4),
            4,
            CostOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.bop_ratio, 1.0);
        assert_eq!(rep.memory_ratio, 1.0);

        let pinned = vec![
            LayerSpec::linear("a", 7, 16).pinned(8),
            LayerSpec::linear("b", 16, 16),
            LayerSpec::linear("c", 16, 3).pinned(8),
        ];
        let rep = discrete_cost(
            &pinned,
            &CompressionConfig::uniform(&pinned, 4, 4),
            4,
            CostOptions::default(),
        )
        .unwrap();
        assert!(rep.bop_ratio < 64.0);
    }

    #[test]
    fn halving_channels_quarters_bops() {
        let layers = vec![
            LayerSpec::linear("a", 8, 8),
            LayerSpec::linear("b", 8, 8),
            LayerSpec::linear("c", 8, 8),
        ];
        let full = CompressionConfig::uniform(&layers, 4, 4);
        let mut half = full.clone();
        for lc in &mut half.layers {
            lc.kept_groups = vec![0];
        }
        let opts = CostOptions::default();
        let a = discrete_cost(&layers, &full, 4, opts).unwrap();
        let b = discrete_cost(&layers, &half, 4, opts).unwrap();
        let a_tail: f64 = a.per_layer[1..].iter().map(|l| l.bops).sum();
        let b_tail: f64 = b.per_layer[1..].iter().map(|l| l.bops).sum();
        assert_eq!(b_tail, 0.25 * a_tail);
        assert_eq!(b.per_layer[0].bops, 0.5 * a.per_layer[0].bops);
    }

    #[test]
    fn mismatch_is_rejected() {
        let layers = vec![LayerSpec::linear("a", 8, 8)];
        let cfg = CompressionConfig {
            layers: vec![LayerConfig {
                name: "z".into(),
                w_bits: 4,
                a_bits: 4,
                kept_groups: vec![0],
            }],
        };
        assert!(discrete_cost(&layers, &cfg, 4, CostOptions::default()).is_err());
    }

    #[test]
    fn search_space_examples() {
        let one = BitLadder::new(vec![4]).unwrap();
        assert_eq!(
            search_space_size(&[LayerSpec::linear("a", 3, 1)], &one, 16),
            BigUint::from(1u32)
        );
        let two = BitLadder::new(vec![2, 4]).unwrap();
        let layers = vec![LayerSpec::linear("a", 4, 4), LayerSpec::linear("b", 4, 4)];
        assert_eq!(search_space_size(&layers, &two, 1), BigUint::from(256u32));
    }

    #[test]
    fn resnet18_search_space() {
        let layers = resnet18_layers();
        assert_eq!(layers.len(), 18);
        let n = search_space_size(&layers, &BitLadder::default(), 16);
        let expected = BigUint::from(9u32).pow(18) * (BigUint::from(1u32) << 58);
        assert_eq!(n, expected);
        let s = n.to_string();
        assert_eq!(s.len(), 35);
        assert!(s.starts_with("43"));
    }
}
