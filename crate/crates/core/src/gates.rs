//! Binary gates over the decomposition.
//!
//! A bit gate `g_j = H(m_j - alpha_j)` switches the offset of rung `j` on
//! when the layer's quantization error at rung `j - 1` exceeds its
//! threshold. Gates nest: the code is
//! `z_1 + g_2 (r_2 + g_3 (r_3 + ...))`, so an inactive gate removes every
//! deeper offset. A prune gate `g_c = H(m_c - alpha_prune)` per filter group
//! multiplies the whole code, treating pruning as 0-bit quantization.
//!
//! Metrics are mean absolute values: `m_j = mean|z - z_{j-1}|` over the layer
//! tensor and `m_c = mean|w_c|` over the group's pre-quantization weights.
//! They enter the graph as constants; the only gradient path to a threshold
//! is the sigmoid-derivative backward of [`step_gate`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{register_custom_grad, sigmoid, CustomOp, Graph, Var};
use crate::compression::{CompressionConfig, LayerConfig};
use crate::costmodel::LayerSpec;
use crate::decomposition::BitDecomposition;
use crate::error::{Error, Result};
use crate::quantizer::{discretize_var, BitLadder};
use crate::tensor::Tensor;

/// Step function with `H(0) = 1`.
pub fn heaviside(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `S'(a) = S(a) (1 - S(a))`.
pub fn sigmoid_slope(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 - s)
}

/// Learnable thresholds of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub prune: f64,
    /// One per rung above the base, weights.
    pub bits_w: Vec<f64>,
    /// One per rung above the base, activations.
    pub bits_x: Vec<f64>,
}

impl GateThresholds {
    pub fn zeros(ladder: &BitLadder) -> Self {
        Self::uniform(ladder, 0.0)
    }

    /// Every threshold set to `value`; `-inf` opens every gate and `+inf`
    /// closes every gate.
    pub fn uniform(ladder: &BitLadder, value: f64) -> Self {
        let k = ladder.len() - 1;
        Self {
            prune: value,
            bits_w: vec![value; k],
            bits_x: vec![value; k],
        }
    }
}

/// Gate metrics of one layer from its latest forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerMetrics {
    /// `mean|w_c|` per group.
    pub prune: Vec<f64>,
    pub bits_w: Vec<f64>,
    pub bits_x: Vec<f64>,
}

/// Hard gate values of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateState {
    pub prune: Vec<bool>,
    pub bits_w: Vec<bool>,
    pub bits_x: Vec<bool>,
}

impl GateState {
    pub fn all_open(groups: usize, ladder: &BitLadder) -> Self {
        let k = ladder.len() - 1;
        Self {
            prune: vec![true; groups],
            bits_w: vec![true; k],
            bits_x: vec![true; k],
        }
    }

    pub fn evaluate(thresholds: &GateThresholds, metrics: &LayerMetrics) -> Self {
        let open = |m: &f64, a: &f64| heaviside(m - a) == 1.0;
        Self {
            prune: metrics
                .prune
                .iter()
                .map(|m| open(m, &thresholds.prune))
                .collect(),
            bits_w: metrics
                .bits_w
                .iter()
                .zip(&thresholds.bits_w)
                .map(|(m, a)| open(m, a))
                .collect(),
            bits_x: metrics
                .bits_x
                .iter()
                .zip(&thresholds.bits_x)
                .map(|(m, a)| open(m, a))
                .collect(),
        }
    }

    pub fn w_bits(&self, ladder: &BitLadder) -> u32 {
        effective_bits(ladder, &self.bits_w)
    }

    pub fn a_bits(&self, ladder: &BitLadder) -> u32 {
        effective_bits(ladder, &self.bits_x)
    }

    pub fn kept_groups(&self) -> Vec<usize> {
        self.prune
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// Every gate as a flat list, prune gates first.
    pub fn flat(&self) -> Vec<bool> {
        self.prune
            .iter()
            .chain(&self.bits_w)
            .chain(&self.bits_x)
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, i: usize, v: bool) {
        let (p, w) = (self.prune.len(), self.bits_w.len());
        if i < p {
            self.prune[i] = v;
        } else if i < p + w {
            self.bits_w[i - p] = v;
        } else {
            self.bits_x[i - p - w] = v;
        }
    }
}

/// Base rung extended by the longest prefix of open gates.
pub fn effective_bits(ladder: &BitLadder, gates: &[bool]) -> u32 {
    let open = gates.iter().take_while(|&&g| g).count();
    ladder.bits()[open]
}

/// `H(metric - alpha)` forward; backward sends `+S'(metric - alpha)` to the
/// metric and `-S'(metric - alpha)` to the threshold.
pub fn step_gate_op() -> CustomOp {
    register_custom_grad(
        "step_gate",
        |xs| {
            if !xs[0].is_scalar() || !xs[1].is_scalar() {
                return Err(Error::Shape {
                    op: "step_gate",
                    detail: format!("{:?}, {:?}", xs[0].shape(), xs[1].shape()),
                });
            }
            Ok(Tensor::scalar(heaviside(xs[0].item() - xs[1].item())))
        },
        |xs, _, up| {
            let d = sigmoid_slope(xs[0].item() - xs[1].item()) * up.item();
            vec![
                Tensor::full(xs[0].shape(), d),
                Tensor::full(xs[1].shape(), -d),
            ]
        },
    )
}

pub fn step_gate(g: &mut Graph, metric: Var, alpha: Var) -> Result<Var> {
    g.apply(&step_gate_op(), &[metric, alpha])
}

/// `mean|z - z_{j-1}|` for each rung above the base.
pub fn bit_metrics(z: &Tensor, decomp: &BitDecomposition) -> Vec<f64> {
    let prefixes = decomp.prefixes();
    prefixes[..prefixes.len() - 1]
        .iter()
        .map(|p| {
            z.zip_map(p, |a, b| (a - b).abs())
                .expect("same shape")
                .mean()
        })
        .collect()
}

/// Rows `[c * group_size, (c + 1) * group_size)` clipped to the tensor.
pub fn group_rows(rows: usize, group_size: usize, c: usize) -> std::ops::Range<usize> {
    let start = c * group_size;
    start..((c + 1) * group_size).min(rows)
}

/// `mean|w_c|` for each group of output rows.
pub fn group_metrics(w: &Tensor, group_size: usize) -> Vec<f64> {
    let rows = w.rows();
    (0..rows.div_ceil(group_size))
        .map(|c| {
            let r = group_rows(rows, group_size, c);
            w.row_block(r.start, r.end).mean_abs()
        })
        .collect()
}

/// Snap onto the grid of rung `rung`. The gated sum already lies on that
/// grid up to float rounding; snapping makes it bit-identical to a direct
/// discretization.
fn snap(v: f64, s: f64) -> f64 {
    s * (v / s).round()
}

/// Identity-backward snap of `inputs[0]` onto the grid of the rung selected
/// by the open-gate prefix of `inputs[1..]`.
fn snap_op(ladder: &BitLadder) -> CustomOp {
    let steps = ladder.step_sizes();
    register_custom_grad(
        "snap",
        move |xs| {
            let open = xs[1..].iter().take_while(|g| g.item() == 1.0).count();
            let s = steps[open];
            Ok(xs[0].map(|v| snap(v, s)))
        },
        |xs, _, up| {
            let mut out = vec![up.clone()];
            out.extend(xs[1..].iter().map(|g| Tensor::zeros_like(g)));
            out
        },
    )
}

/// Nested gated sum `base + g_2 (r_2 + g_3 (r_3 + ...))` on plain values.
fn nested(decomp: &BitDecomposition, gates: &[f64]) -> Tensor {
    let mut inner: Option<Tensor> = None;
    for (r, &g) in decomp.offsets.iter().zip(gates).rev() {
        let mut t = r.clone();
        if let Some(i) = inner {
            t.add_assign_scaled(&i, 1.0);
        }
        inner = Some(t.map(|v| g * v));
    }
    let mut out = decomp.base.clone();
    if let Some(i) = inner {
        out.add_assign_scaled(&i, 1.0);
    }
    let open = gates.iter().take_while(|&&g| g == 1.0).count();
    let s = decomp.ladder.step_sizes()[open];
    out.map(|v| snap(v, s))
}

/// Gated normalized weights of group `c`: rows of the group in `z` with the
/// nested bit gates and the group's prune gate applied.
pub fn gated_weight(
    z: &Tensor,
    w: &Tensor,
    decomp: &BitDecomposition,
    thresholds: &GateThresholds,
    group_size: usize,
    c: usize,
) -> Result<Tensor> {
    let groups = z.rows().div_ceil(group_size);
    if c >= groups {
        return Err(Error::GroupIndex { index: c, groups });
    }
    let bit_gates: Vec<f64> = bit_metrics(z, decomp)
        .iter()
        .zip(&thresholds.bits_w)
        .map(|(m, a)| heaviside(m - a))
        .collect();
    let rows = group_rows(z.rows(), group_size, c);
    let prune_gate = heaviside(w.row_block(rows.start, rows.end).mean_abs() - thresholds.prune);
    let full = nested(decomp, &bit_gates);
    Ok(full.row_block(rows.start, rows.end).map(|v| prune_gate * v))
}

/// Gated normalized activations; activations are never pruned.
pub fn gated_activation(
    z: &Tensor,
    decomp: &BitDecomposition,
    thresholds: &GateThresholds,
) -> Tensor {
    let bit_gates: Vec<f64> = bit_metrics(z, decomp)
        .iter()
        .zip(&thresholds.bits_x)
        .map(|(m, a)| heaviside(m - a))
        .collect();
    nested(decomp, &bit_gates)
}

/// Graph form of a gated code.
#[derive(Debug, Clone)]
pub struct GatedCode {
    /// Gated normalized code.
    pub code: Var,
    /// Bit gate nodes, one per rung above the base.
    pub gates: Vec<Var>,
    pub metrics: Vec<f64>,
}

/// Decompose `z` on the graph (straight-through discretizations) and apply
/// nested bit gates driven by `alphas`.
pub fn gated_code_var(
    g: &mut Graph,
    z: Var,
    ladder: &BitLadder,
    alphas: &[Var],
) -> Result<GatedCode> {
    let steps = ladder.step_sizes();
    if alphas.len() != steps.len() - 1 {
        return Err(Error::invalid(
            "alphas",
            format!("{} thresholds for {} rungs", alphas.len(), steps.len()),
        ));
    }
    let base = discretize_var(g, z, steps[0])?;
    let mut partial = base;
    let mut offsets = Vec::with_capacity(steps.len() - 1);
    let mut metrics = Vec::with_capacity(steps.len() - 1);
    for &s in &steps[1..] {
        let resid = g.sub(z, partial)?;
        metrics.push(g.value(resid).mean_abs());
        let r = discretize_var(g, resid, s)?;
        partial = g.add(partial, r)?;
        offsets.push(r);
    }
    let mut gates = Vec::with_capacity(alphas.len());
    for (m, &a) in metrics.iter().zip(alphas) {
        let mv = g.scalar(*m);
        gates.push(step_gate(g, mv, a)?);
    }
    let mut inner: Option<Var> = None;
    for (&r, &gate) in offsets.iter().zip(&gates).rev() {
        let t = match inner {
            Some(i) => g.add(r, i)?,
            None => r,
        };
        inner = Some(g.mul(t, gate)?);
    }
    let code = match inner {
        Some(i) => {
            let sum = g.add(base, i)?;
            let mut args = vec![sum];
            args.extend(&gates);
            g.apply(&snap_op(ladder), &args)?
        }
        None => base,
    };
    Ok(GatedCode {
        code,
        gates,
        metrics,
    })
}

/// Forward `1`, identity backward: reopens a closed gate without cutting its
/// gradient path.
fn force_open_op() -> CustomOp {
    register_custom_grad(
        "force_open",
        |xs| Ok(Tensor::full(xs[0].shape(), 1.0)),
        |_, _, up| vec![up.clone()],
    )
}

/// Index of the largest metric, first on ties.
pub fn strongest_group(metrics: &[f64]) -> usize {
    metrics
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc },
        )
        .0
}

/// Prune gates of one layer as a `[G]` vector node.
///
/// A layer never loses every group: when all gates are closed, the group
/// with the largest metric is kept open, as at extraction.
pub fn prune_gates_var(
    g: &mut Graph,
    w: &Tensor,
    group_size: usize,
    alpha: Var,
) -> Result<(Var, Vec<f64>)> {
    let metrics = group_metrics(w, group_size);
    let mut gates = Vec::with_capacity(metrics.len());
    for &m in &metrics {
        let mv = g.scalar(m);
        gates.push(step_gate(g, mv, alpha)?);
    }
    if gates.iter().all(|&v| g.scalar_value(v) == 0.0) {
        let best = strongest_group(&metrics);
        gates[best] = g.apply(&force_open_op(), &[gates[best]])?;
    }
    Ok((g.stack(&gates)?, metrics))
}

/// Discrete configuration selected by the open gates.
///
/// Layers with fixed bitwidths keep them. A prunable layer whose prune gates
/// are all closed keeps its group with the largest metric.
pub fn extract_config(
    specs: &[LayerSpec],
    ladder: &BitLadder,
    group_size: usize,
    thresholds: &[GateThresholds],
    metrics: &[LayerMetrics],
) -> Result<CompressionConfig> {
    if specs.len() != thresholds.len() || specs.len() != metrics.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} layers, {} threshold sets, {} metric sets",
            specs.len(),
            thresholds.len(),
            metrics.len()
        )));
    }
    let layers = specs
        .iter()
        .zip(thresholds.iter().zip(metrics))
        .map(|(spec, (thr, m))| {
            let state = GateState::evaluate(thr, m);
            layer_config(spec, ladder, group_size, &state, &m.prune)
        })
        .collect();
    Ok(CompressionConfig { layers })
}

pub(crate) fn layer_config(
    spec: &LayerSpec,
    ladder: &BitLadder,
    group_size: usize,
    state: &GateState,
    prune_metrics: &[f64],
) -> LayerConfig {
    let groups = spec.groups(group_size);
    let (w_bits, a_bits) = match spec.fixed_bits {
        Some(b) => (b, b),
        None => (state.w_bits(ladder), state.a_bits(ladder)),
    };
    let kept_groups = if !spec.prunable {
        (0..groups).collect()
    } else {
        let kept = state.kept_groups();
        if kept.is_empty() {
            vec![strongest_group(prune_metrics)]
        } else {
            kept
        }
    };
    LayerConfig {
        name: spec.name.clone(),
        w_bits,
        a_bits,
        kept_groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::decompose;
    use crate::quantizer::{discretize, step_size};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn step_gate_forward_and_backward() {
        let mut g = Graph::new();
        let m = g.param(Tensor::scalar(0.3));
        let a = g.param(Tensor::scalar(0.3));
        let gate = step_gate(&mut g, m, a).unwrap();
        assert_eq!(g.scalar_value(gate), 1.0);
        let grads = g.backward(gate).unwrap();
        assert_eq!(grads.scalar(a), -0.25);
        assert_eq!(grads.scalar(m), 0.25);

        let mut g = Graph::new();
        let m = g.param(Tensor::scalar(10.0));
        let a = g.param(Tensor::scalar(0.0));
        let gate = step_gate(&mut g, m, a).unwrap();
        assert_eq!(g.scalar_value(gate), 1.0);
        assert!(g.backward(gate).unwrap().scalar(a).abs() < 1e-4);

        let mut g = Graph::new();
        let m = g.param(Tensor::scalar(0.1));
        let a = g.param(Tensor::scalar(0.2));
        let gate = step_gate(&mut g, m, a).unwrap();
        assert_eq!(g.scalar_value(gate), 0.0);
    }

    #[test]
    fn effective_bits_uses_longest_prefix() {
        let l = BitLadder::default();
        assert_eq!(effective_bits(&l, &[false, true]), 2);
        assert_eq!(effective_bits(&l, &[true, false]), 4);
        assert_eq!(effective_bits(&l, &[true, true]), 8);
    }

    #[test]
    fn gated_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = BitLadder::default();
        let w = rand_matrix(&mut rng, 8, 3).map(|v| 2.0 * v - 1.0);
        let z = crate::quantizer::normalize_wt(&w, 1.0).unwrap();
        let d = decompose(&z, &l);

        let open = GateThresholds::uniform(&l, f64::NEG_INFINITY);
        let out = gated_weight(&z, &w, &d, &open, 4, 1).unwrap();
        let direct = discretize(&z, step_size(8)).unwrap().row_block(4, 8);
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut pruned = open.clone();
        pruned.prune = f64::INFINITY;
        let out = gated_weight(&z, &w, &d, &pruned, 4, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut low = open.clone();
        low.bits_w = vec![f64::INFINITY, f64::NEG_INFINITY];
        let out = gated_weight(&z, &w, &d, &low, 4, 0).unwrap();
        assert_eq!(out, d.base.row_block(0, 4));

        assert!(matches!(
            gated_weight(&z, &w, &d, &open, 4, 2),
            Err(Error::GroupIndex { .. })
        ));
    }

    #[test]
    fn gated_activation_matches_hand_unrolled() {
        let l = BitLadder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = Tensor::vector((0..32).map(|_| rng.random::<f64>()).collect());
        let d = decompose(&z, &l);

        let none = GateThresholds::uniform(&l, f64::INFINITY);
        assert_eq!(gated_activation(&z, &d, &none), d.base);
        let all = GateThresholds::uniform(&l, f64::NEG_INFINITY);
        let top = discretize(&z, step_size(8)).unwrap();
        for (a, b) in gated_activation(&z, &d, &all).data().iter().zip(top.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Thresholds straddling the metrics.
        let thr = GateThresholds {
            prune: 0.0,
            bits_w: vec![],
            bits_x: vec![rng.random_range(0.0..0.1), rng.random_range(0.0..0.02)],
        };
        let z2: Vec<f64> = z
            .data()
            .iter()
            .map(|&v| (v * 3.0 - 0.5).ceil() / 3.0)
            .collect();
        let m2 = z
            .data()
            .iter()
            .zip(&z2)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 32.0;
        let g2 = if m2 >= thr.bits_x[0] { 1.0 } else { 0.0 };
        let z4: Vec<f64> = z
            .data()
            .iter()
            .map(|&v| (v * 15.0 - 0.5).ceil() / 15.0)
            .collect();
        let m3 = z
            .data()
            .iter()
            .zip(&z4)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 32.0;
        let g3 = if m3 >= thr.bits_x[1] { 1.0 } else { 0.0 };
        let expected: Vec<f64> = (0..32)
            .map(|i| {
                let v = z.data()[i];
                let r4 = ((v - z2[i]) * 15.0 - 0.5).ceil() / 15.0;
                let r8 = ((v - z2[i] - r4) * 255.0 - 0.5).ceil() / 255.0;
                z2[i] + g2 * (r4 + g3 * r8)
            })
            .collect();
        let got = gated_activation(&z, &d, &thr);
        for (a, b) in got.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_code_matches_tensor_code() {
        let l = BitLadder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z0 = Tensor::vector((0..40).map(|_| rng.random::<f64>()).collect());
        for thr in [vec![0.0, 0.0], vec![0.0, 0.05], vec![0.2, 0.0]] {
            let mut g = Graph::new();
            let z = g.param(z0.clone());
            let a: Vec<Var> = thr.iter().map(|&t| g.param(Tensor::scalar(t))).collect();
            let gc = gated_code_var(&mut g, z, &l, &a).unwrap();
            let t = GateThresholds {
                prune: 0.0,
                bits_w: vec![],
                bits_x: thr.clone(),
            };
            let want = gated_activation(&z0, &decompose(&z0, &l), &t);
            for (x, y) in g.value(gc.code).data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_gate_cuts_deeper_thresholds() {
        let l = BitLadder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let z0 = Tensor::vector((0..16).map(|_| rng.random::<f64>()).collect());
        let mut g = Graph::new();
        let z = g.param(z0);
        let a2 = g.param(Tensor::scalar(10.0));
        let a3 = g.param(Tensor::scalar(-0.3));
        let gc = gated_code_var(&mut g, z, &l, &[a2, a3]).unwrap();
        let y = g.sum(gc.code);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.scalar(a3), 0.0);
        // The closed gate still receives its own sigmoid gradient.
        assert_eq!(g.scalar_value(gc.gates[0]), 0.0);
    }

    #[test]
    fn extract_config_saturation() {
        let l = BitLadder::default();
        let specs = vec![
            LayerSpec::linear("fc1", 6, 8),
            LayerSpec::linear("fc2", 8, 3),
        ];
        let metrics: Vec<LayerMetrics> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| LayerMetrics {
                prune: (0..s.groups(4)).map(|c| 0.1 * (c + i + 1) as f64).collect(),
                bits_w: vec![0.1, 0.02],
                bits_x: vec![0.1, 0.02],
            })
            .collect();

        let open = vec![GateThresholds::uniform(&l, f64::NEG_INFINITY); 2];
        let cfg = extract_config(&specs, &l, 4, &open, &metrics).unwrap();
        for (lc, s) in cfg.layers.iter().zip(&specs) {
            assert_eq!((lc.w_bits, lc.a_bits), (8, 8));
            assert_eq!(lc.kept_groups.len(), s.groups(4));
        }

        let closed = vec![GateThresholds::uniform(&l, f64::INFINITY); 2];
        let cfg = extract_config(&specs, &l, 4, &closed, &metrics).unwrap();
        for lc in &cfg.layers {
            assert_eq!((lc.w_bits, lc.a_bits), (2, 2));
        }
        // Every prune gate closed; the largest-metric group survives.
        assert_eq!(cfg.layers[0].kept_groups, vec![1]);
        assert_eq!(cfg.layers[1].kept_groups, vec![0]);
    }

    #[test]
    fn extract_config_mixed_thresholds() {
        let l = BitLadder::default();
        let specs = vec![
            LayerSpec::linear("fc1", 6, 8),
            LayerSpec::linear("fc2", 8, 8),
        ];
        let metrics = vec![
            LayerMetrics {
                prune: vec![0.30, 0.10],
                bits_w: vec![0.08, 0.015],
                bits_x: vec![0.07, 0.02],
            },
            LayerMetrics {
                prune: vec![0.05, 0.25],
                bits_w: vec![0.09, 0.017],
                bits_x: vec![0.06, 0.018],
            },
        ];
        let thresholds = vec![
            GateThresholds {
                prune: 0.2,
                bits_w: vec![0.05, 0.02],
                bits_x: vec![0.09, 0.0],
            },
            GateThresholds {
                prune: 0.05,
                bits_w: vec![0.0, 0.0],
                bits_x: vec![0.01, 0.05],
            },
        ];
        let cfg = extract_config(&specs, &l, 4, &thresholds, &metrics).unwrap();
        // fc1: w gates (1, 0) -> 4; x gates (0, 1) -> 2; groups {0}.
        assert_eq!(cfg.layers[0].w_bits, 4);
        assert_eq!(cfg.layers[0].a_bits, 2);
        assert_eq!(cfg.layers[0].kept_groups, vec![0]);
        // fc2: w (1, 1) -> 8; x (1, 0) -> 4; 0.05 >= 0.05 keeps group 0.
        assert_eq!(cfg.layers[1].w_bits, 8);
        assert_eq!(cfg.layers[1].a_bits, 4);
        assert_eq!(cfg.layers[1].kept_groups, vec![0, 1]);
    }
}
