//! Multilayer perceptron with quantized and gated forward passes.
//!
//! Weights are stored `[out, in]`, so a filter group is a contiguous block of
//! rows. Every layer quantizes its input activations and its weights; pruned
//! groups are masked after denormalization (weight rows and bias entries), so
//! their outputs are exactly zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compression::{CompressionConfig, FULL_PRECISION_BITS};
use crate::costmodel::{LayerGateVars, LayerSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::{gated_code_var, prune_gates_var, GateThresholds, LayerMetrics};
use crate::quantizer::{
    denormalize_act_var, denormalize_wt_var, normalize_act_var, normalize_wt_var, quantize_act_var,
    quantize_wt_var, BitLadder, QuantInterval,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Allow the classifier's output groups to be pruned.
    pub prunable_output: bool,
    /// Pin the first and last layers to this bitwidth.
    pub pin_first_last: Option<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            prunable_output: false,
            pin_first_last: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    /// `[out, in]`.
    pub w: Tensor,
    pub b: Tensor,
    pub interval: QuantInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub specs: Vec<LayerSpec>,
    /// Standardize each weight matrix before quantization.
    pub weight_norm: bool,
}

/// Graph handles of one layer's trainable tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
    pub v_w: Var,
    pub v_x: Var,
}

/// Graph handles of one layer's thresholds.
#[derive(Debug, Clone)]
pub struct ThresholdVars {
    pub prune: Var,
    pub bits_w: Vec<Var>,
    pub bits_x: Vec<Var>,
}

/// How the search forward treats each gate family.
#[derive(Debug, Clone, Copy, Default)]
pub struct SearchOptions<'a> {
    pub learn_prune: bool,
    pub learn_w: bool,
    pub learn_x: bool,
    /// Replace the prune gates by these fixed groups.
    pub frozen_groups: Option<&'a CompressionConfig>,
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Full,
    Fixed {
        config: &'a CompressionConfig,
        group_size: usize,
    },
    Search {
        ladder: &'a BitLadder,
        group_size: usize,
        thresholds: &'a [GateThresholds],
        options: SearchOptions<'a>,
    },
}

pub struct Forward {
    pub logits: Var,
    pub params: Vec<LayerVars>,
    /// Search mode only.
    pub alphas: Vec<ThresholdVars>,
    pub gates: Vec<LayerGateVars>,
    pub metrics: Vec<LayerMetrics>,
}

fn row_mask(groups: &[usize], rows: usize, group_size: usize) -> Tensor {
    let mut m = vec![0.0; rows];
    for &c in groups {
        let start = (c * group_size).min(rows);
        m[start..((c + 1) * group_size).min(rows)].fill(1.0);
    }
    Tensor::vector(m)
}

impl Mlp {
    /// He-uniform weights, zero biases, unit intervals.
    pub fn new(
        inputs: usize,
        classes: usize,
        cfg: &ModelConfig,
        weight_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if inputs == 0 || classes == 0 || cfg.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        let mut sizes = vec![inputs];
        sizes.extend(&cfg.hidden);
        sizes.push(classes);
        let n = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        let mut specs = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let name = format!("fc{}", i + 1);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let w = Tensor::matrix(fan_out, fan_in, w)?;
            let mut spec = LayerSpec::linear(&name, fan_in, fan_out);
            if i == n - 1 && !cfg.prunable_output {
                spec = spec.unprunable();
            }
            if let Some(b) = cfg.pin_first_last {
                if i == 0 || i == n - 1 {
                    spec = spec.pinned(b);
                }
            }
            layers.push(Layer {
                name,
                w,
                b: Tensor::zeros(&[fan_out]),
                interval: QuantInterval { v_w: 1.0, v_x: 1.0 },
            });
            specs.push(spec);
        }
        Ok(Self {
            layers,
            specs,
            weight_norm,
        })
    }

    /// `new` with a generator seeded from `seed`.
    pub fn seeded(
        inputs: usize,
        classes: usize,
        cfg: &ModelConfig,
        weight_norm: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(inputs, classes, cfg, weight_norm, &mut rng)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").w.rows()
    }

    /// Weights as seen by the quantizer.
    pub fn effective_weight(&self, i: usize) -> Tensor {
        let w = &self.layers[i].w;
        if !self.weight_norm {
            return w.clone();
        }
        let mut g = Graph::new();
        let v = g.constant(w.clone());
        let s = g.standardize(v);
        g.value(s).clone()
    }

    /// Set `v_w` to the largest effective weight magnitude and `v_x` to the
    /// largest input activation of each layer on `data`.
    pub fn calibrate(&mut self, data: &Dataset) -> Result<()> {
        let mut h = data.features.clone();
        for i in 0..self.layers.len() {
            let w = self.effective_weight(i);
            self.layers[i].interval = QuantInterval {
                v_w: w.max_abs(),
                v_x: h.data().iter().cloned().fold(0.0, f64::max),
            };
            self.layers[i].interval.clamp();
            let mut out = h.matmul(&w.transpose()?)?;
            let b = &self.layers[i].b;
            let cols = out.cols();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[k % cols];
            }
            if i + 1 < self.layers.len() {
                out = out.map(|v| v.max(0.0));
            }
            h = out;
        }
        Ok(())
    }

    /// Zero the weight rows and bias entries of groups the config drops.
    pub fn zero_pruned(&mut self, config: &CompressionConfig, group_size: usize) {
        for (layer, lc) in self.layers.iter_mut().zip(&config.layers) {
            let mask = row_mask(&lc.kept_groups, layer.w.rows(), group_size);
            let cols = layer.w.cols();
            for (k, v) in layer.w.data_mut().iter_mut().enumerate() {
                *v *= mask.data()[k / cols];
            }
            for (v, m) in layer.b.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
    }

    /// Build the forward pass of `x` on `g`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<Forward> {
        let n = self.layers.len();
        if let Mode::Fixed { config: cfg, .. } = mode {
            if cfg.layers.len() != n {
                return Err(Error::ConfigMismatch(format!(
                    "{} layers in config, {n} in network",
                    cfg.layers.len()
                )));
            }
            for (lc, l) in cfg.layers.iter().zip(&self.layers) {
                if lc.name != l.name {
                    return Err(Error::ConfigMismatch(format!(
                        "unknown layer `{}`",
                        lc.name
                    )));
                }
            }
        }
        if let Mode::Search { thresholds, .. } = mode {
            if thresholds.len() != n {
                return Err(Error::ConfigMismatch(format!(
                    "{} threshold sets for {n} layers",
                    thresholds.len()
                )));
            }
        }
        let mut h = g.constant(x.clone());
        let mut params = Vec::with_capacity(n);
        let mut alphas = Vec::new();
        let mut gates = Vec::new();
        let mut metrics = Vec::new();
        for (i, (layer, spec)) in self.layers.iter().zip(&self.specs).enumerate() {
            g.set_scope(Some(&layer.name));
            let lv = LayerVars {
                w: g.param(layer.w.clone()),
                b: g.param(layer.b.clone()),
                v_w: g.param(Tensor::scalar(layer.interval.v_w)),
                v_x: g.param(Tensor::scalar(layer.interval.v_x)),
            };
            params.push(lv);
            let w_pre = if self.weight_norm {
                g.standardize(lv.w)
            } else {
                lv.w
            };
            let rows = layer.w.rows();
            let (x_q, w_q, b_q) = match mode {
                Mode::Full => (h, w_pre, lv.b),
                Mode::Fixed {
                    config: cfg,
                    group_size,
                } => {
                    let lc = &cfg.layers[i];
                    let x_q = if lc.a_bits >= FULL_PRECISION_BITS {
                        h
                    } else {
                        quantize_act_var(g, h, lv.v_x, lc.a_bits)?
                    };
                    let w_q = if lc.w_bits >= FULL_PRECISION_BITS {
                        w_pre
                    } else {
                        quantize_wt_var(g, w_pre, lv.v_w, lc.w_bits)?
                    };
                    if lc.kept_groups.len() == spec.groups(group_size) {
                        (x_q, w_q, lv.b)
                    } else {
                        let mask = g.constant(row_mask(&lc.kept_groups, rows, group_size));
                        let w_m = g.mul_rows(w_q, mask)?;
                        let b_m = g.mul(lv.b, mask)?;
                        (x_q, w_m, b_m)
                    }
                }
                Mode::Search {
                    ladder,
                    group_size,
                    thresholds,
                    options,
                } => {
                    let thr = &thresholds[i];
                    let mk = |g: &mut Graph, v: f64, learn: bool| {
                        if learn {
                            g.param(Tensor::scalar(v))
                        } else {
                            g.constant(Tensor::scalar(v))
                        }
                    };
                    let tv = ThresholdVars {
                        prune: mk(g, thr.prune, options.learn_prune),
                        bits_w: thr
                            .bits_w
                            .iter()
                            .map(|&a| mk(g, a, options.learn_w))
                            .collect(),
                        bits_x: thr
                            .bits_x
                            .iter()
                            .map(|&a| mk(g, a, options.learn_x))
                            .collect(),
                    };
                    let mut lm = LayerMetrics::default();
                    let (x_q, w_q, gw, gx) = match spec.fixed_bits {
                        Some(bits) => {
                            let x_q = if bits >= FULL_PRECISION_BITS {
                                h
                            } else {
                                quantize_act_var(g, h, lv.v_x, bits)?
                            };
                            let w_q = if bits >= FULL_PRECISION_BITS {
                                w_pre
                            } else {
                                quantize_wt_var(g, w_pre, lv.v_w, bits)?
                            };
                            (x_q, w_q, vec![], vec![])
                        }
                        None => {
                            let zx = normalize_act_var(g, h, lv.v_x)?;
                            let cx = gated_code_var(g, zx, ladder, &tv.bits_x)?;
                            let x_q = denormalize_act_var(g, cx.code, lv.v_x)?;
                            let zw = normalize_wt_var(g, w_pre, lv.v_w)?;
                            let cw = gated_code_var(g, zw, ladder, &tv.bits_w)?;
                            let w_q = denormalize_wt_var(g, cw.code, lv.v_w)?;
                            lm.bits_x = cx.metrics;
                            lm.bits_w = cw.metrics;
                            (x_q, w_q, cw.gates, cx.gates)
                        }
                    };
                    let groups = spec.groups(group_size);
                    let prune = if let Some(frozen) = options.frozen_groups {
                        let kept = &frozen.layers[i].kept_groups;
                        lm.prune = vec![0.0; groups];
                        let v: Vec<f64> = (0..groups)
                            .map(|c| if kept.contains(&c) { 1.0 } else { 0.0 })
                            .collect();
                        g.constant(Tensor::vector(v))
                    } else if spec.prunable {
                        let w_val = g.value(w_pre).clone();
                        let (p, m) = prune_gates_var(g, &w_val, group_size, tv.prune)?;
                        lm.prune = m;
                        p
                    } else {
                        lm.prune = vec![0.0; groups];
                        g.constant(Tensor::full(&[groups], 1.0))
                    };
                    let expanded = g.expand_groups(prune, group_size, rows)?;
                    let w_m = g.mul_rows(w_q, expanded)?;
                    let b_m = g.mul(lv.b, expanded)?;
                    gates.push(LayerGateVars {
                        prune,
                        bits_w: gw,
                        bits_x: gx,
                    });
                    alphas.push(tv);
                    metrics.push(lm);
                    (x_q, w_m, b_m)
                }
            };
            let wt = g.transpose(w_q)?;
            let y = g.matmul(x_q, wt)?;
            let y = g.add_row(y, b_q)?;
            h = if i + 1 < n { g.relu(y) } else { y };
        }
        g.set_scope(None);
        Ok(Forward {
            logits: h,
            params,
            alphas,
            gates,
            metrics,
        })
    }

    /// Mean cross-entropy and accuracy on `data`.
    pub fn evaluate(&self, data: &Dataset, mode: Mode) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &data.features, mode)?;
        let loss = g.softmax_cross_entropy(f.logits, &data.labels)?;
        let logits = g.value(f.logits);
        let c = logits.cols();
        let correct = data
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let row = &logits.data()[i * c..(i + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                    )
                    .0;
                best == l
            })
            .count();
        Ok((g.scalar_value(loss), correct as f64 / data.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blobs, BlobsConfig};

    fn fixture(weight_norm: bool) -> (Mlp, Dataset) {
        let data = gaussian_blobs(
            &BlobsConfig {
                samples: 40,
                dim: 5,
                classes: 3,
                spread: 0.5,
            },
            7,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig {
            hidden: vec![6],
            ..ModelConfig::default()
        };
        let mut m = Mlp::new(5, 3, &cfg, weight_norm, &mut rng).unwrap();
        m.calibrate(&data).unwrap();
        (m, data)
    }

    fn logits(m: &Mlp, x: &Tensor, mode: Mode) -> Tensor {
        let mut g = Graph::new();
        let f = m.forward(&mut g, x, mode).unwrap();
        g.value(f.logits).clone()
    }

    #[test]
    fn reference_config_is_full_precision() {
        let (m, data) = fixture(false);
        let cfg = CompressionConfig::reference(&m.specs, 2);
        let full = logits(&m, &data.features, Mode::Full);
        let fixed = logits(
            &m,
            &data.features,
            Mode::Fixed {
                config: &cfg,
                group_size: 2,
            },
        );
        assert_eq!(full, fixed);
    }

    #[test]
    fn open_search_gates_match_top_rung() {
        for wn in [false, true] {
            let (m, data) = fixture(wn);
            let ladder = BitLadder::default();
            let fixed_cfg = CompressionConfig::uniform(&m.specs, ladder.top(), 2);
            let open = vec![GateThresholds::uniform(&ladder, f64::NEG_INFINITY); 2];
            let searched = logits(
                &m,
                &data.features,
                Mode::Search {
                    ladder: &ladder,
                    group_size: 2,
                    thresholds: &open,
                    options: SearchOptions::default(),
                },
            );
            let fixed = logits(
                &m,
                &data.features,
                Mode::Fixed {
                    config: &fixed_cfg,
                    group_size: 2,
                },
            );
            assert_eq!(searched, fixed, "weight_norm={wn}");
        }
    }

    #[test]
    fn pruned_groups_emit_zero() {
        let (m, data) = fixture(false);
        let mut cfg = CompressionConfig::uniform(&m.specs, 4, 2);
        cfg.layers[0].kept_groups = vec![1];
        let mut g = Graph::new();
        let f = m
            .forward(
                &mut g,
                &data.features,
                Mode::Fixed {
                    config: &cfg,
                    group_size: 2,
                },
            )
            .unwrap();
        assert!(g.value(f.logits).is_finite());
        let mut z = m.clone();
        z.zero_pruned(&cfg, 2);
        for r in [0, 1, 4, 5] {
            assert!(z.layers[0].w.row(r).iter().all(|&v| v == 0.0));
            assert_eq!(z.layers[0].b.data()[r], 0.0);
        }
        assert_eq!(
            logits(
                &z,
                &data.features,
                Mode::Fixed {
                    config: &cfg,
                    group_size: 2
                }
            ),
            g.value(f.logits).clone()
        );
    }

    #[test]
    fn weight_norm_standardizes() {
        let (m, _) = fixture(true);
        let w = m.effective_weight(0);
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let (m, data) = fixture(false);
        let mut cfg = CompressionConfig::uniform(&m.specs, 4, 2);
        cfg.layers[1].name = "conv9".into();
        let mut g = Graph::new();
        assert!(matches!(
            m.forward(
                &mut g,
                &data.features,
                Mode::Fixed {
                    config: &cfg,
                    group_size: 2
                }
            ),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
