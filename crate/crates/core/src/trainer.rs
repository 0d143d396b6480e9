//! Pre-training, gate search and fine-tuning.
//!
//! The search minimizes `CE + lambda * ln R`. Each epoch runs two passes over
//! the data: the first updates weights and the weight-side thresholds (bit
//! and prune), the second updates weights and the activation thresholds.
//! Thresholds of the resting family enter the graph as constants, so their
//! gradients are exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::compression::CompressionConfig;
use crate::costmodel::{discrete_cost, gated_cost, gated_cost_var, CostOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::{extract_config, GateState, GateThresholds, LayerMetrics};
use crate::model::{Forward, Mlp, Mode, SearchOptions};
use crate::optim::Sgd;
use crate::quantizer::{BitLadder, QuantInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchRunConfig {
    pub lambda: f64,
    pub epochs_pretrain: usize,
    pub epochs_search: usize,
    pub epochs_finetune: usize,
    pub lr: f64,
    pub lr_threshold: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub ladder: BitLadder,
    pub group_size: usize,
    pub weight_normalization: bool,
    /// Train the quantization intervals (at `lr_threshold`).
    pub learn_intervals: bool,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epochs_pretrain: 20,
            epochs_search: 10,
            epochs_finetune: 5,
            lr: 0.05,
            lr_threshold: 0.01,
            lr_finetune: 0.02,
            momentum: 0.9,
            nesterov: false,
            batch_size: 32,
            seed: 0,
            ladder: BitLadder::default(),
            group_size: 4,
            weight_normalization: false,
            learn_intervals: true,
        }
    }
}

impl SearchRunConfig {
    /// Field-level validation; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(
                    name,
                    format!("must be a positive number, got {v}"),
                ))
            }
        };
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if self.epochs_search == 0 {
            return Err(Error::invalid("epochs_search", "must be at least 1"));
        }
        if self.epochs_finetune == 0 {
            return Err(Error::invalid("epochs_finetune", "must be at least 1"));
        }
        positive("lr", self.lr)?;
        positive("lr_threshold", self.lr_threshold)?;
        positive("lr_finetune", self.lr_finetune)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size", "must be at least 1"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_SEARCH: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

/// `ce + lambda * ln r`.
pub fn objective(ce_loss: f64, r: f64, lambda: f64) -> Result<f64> {
    if r.is_nan() || r <= 0.0 {
        return Err(Error::invalid(
            "R",
            format!("cost must be positive, got {r}"),
        ));
    }
    Ok(ce_loss + lambda * r.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "search-w")]
    SearchW,
    #[serde(rename = "search-x")]
    SearchX,
    #[serde(rename = "finetune")]
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: Phase,
    pub ce_loss: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub bops: f64,
    /// Open gates over total gates, or `-` outside the search.
    pub active_gates: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<TraceRow>,
}

impl MetricsTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn extend(&mut self, other: MetricsTrace) {
        self.rows.extend(other.rows);
    }
}

fn check_finite(g: &Graph, loss: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let (layer, op) = g
        .first_non_finite()
        .unwrap_or_else(|| ("loss".to_string(), "softmax_cross_entropy".to_string()));
    Err(Error::NonFinite { layer, op })
}

/// Apply the weight, bias and interval gradients of one step.
fn update_params(
    model: &mut Mlp,
    fwd: &Forward,
    grads: &Gradients,
    opt: &mut Sgd,
    mut interval_opt: Option<&mut Sgd>,
    frozen: Option<(&CompressionConfig, usize)>,
) {
    for (i, (layer, lv)) in model.layers.iter_mut().zip(&fwd.params).enumerate() {
        let mut gw = grads.wrt(lv.w);
        let mut gb = grads.wrt(lv.b);
        if let Some((cfg, group_size)) = frozen {
            let kept = &cfg.layers[i].kept_groups;
            let cols = layer.w.cols();
            for r in 0..layer.w.rows() {
                if !kept.contains(&(r / group_size)) {
                    gw.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                    gb.data_mut()[r] = 0.0;
                }
            }
        }
        opt.step(&format!("{}.w", layer.name), &mut layer.w, &gw);
        opt.step(&format!("{}.b", layer.name), &mut layer.b, &gb);
        if let Some(iopt) = interval_opt.as_deref_mut() {
            let QuantInterval { v_w, v_x } = &mut layer.interval;
            iopt.step_scalar(&format!("{}.v_w", layer.name), v_w, grads.scalar(lv.v_w));
            iopt.step_scalar(&format!("{}.v_x", layer.name), v_x, grads.scalar(lv.v_x));
            layer.interval.clamp();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &mut Mlp,
    data: &Dataset,
    mode_config: Option<&CompressionConfig>,
    cfg: &SearchRunConfig,
    opt: &mut Sgd,
    interval_opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    max_steps: Option<usize>,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut steps = 0;
    for idx in data.batches(cfg.batch_size, rng) {
        if max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let batch = data.subset(&idx);
        let mut g = Graph::new();
        let mode = match mode_config {
            Some(c) => Mode::Fixed {
                config: c,
                group_size: cfg.group_size,
            },
            None => Mode::Full,
        };
        let fwd = model.forward(&mut g, &batch.features, mode)?;
        g.set_scope(Some("loss"));
        let loss = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
        let lv = g.scalar_value(loss);
        check_finite(&g, lv)?;
        let grads = g.backward(loss)?;
        let iopt = (cfg.learn_intervals && mode_config.is_some()).then_some(&mut *interval_opt);
        update_params(
            model,
            &fwd,
            &grads,
            opt,
            iopt,
            mode_config.map(|c| (c, cfg.group_size)),
        );
        total += lv;
        steps += 1;
    }
    Ok((total, steps))
}

/// Plain full-precision training, then interval calibration on `data`.
pub fn pretrain(model: &mut Mlp, data: &Dataset, cfg: &SearchRunConfig) -> Result<MetricsTrace> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.nesterov);
    let mut iopt = Sgd::new(cfg.lr_threshold, cfg.momentum, cfg.nesterov);
    let mut rng = cfg.rng(STREAM_PRETRAIN);
    let reference = CompressionConfig::reference(&model.specs, cfg.group_size);
    let bops = discrete_cost(
        &model.specs,
        &reference,
        cfg.group_size,
        CostOptions::default(),
    )?
    .bops;
    let mut trace = MetricsTrace::default();
    for epoch in 0..cfg.epochs_pretrain {
        let (total, steps) =
            train_epoch(model, data, None, cfg, &mut opt, &mut iopt, &mut rng, None)?;
        trace.rows.push(TraceRow {
            epoch,
            phase: Phase::Pretrain,
            ce_loss: total / steps as f64,
            r: bops,
            bops,
            active_gates: "-".into(),
        });
    }
    model.calibrate(data)?;
    Ok(trace)
}

/// Which threshold families a search run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Bit and prune gates together.
    Joint,
    /// Prune gates only; bit gates held open at the top rung.
    PruneOnly,
    /// Bit gates only, on fixed surviving groups.
    BitsOnly,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: Mlp,
    pub thresholds: Vec<GateThresholds>,
    pub metrics: Vec<LayerMetrics>,
    pub config: CompressionConfig,
    pub trace: MetricsTrace,
}

struct GateSnapshot {
    metrics: Vec<LayerMetrics>,
    states: Vec<GateState>,
    r: f64,
}

fn snapshot(
    model: &Mlp,
    data: &Dataset,
    cfg: &SearchRunConfig,
    thresholds: &[GateThresholds],
    options: SearchOptions,
) -> Result<GateSnapshot> {
    let mut g = Graph::new();
    let fwd = model.forward(
        &mut g,
        &data.features,
        Mode::Search {
            ladder: &cfg.ladder,
            group_size: cfg.group_size,
            thresholds,
            options,
        },
    )?;
    let states: Vec<GateState> = fwd
        .gates
        .iter()
        .map(|lg| GateState {
            prune: g.value(lg.prune).data().iter().map(|&v| v == 1.0).collect(),
            bits_w: lg
                .bits_w
                .iter()
                .map(|&v| g.scalar_value(v) == 1.0)
                .collect(),
            bits_x: lg
                .bits_x
                .iter()
                .map(|&v| g.scalar_value(v) == 1.0)
                .collect(),
        })
        .collect();
    let r = gated_cost(&model.specs, &states, &cfg.ladder, cfg.group_size)?;
    Ok(GateSnapshot {
        metrics: fwd.metrics,
        states,
        r,
    })
}

fn open_summary(states: &[GateState]) -> String {
    let flat: Vec<bool> = states.iter().flat_map(|s| s.flat()).collect();
    format!("{}/{}", flat.iter().filter(|&&b| b).count(), flat.len())
}

/// Initial thresholds of a stage: zero (every gate open) for trained
/// families, `-inf` for bit gates held open.
pub fn initial_thresholds(ladder: &BitLadder, layers: usize, stage: Stage) -> Vec<GateThresholds> {
    let mut t = GateThresholds::zeros(ladder);
    if stage == Stage::PruneOnly {
        t.bits_w.fill(f64::NEG_INFINITY);
        t.bits_x.fill(f64::NEG_INFINITY);
    }
    vec![t; layers]
}

/// Gate search from a pre-trained model.
pub fn search(
    model: &Mlp,
    data: &Dataset,
    cfg: &SearchRunConfig,
    stage: Stage,
    frozen_groups: Option<&CompressionConfig>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if stage == Stage::BitsOnly && frozen_groups.is_none() {
        return Err(Error::invalid(
            "frozen_groups",
            "bit-only search needs fixed groups",
        ));
    }
    let mut model = model.clone();
    let mut thresholds = initial_thresholds(&cfg.ladder, model.layers.len(), stage);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.nesterov);
    let mut topt = Sgd::new(cfg.lr_threshold, cfg.momentum, cfg.nesterov);
    let mut iopt = Sgd::new(cfg.lr_threshold, cfg.momentum, cfg.nesterov);
    let mut rng = cfg.rng(STREAM_SEARCH);
    let mut trace = MetricsTrace::default();
    let frozen = if stage == Stage::BitsOnly {
        frozen_groups
    } else {
        None
    };
    let learn_bits = stage != Stage::PruneOnly;
    let learn_prune = stage != Stage::BitsOnly;

    for epoch in 0..cfg.epochs_search {
        for phase in [Phase::SearchW, Phase::SearchX] {
            let options = SearchOptions {
                learn_prune: learn_prune && phase == Phase::SearchW,
                learn_w: learn_bits && phase == Phase::SearchW,
                learn_x: learn_bits && phase == Phase::SearchX,
                frozen_groups: frozen,
            };
            let mut total = 0.0;
            let mut steps = 0usize;
            for idx in data.batches(cfg.batch_size, &mut rng) {
                let batch = data.subset(&idx);
                let mut g = Graph::new();
                let fwd = model.forward(
                    &mut g,
                    &batch.features,
                    Mode::Search {
                        ladder: &cfg.ladder,
                        group_size: cfg.group_size,
                        thresholds: &thresholds,
                        options,
                    },
                )?;
                g.set_scope(Some("loss"));
                let ce = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
                g.set_scope(Some("cost"));
                let r = gated_cost_var(
                    &mut g,
                    &model.specs,
                    &fwd.gates,
                    &cfg.ladder,
                    cfg.group_size,
                )?;
                let log_r = g.ln(r);
                let reg = g.scale(log_r, cfg.lambda);
                let loss = g.add(ce, reg)?;
                let lv = g.scalar_value(loss);
                check_finite(&g, lv)?;
                let grads = g.backward(loss)?;
                let iv = cfg.learn_intervals.then_some(&mut iopt);
                update_params(
                    &mut model,
                    &fwd,
                    &grads,
                    &mut opt,
                    iv,
                    frozen.map(|c| (c, cfg.group_size)),
                );
                for (l, (thr, tv)) in thresholds.iter_mut().zip(&fwd.alphas).enumerate() {
                    if options.learn_prune && model.specs[l].prunable {
                        topt.step_scalar(
                            &format!("{l}.prune"),
                            &mut thr.prune,
                            grads.scalar(tv.prune),
                        );
                    }
                    if model.specs[l].fixed_bits.is_some() {
                        continue;
                    }
                    if options.learn_w {
                        for (j, (a, &v)) in thr.bits_w.iter_mut().zip(&tv.bits_w).enumerate() {
                            topt.step_scalar(&format!("{l}.w{j}"), a, grads.scalar(v));
                        }
                    }
                    if options.learn_x {
                        for (j, (a, &v)) in thr.bits_x.iter_mut().zip(&tv.bits_x).enumerate() {
                            topt.step_scalar(&format!("{l}.x{j}"), a, grads.scalar(v));
                        }
                    }
                }
                total += g.scalar_value(ce);
                steps += 1;
            }
            let snap = snapshot(
                &model,
                data,
                cfg,
                &thresholds,
                SearchOptions {
                    frozen_groups: frozen,
                    ..Default::default()
                },
            )?;
            let config = current_config(&model, cfg, &thresholds, &snap, frozen)?;
            let bops = discrete_cost(
                &model.specs,
                &config,
                cfg.group_size,
                CostOptions::default(),
            )?
            .bops;
            trace.rows.push(TraceRow {
                epoch,
                phase,
                ce_loss: total / steps as f64,
                r: snap.r,
                bops,
                active_gates: open_summary(&snap.states),
            });
        }
    }
    let snap = snapshot(
        &model,
        data,
        cfg,
        &thresholds,
        SearchOptions {
            frozen_groups: frozen,
            ..Default::default()
        },
    )?;
    let config = current_config(&model, cfg, &thresholds, &snap, frozen)?;
    Ok(SearchOutcome {
        model,
        thresholds,
        metrics: snap.metrics,
        config,
        trace,
    })
}

fn current_config(
    model: &Mlp,
    cfg: &SearchRunConfig,
    thresholds: &[GateThresholds],
    snap: &GateSnapshot,
    frozen: Option<&CompressionConfig>,
) -> Result<CompressionConfig> {
    let mut config = extract_config(
        &model.specs,
        &cfg.ladder,
        cfg.group_size,
        thresholds,
        &snap.metrics,
    )?;
    if let Some(f) = frozen {
        for (lc, fl) in config.layers.iter_mut().zip(&f.layers) {
            lc.kept_groups = fl.kept_groups.clone();
        }
    }
    Ok(config)
}

/// Prune-only search followed by a bit-only search on its surviving groups.
pub fn sequential_search(
    model: &Mlp,
    data: &Dataset,
    cfg: &SearchRunConfig,
) -> Result<SearchOutcome> {
    let first = search(model, data, cfg, Stage::PruneOnly, None)?;
    let mut second = search(
        &first.model,
        data,
        cfg,
        Stage::BitsOnly,
        Some(&first.config),
    )?;
    let mut trace = first.trace;
    trace.extend(second.trace);
    second.trace = trace;
    Ok(second)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Mlp,
    pub trace: MetricsTrace,
    pub accuracy: f64,
}

/// Training at a fixed configuration. Pruned groups are zeroed first and
/// receive no updates. `max_steps` caps the total number of steps.
pub fn train_fixed(
    model: &Mlp,
    config: &CompressionConfig,
    data: &Dataset,
    cfg: &SearchRunConfig,
    epochs: usize,
    max_steps: Option<usize>,
) -> Result<(Mlp, MetricsTrace)> {
    cfg.validate()?;
    config.validate(&model.specs, &cfg.ladder, cfg.group_size)?;
    let mut model = model.clone();
    model.zero_pruned(config, cfg.group_size);
    let mut opt = Sgd::new(cfg.lr_finetune, cfg.momentum, cfg.nesterov);
    let mut iopt = Sgd::new(cfg.lr_threshold, cfg.momentum, cfg.nesterov);
    let mut rng = cfg.rng(STREAM_FINETUNE);
    let report = discrete_cost(&model.specs, config, cfg.group_size, CostOptions::default())?;
    let r = discrete_cost(
        &model.specs,
        config,
        cfg.group_size,
        CostOptions {
            couple_in_channels: false,
        },
    )?
    .bops;
    let mut trace = MetricsTrace::default();
    let mut remaining = max_steps;
    for epoch in 0..epochs {
        if remaining == Some(0) {
            break;
        }
        let (total, steps) = train_epoch(
            &mut model,
            data,
            Some(config),
            cfg,
            &mut opt,
            &mut iopt,
            &mut rng,
            remaining,
        )?;
        if let Some(m) = remaining.as_mut() {
            *m -= steps;
        }
        trace.rows.push(TraceRow {
            epoch,
            phase: Phase::Finetune,
            ce_loss: total / steps.max(1) as f64,
            r,
            bops: report.bops,
            active_gates: "-".into(),
        });
    }
    Ok((model, trace))
}

/// Fine-tune at `config` for the configured number of epochs.
pub fn finetune(
    model: &Mlp,
    config: &CompressionConfig,
    data: &Dataset,
    eval: &Dataset,
    cfg: &SearchRunConfig,
) -> Result<FinetuneOutcome> {
    let (model, trace) = train_fixed(model, config, data, cfg, cfg.epochs_finetune, None)?;
    let (_, accuracy) = model.evaluate(
        eval,
        Mode::Fixed {
            config,
            group_size: cfg.group_size,
        },
    )?;
    Ok(FinetuneOutcome {
        model,
        trace,
        accuracy,
    })
}

/// Score of a configuration under the search objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub ce_loss: f64,
    /// Gated cost at the configuration's hard gates.
    pub r: f64,
    pub objective: f64,
    /// Reported BOPs, with downstream input-channel reduction.
    pub bops: f64,
}

/// Fine-tune `config` from `model` for `steps` steps, then score it on
/// `eval`.
pub fn score_config(
    model: &Mlp,
    config: &CompressionConfig,
    train: &Dataset,
    eval: &Dataset,
    cfg: &SearchRunConfig,
    steps: usize,
) -> Result<ConfigScore> {
    let epochs = steps.div_ceil(train.len().div_ceil(cfg.batch_size)).max(1);
    let (tuned, _) = train_fixed(model, config, train, cfg, epochs, Some(steps))?;
    let (ce_loss, _) = tuned.evaluate(
        eval,
        Mode::Fixed {
            config,
            group_size: cfg.group_size,
        },
    )?;
    let r = discrete_cost(
        &model.specs,
        config,
        cfg.group_size,
        CostOptions {
            couple_in_channels: false,
        },
    )?
    .bops;
    let bops = discrete_cost(&model.specs, config, cfg.group_size, CostOptions::default())?.bops;
    Ok(ConfigScore {
        ce_loss,
        r,
        objective: objective(ce_loss, r, cfg.lambda)?,
        bops,
    })
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub pretrained: Mlp,
    pub search: SearchOutcome,
    pub finetuned: Mlp,
    pub pre_finetune_accuracy: f64,
    pub accuracy: f64,
    pub trace: MetricsTrace,
}

/// Pre-train, search, extract and fine-tune. `model` is the freshly
/// initialized network.
pub fn run_pipeline(
    model: &Mlp,
    train: &Dataset,
    eval: &Dataset,
    cfg: &SearchRunConfig,
) -> Result<PipelineOutcome> {
    let mut pretrained = model.clone();
    let mut trace = pretrain(&mut pretrained, train, cfg)?;
    let searched = search(&pretrained, train, cfg, Stage::Joint, None)?;
    trace.extend(searched.trace.clone());
    let fixed = Mode::Fixed {
        config: &searched.config,
        group_size: cfg.group_size,
    };
    let mut masked = searched.model.clone();
    masked.zero_pruned(&searched.config, cfg.group_size);
    let (_, pre_finetune_accuracy) = masked.evaluate(eval, fixed)?;
    let ft = finetune(&searched.model, &searched.config, train, eval, cfg)?;
    trace.extend(ft.trace);
    Ok(PipelineOutcome {
        pretrained,
        search: searched,
        finetuned: ft.model,
        pre_finetune_accuracy,
        accuracy: ft.accuracy,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Var;
    use crate::costmodel::{LayerGateVars, LayerSpec};
    use crate::data::{gaussian_blobs, BlobsConfig};
    use crate::model::ModelConfig;
    use crate::quantizer::{quantize_act_var, quantize_wt_var};
    use crate::tensor::Tensor;

    fn toy() -> (Mlp, Dataset, SearchRunConfig) {
        let data = gaussian_blobs(
            &BlobsConfig {
                samples: 120,
                dim: 6,
                classes: 3,
                spread: 0.5,
            },
            3,
        )
        .unwrap();
        let cfg = SearchRunConfig {
            epochs_pretrain: 10,
            epochs_search: 3,
            epochs_finetune: 2,
            group_size: 2,
            seed: 3,
            ..SearchRunConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mcfg = ModelConfig {
            hidden: vec![8],
            ..ModelConfig::default()
        };
        let mut m = Mlp::new(6, 3, &mcfg, false, &mut rng).unwrap();
        pretrain(&mut m, &data, &cfg).unwrap();
        (m, data, cfg)
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!((objective(1.0, std::f64::consts::E, 2.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(objective(1.0, 0.0, 1.0).is_err());
        assert!(objective(1.0, -2.0, 1.0).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let bad = SearchRunConfig {
            lambda: -1.0,
            ..SearchRunConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(Error::InvalidArgument { name: "lambda", .. })
        ));
        let bad = SearchRunConfig {
            epochs_search: 0,
            ..SearchRunConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(Error::InvalidArgument {
                name: "epochs_search",
                ..
            })
        ));
    }

    /// `lambda * ln R` as a function of soft gate values, plus its gradient.
    fn log_cost(gates: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let specs = vec![LayerSpec::linear("a", 6, 4), LayerSpec::linear("b", 4, 2)];
        let ladder = BitLadder::default();
        let mut g = Graph::new();
        let vars: Vec<Var> = gates.iter().map(|&v| g.param(Tensor::scalar(v))).collect();
        let mut it = vars.iter().copied();
        let mut lg = Vec::new();
        for _ in 0..2 {
            let p: Vec<Var> = (0..2).map(|_| it.next().unwrap()).collect();
            let prune = g.stack(&p).unwrap();
            lg.push(LayerGateVars {
                prune,
                bits_w: (0..2).map(|_| it.next().unwrap()).collect(),
                bits_x: (0..2).map(|_| it.next().unwrap()).collect(),
            });
        }
        let r = gated_cost_var(&mut g, &specs, &lg, &ladder, 2).unwrap();
        let lr = g.ln(r);
        let out = g.scale(lr, lambda);
        let grads = g.backward(out).unwrap();
        (
            g.scalar_value(out),
            vars.iter().map(|&v| grads.scalar(v)).collect(),
        )
    }

    #[test]
    fn log_cost_gradient_matches_finite_differences() {
        let gates = [
            0.9, 0.6, 0.7, 0.4, 0.8, 0.5, 0.3, 0.95, 0.65, 0.55, 0.75, 0.45,
        ];
        let lambda = 0.37;
        let (_, grad) = log_cost(&gates, lambda);
        let (_, unit) = log_cost(&gates, 1.0);
        let h = 1e-6;
        for i in 0..gates.len() {
            let mut up = gates;
            up[i] += h;
            let mut dn = gates;
            dn[i] -= h;
            let fd = (log_cost(&up, lambda).0 - log_cost(&dn, lambda).0) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-7, "gate {i}: {} vs {fd}", grad[i]);
            assert!((grad[i] - lambda * unit[i]).abs() < 1e-12);
        }
    }

    fn search_grads(
        m: &Mlp,
        data: &Dataset,
        cfg: &SearchRunConfig,
        options: SearchOptions,
    ) -> (Forward, Gradients) {
        let thr = vec![GateThresholds::zeros(&cfg.ladder); m.layers.len()];
        let mut g = Graph::new();
        let fwd = m
            .forward(
                &mut g,
                &data.features,
                Mode::Search {
                    ladder: &cfg.ladder,
                    group_size: cfg.group_size,
                    thresholds: &thr,
                    options,
                },
            )
            .unwrap();
        let ce = g.softmax_cross_entropy(fwd.logits, &data.labels).unwrap();
        let r = gated_cost_var(&mut g, &m.specs, &fwd.gates, &cfg.ladder, cfg.group_size).unwrap();
        let lr = g.ln(r);
        let reg = g.scale(lr, cfg.lambda);
        let loss = g.add(ce, reg).unwrap();
        let grads = g.backward(loss).unwrap();
        (fwd, grads)
    }

    #[test]
    fn alternation_masks_the_resting_family() {
        let (m, data, cfg) = toy();
        let w_phase = SearchOptions {
            learn_prune: true,
            learn_w: true,
            ..SearchOptions::default()
        };
        let (fwd, grads) = search_grads(&m, &data, &cfg, w_phase);
        for tv in &fwd.alphas {
            assert!(tv.bits_x.iter().all(|&v| grads.scalar(v) == 0.0));
        }
        assert!(fwd
            .alphas
            .iter()
            .flat_map(|t| &t.bits_w)
            .any(|&v| grads.scalar(v) != 0.0));

        let x_phase = SearchOptions {
            learn_x: true,
            ..SearchOptions::default()
        };
        let (fwd, grads) = search_grads(&m, &data, &cfg, x_phase);
        for tv in &fwd.alphas {
            assert!(tv.bits_w.iter().all(|&v| grads.scalar(v) == 0.0));
            assert_eq!(grads.scalar(tv.prune), 0.0);
        }
        assert!(fwd
            .alphas
            .iter()
            .flat_map(|t| &t.bits_x)
            .any(|&v| grads.scalar(v) != 0.0));
    }

    #[test]
    fn search_is_deterministic() {
        let (m, data, cfg) = toy();
        let a = search(&m, &data, &cfg, Stage::Joint, None).unwrap();
        let b = search(&m, &data, &cfg, Stage::Joint, None).unwrap();
        assert_eq!(a.trace.to_csv().unwrap(), b.trace.to_csv().unwrap());
        assert_eq!(a.config, b.config);
        assert_eq!(a.thresholds, b.thresholds);
        assert_eq!(a.trace.rows.len(), 2 * cfg.epochs_search);
        let phases: Vec<Phase> = a.trace.rows.iter().map(|r| r.phase).collect();
        assert_eq!(phases[..2], [Phase::SearchW, Phase::SearchX]);
        assert!(a
            .trace
            .to_csv()
            .unwrap()
            .starts_with("epoch,phase,ce_loss,R,bops,active_gates\n0,search-w,"));
    }

    #[test]
    fn nan_loss_names_the_layer() {
        let (mut m, data, cfg) = toy();
        m.layers[1].w.data_mut()[3] = f64::NAN;
        match search(&m, &data, &cfg, Stage::Joint, None) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, "fc2"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn heavy_lambda_costs_less() {
        let (m, data, cfg) = toy();
        let bops = |lambda: f64| {
            let c = SearchRunConfig {
                lambda,
                ..cfg.clone()
            };
            let out = search(&m, &data, &c, Stage::Joint, None).unwrap();
            discrete_cost(&m.specs, &out.config, c.group_size, CostOptions::default())
                .unwrap()
                .bops
        };
        assert!(bops(1e3) < bops(0.0));
    }

    #[test]
    fn stages_respect_their_families() {
        let (m, data, cfg) = toy();
        assert!(search(&m, &data, &cfg, Stage::BitsOnly, None).is_err());
        let first = search(&m, &data, &cfg, Stage::PruneOnly, None).unwrap();
        for (t, lc) in first.thresholds.iter().zip(&first.config.layers) {
            assert!(t
                .bits_w
                .iter()
                .chain(&t.bits_x)
                .all(|a| *a == f64::NEG_INFINITY));
            assert_eq!((lc.w_bits, lc.a_bits), (8, 8));
        }
        let second = sequential_search(&m, &data, &cfg).unwrap();
        for (a, b) in second.config.layers.iter().zip(&first.config.layers) {
            assert_eq!(a.kept_groups, b.kept_groups);
        }
        assert_eq!(second.trace.rows.len(), 4 * cfg.epochs_search);
    }

    /// Quantization-aware training written directly against the quantizers.
    fn plain_qat(
        model: &Mlp,
        data: &Dataset,
        cfg: &SearchRunConfig,
        bits: u32,
        epochs: usize,
    ) -> Mlp {
        let mut model = model.clone();
        let mut opt = Sgd::new(cfg.lr_finetune, cfg.momentum, cfg.nesterov);
        let mut iopt = Sgd::new(cfg.lr_threshold, cfg.momentum, cfg.nesterov);
        let mut rng = cfg.rng(STREAM_FINETUNE);
        for _ in 0..epochs {
            for idx in data.batches(cfg.batch_size, &mut rng) {
                let batch = data.subset(&idx);
                let mut g = Graph::new();
                let mut h = g.constant(batch.features.clone());
                let mut vars = Vec::new();
                let n = model.layers.len();
                for (i, l) in model.layers.iter().enumerate() {
                    let (w, b) = (g.param(l.w.clone()), g.param(l.b.clone()));
                    let vw = g.param(Tensor::scalar(l.interval.v_w));
                    let vx = g.param(Tensor::scalar(l.interval.v_x));
                    let xq = quantize_act_var(&mut g, h, vx, bits).unwrap();
                    let wq = quantize_wt_var(&mut g, w, vw, bits).unwrap();
                    let wt = g.transpose(wq).unwrap();
                    let y = g.matmul(xq, wt).unwrap();
                    let y = g.add_row(y, b).unwrap();
                    h = if i + 1 < n { g.relu(y) } else { y };
                    vars.push((w, b, vw, vx));
                }
                let loss = g.softmax_cross_entropy(h, &batch.labels).unwrap();
                let grads = g.backward(loss).unwrap();
                for (l, (w, b, vw, vx)) in model.layers.iter_mut().zip(vars) {
                    opt.step(&format!("{}.w", l.name), &mut l.w, &grads.wrt(w));
                    opt.step(&format!("{}.b", l.name), &mut l.b, &grads.wrt(b));
                    iopt.step_scalar(
                        &format!("{}.v_w", l.name),
                        &mut l.interval.v_w,
                        grads.scalar(vw),
                    );
                    iopt.step_scalar(
                        &format!("{}.v_x", l.name),
                        &mut l.interval.v_x,
                        grads.scalar(vx),
                    );
                    l.interval.clamp();
                }
            }
        }
        model
    }

    #[test]
    fn uniform_top_rung_matches_plain_qat() {
        let (m, data, cfg) = toy();
        let config = CompressionConfig::uniform(&m.specs, cfg.ladder.top(), cfg.group_size);
        let (tuned, _) = train_fixed(&m, &config, &data, &cfg, 2, None).unwrap();
        let direct = plain_qat(&m, &data, &cfg, cfg.ladder.top(), 2);
        assert_eq!(tuned, direct);
    }

    #[test]
    fn reference_config_trains_like_plain_training() {
        let (m, data, cfg) = toy();
        let (train, eval) = data.split(0.75);
        let reference = CompressionConfig::reference(&m.specs, cfg.group_size);
        let ft = finetune(&m, &reference, &train, &eval, &cfg).unwrap();
        let mut plain = m.clone();
        let plain_cfg = SearchRunConfig {
            epochs_pretrain: cfg.epochs_finetune,
            lr: cfg.lr_finetune,
            ..cfg.clone()
        };
        pretrain(&mut plain, &train, &plain_cfg).unwrap();
        let (_, acc) = plain.evaluate(&eval, Mode::Full).unwrap();
        assert!((ft.accuracy - acc).abs() <= 0.1, "{} vs {acc}", ft.accuracy);
    }

    #[test]
    fn finetune_keeps_pruned_groups_at_zero() {
        let (m, data, cfg) = toy();
        let mut config = CompressionConfig::uniform(&m.specs, 4, cfg.group_size);
        config.layers[0].kept_groups = vec![0, 3];
        let (tuned, trace) = train_fixed(&m, &config, &data, &cfg, 2, None).unwrap();
        for r in 2..6 {
            assert!(tuned.layers[0].w.row(r).iter().all(|&v| v == 0.0));
            assert_eq!(tuned.layers[0].b.data()[r], 0.0);
        }
        assert_eq!(trace.rows.len(), 2);
        assert!(trace.rows.iter().all(|r| r.phase == Phase::Finetune));
        let (_, capped) = train_fixed(&m, &config, &data, &cfg, 10, Some(5)).unwrap();
        assert_eq!(capped.rows.len(), 2);
    }
}
