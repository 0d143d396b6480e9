//! Comparison machinery: the multi-path (softmax-mixed) quantizer, the
//! linear-regression comparison of single-path and multi-path training, and
//! a brute-force configuration oracle for tiny networks.

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compression::{CompressionConfig, LayerConfig};
use crate::costmodel::search_space_size;
use crate::data::{gaussian_blobs, BlobsConfig, Dataset};
use crate::error::{Error, Result};
use crate::gates::gated_code_var;
use crate::model::{Mlp, ModelConfig};
use crate::optim::Sgd;
use crate::quantizer::{denormalize_wt_var, discretize_var, normalize_wt_var, BitLadder};
use crate::tensor::Tensor;
use crate::trainer::{
    pretrain, score_config, search, sequential_search, ConfigScore, SearchRunConfig, Stage,
};

/// `y = w* . x + noise` with `x ~ N(0, x_std^2 I)` and `w* ~ U[0, 1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTask {
    pub x: Tensor,
    pub y: Tensor,
    pub w_star: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub samples: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub x_std: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            dim: 10,
            noise_std: 1.0,
            x_std: 1.0,
        }
    }
}

impl RegressionTask {
    pub fn generate(cfg: &RegressionConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_star = (0..cfg.dim).map(|_| rng.random::<f64>()).collect();
        Self::with_weights(cfg, w_star, seed)
    }

    /// Same sampling with caller-chosen true weights.
    pub fn with_weights(cfg: &RegressionConfig, w_star: Vec<f64>, seed: u64) -> Result<Self> {
        if cfg.samples == 0 || cfg.dim == 0 || w_star.len() != cfg.dim {
            return Err(Error::invalid(
                "regression",
                "need samples > 0 and dim = len(w*) > 0",
            ));
        }
        if !(cfg.noise_std >= 0.0 && cfg.x_std > 0.0) {
            return Err(Error::invalid(
                "noise_std",
                "noise must be >= 0 and x_std > 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let xd = Normal::new(0.0, cfg.x_std).expect("positive");
        let x: Vec<f64> = (0..cfg.samples * cfg.dim)
            .map(|_| xd.sample(&mut rng))
            .collect();
        let y: Vec<f64> = x
            .chunks(cfg.dim)
            .map(|row| {
                let clean: f64 = row.iter().zip(&w_star).map(|(a, b)| a * b).sum();
                let e = if cfg.noise_std > 0.0 {
                    Normal::new(0.0, cfg.noise_std)
                        .expect("positive")
                        .sample(&mut rng)
                } else {
                    0.0
                };
                clean + e
            })
            .collect();
        Ok(Self {
            x: Tensor::matrix(cfg.samples, cfg.dim, x)?,
            y: Tensor::matrix(cfg.samples, 1, y)?,
            w_star,
            noise_std: cfg.noise_std,
        })
    }

    /// Mean squared error of `w` over the whole task.
    pub fn loss(&self, w: &Tensor) -> Result<f64> {
        let w = w.clone().reshape(vec![w.len(), 1])?;
        let pred = self.x.matmul(&w)?;
        Ok(pred.zip_map(&self.y, |p, y| (p - y) * (p - y))?.mean())
    }
}

/// `sum_i p_i D(z, s_i)` with fixed probabilities `p`.
pub fn multipath_code_var(g: &mut Graph, z: Var, ladder: &BitLadder, probs: Var) -> Result<Var> {
    let k = ladder.len();
    if g.value(probs).len() != k {
        return Err(Error::invalid(
            "probs",
            format!("{} probabilities for {k} rungs", g.value(probs).len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (i, s) in ladder.step_sizes().into_iter().enumerate() {
        let d = discretize_var(g, z, s)?;
        let p = g.index(probs, i)?;
        let t = g.mul(d, p)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.expect("non-empty ladder"))
}

/// Softmax-weighted mixture of per-bitwidth quantizations of one shared
/// weight tensor.
pub fn multipath_quantized_weight(
    g: &mut Graph,
    w: Var,
    v_w: Var,
    ladder: &BitLadder,
    path_logits: Var,
) -> Result<Var> {
    let z = normalize_wt_var(g, w, v_w)?;
    let p = g.softmax(path_logits);
    let code = multipath_code_var(g, z, ladder, p)?;
    denormalize_wt_var(g, code, v_w)
}

/// Gated single-path quantization of `w`.
pub fn singlepath_quantized_weight(
    g: &mut Graph,
    w: Var,
    v_w: Var,
    ladder: &BitLadder,
    alphas: &[Var],
) -> Result<Var> {
    let z = normalize_wt_var(g, w, v_w)?;
    let code = gated_code_var(g, z, ladder, alphas)?.code;
    denormalize_wt_var(g, code, v_w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Config {
    pub task: RegressionConfig,
    pub ladder: BitLadder,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gate: f64,
    pub momentum: f64,
    /// Weight interval; `1` covers `w* in [0, 1]`.
    pub v_w: f64,
    pub record_every: usize,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            task: RegressionConfig::default(),
            ladder: BitLadder::default(),
            steps: 1500,
            batch_size: 128,
            lr: 0.01,
            lr_gate: 0.01,
            momentum: 0.9,
            v_w: 1.0,
            record_every: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    SinglePath,
    MultiPath,
}

/// Per-step discretization calls of each scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizeCounts {
    /// Single path: the base rung.
    pub single_base: usize,
    /// Single path: residual offsets.
    pub single_residual: usize,
    /// Multi path: one full discretization per rung.
    pub multi_full: usize,
    /// Parameters beyond the shared weights.
    pub single_extra_params: usize,
    pub multi_extra_params: usize,
}

impl DiscretizeCounts {
    /// Saving of one maintained quantization path against `K`.
    pub fn reduction(&self) -> f64 {
        self.single_residual as f64 / self.multi_full as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Seed {
    pub seed: u64,
    pub single_final: f64,
    pub multi_final: f64,
    /// `|single - multi| / multi`.
    pub relative_gap: f64,
    /// `(step, single loss, multi loss)` on the full task.
    pub trajectory: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub seeds: Vec<Prop1Seed>,
    pub counts: DiscretizeCounts,
}

impl Prop1Report {
    pub fn max_relative_gap(&self) -> f64 {
        self.seeds
            .iter()
            .map(|s| s.relative_gap)
            .fold(0.0, f64::max)
    }

    /// `seed, step, single_loss, multi_loss` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "step", "single_path_loss", "multi_path_loss"])?;
        for s in &self.seeds {
            for &(step, a, b) in &s.trajectory {
                w.write_record([
                    s.seed.to_string(),
                    step.to_string(),
                    a.to_string(),
                    b.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

struct Regressor {
    w: Tensor,
    /// Gate thresholds or path logits.
    extra: Tensor,
}

impl Regressor {
    fn quantized(
        &self,
        g: &mut Graph,
        scheme: Scheme,
        ladder: &BitLadder,
        v_w: f64,
    ) -> Result<(Var, Var, Var)> {
        let w = g.param(self.w.clone());
        let v = g.constant(Tensor::scalar(v_w));
        let extra = g.param(self.extra.clone());
        let q = match scheme {
            Scheme::SinglePath => {
                let alphas: Vec<Var> = (0..ladder.len() - 1)
                    .map(|i| g.index(extra, i))
                    .collect::<Result<_>>()?;
                singlepath_quantized_weight(g, w, v, ladder, &alphas)?
            }
            Scheme::MultiPath => multipath_quantized_weight(g, w, v, ladder, extra)?,
        };
        Ok((q, w, extra))
    }

    fn full_loss(
        &self,
        task: &RegressionTask,
        scheme: Scheme,
        ladder: &BitLadder,
        v_w: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let (q, _, _) = self.quantized(&mut g, scheme, ladder, v_w)?;
        task.loss(g.value(q))
    }
}

fn train_regressor(
    task: &RegressionTask,
    cfg: &Prop1Config,
    scheme: Scheme,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let d = task.w_star.len();
    let k = cfg.ladder.len();
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(2);
    let w0: Vec<f64> = (0..d).map(|_| init.random_range(-0.1..0.1)).collect();
    // A one-rung ladder has no gates; keep a placeholder threshold.
    let extra = match scheme {
        Scheme::SinglePath => (k - 1).max(1),
        Scheme::MultiPath => k,
    };
    let mut model = Regressor {
        w: Tensor::vector(w0),
        extra: Tensor::zeros(&[extra]),
    };
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(3);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, false);
    let mut gopt = Sgd::new(cfg.lr_gate, cfg.momentum, false);
    let n = task.x.rows();
    let mut out = Vec::new();
    for step in 0..=cfg.steps {
        if step % cfg.record_every.max(1) == 0 || step == cfg.steps {
            out.push((step, model.full_loss(task, scheme, &cfg.ladder, cfg.v_w)?));
        }
        if step == cfg.steps {
            break;
        }
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batches.random_range(0..n))
            .collect();
        let mut g = Graph::new();
        let (q, w, extra) = model.quantized(&mut g, scheme, &cfg.ladder, cfg.v_w)?;
        let x = g.constant(task.x.select_rows(&idx));
        let y = g.constant(task.y.select_rows(&idx));
        let pred = matvec(&mut g, x, q)?;
        let err = g.sub(pred, y)?;
        let sq = g.square(err);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        opt.step("w", &mut model.w, &grads.wrt(w));
        gopt.step("extra", &mut model.extra, &grads.wrt(extra));
    }
    Ok(out)
}

/// `[n, d] x [d] -> [n, 1]`.
fn matvec(g: &mut Graph, x: Var, v: Var) -> Result<Var> {
    let d = g.value(v).len();
    let ones = g.constant(Tensor::full(&[1, d], 1.0));
    let scaled = g.mul_cols(x, v)?;
    let t = g.transpose(ones)?;
    g.matmul(scaled, t)
}

/// Train both schemes from the same initialization on each seed.
pub fn run_prop1_experiment(cfg: &Prop1Config, seeds: &[u64]) -> Result<Prop1Report> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let task = RegressionTask::generate(&cfg.task, seed)?;
        let single = train_regressor(&task, cfg, Scheme::SinglePath, seed)?;
        let multi = train_regressor(&task, cfg, Scheme::MultiPath, seed)?;
        let (sf, mf) = (
            single.last().expect("recorded").1,
            multi.last().expect("recorded").1,
        );
        out.push(Prop1Seed {
            seed,
            single_final: sf,
            multi_final: mf,
            relative_gap: (sf - mf).abs() / mf,
            trajectory: single
                .iter()
                .zip(&multi)
                .map(|(a, b)| (a.0, a.1, b.1))
                .collect(),
        });
    }
    Ok(Prop1Report {
        seeds: out,
        counts: discretize_counts(&cfg.ladder)?,
    })
}

/// Count discretization nodes in one forward of each scheme.
pub fn discretize_counts(ladder: &BitLadder) -> Result<DiscretizeCounts> {
    let k = ladder.len();
    let w = Tensor::vector(vec![0.3, -0.2, 0.9]);
    let mut g = Graph::new();
    let wv = g.param(w.clone());
    let v = g.constant(Tensor::scalar(1.0));
    let alphas: Vec<Var> = (1..k).map(|_| g.param(Tensor::scalar(0.0))).collect();
    singlepath_quantized_weight(&mut g, wv, v, ladder, &alphas)?;
    let single_total = g.count_ops("discretize");

    let mut g = Graph::new();
    let wv = g.param(w);
    let v = g.constant(Tensor::scalar(1.0));
    let logits = g.param(Tensor::zeros(&[k]));
    multipath_quantized_weight(&mut g, wv, v, ladder, logits)?;
    let multi_full = g.count_ops("discretize");
    Ok(DiscretizeCounts {
        single_base: 1,
        single_residual: single_total - 1,
        multi_full,
        single_extra_params: k - 1,
        multi_extra_params: k,
    })
}

/// One configuration and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub index: usize,
    pub config: CompressionConfig,
    pub score: ConfigScore,
}

pub const ORACLE_BUDGET: u64 = 100_000;

/// Groups ordered by decreasing mean magnitude of the effective weights,
/// ties by index.
fn group_order(model: &Mlp, layer: usize, group_size: usize) -> Vec<usize> {
    let m = crate::gates::group_metrics(&model.effective_weight(layer), group_size);
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    idx
}

/// Per-layer choices: (w_bits, a_bits, kept groups).
fn layer_options(
    model: &Mlp,
    layer: usize,
    ladder: &BitLadder,
    group_size: usize,
) -> Vec<LayerConfig> {
    let spec = &model.specs[layer];
    let bits: Vec<u32> = match spec.fixed_bits {
        Some(b) => vec![b],
        None => ladder.bits().to_vec(),
    };
    let groups = spec.groups(group_size);
    let order = group_order(model, layer, group_size);
    let keeps: Vec<Vec<usize>> = if spec.prunable {
        (1..=groups)
            .map(|n| {
                let mut k = order[..n].to_vec();
                k.sort_unstable();
                k
            })
            .collect()
    } else {
        vec![(0..groups).collect()]
    };
    let mut out = Vec::with_capacity(bits.len() * bits.len() * keeps.len());
    for &w in &bits {
        for &a in &bits {
            for k in &keeps {
                out.push(LayerConfig {
                    name: spec.name.clone(),
                    w_bits: w,
                    a_bits: a,
                    kept_groups: k.clone(),
                });
            }
        }
    }
    out
}

/// Every configuration of the network: `K^2` bit choices and `G` group
/// counts per layer, keeping the strongest groups of the given model.
pub fn enumerate_configs(
    model: &Mlp,
    ladder: &BitLadder,
    group_size: usize,
) -> Result<Vec<CompressionConfig>> {
    let count = search_space_size(&model.specs, ladder, group_size);
    if count > BigUint::from(ORACLE_BUDGET) {
        return Err(Error::OverBudget {
            count: count.to_string(),
            budget: ORACLE_BUDGET,
        });
    }
    let options: Vec<Vec<LayerConfig>> = (0..model.layers.len())
        .map(|l| layer_options(model, l, ladder, group_size))
        .collect();
    let total: usize = options.iter().map(|o| o.len()).product();
    Ok((0..total)
        .map(|mut i| {
            let mut layers = Vec::with_capacity(options.len());
            for opts in options.iter().rev() {
                layers.push(opts[i % opts.len()].clone());
                i /= opts.len();
            }
            layers.reverse();
            CompressionConfig { layers }
        })
        .collect())
}

/// Score every configuration after a `steps`-step fine-tune from `model` and
/// rank them: lower objective first, then fewer BOPs, then the config itself.
pub fn brute_force_configs(
    model: &Mlp,
    train: &Dataset,
    eval: &Dataset,
    cfg: &SearchRunConfig,
    steps: usize,
) -> Result<Vec<RankedConfig>> {
    let configs = enumerate_configs(model, &cfg.ladder, cfg.group_size)?;
    let scores: Vec<ConfigScore> = configs
        .par_iter()
        .map(|c| score_config(model, c, train, eval, cfg, steps))
        .collect::<Result<_>>()?;
    let mut ranked: Vec<RankedConfig> = configs
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (config, score))| RankedConfig {
            index,
            config,
            score,
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.score
            .objective
            .total_cmp(&b.score.objective)
            .then(a.score.bops.total_cmp(&b.score.bops))
            .then(a.config.cmp(&b.config))
    });
    Ok(ranked)
}

/// 1-based position `objective` would take in `ranking`.
pub fn rank_of(objective: f64, ranking: &[RankedConfig]) -> usize {
    1 + ranking
        .iter()
        .filter(|r| r.score.objective < objective)
        .count()
}

/// `rank, index, objective, ce_loss, R, bops, config` rows.
pub fn ranking_csv(ranking: &[RankedConfig]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "index",
        "objective",
        "ce_loss",
        "R",
        "bops",
        "config",
    ])?;
    for (i, r) in ranking.iter().enumerate() {
        let desc: Vec<String> = r
            .config
            .layers
            .iter()
            .map(|l| {
                let groups: Vec<String> = l.kept_groups.iter().map(|g| g.to_string()).collect();
                format!("{}:w{}a{}g{}", l.name, l.w_bits, l.a_bits, groups.join("+"))
            })
            .collect();
        w.write_record([
            (i + 1).to_string(),
            r.index.to_string(),
            r.score.objective.to_string(),
            r.score.ce_loss.to_string(),
            r.score.r.to_string(),
            r.score.bops.to_string(),
            desc.join(" "),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// The tiny-net fixture used to check the gradient search against the
/// brute-force ranking: two layers of 4 units, single-channel groups and a
/// two-rung ladder, which gives `(2·2·4)^2 = 256` configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleFixture {
    pub data: BlobsConfig,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Fine-tune steps spent on each configuration before scoring it.
    pub score_steps: usize,
    pub run: SearchRunConfig,
}

impl Default for OracleFixture {
    fn default() -> Self {
        Self {
            data: BlobsConfig {
                samples: 400,
                dim: 8,
                classes: 4,
                spread: 0.5,
            },
            hidden: 4,
            train_fraction: 0.75,
            score_steps: 50,
            run: SearchRunConfig {
                lambda: 0.1,
                epochs_pretrain: 40,
                epochs_search: 40,
                lr_threshold: 0.01,
                group_size: 1,
                ladder: BitLadder::new(vec![2, 4]).expect("valid ladder"),
                ..SearchRunConfig::default()
            },
        }
    }
}

/// Where the searched configurations of one seed land in the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSeed {
    pub seed: u64,
    pub configs: usize,
    pub best_objective: f64,
    pub joint: ConfigScore,
    pub joint_rank: usize,
    pub joint_config: CompressionConfig,
    pub sequential: ConfigScore,
    pub sequential_rank: usize,
    pub sequential_config: CompressionConfig,
}

impl OracleSeed {
    /// Rank as a fraction of the space, 1/n for the best.
    pub fn joint_percentile(&self) -> f64 {
        self.joint_rank as f64 / self.configs as f64
    }
}

/// Pretrain the fixture net for `seed`, run the joint and the sequential
/// search, and rank both against every configuration.
pub fn run_oracle_seed(fx: &OracleFixture, seed: u64) -> Result<(OracleSeed, Vec<RankedConfig>)> {
    let cfg = SearchRunConfig {
        seed,
        ..fx.run.clone()
    };
    cfg.validate()?;
    let data = gaussian_blobs(&fx.data, seed)?;
    let (train, eval) = data.split(fx.train_fraction);
    let mcfg = ModelConfig {
        hidden: vec![fx.hidden],
        prunable_output: true,
        pin_first_last: None,
    };
    let mut model = Mlp::seeded(
        data.dim(),
        data.classes,
        &mcfg,
        cfg.weight_normalization,
        seed,
    )?;
    pretrain(&mut model, &train, &cfg)?;
    let joint = search(&model, &train, &cfg, Stage::Joint, None)?;
    let seq = sequential_search(&model, &train, &cfg)?;
    let ranking = brute_force_configs(&model, &train, &eval, &cfg, fx.score_steps)?;
    let js = score_config(&model, &joint.config, &train, &eval, &cfg, fx.score_steps)?;
    let ss = score_config(&model, &seq.config, &train, &eval, &cfg, fx.score_steps)?;
    let out = OracleSeed {
        seed,
        configs: ranking.len(),
        best_objective: ranking[0].score.objective,
        joint_rank: rank_of(js.objective, &ranking),
        joint: js,
        joint_config: joint.config,
        sequential_rank: rank_of(ss.objective, &ranking),
        sequential: ss,
        sequential_config: seq.config,
    };
    Ok((out, ranking))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{discretize, step_size};

    #[test]
    fn one_hot_paths_match_gate_prefixes() {
        let ladder = BitLadder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::vector((0..200).map(|_| rng.random::<f64>()).collect());
        for j in 0..ladder.len() {
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let mut p = vec![0.0; ladder.len()];
            p[j] = 1.0;
            let probs = g.constant(Tensor::vector(p));
            let multi = multipath_code_var(&mut g, zv, &ladder, probs).unwrap();
            let alphas: Vec<Var> = (1..ladder.len())
                .map(|i| {
                    g.constant(Tensor::scalar(if i <= j {
                        f64::NEG_INFINITY
                    } else {
                        f64::INFINITY
                    }))
                })
                .collect();
            let single = gated_code_var(&mut g, zv, &ladder, &alphas).unwrap().code;
            assert_eq!(g.value(multi), g.value(single), "rung {j}");
            let direct = discretize(&z, step_size(ladder.bits()[j])).unwrap();
            assert_eq!(g.value(multi), &direct);
        }
    }

    #[test]
    fn uniform_mixture_worked_value() {
        let ladder = BitLadder::new(vec![2, 4]).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.55));
        let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let q = multipath_code_var(&mut g, z, &ladder, p).unwrap();
        assert!((g.scalar_value(q) - 0.6).abs() < 1e-15);
    }

    fn mixed_loss(logits: &[f64]) -> (f64, Vec<f64>) {
        let ladder = BitLadder::default();
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.31, -0.72, 0.05, 0.93]));
        let v = g.constant(Tensor::scalar(1.0));
        let l = g.param(Tensor::vector(logits.to_vec()));
        let q = multipath_quantized_weight(&mut g, w, v, &ladder, l).unwrap();
        let c = g.constant(Tensor::vector(vec![1.5, -0.4, 2.0, 0.7]));
        let t = g.mul(q, c).unwrap();
        let sq = g.square(t);
        let out = g.sum(sq);
        let grads = g.backward(out).unwrap();
        (g.scalar_value(out), grads.wrt(l).into_data())
    }

    #[test]
    fn path_logit_gradient_matches_finite_differences() {
        let logits = [0.2, -0.5, 0.9];
        let (_, grad) = mixed_loss(&logits);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = logits;
            up[i] += h;
            let mut dn = logits;
            dn[i] -= h;
            let fd = (mixed_loss(&up).0 - mixed_loss(&dn).0) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-5, "{i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn representable_optimum_is_reached_by_both() {
        let cfg = Prop1Config {
            task: RegressionConfig {
                samples: 2000,
                dim: 4,
                noise_std: 0.0,
                x_std: 1.0,
            },
            steps: 1500,
            ..Prop1Config::default()
        };
        let third = 1.0 / 3.0;
        let task =
            RegressionTask::with_weights(&cfg.task, vec![third, 1.0, third, 1.0], 4).unwrap();
        for scheme in [Scheme::SinglePath, Scheme::MultiPath] {
            let traj = train_regressor(&task, &cfg, scheme, 4).unwrap();
            let last = traj.last().unwrap().1;
            assert!(last < 1e-6, "{scheme:?}: {last}");
        }
    }

    #[test]
    fn counts_show_the_residual_saving() {
        let c = discretize_counts(&BitLadder::default()).unwrap();
        assert_eq!((c.single_base, c.single_residual, c.multi_full), (1, 2, 3));
        assert_eq!((c.single_extra_params, c.multi_extra_params), (2, 3));
        assert!((c.reduction() - 2.0 / 3.0).abs() < 1e-15);
    }

    fn net(hidden: Vec<usize>, prunable_output: bool) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            hidden,
            prunable_output,
            pin_first_last: None,
        };
        Mlp::new(3, 4, &cfg, false, &mut rng).unwrap()
    }

    #[test]
    fn oracle_counts() {
        let ladder = BitLadder::new(vec![2, 4]).unwrap();
        let m = net(vec![4], true);
        let all = enumerate_configs(&m, &ladder, 1).unwrap();
        assert_eq!(all.len(), 256);
        assert_eq!(
            BigUint::from(all.len()),
            search_space_size(&m.specs, &ladder, 1)
        );
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 256);
        for c in &all {
            c.validate(&m.specs, &ladder, 1).unwrap();
        }

        let single = net(vec![], false);
        let one = BitLadder::new(vec![4]).unwrap();
        assert_eq!(enumerate_configs(&single, &one, 4).unwrap().len(), 1);
    }

    #[test]
    fn oracle_rejects_large_spaces() {
        let m = net(vec![64, 64], true);
        assert!(matches!(
            enumerate_configs(&m, &BitLadder::default(), 1),
            Err(Error::OverBudget { .. })
        ));
    }

    #[test]
    fn zero_lambda_ranks_by_loss() {
        let data = gaussian_blobs(
            &BlobsConfig {
                samples: 60,
                dim: 3,
                classes: 4,
                spread: 0.5,
            },
            2,
        )
        .unwrap();
        let (train, eval) = data.split(0.5);
        let mut m = net(vec![2], false);
        let cfg = SearchRunConfig {
            lambda: 0.0,
            group_size: 1,
            epochs_pretrain: 5,
            ladder: BitLadder::new(vec![2, 4]).unwrap(),
            ..SearchRunConfig::default()
        };
        pretrain(&mut m, &train, &cfg).unwrap();
        let ranking = brute_force_configs(&m, &train, &eval, &cfg, 5).unwrap();
        assert_eq!(ranking.len(), 4 * 2 * 4);
        let best = ranking[0].score.ce_loss;
        assert!(ranking.iter().all(|r| best <= r.score.ce_loss));
        assert!(ranking
            .windows(2)
            .all(|w| w[0].score.objective <= w[1].score.objective));
        let csv = ranking_csv(&ranking).unwrap();
        assert_eq!(csv.lines().count(), ranking.len() + 1);
        assert_eq!(rank_of(best, &ranking), 1);
    }
}
