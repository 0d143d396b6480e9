use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use sbs_core::baselines::{ranking_csv, run_oracle_seed, run_prop1_experiment, DiscretizeCounts};
use sbs_core::costmodel::resnet18_layers;
use sbs_core::trainer::{finetune, pretrain, search, Stage};
use sbs_core::{
    discrete_cost, Checkpoint, CompressionConfig, CostOptions, CostReport, LayerSpec, Mlp, Mode,
};

use crate::config::{
    FinetuneFile, OracleFile, Prop1File, ReportFile, SearchFile, Source, SweepFile,
};
use crate::output::{RunDir, RunInputs};
use crate::{CliError, ReportArgs, RunArgs, SweepArgs};

const CHECKPOINT: &str = "checkpoint.json";
const CHECKPOINT_BLOB: &str = "checkpoint.bin";
const CONFIG_JSON: &str = "compression_config.json";
const METRICS: &str = "metrics.csv";
const SUMMARY: &str = "summary.json";

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn input(src: &Source, p: &Path) -> (String, PathBuf) {
    (p.display().to_string(), src.resolve(p))
}

fn write_checkpoint(run: &mut RunDir, ck: &Checkpoint) -> anyhow::Result<()> {
    let (manifest, blob) = ck.to_parts(CHECKPOINT_BLOB)?;
    run.write(CHECKPOINT_BLOB, &blob)?;
    run.write(CHECKPOINT, manifest.as_bytes())
}

/// Accuracy of `model` restricted to `config`, pruned groups zeroed.
fn fixed_accuracy(
    model: &Mlp,
    config: &CompressionConfig,
    group_size: usize,
    eval: &sbs_core::Dataset,
) -> anyhow::Result<(f64, f64)> {
    let mut masked = model.clone();
    masked.zero_pruned(config, group_size);
    Ok(masked.evaluate(eval, Mode::Fixed { config, group_size })?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchSummary {
    pub lambda: f64,
    pub bops: f64,
    pub bop_ratio: f64,
    pub memory_kb: f64,
    pub memory_ratio: f64,
    /// Searched configuration evaluated before fine-tuning.
    pub eval_ce: f64,
    pub eval_accuracy: f64,
    pub config: CompressionConfig,
}

/// Pre-train, search and write one run directory.
fn run_search(
    src: &Source,
    file: &SearchFile,
    inputs: RunInputs,
    dir: &Path,
) -> anyhow::Result<SearchSummary> {
    let cfg = &file.search;
    let (train, eval) = file.data.load(src, cfg.seed)?;
    let mut model = file.init_model(&train)?;
    pretrain(&mut model, &train, cfg)?;
    let out = search(&model, &train, cfg, Stage::Joint, None)?;
    let report = discrete_cost(
        &out.model.specs,
        &out.config,
        cfg.group_size,
        CostOptions::default(),
    )?;
    let (eval_ce, eval_accuracy) = fixed_accuracy(&out.model, &out.config, cfg.group_size, &eval)?;
    let summary = SearchSummary {
        lambda: cfg.lambda,
        bops: report.bops,
        bop_ratio: report.bop_ratio,
        memory_kb: report.memory_kb,
        memory_ratio: report.memory_ratio,
        eval_ce,
        eval_accuracy,
        config: out.config.clone(),
    };
    let mut run = RunDir::create(dir)?;
    write_checkpoint(
        &mut run,
        &Checkpoint {
            model: out.model,
            ladder: cfg.ladder.clone(),
            group_size: cfg.group_size,
            thresholds: out.thresholds,
            config: Some(out.config.clone()),
        },
    )?;
    run.write(CONFIG_JSON, (out.config.to_json()? + "\n").as_bytes())?;
    run.write(METRICS, out.trace.to_csv()?.as_bytes())?;
    run.write_json(SUMMARY, &summary)?;
    run.finish(inputs)?;
    Ok(summary)
}

fn load_search(args: &RunArgs) -> Result<(Source, SearchFile), CliError> {
    let src = Source::read(&args.config)?;
    let mut file: SearchFile = src.parse()?;
    if let Some(s) = args.seed {
        file.search.seed = s;
    }
    file.validate(&src)?;
    Ok((src, file))
}

fn data_inputs(src: &Source, data: &crate::config::DataSection) -> Vec<(String, PathBuf)> {
    data.file.iter().map(|f| input(src, f)).collect()
}

pub fn search_cmd(args: &RunArgs) -> Result<PathBuf, CliError> {
    let (src, file) = load_search(args)?;
    let inputs = RunInputs::new(
        "search",
        Some(file.search.seed),
        &file,
        &data_inputs(&src, &file.data),
    )
    .map_err(runtime)?;
    let dir = inputs.out_dir(args.out.as_deref());
    let s = run_search(&src, &file, inputs, &dir).map_err(runtime)?;
    println!(
        "search: {} BOPs ({:.2}x smaller), eval accuracy {:.4} before fine-tuning",
        s.bops, s.bop_ratio, s.eval_accuracy
    );
    for l in &s.config.layers {
        println!(
            "  {:<8} w{:<2} a{:<2} groups {:?}",
            l.name, l.w_bits, l.a_bits, l.kept_groups
        );
    }
    Ok(dir)
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<PathBuf, CliError> {
    let src = Source::read(&args.run.config)?;
    let mut file: SweepFile = src.parse()?;
    if let Some(s) = args.run.seed {
        file.search.seed = s;
    }
    file.validate(&src)?;
    if args.jobs == 0 {
        return Err(CliError::Validation("--jobs must be at least 1".into()));
    }
    let files = data_inputs(&src, &file.data);
    let inputs = RunInputs::new("sweep", Some(file.search.seed), &file, &files).map_err(runtime)?;
    let dir = inputs.out_dir(args.run.out.as_deref());
    let mut top = RunDir::create(&dir).map_err(runtime)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(runtime)?;
    let names: Vec<String> = file.lambdas.iter().map(|l| format!("lambda_{l}")).collect();
    let results: Vec<anyhow::Result<SearchSummary>> = pool.install(|| {
        file.lambdas
            .par_iter()
            .zip(&names)
            .map(|(&lambda, name)| {
                let run = file.at(lambda);
                let inputs = RunInputs::new("search", Some(run.search.seed), &run, &files)?;
                run_search(&src, &run, inputs, &dir.join(name))
                    .with_context(|| format!("lambda {lambda}"))
            })
            .collect()
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "lambda",
        "bops",
        "bop_ratio",
        "memory_kb",
        "eval_ce",
        "eval_accuracy",
        "run",
    ])
    .map_err(runtime)?;
    for (res, name) in results.into_iter().zip(&names) {
        let s = res.map_err(runtime)?;
        println!(
            "lambda {:<8} {:>14} BOPs  accuracy {:.4}",
            s.lambda, s.bops, s.eval_accuracy
        );
        w.write_record([
            s.lambda.to_string(),
            s.bops.to_string(),
            s.bop_ratio.to_string(),
            s.memory_kb.to_string(),
            s.eval_ce.to_string(),
            s.eval_accuracy.to_string(),
            name.clone(),
        ])
        .map_err(runtime)?;
        top.adopt(&format!("{name}/{}", crate::output::MANIFEST))
            .map_err(runtime)?;
    }
    let csv = w
        .into_inner()
        .map_err(|e| runtime(anyhow::anyhow!("{e}")))?;
    top.write("summary.csv", &csv).map_err(runtime)?;
    top.finish(inputs).map_err(runtime)?;
    Ok(dir)
}

pub fn finetune_cmd(args: &RunArgs) -> Result<PathBuf, CliError> {
    let src = Source::read(&args.config)?;
    let mut file: FinetuneFile = src.parse()?;
    if let Some(s) = args.seed {
        file.search.seed = s;
    }
    file.validate(&src)?;
    let ck_path = src.resolve(&file.checkpoint);
    let ck = Checkpoint::load(&ck_path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", ck_path.display())))?;
    let config = match &file.compression_config {
        Some(p) => {
            let path = src.resolve(p);
            CompressionConfig::load(&path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => ck.config.clone().ok_or_else(|| {
            src.invalid(
                None,
                "compression_config",
                "the checkpoint holds no configuration",
            )
        })?,
    };
    config
        .validate(&ck.model.specs, &ck.ladder, ck.group_size)
        .map_err(|e| {
            CliError::Validation(format!(
                "compression config does not fit the checkpoint: {e}"
            ))
        })?;
    let cfg = sbs_core::SearchRunConfig {
        ladder: ck.ladder.clone(),
        group_size: ck.group_size,
        ..file.search.clone()
    };

    let mut files = vec![input(&src, &file.checkpoint)];
    files.push((
        CHECKPOINT_BLOB.to_string(),
        ck_path.with_file_name(CHECKPOINT_BLOB),
    ));
    if let Some(p) = &file.compression_config {
        files.push(input(&src, p));
    }
    files.extend(data_inputs(&src, &file.data));
    let files: Vec<(String, PathBuf)> = files.into_iter().filter(|(_, p)| p.exists()).collect();
    let inputs = RunInputs::new("finetune", Some(cfg.seed), &file, &files).map_err(runtime)?;
    let dir = inputs.out_dir(args.out.as_deref());

    let (train, eval) = file.data.load(&src, cfg.seed).map_err(runtime)?;
    if train.dim() != ck.model.inputs() || train.classes != ck.model.classes() {
        return Err(CliError::Validation(format!(
            "data has {} features and {} classes, the checkpoint expects {} and {}",
            train.dim(),
            train.classes,
            ck.model.inputs(),
            ck.model.classes()
        )));
    }
    let (_, pre) = fixed_accuracy(&ck.model, &config, cfg.group_size, &eval).map_err(runtime)?;
    let ft = finetune(&ck.model, &config, &train, &eval, &cfg).map_err(runtime)?;
    let report = discrete_cost(
        &ck.model.specs,
        &config,
        cfg.group_size,
        CostOptions::default(),
    )
    .map_err(runtime)?;

    #[derive(Serialize)]
    struct FinetuneSummary {
        pre_finetune_accuracy: f64,
        accuracy: f64,
        bops: f64,
        bop_ratio: f64,
    }
    let summary = FinetuneSummary {
        pre_finetune_accuracy: pre,
        accuracy: ft.accuracy,
        bops: report.bops,
        bop_ratio: report.bop_ratio,
    };
    let result: anyhow::Result<()> = (|| {
        let mut run = RunDir::create(&dir)?;
        write_checkpoint(
            &mut run,
            &Checkpoint {
                model: ft.model,
                ladder: cfg.ladder.clone(),
                group_size: cfg.group_size,
                thresholds: ck.thresholds.clone(),
                config: Some(config.clone()),
            },
        )?;
        run.write(CONFIG_JSON, (config.to_json()? + "\n").as_bytes())?;
        run.write(METRICS, ft.trace.to_csv()?.as_bytes())?;
        run.write_json(SUMMARY, &summary)?;
        run.finish(inputs)?;
        Ok(())
    })();
    result.map_err(runtime)?;
    println!("finetune: accuracy {:.4} (was {:.4})", ft.accuracy, pre);
    Ok(dir)
}

/// `layer, w_bits, a_bits, pruning_rate, bops, memory_kb, bop_ratio,
/// memory_ratio` rows and a totals row.
pub fn report_csv(report: &CostReport, reference: &CostReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "w_bits",
        "a_bits",
        "pruning_rate",
        "bops",
        "memory_kb",
        "bop_ratio",
        "memory_ratio",
    ])?;
    for (l, r) in report.per_layer.iter().zip(&reference.per_layer) {
        w.write_record([
            l.name.clone(),
            l.w_bits.to_string(),
            l.a_bits.to_string(),
            l.pruning_rate.to_string(),
            l.bops.to_string(),
            l.memory_kb.to_string(),
            (r.bops / l.bops).to_string(),
            (r.memory_kb / l.memory_kb).to_string(),
        ])?;
    }
    w.write_record([
        "total".to_string(),
        String::new(),
        String::new(),
        String::new(),
        report.bops.to_string(),
        report.memory_kb.to_string(),
        report.bop_ratio.to_string(),
        report.memory_ratio.to_string(),
    ])?;
    Ok(String::from_utf8(
        w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?,
    )?)
}

pub fn report_cmd(args: &ReportArgs) -> Result<PathBuf, CliError> {
    let src = Source::read(&args.config)?;
    let file: ReportFile = src.parse()?;
    file.validate(&src)?;
    let bad_input =
        |p: &Path, e: &dyn std::fmt::Display| CliError::Validation(format!("{}: {e}", p.display()));
    let cfg_path = src.resolve(&file.compression_config);
    let config = CompressionConfig::load(&cfg_path).map_err(|e| bad_input(&cfg_path, &e))?;
    let mut files = vec![input(&src, &file.compression_config)];
    let mut group_size = file.group_size;
    let specs: Vec<LayerSpec> = if let Some(p) = &file.layers {
        let path = src.resolve(p);
        files.push(input(&src, p));
        let text = std::fs::read_to_string(&path).map_err(|e| bad_input(&path, &e))?;
        serde_json::from_str(&text).map_err(|e| bad_input(&path, &e))?
    } else if let Some(p) = &file.checkpoint {
        let path = src.resolve(p);
        files.push(input(&src, p));
        let ck = Checkpoint::load(&path).map_err(|e| bad_input(&path, &e))?;
        group_size = ck.group_size;
        ck.model.specs
    } else {
        resnet18_layers()
    };
    let opts = CostOptions {
        couple_in_channels: file.couple_in_channels,
    };
    let report = discrete_cost(&specs, &config, group_size, opts).map_err(|e| {
        CliError::Validation(format!(
            "compression config does not match the layer specs: {e}"
        ))
    })?;
    let reference = discrete_cost(
        &specs,
        &CompressionConfig::reference(&specs, group_size),
        group_size,
        opts,
    )
    .map_err(runtime)?;
    let csv = report_csv(&report, &reference).map_err(runtime)?;
    let inputs = RunInputs::new("report", None, &file, &files).map_err(runtime)?;
    let dir = inputs.out_dir(args.out.as_deref());
    let result: anyhow::Result<()> = (|| {
        let mut run = RunDir::create(&dir)?;
        run.write("report.csv", csv.as_bytes())?;
        run.write_json("report.json", &report)?;
        run.finish(inputs)?;
        Ok(())
    })();
    result.map_err(runtime)?;
    println!(
        "{:<16} {:>6} {:>6} {:>8} {:>16} {:>12}",
        "layer", "w_bits", "a_bits", "pruned", "BOPs", "memory KB"
    );
    for l in &report.per_layer {
        println!(
            "{:<16} {:>6} {:>6} {:>8.3} {:>16} {:>12.3}",
            l.name, l.w_bits, l.a_bits, l.pruning_rate, l.bops, l.memory_kb
        );
    }
    println!(
        "{:<16} {:>6} {:>6} {:>8} {:>16} {:>12.3}  BOP ratio {:.3}, memory ratio {:.3}",
        "total", "", "", "", report.bops, report.memory_kb, report.bop_ratio, report.memory_ratio
    );
    Ok(dir)
}

pub fn prop1_cmd(args: &RunArgs) -> Result<PathBuf, CliError> {
    let src = Source::read(&args.config)?;
    let mut file: Prop1File = src.parse()?;
    if let Some(s) = args.seed {
        file.seeds = (s..s + file.seeds.len() as u64).collect();
    }
    file.validate(&src)?;
    let inputs =
        RunInputs::new("prop1", file.seeds.first().copied(), &file, &[]).map_err(runtime)?;
    let dir = inputs.out_dir(args.out.as_deref());
    let report = run_prop1_experiment(&file.prop1, &file.seeds).map_err(runtime)?;

    #[derive(Serialize)]
    struct SeedSummary {
        seed: u64,
        single_path_final: f64,
        multi_path_final: f64,
        relative_gap: f64,
    }
    #[derive(Serialize)]
    struct Prop1Summary {
        seeds: Vec<SeedSummary>,
        max_relative_gap: f64,
        discretizations: DiscretizeCounts,
        reduction: f64,
    }
    let summary = Prop1Summary {
        seeds: report
            .seeds
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                single_path_final: s.single_final,
                multi_path_final: s.multi_final,
                relative_gap: s.relative_gap,
            })
            .collect(),
        max_relative_gap: report.max_relative_gap(),
        discretizations: report.counts,
        reduction: report.counts.reduction(),
    };
    let result: anyhow::Result<()> = (|| {
        let mut run = RunDir::create(&dir)?;
        run.write("prop1.csv", report.to_csv()?.as_bytes())?;
        run.write_json("prop1_summary.json", &summary)?;
        run.finish(inputs)?;
        Ok(())
    })();
    result.map_err(runtime)?;
    for s in &summary.seeds {
        println!(
            "seed {}: single-path {:.5}  multi-path {:.5}  gap {:.2}%",
            s.seed,
            s.single_path_final,
            s.multi_path_final,
            100.0 * s.relative_gap
        );
    }
    println!(
        "discretizations per step: single-path {} base + {} residual, multi-path {} full",
        report.counts.single_base, report.counts.single_residual, report.counts.multi_full
    );
    Ok(dir)
}

pub fn oracle_cmd(args: &RunArgs) -> Result<PathBuf, CliError> {
    let src = Source::read(&args.config)?;
    let mut file: OracleFile = src.parse()?;
    if let Some(s) = args.seed {
        file.seed = s;
    }
    file.validate(&src)?;
    let inputs = RunInputs::new("oracle", Some(file.seed), &file, &[]).map_err(runtime)?;
    let dir = inputs.out_dir(args.out.as_deref());
    let (result, ranking) = run_oracle_seed(&file.oracle, file.seed).map_err(runtime)?;
    let write: anyhow::Result<()> = (|| {
        let mut run = RunDir::create(&dir)?;
        run.write("ranking.csv", ranking_csv(&ranking)?.as_bytes())?;
        run.write_json("oracle.json", &result)?;
        run.finish(inputs)?;
        Ok(())
    })();
    write.map_err(runtime)?;
    println!(
        "oracle: {} configurations; joint search ranks {} (objective {:.5}), sequential ranks {} (objective {:.5}), best {:.5}",
        result.configs,
        result.joint_rank,
        result.joint.objective,
        result.sequential_rank,
        result.sequential.objective,
        result.best_objective
    );
    Ok(dir)
}
