//! Fixed-seed runs on the two-class toy task. The searched configuration is
//! pinned in `fixtures/golden_search_config.json`; set `SBS_BLESS=1` to
//! rewrite it after an intentional change.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbs_core::trainer::{pretrain, run_pipeline, search, Stage};
use sbs_core::{
    discrete_cost, gaussian_blobs, BlobsConfig, CompressionConfig, CostOptions, Dataset, Mlp,
    ModelConfig, SearchRunConfig,
};

fn toy() -> (Mlp, Dataset, Dataset, SearchRunConfig) {
    let data = gaussian_blobs(
        &BlobsConfig {
            samples: 300,
            dim: 6,
            classes: 2,
            spread: 0.8,
        },
        0,
    )
    .unwrap();
    let (train, eval) = data.split(0.8);
    let cfg = SearchRunConfig {
        epochs_pretrain: 15,
        epochs_search: 8,
        epochs_finetune: 5,
        group_size: 2,
        ..SearchRunConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Mlp::new(
        6,
        2,
        &ModelConfig {
            hidden: vec![8],
            ..ModelConfig::default()
        },
        false,
        &mut rng,
    )
    .unwrap();
    (model, train, eval, cfg)
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_search_config.json")
}

#[test]
fn search_config_matches_golden() {
    let (model, train, eval, cfg) = toy();
    let out = run_pipeline(&model, &train, &eval, &cfg).unwrap();
    let json = out.search.config.to_json().unwrap() + "\n";
    let path = fixture_path();
    if std::env::var_os("SBS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &json).unwrap();
    }
    let golden =
        std::fs::read_to_string(&path).expect("golden fixture missing; run with SBS_BLESS=1 once");
    assert_eq!(json, golden);
    let again = run_pipeline(&model, &train, &eval, &cfg).unwrap();
    assert_eq!(again.trace.to_csv().unwrap(), out.trace.to_csv().unwrap());
}

#[test]
fn finetune_recovers_accuracy() {
    let (model, train, eval, cfg) = toy();
    let out = run_pipeline(&model, &train, &eval, &cfg).unwrap();
    assert!(
        out.accuracy >= out.pre_finetune_accuracy,
        "{} < {}",
        out.accuracy,
        out.pre_finetune_accuracy
    );
}

#[test]
fn bops_fall_as_lambda_rises() {
    let (mut model, train, _, cfg) = toy();
    pretrain(&mut model, &train, &cfg).unwrap();
    let bops: Vec<f64> = [0.0, 0.01, 0.1, 1.0]
        .iter()
        .map(|&lambda| {
            let c = SearchRunConfig {
                lambda,
                ..cfg.clone()
            };
            let out = search(&model, &train, &c, Stage::Joint, None).unwrap();
            discrete_cost(
                &model.specs,
                &out.config,
                c.group_size,
                CostOptions::default(),
            )
            .unwrap()
            .bops
        })
        .collect();
    assert!(bops.windows(2).all(|w| w[1] <= w[0]), "{bops:?}");
    let full = discrete_cost(
        &model.specs,
        &CompressionConfig::reference(&model.specs, cfg.group_size),
        cfg.group_size,
        CostOptions::default(),
    )
    .unwrap()
    .bops;
    assert!(bops[0] < full);
}
