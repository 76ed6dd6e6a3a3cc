mod common;

use std::process::Command;

use cogs_core::dataset::{Manifest, Split};
use cogs_core::eval::EvalSuite;
use cogs_core::pipeline::SamplingParams;
use cogs_core::raster::Raster;
use cogs_core::vq::Domain;
use cogs_service::commands;
use cogs_service::config::RunConfig;
use common::tiny_config;

#[test]
fn staged_training_and_offline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let sampling = SamplingParams { temperature: 1.0, top_k: 4 };
    let mut cfg = RunConfig {
        model_dir: dir.path().join("models"),
        data_dir: dir.path().join("data"),
        training: tiny_config(),
        sampling,
        quality_multiplier: 1e6,
        ..RunConfig::default()
    };
    cfg.eval.sampling = sampling;
    commands::build_data(&cfg, &cfg.data_dir).unwrap();
    let manifest = Manifest::load(&cfg.data_dir).unwrap();

    assert!(commands::train_transformer_stage(&cfg).is_err(), "needs saved tokenisers");
    commands::train_vq_stage(&cfg, Domain::Sketch).unwrap();
    commands::train_vq_stage(&cfg, Domain::Image).unwrap();
    commands::train_transformer_stage(&cfg).unwrap();
    let name = manifest.class_names[0].clone();
    commands::train_vae_stage(&cfg, &name).unwrap();
    assert!(commands::train_vae_stage(&cfg, "no-such-class").is_err());
    assert!(cfg.model_dir.join("index_0.cogs").is_file());

    let val = manifest.split(Split::Val);
    let (img, sk) = val.records.iter().find(|(img, _)| img.class_label == 0).unwrap();
    let sketch = dir.path().join("sketch.png");
    let style = dir.path().join("style.png");
    Raster::from_mask(&sk.pixels).save_png(&sketch).unwrap();
    img.pixels.save_png(&style).unwrap();
    let out = dir.path().join("out.png");
    commands::generate_file(&cfg, &sketch, &style, &name, 3, &out).unwrap();
    let first = std::fs::read(&out).unwrap();
    commands::generate_file(&cfg, &sketch, &style, &name, 3, &out).unwrap();
    assert_eq!(first, std::fs::read(&out).unwrap());

    let found = commands::retrieve_file(&cfg, &out, &name, 3).unwrap();
    assert_eq!(found.hits.len(), 3);
    let neighbor = found.hits[0].id.clone();
    let report = commands::interpolate_file(&cfg, &out, &name, &neighbor, 3, &dir.path().join("interp")).unwrap();
    assert_eq!(report["requested"], 3);
    assert_eq!(report["results"].as_array().unwrap().len(), 3);
    assert!(commands::interpolate_file(&cfg, &out, &name, "no-such-id", 3, &dir.path().join("interp")).is_err());

    let eval_out = dir.path().join("structure.json");
    let report = commands::eval_suite(&cfg, EvalSuite::Structure, &eval_out).unwrap();
    assert_eq!(report["suite"], "structure");
    assert!(eval_out.is_file());
}

#[test]
fn binary_builds_data_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[training.corpus]\nn_classes = 2\nper_class_count = 8\nval_fraction = 0.5\n").unwrap();
    let out = dir.path().join("data");
    let run = Command::new(env!("CARGO_BIN_EXE_cogs"))
        .env("COGS_CONFIG", &config)
        .args(["data", "build", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = Manifest::load(&out).unwrap();
    assert_eq!(manifest.len(), 16);

    let bad = Command::new(env!("CARGO_BIN_EXE_cogs"))
        .args(["--config", "/no/such/file.toml", "data", "build"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
