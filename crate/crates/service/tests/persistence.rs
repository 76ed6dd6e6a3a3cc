mod common;

use cogs_core::dataset::Split;
use cogs_core::pipeline::Pipeline;
use cogs_core::raster::Raster;
use cogs_service::config::RunConfig;
use cogs_service::state::AppState;
use common::fixture;

fn probe() -> (Raster, Raster) {
    let val = fixture().manifest.split(Split::Val);
    let (img, sk) = &val.records[0];
    (Raster::from_mask(&sk.pixels), img.pixels.clone())
}

#[test]
fn save_load_generate_is_bit_exact() {
    let f = fixture();
    let loaded = Pipeline::load(&f.config.model_dir).unwrap();
    assert_eq!(loaded.config_hash(), f.pipeline.config_hash());
    let (sketch, style) = probe();
    let a = f.pipeline.generate(&sketch, &style, 0, f.config.sampling, 42).unwrap();
    let b = loaded.generate(&sketch, &style, 0, f.config.sampling, 42).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.image.data, b.image.data);
    let pa = f.pipeline.embed_tokens(0, &[&a.tokens]).unwrap();
    let pb = loaded.embed_tokens(0, &[&b.tokens]).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn truncated_checkpoint_fails_to_load() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.pipeline.save(dir.path()).unwrap();
    let path = dir.path().join("transformer.cogs");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(Pipeline::load(dir.path()).is_err());
    std::fs::write(&path, &bytes[..20]).unwrap();
    assert!(Pipeline::load(dir.path()).is_err());
}

#[test]
fn server_state_loads_from_config() {
    let f = fixture();
    let state = AppState::load(f.config.clone()).unwrap();
    assert_eq!(state.pipeline.config_hash(), f.pipeline.config_hash());
    let val_per_class = f.manifest.split(Split::Val).images().filter(|r| r.class_label == 0).count();
    assert_eq!(state.read().indices[&0].len(), val_per_class);
}

#[test]
fn missing_files_refuse_startup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { model_dir: dir.path().join("m"), data_dir: dir.path().join("d"), ..RunConfig::default() };
    let err = AppState::load(cfg).err().expect("startup must fail");
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn mismatched_manifest_refuses_startup() {
    let f = fixture();
    let mut manifest = f.manifest.clone();
    manifest.class_names.reverse();
    assert!(AppState::new(f.pipeline.clone(), manifest, f.config.clone()).is_err());
}

#[test]
fn run_config_reads_toml_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        r#"
model_dir = "/srv/models"
quality_multiplier = 2.0

[server]
port = 9000

[sampling]
temperature = 0.8
top_k = 8

[training.transformer]
epochs = 3
"#,
    )
    .unwrap();
    let cfg = RunConfig::load(Some(&path)).unwrap();
    assert_eq!(cfg.model_dir, std::path::PathBuf::from("/srv/models"));
    assert_eq!(cfg.server.port, 9000);
    assert_eq!(cfg.server.host, "127.0.0.1");
    assert_eq!(cfg.sampling.top_k, 8);
    assert_eq!(cfg.training.transformer.epochs, 3);
    assert_eq!(cfg.training.transformer.layers, 4);
    assert_eq!(cfg.style_shortlist, 5);

    std::fs::write(&path, "quality_multiplier = -1.0\n").unwrap();
    assert!(RunConfig::load(Some(&path)).is_err());
    std::fs::write(&path, "[sampling]\ntop_k = 0\ntemperature = 1.0\n").unwrap();
    assert!(RunConfig::load(Some(&path)).is_err());
    std::fs::write(&path, "not = [valid").unwrap();
    assert!(RunConfig::load(Some(&path)).is_err());
    assert_eq!(RunConfig::load(None).unwrap(), RunConfig::default());
}
