use std::fs;
use std::path::Path;

use bucketrl::checkpoint::{load_agent, load_encoder, save_agent, save_encoder, AgentBundle, CheckpointError};
use bucketrl::config::{load_terrains, save_terrains, ConfigError, PipelineConfig, TerrainPresets};
use bucketrl::dataset_io::{load_dataset, load_merged, save_dataset, DatasetIoError, TRAJECTORY_FILE};
use bucketrl::report::{curve_file_name, emit_report, load_records, save_records, SUMMARY_FILE};
use bucketrl_core::encoder::{train_autoencoder, EncoderConfig, EncoderRole};
use bucketrl_core::episode::{collect_dataset, episode_seeds, Dataset, EpisodeConfig};
use bucketrl_core::eval::{default_thresholds, evaluate, EvalPolicy};
use bucketrl_core::iql::{train_iql, EncoderPair, IqlHyper};
use bucketrl_core::terrain::{TerrainKind, TerrainSpec};

fn small(kind: TerrainKind, n: usize, base: u64) -> Dataset {
    collect_dataset(&TerrainSpec::preset(kind), &episode_seeds(base, n), &EpisodeConfig::default()).unwrap()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn dataset_round_trip_is_lossless() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small(TerrainKind::RedMulch, 4, 3);
    save_dataset(&ds, tmp.path()).unwrap();
    let back = load_dataset(tmp.path()).unwrap();
    assert_eq!(back, ds);
    let bits = |d: &Dataset| -> Vec<u64> {
        d.trajectories.iter().flat_map(|t| t.transitions.iter().flat_map(|x| x.c.iter().chain(&x.a.0).chain([&x.r]).map(|v| v.to_bits()))).collect()
    };
    assert_eq!(bits(&back), bits(&ds));
    let again = tempfile::tempdir().unwrap();
    save_dataset(&back, again.path()).unwrap();
    assert_eq!(read_all(tmp.path()), read_all(again.path()));
}

#[test]
fn identical_seeds_give_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&small(TerrainKind::Sand, 3, 11), a.path()).unwrap();
    save_dataset(&small(TerrainKind::Sand, 3, 11), b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn truncated_file_reports_byte_offset() {
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(&small(TerrainKind::Sand, 3, 5), tmp.path()).unwrap();
    let path = tmp.path().join(TRAJECTORY_FILE);
    let body = fs::read(&path).unwrap();
    let cut = body.len() - 40;
    fs::write(&path, &body[..cut]).unwrap();
    match load_dataset(tmp.path()) {
        Err(DatasetIoError::Record { index, offset, .. }) => {
            assert_eq!(index, 2);
            assert_eq!(offset, cut as u64);
        }
        other => panic!("expected a record error, got {other:?}"),
    }
    let first_end = body.iter().position(|b| *b == b'\n').unwrap() + 1;
    fs::write(&path, &body[..first_end]).unwrap();
    let err = load_dataset(tmp.path()).unwrap_err();
    assert!(matches!(err, DatasetIoError::Count { expected: 3, found: 1, .. }), "{err}");
    assert!(err.to_string().contains(&format!("byte offset {first_end}")));
}

#[test]
fn malformed_record_names_its_index() {
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(&small(TerrainKind::Sand, 3, 5), tmp.path()).unwrap();
    let path = tmp.path().join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let broken = format!("{}\n{}\n{}\n", lines[0], lines[1].replacen("\"outcome\"", "\"outcome\":,", 1), lines[2]);
    fs::write(&path, broken).unwrap();
    let err = load_dataset(tmp.path()).unwrap_err();
    assert!(matches!(err, DatasetIoError::Record { index: 1, .. }), "{err}");
    assert!(err.to_string().contains("record 1"));
}

#[test]
fn schema_version_mismatch_is_explicit() {
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(&small(TerrainKind::Sand, 1, 5), tmp.path()).unwrap();
    let meta = tmp.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
    fs::write(&meta, text).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(DatasetIoError::Version { expected: 1, found: 7 })));
}

#[test]
fn merged_training_sets_cover_five_terrains() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = TerrainKind::TRAINING
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let d = tmp.path().join(k.as_str());
            save_dataset(&small(*k, 2, 40 + i as u64), &d).unwrap();
            d
        })
        .collect();
    let all = load_merged(&dirs).unwrap();
    assert_eq!(all.terrains.len(), 5);
    assert_eq!(all.trajectories.len(), 10);
    let out = tmp.path().join("all");
    save_dataset(&all, &out).unwrap();
    assert_eq!(load_dataset(&out).unwrap().terrains.len(), 5);
}

fn tiny_encoders(ds: &Dataset) -> EncoderPair {
    let cfg = EncoderConfig { hidden: 8, epochs: 1, ..EncoderConfig::default() };
    EncoderPair {
        current: train_autoencoder(ds, EncoderRole::Current, &cfg, 1).unwrap(),
        demo: train_autoencoder(ds, EncoderRole::Demo, &cfg, 2).unwrap(),
    }
}

#[test]
fn encoder_checkpoint_is_bit_exact_and_role_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small(TerrainKind::Sand, 3, 9);
    let pair = tiny_encoders(&ds);
    let path = tmp.path().join("enc.json");
    save_encoder(&pair.demo, &path).unwrap();
    let back = load_encoder(&path, Some(EncoderRole::Demo)).unwrap();
    assert_eq!(back, pair.demo);
    assert_eq!(back.encoder.checksum(), pair.demo.encoder.checksum());
    let manifest = fs::read_to_string(&path).unwrap();
    assert!(manifest.contains("\"role\": \"demo\""));
    assert!(matches!(load_encoder(&path, Some(EncoderRole::Current)), Err(CheckpointError::Kind { .. })));

    let bin = tmp.path().join("enc.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_encoder(&path, None), Err(CheckpointError::Malformed { .. })));
}

#[test]
fn agent_checkpoint_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small(TerrainKind::PeaPebbles, 3, 21);
    let hyper = IqlHyper { hidden: 16, batch: 32, gradient_steps: 20, ..IqlHyper::default() };
    let agent = train_iql(&ds, &tiny_encoders(&ds), &hyper, 4).unwrap();
    let bundle = AgentBundle { agent, datasets: vec!["/data/pebbles".into()] };
    save_agent(&bundle, tmp.path()).unwrap();
    let back = load_agent(tmp.path()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.agent.checkpoint.checksum(), bundle.agent.checkpoint.checksum());
    let again = tempfile::tempdir().unwrap();
    save_agent(&back, again.path()).unwrap();
    assert_eq!(read_all(tmp.path()), read_all(again.path()));
    assert!(load_agent(&tmp.path().join("missing")).is_err());
}

#[test]
fn shipped_terrain_file_matches_builtin_presets() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/terrains.json");
    assert_eq!(load_terrains(&shipped).unwrap(), TerrainPresets::builtin());
}

#[test]
fn terrain_file_overrides_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("terrains.json");
    save_terrains(&TerrainPresets::builtin(), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"block_force_scale\": 25.0", "\"block_force_scale\": 30.0", 1)).unwrap();
    assert_eq!(load_terrains(&path).unwrap().get(TerrainKind::Sand).block_force_scale, 30.0);

    fs::write(&path, r#"{"presets": []}"#).unwrap();
    assert!(matches!(load_terrains(&path), Err(ConfigError::Parse { .. })));
    fs::write(&path, r#"{"schema_version": 2, "presets": []}"#).unwrap();
    assert!(matches!(load_terrains(&path), Err(ConfigError::Version { found: 2, .. })));
    let mut bad = TerrainSpec::preset(TerrainKind::Sand);
    bad.block_prob = 1.5;
    fs::write(&path, serde_json::to_string(&serde_json::json!({"schema_version": 1, "presets": [bad]})).unwrap()).unwrap();
    assert!(matches!(load_terrains(&path), Err(ConfigError::InvalidPreset { .. })));
}

#[test]
fn config_overrides_nested_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    fs::write(&path, r#"{"iql": {"gradient_steps": 7}, "terrains": "t.json"}"#).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.iql.gradient_steps, 7);
    assert_eq!(cfg.iql.hidden, IqlHyper::default().hidden);
    assert_eq!(cfg.terrains.as_deref(), Some(tmp.path().join("t.json").as_path()));
    fs::write(&path, r#"{"iql": {"gradient_stepz": 7}}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(ConfigError::UnknownKey { key, .. }) if key == "iql.gradient_stepz"));
}

#[test]
fn reports_have_expected_shape_and_are_deterministic() {
    let spec = TerrainSpec::preset(TerrainKind::WoodBlocks);
    let cfg = EpisodeConfig::default();
    let (a, _) = evaluate(&EvalPolicy::Baseline, "baseline", &spec, 3, 1, &cfg).unwrap();
    let (b, _) = evaluate(&EvalPolicy::Scripted, "scripted", &spec, 3, 1, &cfg).unwrap();
    let reports = [a, b];
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let th = default_thresholds();
    emit_report(&reports, &th, d1.path()).unwrap();
    emit_report(&reports, &th, d2.path()).unwrap();
    assert_eq!(read_all(d1.path()), read_all(d2.path()));

    let summary = fs::read_to_string(d1.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let curve = fs::read_to_string(d1.path().join(curve_file_name("baseline", TerrainKind::WoodBlocks))).unwrap();
    assert_eq!(curve.lines().count(), th.len() + 1);
    assert!(fs::read_to_string(d1.path().join("table.txt")).unwrap().contains("wood_blocks"));

    let rec = d1.path().join("rec.json");
    save_records(&reports[0], &rec).unwrap();
    assert_eq!(load_records(&rec).unwrap(), reports[0]);
}
