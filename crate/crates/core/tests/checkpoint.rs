use std::path::Path;

use hcvp::checkpoint::{Checkpoint, MAGIC, VERSION};
use hcvp::metrics::{read_records, MetricRecord, MetricsLog};
use hcvp::model::{Method, Model};
use hcvp::synth::{generate, SynthConfig};
use hcvp::trainer::{model_from_checkpoint, TrainConfig, Trainer};
use hcvp::vit::VitConfig;
use hcvp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained(method: Method) -> Checkpoint {
    let data = generate(&SynthConfig {
        per_cell: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        method,
        steps: 2,
        batch_size: 8,
        pretrain_steps: 2,
        vit: VitConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.train_step(&data).unwrap();
    t.checkpoint()
}

#[test]
fn header_layout() {
    let bytes = trained(Method::Hcvp).to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
    assert_eq!(header["step"], 1);
    assert_eq!(header["config"]["method"], "hcvp");
    assert!((bytes.len() - 20 - hlen) % 8 == 0);
}

#[test]
fn round_trip_keeps_frozen_flags_and_moments() {
    let ckpt = trained(Method::Hcvp);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
    assert_eq!(back, ckpt);
    let frozen: Vec<&str> = back
        .manifest
        .iter()
        .filter(|e| !e.trainable)
        .map(|e| e.name.as_str())
        .collect();
    assert!(!frozen.is_empty());
    assert!(frozen.iter().all(|n| n.starts_with("hpgn.extractor.")));
    let opt = back.optimizer.as_ref().unwrap();
    assert_eq!(opt.step_count, 1);
    assert_eq!(opt.first_moment.len(), back.manifest.len() - frozen.len());

    let model = model_from_checkpoint(&back).unwrap();
    assert!(model.extractor().unwrap().is_frozen());
    assert_eq!(Checkpoint::capture_params(&model).1, back.values);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = trained(Method::Erm).to_bytes();
    let p = Path::new("x.ckpt");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for (what, b) in [
        ("magic", bad_magic),
        ("version", bad_version),
        ("truncated", bytes[..bytes.len() - 3].to_vec()),
        ("short", bytes[..10].to_vec()),
        ("trailing", trailing),
    ] {
        assert!(matches!(Checkpoint::from_bytes(&b, p), Err(Error::Format { .. })), "{what}");
    }
    assert!(matches!(Checkpoint::load(Path::new("/no/such/file")), Err(Error::Io { .. })));
}

#[test]
fn restoring_into_the_wrong_model_fails() {
    let erm = trained(Method::Erm);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut wide = Model::erm(VitConfig::default(), &mut rng).unwrap();
    assert!(matches!(erm.restore_params(&mut wide), Err(Error::Shape(_))));

    let hcvp = trained(Method::Hcvp);
    let mut small = Model::erm(hcvp.config.vit, &mut rng).unwrap();
    // the prompted checkpoint has tensors the baseline lacks
    assert!(matches!(hcvp.restore_params(&mut small), Err(Error::Config(_))));
}

#[test]
fn metrics_append_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut a = MetricRecord::new(10, "train", 3, "abcd");
    a.loss.cls = Some(1.25);
    a.accuracy = Some(0.5);
    let b = MetricRecord::new(10, "val", 3, "abcd").with_extra("mean_distance", 0.25);
    {
        let mut log = MetricsLog::append_to(&path).unwrap();
        log.push(a.clone()).unwrap();
    }
    {
        let mut log = MetricsLog::append_to(&path).unwrap();
        log.push(b.clone()).unwrap();
        assert_eq!(log.records().len(), 1);
    }
    assert_eq!(read_records(&path).unwrap(), vec![a.clone(), b]);

    let line: serde_json::Value = serde_json::from_str(&a.to_line()).unwrap();
    for key in ["step", "split", "loss", "accuracy", "seed", "config_hash"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    std::fs::write(&path, "{\"step\": 1}\n").unwrap();
    assert!(matches!(read_records(&path), Err(Error::Format { .. })));
}
