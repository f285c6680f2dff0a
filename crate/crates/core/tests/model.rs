mod common;

use arpg::model::{param_count, ArpgModel, Checkpoint, ModelConfig, FORMAT_VERSION, MAGIC};
use arpg::ArpgError;

#[test]
fn shared_projection_delta_at_desk_config() {
    let c = ModelConfig::default();
    let d = c.hidden;
    let delta = param_count(&c, false) as i64 - param_count(&c, true) as i64;
    assert_eq!(delta, (c.pass2_layers * 2 * d * d) as i64 - (2 * d * d) as i64);
    assert_eq!(delta, 3 * 2 * 128 * 128);
}

#[test]
fn count_matches_instantiated_tensors() {
    for shared in [true, false] {
        let c = ModelConfig { shared_kv: shared, ..common::tiny_config() };
        let m = common::model::<f32>(&c, 0);
        assert_eq!(m.num_parameters(), param_count(&c, shared));
    }
    let m = common::model::<f32>(&ModelConfig::default(), 0);
    assert_eq!(m.num_parameters(), param_count(&ModelConfig::default(), true));
}

#[test]
fn large_configuration_is_near_320m() {
    let n = param_count(&ModelConfig::large(), true) as f64;
    assert!((n / 320e6 - 1.0).abs() < 0.05, "{n}");
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = common::tiny_config();
    let m = common::model::<f32>(&c, 7);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    m.save(&a).unwrap();
    let loaded = ArpgModel::<f32>::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for (x, y) in loaded.params().iter().zip(m.params()) {
        assert_eq!((&x.name, x.value.data()), (&y.name, y.value.data()));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::model::<f64>(&common::tiny_config(), 1);
    let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
    let origin = dir.path().join("x.ckpt");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bad, &origin), Err(ArpgError::Format { .. })));
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 4], &origin).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes, &origin).is_err());
    assert!(matches!(ArpgModel::<f32>::load(&dir.path().join("missing.ckpt")), Err(ArpgError::Io { .. })));
}
