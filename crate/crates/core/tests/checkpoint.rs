mod common;

use forgetkit::checkpoint::{load, read_meta, save};
use forgetkit::lora::{inject_lora, LoraConfig};
use forgetkit::Error;

#[test]
fn roundtrip_preserves_logits_and_checksum() {
    let (m, _, te) = common::small_pretrained(11);
    let dir = tempfile::tempdir().unwrap();
    save(&m, dir.path(), serde_json::json!({"seed": 11})).unwrap();
    let (back, meta) = load(dir.path()).unwrap();
    assert_eq!(meta["seed"], 11);
    assert_eq!(back.checksum(), m.checksum());
    let x = te.to_tensor();
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
    let (cfg, _) = read_meta(dir.path()).unwrap();
    assert_eq!(&cfg, m.config());
}

#[test]
fn roundtrip_with_live_adapters() {
    let (mut m, _, te) = common::small_pretrained(12);
    inject_lora(&mut m, &LoraConfig::default(), 3, 0).unwrap();
    for id in m.params().trainable_ids() {
        m.params_mut()
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.01);
    }
    let dir = tempfile::tempdir().unwrap();
    save(&m, dir.path(), serde_json::Value::Null).unwrap();
    let (back, _) = load(dir.path()).unwrap();
    assert_eq!(back.adapters().len(), m.adapters().len());
    assert_eq!(back.params().trainable_count(), m.params().trainable_count());
    let x = te.to_tensor();
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
}

#[test]
fn corrupted_blob_is_detected() {
    let (m, _, _) = common::small_pretrained(13);
    let dir = tempfile::tempdir().unwrap();
    save(&m, dir.path(), serde_json::Value::Null).unwrap();
    let blob = dir.path().join("params.f64");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
    assert!(matches!(load(&dir.path().join("nope")), Err(Error::Io { .. })));
}
