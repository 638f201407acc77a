use spn::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use spn::params::ParamStore;
use spn::{Error, Tensor};

fn sample() -> Checkpoint {
    let mut c = Checkpoint::new();
    c.set_meta("iteration", 42);
    c.set_meta("note", "résumé = ok");
    c.insert("g/w", true, Tensor::from_fn([2, 3], |i| i as f64 * 0.25 - 1.0));
    c.insert("g/bn.running_var", false, Tensor::full([3], f64::MIN_POSITIVE));
    c.insert("scalar", true, Tensor::scalar(std::f64::consts::PI));
    c
}

#[test]
fn round_trip_is_exact() {
    let c = sample();
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    c.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.meta_parse::<usize>("iteration").unwrap(), 42);
    assert!(!dir.path().join("x.tmp").exists());
}

#[test]
fn stores_round_trip_with_kinds() {
    let mut s = ParamStore::<f32>::new();
    s.add_param("w", Tensor::from_fn([4], |i| i as f32 / 3.0));
    s.add_buffer("m", Tensor::full([2], 0.1));
    let mut c = Checkpoint::new();
    c.add_store("net", &s);
    let c = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
    let mut t = ParamStore::<f32>::new();
    t.add_param("w", Tensor::zeros([4]));
    t.add_buffer("m", Tensor::zeros([2]));
    c.load_store("net", &mut t).unwrap();
    assert_eq!(t.get("w").unwrap(), s.get("w").unwrap());
    assert_eq!(t.get("m").unwrap(), s.get("m").unwrap());
    assert!(c.tensors.iter().any(|n| n.name.ends_with('m') && !n.trainable));
}

#[test]
fn bad_magic_and_version_are_rejected() {
    let mut bytes = sample().to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
    let mut bytes = sample().to_bytes();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version 7")));
}

#[test]
fn truncation_and_trailing_bytes_are_rejected() {
    let bytes = sample().to_bytes();
    for cut in [4, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn missing_entries_are_named() {
    let c = sample();
    assert!(c.meta("absent").is_err());
    assert!(c.tensor("absent").is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("none.ckpt")), Err(Error::Io { .. })));
}
