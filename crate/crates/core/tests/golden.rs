//! Checked-in ACTD / CQCB / CQQC fixtures. Run with `CQKV_BLESS=1` to
//! regenerate them after an intentional format change.

mod common;

use std::path::PathBuf;

use cqkv::{load_activations, quantize, save_activations, Codebook, QuantizedCache};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn check(name: &str, bytes: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os("CQKV_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let stored = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(stored, bytes, "{name} differs from the checked-in fixture");
}

#[test]
fn actd_fixture() {
    let m = common::golden_matrix();
    let mut bytes = Vec::new();
    save_activations(&m, &mut bytes).unwrap();
    assert_eq!(
        &bytes[..24],
        &[
            b'A', b'C', b'T', b'D', 1, 0, 0, 0, //
            4, 0, 0, 0, 0, 0, 0, 0, //
            6, 0, 0, 0, 0, 0, 0, 0,
        ]
    );
    // 1.0f32 = 0x3F800000, token 1 of channel 0
    assert_eq!(&bytes[28..32], &[0x00, 0x00, 0x80, 0x3F]);
    check("small.actd", &bytes);
    let stored = std::fs::read(golden_path("small.actd")).unwrap();
    assert!(load_activations(stored.as_slice()).unwrap().bit_eq(&m));
}

#[test]
fn actd_gradient_fixture() {
    let m = common::golden_matrix_with_gradients();
    let mut bytes = Vec::new();
    save_activations(&m, &mut bytes).unwrap();
    assert_eq!(bytes.len(), 24 + 2 * 24 * 4);
    assert_eq!(&bytes[6..8], &[1, 0]);
    check("small_grad.actd", &bytes);
    let stored = std::fs::read(golden_path("small_grad.actd")).unwrap();
    assert!(load_activations(stored.as_slice()).unwrap().bit_eq(&m));
}

#[test]
fn cqcb_fixture() {
    let cb = common::golden_codebook();
    let bytes = cb.to_bytes();
    assert_eq!(
        &bytes[..20],
        &[
            b'C', b'Q', b'C', b'B', 1, 0, 2, 0, 2, 0, 0, 0, //
            2, 0, 0, 0, 0, 0, 0, 0,
        ]
    );
    assert_eq!(bytes.len(), 20 + 2 * 4 * 2 * 4 + 1);
    check("small.cqcb", &bytes);
    let stored = std::fs::read(golden_path("small.cqcb")).unwrap();
    let back = Codebook::load(stored.as_slice()).unwrap();
    assert_eq!(back, cb);
    assert_eq!(back.to_bytes(), stored);
}

#[test]
fn cqqc_fixture() {
    let m = common::golden_matrix();
    let cb = common::golden_codebook();
    let q = quantize(&m, &cb).unwrap();
    // group 0 columns: (0,3.25) (1,3.25) (-1,-0.125) (0.5,8) (2,1.5) (-2.5,0.75)
    // against (0,3) (1,3) (-1,0) (2,1); (0.5,8) ties between 0 and 1
    assert_eq!(q.group_codes(0), [0, 1, 2, 0, 3, 2]);
    let bytes = q.to_bytes();
    assert_eq!(&bytes[..4], b"CQQC");
    assert_eq!(&bytes[26..34], &cb.hash().to_le_bytes());
    assert_eq!(&bytes[34..36], &[0b00_10_01_00, 0b10_11]);
    check("small.cqqc", &bytes);
    let stored = std::fs::read(golden_path("small.cqqc")).unwrap();
    let back = QuantizedCache::load(stored.as_slice()).unwrap();
    assert_eq!(back, q);
    assert_eq!(back.to_bytes(), stored);
}
