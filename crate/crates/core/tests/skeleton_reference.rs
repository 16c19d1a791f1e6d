//! Thinning results frozen from scikit-image 0.25 `skeletonize` on small volumes.
//! Each fixture holds three shape bytes, the input mask and the expected skeleton.

use ctn_core::grid::count_components_26;
use ctn_core::metrics::{skeletonize, BinaryMask};

fn load(k: usize) -> (BinaryMask, Vec<bool>) {
    let path = format!("{}/tests/fixtures/skeleton/case{k}.bin", env!("CARGO_MANIFEST_DIR"));
    let bytes = std::fs::read(path).unwrap();
    let shape = [bytes[0] as usize, bytes[1] as usize, bytes[2] as usize];
    let n = shape.iter().product::<usize>();
    assert_eq!(bytes.len(), 3 + 2 * n);
    let input = bytes[3..3 + n].iter().map(|&v| v == 1).collect();
    let expected = bytes[3 + n..].iter().map(|&v| v == 1).collect();
    (BinaryMask::new(input, shape, [1.0; 3]).unwrap(), expected)
}

#[test]
fn matches_reference_thinning() {
    for k in 0..6 {
        let (m, expected) = load(k);
        let s = skeletonize(&m);
        assert_eq!(s.data(), &expected[..], "case {k}");
    }
}

#[test]
fn preserves_component_count() {
    for k in 0..6 {
        let (m, _) = load(k);
        let s = skeletonize(&m);
        assert!(s.is_subset_of(&m));
        assert_eq!(count_components_26(s.data(), s.shape()), count_components_26(m.data(), m.shape()), "case {k}");
    }
}
