use ssdm_bench::{acquisition, small_net};
use ssdm_core::kspace::apply_dc;
use ssdm_core::masks::realized_af;

#[test]
fn acquisition_is_consistent_with_its_mask() {
    let a = acquisition(32);
    assert_eq!(a.x0.shape(), (32, 32));
    let af = realized_af(&a.mask).unwrap();
    assert!((af - 4.0).abs() / 4.0 < 0.1, "af {af}");
    let projected = apply_dc(&a.x0, &a.y, &a.mask).unwrap();
    assert!(projected.max_abs_diff(&a.x0) < 1e-9);
}

#[test]
fn fixtures_are_reproducible() {
    let (a, b) = (acquisition(16), acquisition(16));
    assert_eq!(a.x0, b.x0);
    assert_eq!(a.mask, b.mask);
    let net = small_net();
    assert_eq!(net.params(), small_net().params());
}
