mod common;

use common::grad_suite::{self, TOLERANCE};

const SEEDS: std::ops::Range<u64> = 0..20;

fn assert_check(name: &str, check: grad_suite::Check) {
    for seed in SEEDS {
        let r = check(seed).unwrap();
        assert!(r.passed(TOLERANCE), "{name} seed {seed}: {r:?}");
        assert!(r.checked > r.skipped_kinks, "{name} seed {seed}: mostly kinks {r:?}");
    }
}

#[test]
fn linear_layer() {
    assert_check("linear", grad_suite::linear);
}

#[test]
fn conv_layers() {
    assert_check("conv2d", grad_suite::conv_same);
    assert_check("conv2d_strided", grad_suite::conv_strided);
}

#[test]
fn parameter_free_layers() {
    assert_check("relu", grad_suite::relu);
    assert_check("maxpool2d", grad_suite::maxpool);
    assert_check("flatten", grad_suite::flatten);
}

#[test]
fn sequential_stack() {
    assert_check("sequential", grad_suite::sequential);
}

#[test]
fn multibox_objective() {
    assert_check("multibox", grad_suite::multibox);
}

#[test]
fn detector_network() {
    assert_check("detector", grad_suite::detector);
}

#[test]
fn qa_network() {
    assert_check("qa", grad_suite::qa);
}

#[test]
fn qa_network_at_default_size() {
    let cfg = skysearch_core::qa::QaConfig::default();
    let r = grad_suite::qa_with(&cfg, 13, 3, 99).unwrap();
    assert!(r.passed(TOLERANCE), "{r:?}");
}

#[test]
fn every_check_probes_real_coordinates() {
    for (name, r) in grad_suite::run_all(0..3) {
        eprintln!("{name}: {r:?}");
        assert!(r.checked >= 10, "{name}: {r:?}");
    }
}

#[test]
fn detector_network_at_default_size() {
    let cfg = skysearch_core::detector::DetectorConfig::default();
    let r = grad_suite::detector_with(&cfg, 2, 2, 5).unwrap();
    assert!(r.passed(TOLERANCE), "{r:?}");
}
