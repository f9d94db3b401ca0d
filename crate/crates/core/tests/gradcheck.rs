mod common;

use gudn_core::gradcheck::{check_model, relative_error};
use gudn_core::{AblationMode, Batch, GudnModel, CLS, PAD};

fn batch(mode: AblationMode) -> Batch {
    Batch::new(
        vec![vec![CLS, 4, 5, 6, 7, 8, PAD, PAD], vec![CLS, 9, 10, 11, PAD, PAD, PAD, PAD]],
        Some(vec![vec![CLS, 20, 21, 20, 21, 20, 21, 20], vec![CLS, 22, 23, 24, 22, 23, 24, 22]]),
        vec![vec![0, 3], vec![7]],
        mode,
    )
    .unwrap()
}

#[test]
fn every_mode_matches_central_differences() {
    let model = GudnModel::new(common::tiny_model_config(10), None, 3).unwrap();
    for mode in AblationMode::ALL {
        let r = check_model(&model, &batch(mode), mode, 5, 1e-3, 1e-4).unwrap();
        assert!(r.pass_fraction() >= 0.95, "{mode:?}: {}/{}", r.passed, r.checked);
    }
}

#[test]
fn relu_classifier_and_mean_reduction() {
    let mut cfg = common::tiny_model_config(10);
    cfg.softmax_in_classifier = false;
    cfg.loss_reduction = gudn_core::LossReduction::Mean;
    let model = GudnModel::new(cfg, None, 4).unwrap();
    let r = check_model(&model, &batch(AblationMode::Full), AblationMode::Full, 6, 1e-3, 1e-4).unwrap();
    assert!(r.pass_fraction() >= 0.95, "{}/{}", r.passed, r.checked);
}

#[test]
fn relative_error_edge_cases() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert_eq!(relative_error(1.0, -1.0), 2.0);
    assert!((relative_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
}
