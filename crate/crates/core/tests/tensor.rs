mod common;

use common::{check_composite, check_primitive, primitives, Composite, TOLERANCE};
use fadvlp::tensor::{AdamConfig, AdamState, Reduction};
use fadvlp::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for prim in primitives() {
            let err = check_primitive(&prim, seed);
            prop_assert!(err < TOLERANCE, "{} seed {seed}: {err:e}", prim.name);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![3, 4], data).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for row in t.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(data in proptest::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(data[..4].iter().any(|x| x.abs() > 1e-3) && data[4..].iter().any(|x| x.abs() > 1e-3));
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![2, 4], data).unwrap());
        let n = t.l2_normalize(x, 1, 1e-12).unwrap();
        for row in t.value(n).data().chunks(4) {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn composite_losses_match_finite_differences() {
    for which in Composite::ALL {
        for seed in 0..3 {
            let err = check_composite(which, seed);
            assert!(err < TOLERANCE, "{which:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn three_four_five() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let n = t.l2_normalize(x, 1, 1e-12).unwrap();
    assert_eq!(t.value(n).data(), &[0.6, 0.8]);
}

#[test]
fn matmul_fixture() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    let bad = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.matmul(a, bad).is_err());
}

#[test]
fn uniform_logits_cost_log_classes() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[3, 5]));
    let l = t.cross_entropy(x, &[0, 1, 2], None, Reduction::Mean).unwrap();
    assert!((t.value(l).item() - 5f64.ln()).abs() < 1e-12);
    let all_ignored = t.cross_entropy(x, &[0, 0, 0], Some(0), Reduction::Mean);
    assert!(all_ignored.is_err());
}

#[test]
fn layer_norm_output_is_standardised() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 10.0]).unwrap());
    let g = t.constant(Tensor::full(&[4], 1.0));
    let b = t.constant(Tensor::zeros(&[4]));
    let y = t.layer_norm(x, g, b, 1e-12).unwrap();
    let d = t.value(y).data();
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::<f64>::new(cfg, &[2]);
    let mut p = vec![1.0, -1.0];
    let g = vec![0.5, -3.0];
    state.step(&mut [&mut p[..]], &[Some(&g[..])]).unwrap();
    assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6, "{p:?}");
}
