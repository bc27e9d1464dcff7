use emd_core::losses::{
    binarize, darkness_weight, l1_metric, pdar_metric, rmse_metric, weighted_l1_value, BLACK_THRESHOLD,
};
use emd_core::Tensor;
use proptest::prelude::*;

fn image(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #[test]
    fn darkness_weights_sum_to_one(b in 1usize..6, data in pixels(5 * 16)) {
        let t = image(&[b, 1, 4, 4], data[..b * 16].to_vec());
        let w = darkness_weight(&t).unwrap();
        prop_assert_eq!(w.len(), b);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn weighted_l1_is_zero_only_on_identity(target in pixels(32), gen in pixels(32)) {
        let t = image(&[2, 1, 4, 4], target);
        let g = image(&[2, 1, 4, 4], gen);
        prop_assert_eq!(weighted_l1_value(&t, &t).unwrap(), 0.0);
        let v = weighted_l1_value(&g, &t).unwrap();
        if g == t { prop_assert_eq!(v, 0.0) } else { prop_assert!(v > 0.0) }
    }

    #[test]
    fn weighted_l1_scales_with_the_error(target in pixels(16), noise in prop::collection::vec(-1.0f64..1.0, 16), a in 0.0f64..4.0) {
        let t = image(&[1, 1, 4, 4], target.clone());
        let shift = |k: f64| image(&[1, 1, 4, 4], target.iter().zip(&noise).map(|(x, n)| x + k * n).collect());
        let base = weighted_l1_value(&shift(1.0), &t).unwrap();
        let scaled = weighted_l1_value(&shift(a), &t).unwrap();
        prop_assert!((scaled - a * base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn metrics_match_pixel_loops(a in pixels(30), b in pixels(30)) {
        let (ta, tb) = (image(&[1, 1, 5, 6], a.clone()), image(&[1, 1, 5, 6], b.clone()));
        let (mut l1, mut sq, mut dis) = (0.0, 0.0, 0usize);
        for i in 0..30 {
            l1 += (a[i] - b[i]).abs();
            sq += (a[i] - b[i]) * (a[i] - b[i]);
            dis += usize::from((a[i] < BLACK_THRESHOLD) != (b[i] < BLACK_THRESHOLD));
        }
        prop_assert!((l1_metric(&ta, &tb).unwrap() - l1 / 30.0).abs() <= 1e-12);
        prop_assert!((rmse_metric(&ta, &tb).unwrap() - (sq / 30.0).sqrt()).abs() <= 1e-12);
        let p = pdar_metric(&ta, &tb).unwrap();
        prop_assert!((p - dis as f64 / 30.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(l1_metric(&tb, &ta).unwrap(), l1_metric(&ta, &tb).unwrap());
        prop_assert_eq!(pdar_metric(&tb, &ta).unwrap(), p);
        let black = binarize(&ta).unwrap().iter().filter(|x| **x).count();
        prop_assert_eq!(black, a.iter().filter(|v| **v < 0.5).count());
    }
}

#[test]
fn pdar_hand_cases() {
    let a = image(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
    let one_off = image(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]);
    let flipped = image(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(pdar_metric(&a, &a).unwrap(), 0.0);
    assert_eq!(pdar_metric(&a, &one_off).unwrap(), 0.25);
    assert_eq!(pdar_metric(&a, &flipped).unwrap(), 1.0);
}

#[test]
fn mismatched_or_out_of_range_inputs_are_rejected() {
    let a = image(&[1, 1, 2, 2], vec![0.0; 4]);
    let b = image(&[1, 1, 1, 4], vec![0.0; 4]);
    assert!(l1_metric(&a, &b).is_err());
    assert!(binarize(&image(&[1, 1, 1, 2], vec![0.0, 1.5])).is_err());
    assert!(weighted_l1_value(&a, &b).is_err());
}
