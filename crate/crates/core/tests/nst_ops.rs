use emd_core::checkpoint::Checkpoint;
use emd_core::nst::{
    channel_stats, fit_decoder, nst_forward, statistic_match, style_interpolate, style_loss, tradeoff_mix, ChannelStats,
    LossExtractor, NstConfig, NstNet, MATCH_EPSILON,
};
use emd_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Tensor::uniform(&[1], 0.1, 5.0, &mut rng).data()[0];
    Tensor::uniform(shape, -scale, scale, &mut rng)
}

fn target_stats(seed: u64, b: usize, c: usize) -> ChannelStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = Tensor::uniform(&[b * c], -3.0, 3.0, &mut rng).into_data();
    let std = Tensor::uniform(&[b * c], 0.05, 4.0, &mut rng).into_data();
    ChannelStats::new(b, c, mean, std).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn matching_hits_the_target_statistics(seed in any::<u64>(), b in 1usize..3, c in 1usize..5, hw in 2usize..6) {
        let f = features(seed, &[b, c, hw, hw + 1]);
        let t = target_stats(seed ^ 1, b, c);
        let out = channel_stats(&statistic_match(&f, &t, MATCH_EPSILON).unwrap(), 0.0).unwrap();
        prop_assert!(max_gap(&out.mean, &t.mean) <= 1e-6);
        prop_assert!(max_gap(&out.std, &t.std) <= 1e-6);
    }

    #[test]
    fn tradeoff_stats_are_linear_in_alpha(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let f = features(seed, &[1, 3, 4, 4]);
        let own = channel_stats(&f, 0.0).unwrap();
        let sty = target_stats(seed ^ 2, 1, 3);
        let mixed = tradeoff_mix(&f, &own, &sty, alpha).unwrap();
        let got = channel_stats(&mixed, 0.0).unwrap();
        let want = own.lerp(&sty, alpha).unwrap();
        prop_assert!(max_gap(&got.mean, &want.mean) <= 1e-9);
        prop_assert!(max_gap(&got.std, &want.std) <= 1e-9);
    }

    #[test]
    fn style_loss_ignores_spatial_order(seed in any::<u64>()) {
        let f = features(seed, &[1, 2, 3, 3]);
        let mut rev = Vec::with_capacity(18);
        for ch in 0..2 {
            rev.extend(f.data()[ch * 9..(ch + 1) * 9].iter().rev());
        }
        let mut g = Graph::new();
        let a = g.constant(f.clone());
        let b = g.constant(Tensor::new(vec![1, 2, 3, 3], rev).unwrap());
        let l = style_loss(&mut g, &[a], &[b]).unwrap();
        prop_assert!(g.value(l).data()[0].abs() <= 1e-12);
    }
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let f = features(4, &[1, 3, 5, 5]);
    let (s1, s2) = (target_stats(5, 1, 3), target_stats(6, 1, 3));
    let at = |a: f64| style_interpolate(&f, &s1, &s2, a).unwrap();
    assert!(max_gap(at(0.0).data(), statistic_match(&f, &s1, MATCH_EPSILON).unwrap().data()) <= 1e-12);
    assert!(max_gap(at(1.0).data(), statistic_match(&f, &s2, MATCH_EPSILON).unwrap().data()) <= 1e-12);
    let mid = channel_stats(&at(0.5), 0.0).unwrap();
    let want = s1.lerp(&s2, 0.5).unwrap();
    assert!(max_gap(&mid.mean, &want.mean) <= 1e-9);
    assert!(max_gap(&mid.std, &want.std) <= 1e-9);
    assert!(style_interpolate(&f, &s1, &s2, 1.01).is_err());
}

#[test]
fn transfer_preserves_image_size() {
    let net = NstNet::new(NstConfig::default(), 1).unwrap();
    for (h, w) in [(16, 16), (21, 18)] {
        let style = features(1, &[1, 1, h, w]);
        let content = features(2, &[1, 1, h, w]);
        let out = nst_forward(&style, &content, &net).unwrap();
        assert_eq!(out.shape(), &[1, 1, h, w]);
        assert!(out.is_finite());
    }
}

#[test]
fn decoder_fit_lowers_the_objective_and_round_trips() {
    let mut net = NstNet::new(NstConfig::default(), 2).unwrap();
    let extractor = LossExtractor::for_config(&net.config).unwrap();
    let style = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let content = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let encoders_before: Vec<Tensor> =
        net.params.iter().filter(|(n, _)| !n.starts_with("decoder.")).map(|(_, t)| t.clone()).collect();
    let log = fit_decoder(&mut net, &extractor, &[(style.clone(), content.clone())], 40, 1e-3).unwrap();
    assert_eq!(log.total.len(), 41);
    assert!(log.total[40] < log.total[0]);
    let encoders_after: Vec<Tensor> =
        net.params.iter().filter(|(n, _)| !n.starts_with("decoder.")).map(|(_, t)| t.clone()).collect();
    assert_eq!(encoders_before, encoders_after);

    let ck = Checkpoint::decode(&net.to_checkpoint().unwrap().encode()).unwrap();
    let back = NstNet::from_checkpoint(&ck).unwrap();
    let (a, b) = (nst_forward(&style, &content, &net).unwrap(), nst_forward(&style, &content, &back).unwrap());
    // parameters went through f32
    assert!(max_gap(a.data(), b.data()) < 1e-4);
}
