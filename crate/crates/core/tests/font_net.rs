use std::time::Instant;

use emd_core::font_net::{FontNet, FontNetConfig};
use emd_core::gradcheck;
use emd_core::losses::weighted_l1_loss;
use emd_core::{BnMode, BoundParams, Graph, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro() -> FontNetConfig {
    FontNetConfig::new(16, 2, 2).unwrap()
}

fn refs(b: usize, r: usize, size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[b, r, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn pipeline_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let (mut kinks, mut sampled) = (0, 0);
    for seed in 0..20u64 {
        let net = FontNet::new(micro(), seed).unwrap();
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        let mut inputs: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(refs(2, 2, 16, seed + 100));
        inputs.push(refs(2, 2, 16, seed + 200));
        let targets = refs(2, 1, 16, seed + 300);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords: Vec<Vec<usize>> = inputs
            .iter()
            .map(|t| index::sample(&mut rng, t.numel(), t.numel().min(8)).into_vec())
            .collect();
        let np = names.len();
        let r = gradcheck::check(&inputs, 1e-5, Some(&coords), |g, v| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(v[..np].iter().copied()));
            let mut buffers = net.buffers.clone();
            let out = net.forward(g, &bound, v[np], v[np + 1], BnMode::Train, &mut buffers)?;
            Ok(weighted_l1_loss(g, out, &targets)?.0)
        })
        .unwrap();
        assert!(r.passes(1e-3), "seed {seed}: {r:?}");
        worst = worst.max(r.max_rel_error);
        kinks += r.kinks;
        sampled += coords.iter().map(Vec::len).sum::<usize>();
    }
    // a few activations near zero are expected, not a wholesale skip
    assert!(kinks * 20 <= sampled, "{kinks} of {sampled} coordinates straddled a kink");
    assert!(started.elapsed().as_secs() < 120, "took {:?}", started.elapsed());
    println!("worst relative error {worst:e}");
}

#[test]
fn output_shapes_for_even_and_odd_sizes() {
    for (size, batch) in [(16, 1), (20, 3), (33, 2)] {
        let net = FontNet::new(FontNetConfig::new(size, 3, 2).unwrap(), 0).unwrap();
        let out = net.generate(&refs(batch, 3, size, 1), &refs(batch, 3, size, 2)).unwrap();
        assert_eq!(out.shape(), &[batch, 1, size, size]);
        assert!(out.is_finite());
    }
}

#[test]
fn same_seed_same_network_and_output() {
    let (s, c) = (refs(1, 2, 16, 1), refs(1, 2, 16, 2));
    let a = FontNet::new(micro(), 7).unwrap();
    let b = FontNet::new(micro(), 7).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.generate(&s, &c).unwrap(), b.generate(&s, &c).unwrap());
    let other = FontNet::new(micro(), 8).unwrap();
    assert_ne!(a.generate(&s, &c).unwrap(), other.generate(&s, &c).unwrap());
}

#[test]
fn generation_leaves_running_statistics_alone() {
    let net = FontNet::new(micro(), 1).unwrap();
    let before = net.buffers.clone();
    net.generate(&refs(2, 2, 16, 1), &refs(2, 2, 16, 2)).unwrap();
    assert_eq!(net.buffers, before);
}

#[test]
fn eval_mode_treats_batch_items_independently() {
    let net = FontNet::new(micro(), 2).unwrap();
    let (s, c) = (refs(2, 2, 16, 3), refs(2, 2, 16, 4));
    let joint = net.generate(&s, &c).unwrap();
    for i in 0..2 {
        let alone = net.generate(&s.batch_item(i).unwrap(), &c.batch_item(i).unwrap()).unwrap();
        let j = joint.batch_item(i).unwrap();
        let gap = alone.data().iter().zip(j.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "item {i}: {gap}");
    }
}

#[test]
fn reference_order_matters() {
    let net = FontNet::new(micro(), 3).unwrap();
    let s = refs(1, 2, 16, 5);
    let c = refs(1, 2, 16, 6);
    let mut swapped = s.data()[256..].to_vec();
    swapped.extend_from_slice(&s.data()[..256]);
    let s2 = Tensor::new(vec![1, 2, 16, 16], swapped).unwrap();
    assert_ne!(net.generate(&s, &c).unwrap(), net.generate(&s2, &c).unwrap());
}

/// Gradient reaching the skip half of the final deconvolution kernel.
fn skip_kernel_grad(net: &FontNet) -> f64 {
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, true);
    let s = g.constant(refs(2, 2, 16, 7));
    let c = g.constant(refs(2, 2, 16, 8));
    let mut buffers = net.buffers.clone();
    let out = net.forward(&mut g, &bound, s, c, BnMode::Train, &mut buffers).unwrap();
    let (loss, _) = weighted_l1_loss(&mut g, out, &refs(2, 1, 16, 9)).unwrap();
    let grads = g.backward(loss).unwrap();
    let w = grads.get(bound.var("decoder.out.w").unwrap()).unwrap();
    let half = w.len() / 2;
    w[half..].iter().map(|x| x.abs()).sum()
}

#[test]
fn skips_are_live_and_the_ablation_cuts_them() {
    let full = FontNet::new(micro(), 4).unwrap();
    let mut cut = full.clone();
    cut.config.skips = false;
    let (s, c) = (refs(1, 2, 16, 10), refs(1, 2, 16, 11));
    assert_ne!(full.generate(&s, &c).unwrap(), cut.generate(&s, &c).unwrap());
    assert!(skip_kernel_grad(&full) > 0.0);
    assert_eq!(skip_kernel_grad(&cut), 0.0);
}
