//! Finite-difference audits of the analytic gradients.
//!
//! Two levels: every parameter of a one-block micro pipeline (embedding ->
//! transformer block -> 6-channel head -> Dice+CE loss) on a 4^3 input, and
//! a sampled sweep over every tensor of the full network on a 16^3 input.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg_model::attention::{AttnMode, SwinBlock};
use volseg_model::graph::Graph;
use volseg_model::params::{GradStore, ParamKind, ParamStore};
use volseg_model::tensor::Tensor;
use volseg_model::{init_model, ModelConfig, SwinUnet};

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in &mut p.value.data {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Dice + CE on sigmoid probabilities, mirroring the training loss.
fn training_loss(g: &mut Graph, logits: volseg_model::NodeId, labels: &Arc<Vec<u32>>) -> volseg_model::NodeId {
    let ce = g.softmax_ce_loss(logits, labels.clone(), 6);
    let probs = g.sigmoid(logits);
    let dice = g.soft_dice_loss(probs, labels.clone(), 6);
    g.add(ce, dice)
}

#[test]
fn micro_model_every_parameter_matches_central_differences() {
    let start = std::time::Instant::now();
    let dim = 4;
    let grid = [4usize, 4, 4];
    let tokens = 64;

    let micro_cfg = ModelConfig { embed_dim: dim, mlp_ratio: 4, dropout_rate: 0.0, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let embed_w = store.add("embed.weight", ParamKind::Weight, vec![1, dim]);
    let embed_b = store.add("embed.bias", ParamKind::Bias, vec![dim]);
    let block = SwinBlock::build(&mut store, "block0", &micro_cfg, dim, 1, [4, 4, 4]);
    let head_w = store.add("head.weight", ParamKind::Weight, vec![dim, 6]);
    let head_b = store.add("head.bias", ParamKind::Bias, vec![6]);
    randomize(&mut store, 21, 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input: Vec<f64> = (0..tokens).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Arc<Vec<u32>> = Arc::new((0..tokens).map(|_| rng.gen_range(0..6u32)).collect());

    let eval = |store: &ParamStore, want_grads: bool| -> (f64, Option<GradStore>) {
        let mut g = Graph::new(store);
        let x = g.input(Tensor::new(vec![tokens, 1], input.clone()));
        let ew = g.param(embed_w);
        let eb = g.param(embed_b);
        let t = g.matmul(x, ew, false, false, tokens, 1, dim);
        let t = g.add_bias(t, eb);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let t = block.forward(&mut g, t, grid, AttnMode::Window, false, &mut drng).unwrap();
        let hw = g.param(head_w);
        let hb = g.param(head_b);
        let logits = g.matmul(t, hw, false, false, tokens, dim, 6);
        let logits = g.add_bias(logits, hb);
        let loss = training_loss(&mut g, logits, &labels);
        let value = g.value(loss).data[0];
        if want_grads {
            let mut gs = GradStore::zeros_like(store);
            g.backward(loss, &mut gs);
            (value, Some(gs))
        } else {
            (value, None)
        }
    };

    let (_, grads) = eval(&store, true);
    let grads = grads.unwrap();

    let h = 1e-5;
    let mut checked = 0usize;
    for pi in 0..store.len() {
        for e in 0..store.get(pi).value.numel() {
            let orig = store.get(pi).value.data[e];
            let mut s2 = store.clone();
            s2.get_mut(pi).value.data[e] = orig + h;
            let (fp, _) = eval(&s2, false);
            s2.get_mut(pi).value.data[e] = orig - h;
            let (fm, _) = eval(&s2, false);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(pi)[e];
            let diff = (analytic - numeric).abs();
            let ok = diff < 1e-5 || diff / analytic.abs().max(numeric.abs()) < 1e-3;
            assert!(
                ok,
                "{} elem {e}: analytic {analytic} vs numeric {numeric}",
                store.get(pi).name
            );
            checked += 1;
        }
    }
    println!(
        "micro grad check: {checked} parameters verified in {:?}",
        start.elapsed()
    );
    assert!(start.elapsed().as_secs() < 120, "budget exceeded");
}

#[test]
fn full_network_sampled_parameters_match_central_differences() {
    let start = std::time::Instant::now();
    let cfg = ModelConfig {
        embed_dim: 4,
        depths: [2, 1, 1, 1],
        num_heads: [1, 2, 4, 8],
        dropout_rate: 0.0,
        input_patch_shape: [16, 16, 16],
        ..ModelConfig::default()
    };
    let shape = [16usize, 16, 16];
    let voxels: usize = shape.iter().product();
    let state = init_model(&cfg, 4).unwrap();
    let mut store = state.params;
    // Mildly randomize so normalization scales differ from exactly 1.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for p in store.iter_mut() {
            for v in &mut p.value.data {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let (net, _) = SwinUnet::build(&cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let input: Vec<f64> = (0..voxels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Arc<Vec<u32>> = Arc::new((0..voxels).map(|_| rng.gen_range(0..6u32)).collect());

    let eval = |store: &ParamStore, want_grads: bool| -> (f64, Option<GradStore>) {
        let mut g = Graph::new(store);
        let x = g.input(Tensor::new(vec![voxels, 1], input.clone()));
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let logits = net.forward_graph(&mut g, x, shape, false, &mut drng).unwrap();
        let loss = training_loss(&mut g, logits, &labels);
        let value = g.value(loss).data[0];
        if want_grads {
            let mut gs = GradStore::zeros_like(store);
            g.backward(loss, &mut gs);
            (value, Some(gs))
        } else {
            (value, None)
        }
    };

    let (_, grads) = eval(&store, true);
    let grads = grads.unwrap();

    // 1e-6 keeps central differences clear of leaky-ReLU kink crossings
    // while staying far above f64 roundoff for a loss of order 1.
    let h = 1e-6;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(123);
    let mut checked = 0usize;
    for pi in 0..store.len() {
        let n = store.get(pi).value.numel();
        let mut elems = vec![0usize, n - 1];
        elems.push(pick_rng.gen_range(0..n));
        elems.push(pick_rng.gen_range(0..n));
        elems.sort();
        elems.dedup();
        for e in elems {
            let orig = store.get(pi).value.data[e];
            let mut s2 = store.clone();
            s2.get_mut(pi).value.data[e] = orig + h;
            let (fp, _) = eval(&s2, false);
            s2.get_mut(pi).value.data[e] = orig - h;
            let (fm, _) = eval(&s2, false);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(pi)[e];
            let diff = (analytic - numeric).abs();
            let ok = diff < 1e-5 || diff / analytic.abs().max(numeric.abs()) < 1e-3;
            assert!(
                ok,
                "{} elem {e}: analytic {analytic} vs numeric {numeric}",
                store.get(pi).name
            );
            checked += 1;
        }
    }
    println!(
        "full-network sampled grad check: {checked} parameters verified in {:?}",
        start.elapsed()
    );
}
