#![allow(dead_code)]

use dense2moe_core::dit::{DitConfig, DitModel, ForwardOptions};
use dense2moe_core::flow::FlowSample;
use dense2moe_core::moe::{self, MoeConfig};
use dense2moe_core::params::Ctx;
use dense2moe_core::rng;
use dense2moe_core::taylor;
use dense2moe_core::Tensor;

pub const SEEDS: u64 = 20;

pub fn tiny_config() -> DitConfig {
    DitConfig {
        image_size: 4,
        patch_size: 2,
        channels: 2,
        hidden: 8,
        n_double: 2,
        n_single: 3,
        heads: 2,
        ffn_ratio: 4,
        text_len: 5,
        vocab: 32,
        adaln_dim: None,
        pos_embed: true,
    }
}

/// Replaces every zero-initialized tensor with small random values so that
/// all gates and modulations are active.
pub fn randomize_zeros(model: &mut DitModel, seed: u64) {
    let names: Vec<String> = model
        .params
        .iter()
        .filter(|(_, t)| t.data().iter().all(|&v| v == 0.0))
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let shape = model.params.get(&n).unwrap().shape().to_vec();
        let t = rng::randn(&mut rng::stream(seed, &[rng::tag(&n), 7]), &shape, 0.3);
        model.params.insert(n, t);
    }
}

pub fn active_model(seed: u64) -> DitModel {
    let mut m = DitModel::new(tiny_config(), seed).unwrap();
    randomize_zeros(&mut m, seed);
    m
}

pub fn tiny_moe() -> MoeConfig {
    // h = 8: shared width 8, expert width 2
    MoeConfig::default()
}

/// An active model with every FFN outside `skip` converted, segments
/// assigned by rank of a fixed pseudo-score.
pub fn moe_model(seed: u64, skip: &[usize]) -> DitModel {
    let dense = active_model(seed);
    let cfg = tiny_moe();
    let h = dense.config.hidden;
    let r = dense.config.ffn_ratio as f64;
    let width = dense.config.ffn_width();
    moe::replace_ffns(&dense, &cfg, skip, seed, |slot| {
        let scores: Vec<f64> = (0..width).map(|j| ((j * 37 + slot.block * 11) % 17) as f64).collect();
        taylor::partition(&scores, &cfg, h, r)
    })
    .unwrap()
}

pub fn random_sample(cfg: &DitConfig, seed: u64) -> FlowSample {
    let mut r = rng::stream(seed, &[rng::tag("test-sample")]);
    let x0 = rng::randn(&mut r, &cfg.latent_shape(), 0.5);
    let eps = rng::randn(&mut r, &cfg.latent_shape(), 1.0);
    let t = 0.05 + 0.9 * rng::uniform(&mut r);
    let prompt = (0..cfg.text_len)
        .map(|i| ((rng::uniform(&mut r) * cfg.vocab as f64) as usize + i) % cfg.vocab)
        .collect();
    FlowSample { x0, eps, t, prompt, category: (seed % 10) as usize }
}

pub fn random_tensor(shape: &[usize], seed: u64, std: f64) -> Tensor {
    rng::randn(&mut rng::stream(seed, &[rng::tag("tensor")]), shape, std)
}

/// Sum of velocity weighted by a fixed random pattern, plus routing.
pub fn model_objective(model: &DitModel, sample: &FlowSample, opts: ForwardOptions) -> (f64, Vec<usize>) {
    let mut ctx = Ctx::eval(&model.params);
    let out = model.forward(&mut ctx, &sample.x_t().unwrap(), &sample.prompt, sample.t, opts).unwrap();
    let w = random_tensor(ctx.value(out.velocity).shape(), 99, 1.0);
    let v = ctx.value(out.velocity);
    (v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(), out.routing_signature())
}

/// Reverse-mode gradients of [`model_objective`].
pub fn model_grads(
    model: &DitModel,
    sample: &FlowSample,
    opts: ForwardOptions,
) -> std::collections::BTreeMap<String, Tensor> {
    let mut ctx = Ctx::train(&model.params);
    let out = model.forward(&mut ctx, &sample.x_t().unwrap(), &sample.prompt, sample.t, opts).unwrap();
    let w = random_tensor(ctx.value(out.velocity).shape(), 99, 1.0);
    let w = ctx.constant(w);
    let prod = ctx.tape.mul(out.velocity, w).unwrap();
    let loss = ctx.tape.sum(prod).unwrap();
    ctx.backward(loss).unwrap();
    ctx.grads()
}

/// Finite-difference check of every parameter tensor of `model`; returns
/// the worst relative error and the number of probes that ran.
pub fn check_model(model: &DitModel, sample: &FlowSample, opts: ForwardOptions, per_tensor: usize, seed: u64) -> (f64, usize) {
    let grads = model_grads(model, sample, opts);
    let names = fd_names(model);
    let mut r = rng::stream(seed, &[rng::tag("probe")]);
    let probes = dense2moe_core::gradcheck::check_params(&model.params, &names, &grads, per_tensor, &mut r, |p| {
        let m = DitModel { config: model.config.clone(), layout: model.layout.clone(), params: p.clone() };
        Ok(model_objective(&m, sample, opts))
    })
    .unwrap();
    let worst = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    (worst, probes.len())
}

fn is_single_qkv_bias(name: &str) -> bool {
    name.ends_with(".qkv.b") && !name.contains(".img.") && !name.contains(".txt.")
}

/// Parameters probed by finite differences. Single-block attention biases
/// are left out: their key third adds the same shift to every key, which
/// the softmax cancels, so the gradient is identically zero and a central
/// difference there measures only round-off. [`key_bias_grads_vanish`]
/// covers them instead.
pub fn fd_names(model: &DitModel) -> Vec<String> {
    model.params.names().filter(|n| !is_single_qkv_bias(n)).cloned().collect()
}

/// Asserts the key part of every single-block attention bias has zero
/// gradient while the query and value parts do not all vanish.
pub fn key_bias_grads_vanish(model: &DitModel, grads: &std::collections::BTreeMap<String, Tensor>) {
    let h = model.config.hidden;
    for (name, g) in grads.iter().filter(|(n, _)| is_single_qkv_bias(n)) {
        let key = &g.data()[h..2 * h];
        let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(key.iter().all(|v| v.abs() <= 1e-12 * scale.max(1.0)), "{name}: {key:?}");
        assert!(scale > 0.0, "{name}: all-zero gradient");
    }
}
