mod common;

use common::{active_model, random_sample, tiny_moe};
use dense2moe_core::dit::{FfnKind, ForwardOptions};
use dense2moe_core::flow::{self, FlowSample};
use dense2moe_core::moe::{self, FfnWeights, MoeConfig, MoeWeights};
use dense2moe_core::params::Ctx;
use dense2moe_core::taylor::{self, PartitionPlan};
use dense2moe_core::{rng, Error, Tensor};
use proptest::prelude::*;

fn batches(seed: u64, n: usize) -> Vec<Vec<FlowSample>> {
    let cfg = common::tiny_config();
    (0..n as u64)
        .map(|b| (0..2).map(|i| random_sample(&cfg, seed * 100 + b * 2 + i)).collect())
        .collect()
}

#[test]
fn zero_weights_score_zero() {
    let mut model = active_model(1);
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.contains(".ffn.w") || n.contains(".ffn.b1"))
        .cloned()
        .collect();
    for n in names {
        let t = model.params.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let scores = taylor::accumulate_importance(&model, &batches(1, 2)).unwrap();
    assert_eq!(scores.len(), 7);
    for s in scores.values() {
        assert!(s.scores.iter().all(|&v| v == 0.0));
        assert_eq!(s.count, 2);
    }
}

#[test]
fn scores_match_direct_gradient_sum() {
    let model = active_model(2);
    let b = batches(2, 1);
    let scores = taylor::accumulate_importance(&model, &b).unwrap();
    let mut ctx = Ctx::train(&model.params);
    let l = flow::rf_loss(&mut ctx, &model, &b[0], ForwardOptions::default()).unwrap();
    ctx.backward(l).unwrap();
    let grads = ctx.grads();
    let width = model.config.ffn_width();
    let h = model.config.hidden;
    for (slot, s) in &scores {
        let p = slot.prefix();
        let w1 = model.params.get(&format!("{p}.w1")).unwrap();
        let b1 = model.params.get(&format!("{p}.b1")).unwrap();
        let w2 = model.params.get(&format!("{p}.w2")).unwrap();
        let g1 = &grads[&format!("{p}.w1")];
        let gb = &grads[&format!("{p}.b1")];
        let g2 = &grads[&format!("{p}.w2")];
        for j in 0..width {
            let mut expected = (b1.data()[j] * gb.data()[j]).abs();
            for i in 0..h {
                expected += (w1.data()[i * width + j] * g1.data()[i * width + j]).abs();
                expected += (w2.data()[j * h + i] * g2.data()[j * h + i]).abs();
            }
            assert!((s.scores[j] - expected).abs() <= 1e-12 * expected.max(1.0));
            assert!(s.scores[j] >= 0.0);
        }
    }
}

#[test]
fn batch_order_does_not_matter() {
    let model = active_model(3);
    let mut b = batches(3, 4);
    let a = taylor::accumulate_importance(&model, &b).unwrap();
    b.reverse();
    b.swap(0, 2);
    let c = taylor::accumulate_importance(&model, &b).unwrap();
    for (slot, s) in &a {
        for (u, v) in s.scores.iter().zip(&c[slot].scores) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn calibrated_conversion_reassembles_exactly() {
    let dense = active_model(4);
    let scores = taylor::accumulate_importance(&dense, &batches(4, 3)).unwrap();
    let cfg = tiny_moe();
    let (h, r) = (dense.config.hidden, dense.config.ffn_ratio as f64);
    let model = moe::replace_ffns(&dense, &cfg, &[0], 4, |slot| {
        taylor::partition(&scores[slot].scores, &cfg, h, r)
    })
    .unwrap();
    for (slot, _) in model.layout.moe_slots() {
        let d = FfnWeights::read(&dense.params, &slot.prefix(), true).unwrap();
        let m = MoeWeights::read(&model.params, &slot, cfg.n_experts).unwrap();
        let plan = taylor::partition(&scores[&slot].scores, &cfg, h, r).unwrap();
        let best = taylor::rank(&scores[&slot].scores);
        assert_eq!(plan.shared, best[..cfg.shared_width(h)].to_vec());
        for i in 0..100 {
            let x = common::random_tensor(&[h], 50 + i, 1.0);
            let a = d.forward(x.data());
            let b = m.unweighted_sum(x.data());
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        // expert parameters plus gate = dense parameters plus gate
        let experts: usize = m.shared.numel() + m.experts.iter().map(FfnWeights::numel).sum::<usize>();
        assert_eq!(experts + m.gate.numel(), d.numel() + cfg.n_experts * h);
    }
    assert!(model.layout.ffn.iter().any(|e| e.kind == FfnKind::Dense));
}

#[test]
fn shape_mismatch_is_contract_violation() {
    let dense = FfnWeights {
        w1: Tensor::zeros(&[2, 8]),
        b1: Tensor::zeros(&[7]),
        w2: Tensor::zeros(&[8, 2]),
        b2: Some(Tensor::zeros(&[2])),
    };
    let plan = PartitionPlan { shared: (0..8).collect(), experts: vec![] };
    let r = taylor::assemble_experts(&dense, &plan, &mut rng::stream(0, &[]));
    assert!(matches!(r, Err(Error::Contract(_))));
}

fn configs() -> impl Strategy<Value = (MoeConfig, usize, Vec<f64>)> {
    // h = 8, r = 4: shared units s ∈ {1..4}·2, the rest split into n equal experts
    (1usize..=3, prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24]), 0u64..1000).prop_flat_map(
        |(s_units, n, seed)| {
            let h = 8usize;
            let shared = s_units * 8;
            let rest = 32 - shared;
            let n = if rest % n == 0 { n } else { 1 };
            let cfg = MoeConfig {
                shared_ratio: shared as f64 / h as f64,
                normal_ratio: (rest / n) as f64 / h as f64,
                n_experts: n,
                top_k: 1,
            };
            let scores = common::random_tensor(&[32], seed, 1.0).data().iter().map(|v| v.abs()).collect();
            Just((cfg, h, scores))
        },
    )
}

proptest! {
    #[test]
    fn partition_is_a_set_partition((cfg, h, scores) in configs()) {
        let plan = taylor::partition(&scores, &cfg, h, 4.0).unwrap();
        plan.validate(32).unwrap();
        let mut all: Vec<usize> = plan.shared.iter().chain(plan.experts.iter().flatten()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..32).collect::<Vec<_>>());
        prop_assert_eq!(plan.shared.len(), cfg.shared_width(h));
        for e in &plan.experts {
            prop_assert_eq!(e.len(), cfg.expert_width(h));
        }
        let floor = plan.shared.iter().map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
        for &j in plan.experts.iter().flatten() {
            prop_assert!(scores[j] <= floor);
        }
    }

    #[test]
    fn ranking_ignores_positive_rescaling(seed in 0u64..1000, c in 1e-3f64..1e3) {
        let scores: Vec<f64> = common::random_tensor(&[24], seed, 1.0).data().iter().map(|v| v.abs()).collect();
        let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
        prop_assert_eq!(taylor::rank(&scores), taylor::rank(&scaled));
    }
}
