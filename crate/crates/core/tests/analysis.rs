mod common;

use common::{active_model, moe_model, tiny_config};
use dense2moe_core::analysis::{self, Axis, LabeledPrompt};
use dense2moe_core::corpus::{Corpus, CorpusConfig, Split};
use dense2moe_core::dit::{DitModel, FfnKind, FfnSlot, ForwardOptions, Stream};
use dense2moe_core::mob::{self, MobGroupSpec};
use dense2moe_core::Error;

fn prompts(n: usize) -> Vec<LabeledPrompt> {
    let corpus = Corpus::new(CorpusConfig::default(), &tiny_config()).unwrap();
    corpus.clean(Split::Validation, n).iter().map(LabeledPrompt::from).collect()
}

fn slot(block: usize, stream: Stream) -> FfnSlot {
    FfnSlot { block, stream }
}

#[test]
fn histograms_satisfy_row_sums() {
    let model = moe_model(1, &[0]);
    let log = analysis::collect_routing(&model, &prompts(12), 4, 1, ForwardOptions::default()).unwrap();
    assert_eq!(log.images.len(), 12);
    for (s, _) in model.layout.moe_slots() {
        for axis in Axis::ALL {
            let h = analysis::histogram(&log, s, axis).unwrap();
            assert!(h.row_sums_hold(), "{s} {}", axis.name());
            let tokens: u64 = h.tokens.iter().sum();
            let per_pass = if s.stream == Stream::Joint { 9 } else if s.stream == Stream::Text { 5 } else { 4 };
            assert_eq!(tokens, 12 * 4 * per_pass);
        }
    }
    let h = analysis::histogram(&log, slot(3, Stream::Joint), Axis::PromptCategory).unwrap();
    assert_eq!(h.counts.len(), 10);
    let h = analysis::histogram(&log, slot(3, Stream::Joint), Axis::Timestep).unwrap();
    assert_eq!(h.counts.len(), 4);
}

#[test]
fn all_experts_selected_fill_every_cell() {
    let model = moe_model(2, &[]);
    let opts = ForwardOptions { topk: Some(12) };
    let h = analysis::expert_frequency(&model, &prompts(3), slot(1, Stream::Image), Axis::TokenPosition, 3, 2, opts).unwrap();
    for (row, &t) in h.counts.iter().zip(&h.tokens) {
        assert!(row.iter().all(|&c| c == t));
    }
}

#[test]
fn top1_assigns_each_token_to_one_expert() {
    let model = moe_model(3, &[]);
    let opts = ForwardOptions { topk: Some(1) };
    let log = analysis::collect_routing(&model, &prompts(1), 2, 3, opts).unwrap();
    let record = log
        .records
        .iter()
        .find(|r| r.slot == slot(0, Stream::Image))
        .unwrap();
    let map = analysis::token_assignment(record);
    assert_eq!(map.len(), model.config.img_tokens());
    assert!(map.iter().all(|e| matches!(e, Some(i) if *i < 12)));
    let h = analysis::histogram(&log, slot(0, Stream::Image), Axis::TokenPosition).unwrap();
    assert!(h.counts.iter().zip(&h.tokens).all(|(row, &t)| row.iter().sum::<u64>() == t));
}

#[test]
fn query_errors() {
    let model = moe_model(4, &[0]);
    let dense_slot = slot(0, Stream::Image);
    assert!(matches!(model.layout.kind(&dense_slot), Some(FfnKind::Dense)));
    let r = analysis::expert_frequency(&model, &prompts(1), dense_slot, Axis::Timestep, 2, 0, ForwardOptions::default());
    assert!(matches!(r, Err(Error::Query(_))));
    let log = analysis::collect_routing(&model, &prompts(1), 2, 0, ForwardOptions::default()).unwrap();
    assert!(matches!(analysis::histogram(&log, dense_slot, Axis::Timestep), Err(Error::Query(_))));
}

#[test]
fn topk_sweep_runs_every_k() {
    let model = moe_model(5, &[0]);
    let val: Vec<_> = (0..4).map(|i| common::random_sample(&model.config, i)).collect();
    let results = analysis::topk_sweep(&model, &prompts(2), &[0, 1, 2, 12], &val, 3, 5).unwrap();
    assert_eq!(results.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 2, 12]);
    for r in &results {
        assert!(r.samples.iter().all(|s| s.is_finite()));
        assert!(r.val_loss.is_finite());
    }
    let again = analysis::topk_sweep(&model, &prompts(2), &[0], &val, 3, 5).unwrap();
    assert_eq!(again[0], results[0]);
    assert!(analysis::topk_sweep(&model, &prompts(1), &[13], &val, 1, 5).is_err());
}

#[test]
fn probe_identity_blocks_are_zero() {
    let fresh = DitModel::new(tiny_config(), 0).unwrap();
    let corpus = Corpus::new(CorpusConfig::default(), &tiny_config()).unwrap();
    let samples = corpus.clean(Split::Validation, 4);
    let table = analysis::block_io_mse_probe(&fresh, &samples, &[0.2, 0.8], 0).unwrap();
    assert_eq!(table.records.len(), 4 * 2 * 5);
    assert!(table.records.iter().all(|r| r.mse == 0.0));
    assert_eq!(analysis::log_mse(0.0), analysis::LOG_FLOOR.ln());
}

#[test]
fn probe_marginals_are_consistent() {
    let model = active_model(6);
    let corpus = Corpus::new(CorpusConfig::default(), &tiny_config()).unwrap();
    let samples = corpus.clean(Split::Validation, 20);
    let table = analysis::block_io_mse_probe(&model, &samples, &[0.1, 0.5, 0.9], 6).unwrap();
    assert!(table.records.iter().all(|r| r.mse >= 0.0));
    let by_prompt = table.by_prompt();
    let by_t = table.by_timestep();
    for l in 0..5 {
        for ti in 0..3 {
            // two samples per category, so the category means average to the overall mean
            let mean: f64 = by_prompt[l][ti].iter().sum::<f64>() / 10.0;
            assert!((mean - by_t[l][ti]).abs() < 1e-12 * by_t[l][ti].max(1.0));
        }
    }
    let grouped = mob::group_blocks(&model, &[MobGroupSpec::new(2, 3, 1)], 0).unwrap();
    assert!(analysis::block_io_mse_probe(&grouped, &samples, &[0.5], 0).is_err());
}

#[test]
fn dense_report_activates_everything() {
    let model = active_model(0);
    let r = analysis::param_flop_report(&model).unwrap();
    assert_eq!(r.total, r.activated);
    assert_eq!(r.total, model.params.iter().map(|(_, t)| t.numel()).sum::<usize>());
    assert_eq!(r.modules.iter().map(|m| m.total).sum::<usize>(), r.total);
    assert_eq!(r.activated_blocks, 5);
    assert!(r.ffn.iter().all(|f| f.activated_fraction() == 1.0));
}

#[test]
fn moe_ffn_activates_three_eighths() {
    let model = moe_model(1, &[0]);
    let r = analysis::param_flop_report(&model).unwrap();
    for f in &r.ffn {
        if f.slot.block == 0 {
            assert_eq!(f.activated_weights, f.dense_weights);
        } else {
            assert_eq!(f.total_weights, f.dense_weights);
            assert_eq!(f.activated_weights * 8, f.dense_weights * 3);
            assert_eq!(f.activated_fraction(), 0.375);
        }
    }
    assert!(r.activated < r.total);
    let dense = analysis::param_flop_report(&active_model(1)).unwrap();
    assert!(r.flops < dense.flops);
    let full = analysis::param_flop_report_at(&model, ForwardOptions { topk: Some(12) }).unwrap();
    assert!(full.flops > r.flops);
}

/// Activated parameters by enumeration: experts `0..k` stand in for any
/// `k` selected experts and the first window for any window, since all
/// experts and all blocks of a group have equal size.
fn activated_oracle(model: &DitModel) -> usize {
    model
        .params
        .iter()
        .filter(|(name, _)| {
            if let Some(rest) = name.strip_prefix("block.") {
                let l: usize = rest[..2].parse().unwrap();
                if let Some(g) = model.layout.group_of(l) {
                    let spec = &model.layout.groups[g];
                    if l >= spec.start + spec.active {
                        return false;
                    }
                }
                if let Some(i) = name.find(".expert.") {
                    let j: usize = name[i + 8..i + 10].parse().unwrap();
                    return j < 2;
                }
            }
            true
        })
        .map(|(_, t)| t.numel())
        .sum()
}

#[test]
fn grouping_drops_two_blocks_per_group() {
    let moe = moe_model(2, &[0]);
    let before = analysis::param_flop_report(&moe).unwrap();
    let grouped = mob::group_blocks(&moe, &[MobGroupSpec::new(2, 3, 1)], 2).unwrap();
    let after = analysis::param_flop_report(&grouped).unwrap();
    assert_eq!(before.activated_blocks - after.activated_blocks, 2);
    assert_eq!(after.groups.len(), 1);
    assert_eq!(after.activated, activated_oracle(&grouped));
    assert_eq!(before.activated, activated_oracle(&moe));
    let router = 3 * 2 * 8 + 3 * grouped.config.adaln();
    let block = |l: usize| grouped.params.numel_with_prefix(&format!("block.{l:02}."));
    let inactive_experts: usize = before.ffn.iter().map(|f| f.total - f.activated).sum::<usize>();
    assert_eq!(before.activated, before.total - inactive_experts);
    let single_active = block(3) - before.ffn.iter().find(|f| f.slot.block == 3).map(|f| f.total - f.activated).unwrap();
    assert_eq!(after.activated, before.activated + router - 2 * single_active);
    assert!(after.flops < before.flops);
}
