//! Diagnostics: expert-selection histograms over sampling trajectories,
//! dynamic top-k sweeps, block input/output probes and parameter/FLOP
//! accounting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSample;
use crate::dit::{block_prefix, BlockKind, DitModel, FfnKind, FfnSlot, ForwardOptions};
use crate::error::{config, contract, Error, Result};
use crate::flow::{self, FlowSample};
use crate::moe;
use crate::params::Ctx;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PromptCategory,
    Timestep,
    TokenPosition,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::PromptCategory, Axis::Timestep, Axis::TokenPosition];

    pub fn name(self) -> &'static str {
        match self {
            Axis::PromptCategory => "prompt_category",
            Axis::Timestep => "timestep",
            Axis::TokenPosition => "token_position",
        }
    }
}

/// A prompt to sample for, with its category label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPrompt {
    pub prompt: Vec<usize>,
    pub category: usize,
}

impl From<&CorpusSample> for LabeledPrompt {
    fn from(s: &CorpusSample) -> Self {
        Self {
            prompt: s.prompt.clone(),
            category: s.category,
        }
    }
}

/// Routing of one MoE layer at one sampling step of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub prompt: usize,
    pub category: usize,
    pub step: usize,
    pub t: f64,
    pub slot: FfnSlot,
    pub n_experts: usize,
    pub top_k: usize,
    pub selected: Vec<Vec<usize>>,
    pub gates: Option<Tensor>,
}

/// Window choice of one MoB group at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub prompt: usize,
    pub step: usize,
    pub t: f64,
    pub group: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingLog {
    pub steps: usize,
    pub n_categories: usize,
    pub records: Vec<RoutingRecord>,
    pub windows: Vec<WindowRecord>,
    pub images: Vec<Tensor>,
}

/// Samples every prompt with `steps` Euler steps and records all routing.
/// Prompt `i` starts from the noise of seed `seed + i`.
pub fn collect_routing(
    model: &DitModel,
    prompts: &[LabeledPrompt],
    steps: usize,
    seed: u64,
    opts: ForwardOptions,
) -> Result<RoutingLog> {
    let mut log = RoutingLog {
        steps,
        n_categories: prompts.iter().map(|p| p.category + 1).max().unwrap_or(0),
        ..RoutingLog::default()
    };
    for (i, p) in prompts.iter().enumerate() {
        let noise = flow::initial_noise(model, seed.wrapping_add(i as u64));
        let image = flow::euler_integrate(noise, steps, |x, t, step| {
            let mut ctx = Ctx::eval(&model.params);
            let out = model.forward(&mut ctx, x, &p.prompt, t, opts)?;
            for trace in &out.moe {
                log.records.push(RoutingRecord {
                    prompt: i,
                    category: p.category,
                    step,
                    t,
                    slot: trace.slot,
                    n_experts: trace.n_experts,
                    top_k: trace.top_k,
                    selected: trace.selected.clone(),
                    gates: trace.gates.map(|g| ctx.value(g).clone()),
                });
            }
            for w in &out.windows {
                log.windows.push(WindowRecord {
                    prompt: i,
                    step,
                    t,
                    group: w.group,
                    start: w.decision.start,
                });
            }
            Ok(ctx.value(out.velocity).clone())
        })?;
        log.images.push(image);
    }
    Ok(log)
}

/// Expert selection counts of one layer along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub slot: FfnSlot,
    pub axis: Axis,
    pub n_experts: usize,
    pub top_k: usize,
    /// `counts[bin][expert]`
    pub counts: Vec<Vec<u64>>,
    /// Tokens observed per bin.
    pub tokens: Vec<u64>,
}

impl SelectionHistogram {
    /// Every row sums to its token count times `k`.
    pub fn row_sums_hold(&self) -> bool {
        self.counts
            .iter()
            .zip(&self.tokens)
            .all(|(row, &t)| row.iter().sum::<u64>() == t * self.top_k as u64)
    }
}

/// Histogram of `slot` along `axis` from a routing log.
pub fn histogram(log: &RoutingLog, slot: FfnSlot, axis: Axis) -> Result<SelectionHistogram> {
    let records: Vec<&RoutingRecord> = log.records.iter().filter(|r| r.slot == slot).collect();
    let first = records
        .first()
        .ok_or_else(|| Error::Query(format!("no routing recorded for {slot}")))?;
    let (n, k) = (first.n_experts, first.top_k);
    let bins = match axis {
        Axis::PromptCategory => log.n_categories,
        Axis::Timestep => log.steps,
        Axis::TokenPosition => records.iter().map(|r| r.selected.len()).max().unwrap_or(0),
    };
    let mut h = SelectionHistogram {
        slot,
        axis,
        n_experts: n,
        top_k: k,
        counts: vec![vec![0; n]; bins],
        tokens: vec![0; bins],
    };
    for r in records {
        for (pos, sel) in r.selected.iter().enumerate() {
            let bin = match axis {
                Axis::PromptCategory => r.category,
                Axis::Timestep => r.step,
                Axis::TokenPosition => pos,
            };
            h.tokens[bin] += 1;
            for &e in sel {
                h.counts[bin][e] += 1;
            }
        }
    }
    Ok(h)
}

/// Samples `prompts` and histograms the routing of `slot` along `axis`.
pub fn expert_frequency(
    model: &DitModel,
    prompts: &[LabeledPrompt],
    slot: FfnSlot,
    axis: Axis,
    steps: usize,
    seed: u64,
    opts: ForwardOptions,
) -> Result<SelectionHistogram> {
    if !matches!(model.layout.kind(&slot), Some(FfnKind::Moe(_))) {
        return Err(Error::Query(format!("{slot} is not an MoE layer")));
    }
    let log = collect_routing(model, prompts, steps, seed, opts)?;
    histogram(&log, slot, axis)
}

/// Expert id per image token of one record, `None` where no expert ran.
/// With `k = 1` this is a spatial assignment map.
pub fn token_assignment(record: &RoutingRecord) -> Vec<Option<usize>> {
    record.selected.iter().map(|s| s.first().copied()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopkResult {
    pub k: usize,
    pub samples: Vec<Tensor>,
    pub val_loss: f64,
}

/// Samples and validation loss for every `k` in `ks`.
pub fn topk_sweep(
    model: &DitModel,
    prompts: &[LabeledPrompt],
    ks: &[usize],
    validation: &[FlowSample],
    steps: usize,
    seed: u64,
) -> Result<Vec<TopkResult>> {
    let max_n = model
        .layout
        .moe_slots()
        .iter()
        .map(|(_, c)| c.n_experts)
        .min()
        .ok_or_else(|| Error::Query("model has no MoE layers".into()))?;
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        if k > max_n {
            return Err(config(format!("top_k {k} > n_experts {max_n}")));
        }
        let opts = ForwardOptions { topk: Some(k) };
        let samples = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| flow::euler_sample(model, &p.prompt, steps, seed.wrapping_add(i as u64), opts))
            .collect::<Result<Vec<_>>>()?;
        let val_loss = flow::rf_loss_value(model, validation, opts)?;
        out.push(TopkResult { k, samples, val_loss });
    }
    Ok(out)
}

/// One block input/output MSE measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub block: usize,
    pub t_index: usize,
    pub category: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub n_blocks: usize,
    pub timesteps: Vec<f64>,
    pub n_categories: usize,
    pub records: Vec<ProbeRecord>,
}

/// Floor applied before taking logs of probe values.
pub const LOG_FLOOR: f64 = 1e-30;

pub fn log_mse(v: f64) -> f64 {
    libm::log(v.max(LOG_FLOOR))
}

impl ProbeTable {
    /// Mean MSE per `[block][timestep][category]`.
    pub fn by_prompt(&self) -> Vec<Vec<Vec<f64>>> {
        let mut sum = vec![vec![vec![0.0; self.n_categories]; self.timesteps.len()]; self.n_blocks];
        let mut cnt = vec![vec![vec![0usize; self.n_categories]; self.timesteps.len()]; self.n_blocks];
        for r in &self.records {
            sum[r.block][r.t_index][r.category] += r.mse;
            cnt[r.block][r.t_index][r.category] += 1;
        }
        for (sb, cb) in sum.iter_mut().zip(&cnt) {
            for (st, ct) in sb.iter_mut().zip(cb) {
                for (s, &c) in st.iter_mut().zip(ct) {
                    if c > 0 {
                        *s /= c as f64;
                    }
                }
            }
        }
        sum
    }

    /// Mean MSE per `[block][timestep]` over all prompts.
    pub fn by_timestep(&self) -> Vec<Vec<f64>> {
        let mut sum = vec![vec![0.0; self.timesteps.len()]; self.n_blocks];
        let mut cnt = vec![vec![0usize; self.timesteps.len()]; self.n_blocks];
        for r in &self.records {
            sum[r.block][r.t_index] += r.mse;
            cnt[r.block][r.t_index] += 1;
        }
        for (sb, cb) in sum.iter_mut().zip(&cnt) {
            for (s, &c) in sb.iter_mut().zip(cb) {
                if c > 0 {
                    *s /= c as f64;
                }
            }
        }
        sum
    }
}

/// MSE between each block's input and output image-stream features for
/// every sample at every timestep. The model must not have MoB groups.
pub fn block_io_mse_probe(
    model: &DitModel,
    samples: &[CorpusSample],
    timesteps: &[f64],
    seed: u64,
) -> Result<ProbeTable> {
    if !model.layout.groups.is_empty() {
        return Err(contract("block probe needs every block to run"));
    }
    let mut table = ProbeTable {
        n_blocks: model.config.n_blocks(),
        timesteps: timesteps.to_vec(),
        n_categories: samples.iter().map(|s| s.category + 1).max().unwrap_or(0),
        records: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let eps = rng::randn(
            &mut rng::stream(seed, &[rng::tag("probe"), i as u64]),
            s.image.shape(),
            1.0,
        );
        for (ti, &t) in timesteps.iter().enumerate() {
            let x_t = flow::interpolate(&s.image, &eps, t)?;
            let mut ctx = Ctx::eval(&model.params);
            let out = model.forward(&mut ctx, &x_t, &s.prompt, t, ForwardOptions::default())?;
            let mut input = ctx.value(out.embed).clone();
            for (l, tap) in out.taps.iter().enumerate() {
                let output = ctx.value(tap.ok_or_else(|| contract("block skipped"))?).clone();
                table.records.push(ProbeRecord {
                    block: l,
                    t_index: ti,
                    category: s.category,
                    mse: crate::distill::mse(&input, &output)?,
                });
                input = output;
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub name: String,
    pub total: usize,
    pub activated: usize,
}

/// Weight-only counts (`W₁` and `W₂`) of one FFN position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnCount {
    pub slot: FfnSlot,
    /// `2·r·h²`
    pub dense_weights: usize,
    pub total_weights: usize,
    pub activated_weights: usize,
    /// Total parameters including biases and gate.
    pub total: usize,
    pub activated: usize,
}

impl FfnCount {
    pub fn activated_fraction(&self) -> f64 {
        self.activated_weights as f64 / self.dense_weights as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: usize,
    pub total: usize,
    pub activated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub activated: usize,
    /// `embed`, `cond`, `final`, `router`, and one entry per block. A block's
    /// activated count assumes it runs.
    pub modules: Vec<ModuleCount>,
    pub ffn: Vec<FfnCount>,
    pub groups: Vec<GroupCount>,
    /// Blocks that run in one forward pass.
    pub activated_blocks: usize,
    /// Multiply-adds counted as 2 FLOPs, matmuls only.
    pub flops: u64,
}

fn module_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("block.") {
        return format!("block.{}", &rest[..2]);
    }
    if name.starts_with("mob.") {
        return "router".into();
    }
    name.split('.').next().unwrap_or(name).into()
}

fn weight_numel(p: &crate::params::Params, prefix: &str) -> Result<usize> {
    Ok(p.get(&format!("{prefix}.w1"))?.numel() + p.get(&format!("{prefix}.w2"))?.numel())
}

fn ffn_count(model: &DitModel, slot: FfnSlot, k: Option<usize>) -> Result<FfnCount> {
    let p = &model.params;
    let cfg = &model.config;
    let dense_weights = 2 * cfg.ffn_ratio * cfg.hidden * cfg.hidden;
    let total = p.numel_with_prefix(&format!("{}.", slot.prefix()));
    Ok(match model.layout.kind(&slot) {
        Some(FfnKind::Moe(mc)) => {
            let k = k.unwrap_or(mc.top_k);
            let shared_w = weight_numel(p, &moe::shared_prefix(&slot))?;
            let shared_all = p.numel_with_prefix(&format!("{}.", moe::shared_prefix(&slot)));
            let gate = p.get(&moe::gate_name(&slot))?.numel();
            let (expert_w, expert_all) = if mc.n_experts > 0 {
                let e = moe::expert_prefix(&slot, 0);
                (weight_numel(p, &e)?, p.numel_with_prefix(&format!("{e}.")))
            } else {
                (0, 0)
            };
            FfnCount {
                slot,
                dense_weights,
                total_weights: shared_w + mc.n_experts * expert_w,
                activated_weights: shared_w + k * expert_w,
                total,
                activated: shared_all + gate + k * expert_all,
            }
        }
        _ => {
            let w = weight_numel(p, &slot.prefix())?;
            FfnCount {
                slot,
                dense_weights,
                total_weights: w,
                activated_weights: w,
                total,
                activated: total,
            }
        }
    })
}

/// Parameter and FLOP accounting at the configured top-k.
pub fn param_flop_report(model: &DitModel) -> Result<ParamReport> {
    param_flop_report_at(model, ForwardOptions::default())
}

/// Parameter and FLOP accounting, with an optional top-k override.
pub fn param_flop_report_at(model: &DitModel, opts: ForwardOptions) -> Result<ParamReport> {
    let cfg = &model.config;
    let mut modules: BTreeMap<String, ModuleCount> = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let m = module_of(name);
        let e = modules.entry(m.clone()).or_insert(ModuleCount {
            name: m,
            total: 0,
            activated: 0,
        });
        e.total += t.numel();
        e.activated += t.numel();
    }
    let mut ffn = Vec::new();
    for l in 0..cfg.n_blocks() {
        for slot in model.ffn_slots(l) {
            let c = ffn_count(model, slot, opts.topk)?;
            let m = modules.get_mut(&block_prefix(l)).expect("block params exist");
            m.activated -= c.total - c.activated;
            ffn.push(c);
        }
    }
    let block_active = |l: usize| modules[&block_prefix(l)].activated;
    let block_flops: Vec<u64> = (0..cfg.n_blocks()).map(|l| block_flops(model, l, opts)).collect();

    let mut groups = Vec::new();
    let mut activated: usize = modules
        .iter()
        .filter(|(k, _)| !k.starts_with("block."))
        .map(|(_, m)| m.activated)
        .sum();
    let mut flops = stem_flops(model);
    let mut activated_blocks = 0;
    for l in 0..cfg.n_blocks() {
        if model.layout.group_of(l).is_none() {
            activated += block_active(l);
            flops += block_flops[l];
            activated_blocks += 1;
        }
    }
    for (g, spec) in model.layout.groups.iter().enumerate() {
        let window = |q: usize| q..q + spec.active;
        let best = (spec.start..=spec.start + spec.len - spec.active)
            .map(|q| window(q).map(block_active).sum::<usize>())
            .max()
            .unwrap_or(0);
        let best_flops = (spec.start..=spec.start + spec.len - spec.active)
            .map(|q| window(q).map(|l| block_flops[l]).sum::<u64>())
            .max()
            .unwrap_or(0);
        let total = (spec.start..spec.start + spec.len)
            .map(|l| modules[&block_prefix(l)].total)
            .sum();
        activated += best;
        flops += best_flops + router_flops(model, spec.len);
        activated_blocks += spec.active;
        groups.push(GroupCount {
            group: g,
            total,
            activated: best,
        });
    }
    Ok(ParamReport {
        total: model.params.total_numel(),
        activated,
        modules: modules.into_values().collect(),
        ffn,
        groups,
        activated_blocks,
        flops,
    })
}

fn mm(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

fn stem_flops(model: &DitModel) -> u64 {
    let c = &model.config;
    let (h, da, ti) = (c.hidden, c.adaln(), c.img_tokens());
    mm(ti, c.patch_dim(), h)
        + mm(1, h, da)
        + mm(1, da, da)
        + mm(1, h, da)
        + mm(1, da, 2 * h)
        + mm(ti, h, c.patch_dim())
}

fn router_flops(model: &DitModel, m: usize) -> u64 {
    let c = &model.config;
    mm(1, 2 * c.hidden, m) + mm(1, c.adaln(), m)
}

fn ffn_flops(model: &DitModel, slot: FfnSlot, tokens: usize, opts: ForwardOptions) -> u64 {
    let c = &model.config;
    let h = c.hidden;
    match model.layout.kind(&slot) {
        Some(FfnKind::Moe(mc)) => {
            let k = opts.topk.unwrap_or(mc.top_k);
            let width = mc.shared_width(h) + k * mc.expert_width(h);
            let gate = if k > 0 { mm(tokens, h, mc.n_experts) } else { 0 };
            2 * mm(tokens, h, width) + gate
        }
        _ => 2 * mm(tokens, h, c.ffn_width()),
    }
}

/// Matmul FLOPs of block `l` for one sample.
pub fn block_flops(model: &DitModel, l: usize, opts: ForwardOptions) -> u64 {
    let c = &model.config;
    let (h, da) = (c.hidden, c.adaln());
    let n = c.img_tokens() + c.text_len;
    let attention = 2 * mm(n, h, n);
    let per_stream = |tokens: usize| mm(1, da, 6 * h) + mm(tokens, h, 3 * h) + mm(tokens, h, h);
    let ffns: u64 = model
        .ffn_slots(l)
        .into_iter()
        .map(|slot| {
            let tokens = match slot.stream {
                crate::dit::Stream::Image => c.img_tokens(),
                crate::dit::Stream::Text => c.text_len,
                crate::dit::Stream::Joint => n,
            };
            ffn_flops(model, slot, tokens, opts)
        })
        .sum();
    let streams = match c.block_kind(l) {
        BlockKind::Double => per_stream(c.img_tokens()) + per_stream(c.text_len),
        BlockKind::Single => per_stream(n),
    };
    streams + attention + ffns
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names() {
        assert_eq!(module_of("block.03.img.ffn.w1"), "block.03");
        assert_eq!(module_of("mob.0.wx"), "router");
        assert_eq!(module_of("embed.patch.w"), "embed");
    }

    #[test]
    fn histogram_row_sums() {
        let h = SelectionHistogram {
            slot: FfnSlot { block: 0, stream: crate::dit::Stream::Image },
            axis: Axis::Timestep,
            n_experts: 3,
            top_k: 2,
            counts: vec![vec![1, 1, 2], vec![0, 0, 0]],
            tokens: vec![2, 0],
        };
        assert!(h.row_sums_hold());
    }
}
