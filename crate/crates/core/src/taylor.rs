//! Enhanced MoE initialization: score every FFN intermediate unit with the
//! first-order Taylor metric, keep the best units as the shared expert and
//! deal the rest out to the normal experts.
//!
//! A segment is one intermediate unit `j`: column `j` of `W₁`, entry `j` of
//! `b₁` and row `j` of `W₂`. Because GeLU acts per unit, any partition of the
//! units gives `dense(x) == shared(x) + Σ expertᵢ(x)` exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::{DitModel, FfnKind, FfnSlot, ForwardOptions};
use crate::error::{config, contract, Result};
use crate::flow::{self, FlowSample};
use crate::moe::{FfnWeights, MoeConfig, MoeWeights};
use crate::params::Ctx;
use crate::rng;
use crate::tensor::Tensor;

/// Default number of calibration batches.
pub const CALIBRATION_BATCHES: usize = 64;

/// Standard deviation of fresh gate weights.
pub const GATE_INIT_STD: f64 = 0.02;

/// `|w · ∂L/∂w|`
pub fn taylor_score(w: f64, grad: f64) -> f64 {
    libm::fabs(w * grad)
}

/// Accumulated importance of every segment of one FFN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub slot: FfnSlot,
    pub scores: Vec<f64>,
    /// Batches accumulated so far.
    pub count: usize,
}

impl SegmentScores {
    pub fn new(slot: FfnSlot, width: usize) -> Self {
        Self {
            slot,
            scores: vec![0.0; width],
            count: 0,
        }
    }

    /// Adds one batch worth of per-weight scores, summed per segment.
    pub fn accumulate(&mut self, weights: &FfnWeights, grads: &FfnWeights) -> Result<()> {
        let width = self.scores.len();
        let (h, w1_cols) = weights.w1.dims2();
        if w1_cols != width || weights.w2.dims2().0 != width || weights.b1.numel() != width {
            return Err(contract(format!("{}: weights do not match {width} segments", self.slot)));
        }
        for (j, score) in self.scores.iter_mut().enumerate() {
            let mut s = taylor_score(weights.b1.data()[j], grads.b1.data()[j]);
            for i in 0..h {
                let k = i * width + j;
                s += taylor_score(weights.w1.data()[k], grads.w1.data()[k]);
            }
            for (w, g) in weights.w2.row(j).iter().zip(grads.w2.row(j)) {
                s += taylor_score(*w, *g);
            }
            *score += s;
        }
        self.count += 1;
        Ok(())
    }
}

/// Segment scores of every dense FFN, accumulated over `batches` of the
/// rectified-flow loss.
pub fn accumulate_importance(
    model: &DitModel,
    batches: &[Vec<FlowSample>],
) -> Result<BTreeMap<FfnSlot, SegmentScores>> {
    let slots: Vec<FfnSlot> = model
        .layout
        .ffn
        .iter()
        .filter(|e| e.kind == FfnKind::Dense)
        .map(|e| e.slot)
        .collect();
    let width = model.config.ffn_width();
    let mut out: BTreeMap<FfnSlot, SegmentScores> =
        slots.iter().map(|&s| (s, SegmentScores::new(s, width))).collect();
    for batch in batches {
        let mut ctx = Ctx::train(&model.params);
        let loss = flow::rf_loss(&mut ctx, model, batch, ForwardOptions::default())?;
        ctx.backward(loss)?;
        let grads = ctx.grads();
        for slot in &slots {
            let prefix = slot.prefix();
            let weights = FfnWeights::read(&model.params, &prefix, false)?;
            let grad = |name: &str| {
                grads
                    .get(&format!("{prefix}.{name}"))
                    .cloned()
                    .ok_or_else(|| contract(format!("no gradient for {prefix}.{name}")))
            };
            let g = FfnWeights {
                w1: grad("w1")?,
                b1: grad("b1")?,
                w2: grad("w2")?,
                b2: None,
            };
            out.get_mut(slot).expect("slot listed").accumulate(&weights, &g)?;
        }
    }
    Ok(out)
}

/// Which segments go where for one FFN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub shared: Vec<usize>,
    pub experts: Vec<Vec<usize>>,
}

impl PartitionPlan {
    /// Checks that the lists partition `0..width`.
    pub fn validate(&self, width: usize) -> Result<()> {
        let mut seen = vec![false; width];
        for &j in self.shared.iter().chain(self.experts.iter().flatten()) {
            if j >= width || seen[j] {
                return Err(contract(format!("segment {j} is out of range or assigned twice")));
            }
            seen[j] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(contract("partition leaves segments unassigned"));
        }
        Ok(())
    }
}

/// Segment indices sorted by descending score; ties keep the lower index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top `r_s·h` segments to the shared expert, the rest dealt round-robin in
/// rank order to the `n` experts.
pub fn partition(scores: &[f64], cfg: &MoeConfig, hidden: usize, ffn_ratio: f64) -> Result<PartitionPlan> {
    cfg.validate(hidden, ffn_ratio)?;
    let width = scores.len();
    let shared_w = cfg.shared_width(hidden);
    let expert_w = cfg.expert_width(hidden);
    if shared_w + cfg.n_experts * expert_w != width {
        return Err(config(format!(
            "{width} segments cannot be split into {shared_w} shared + {} x {expert_w}",
            cfg.n_experts
        )));
    }
    let order = rank(scores);
    let shared = order[..shared_w].to_vec();
    let mut experts = vec![Vec::with_capacity(expert_w); cfg.n_experts];
    for (i, &j) in order[shared_w..].iter().enumerate() {
        experts[i % cfg.n_experts].push(j);
    }
    Ok(PartitionPlan { shared, experts })
}

fn gather_segments(dense: &FfnWeights, idx: &[usize], b2: Option<Tensor>) -> Result<FfnWeights> {
    let (h, width) = dense.w1.dims2();
    let out_dim = dense.w2.dims2().1;
    let mut w1 = Vec::with_capacity(h * idx.len());
    for i in 0..h {
        for &j in idx {
            w1.push(dense.w1.data()[i * width + j]);
        }
    }
    let b1 = idx.iter().map(|&j| dense.b1.data()[j]).collect();
    let mut w2 = Vec::with_capacity(idx.len() * out_dim);
    for &j in idx {
        w2.extend_from_slice(dense.w2.row(j));
    }
    Ok(FfnWeights {
        w1: Tensor::matrix(h, idx.len(), w1)?,
        b1: Tensor::vector(b1),
        w2: Tensor::matrix(idx.len(), out_dim, w2)?,
        b2,
    })
}

/// Builds the MoE weights of one layer from its dense FFN. The shared
/// expert keeps `b₂`; gates are drawn from N(0, 0.02²).
pub fn assemble_experts(dense: &FfnWeights, plan: &PartitionPlan, rng: &mut impl Rng) -> Result<MoeWeights> {
    let (h, width) = dense.w1.dims2();
    if dense.b1.numel() != width || dense.w2.dims2().0 != width {
        return Err(contract("dense FFN weights have inconsistent widths"));
    }
    plan.validate(width)?;
    let b2 = dense
        .b2
        .clone()
        .ok_or_else(|| contract("dense FFN has no output bias"))?;
    let shared = gather_segments(dense, &plan.shared, Some(b2))?;
    let experts = plan
        .experts
        .iter()
        .map(|idx| gather_segments(dense, idx, None))
        .collect::<Result<Vec<_>>>()?;
    let gate = rng::randn(rng, &[plan.experts.len(), h], GATE_INIT_STD);
    Ok(MoeWeights { shared, experts, gate })
}
