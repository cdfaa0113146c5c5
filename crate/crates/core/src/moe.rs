//! Mixture-of-Experts FFN: one shared expert, `n` normal experts and a
//! softmax gate with top-k selection renormalized over the selected set.
//!
//! Normal experts carry no output bias; the dense FFN's `b2` lives in the
//! shared expert alone. This is what makes `dense(x) == shared(x) + Σ expertᵢ(x)`
//! exact right after the FFN is split (see [`crate::taylor`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dit::{DitModel, FfnKind, FfnSlot};
use crate::error::{config, contract, Result};
use crate::params::{Ctx, Params};
use crate::rng;
use crate::tape::{self, Tape, Var};
use crate::taylor::{self, PartitionPlan};
use crate::tensor::Tensor;

const RATIO_EPS: f64 = 1e-9;

/// Shape of an MoE layer. The default is 1S12E2A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    /// Expansion ratio of the shared expert, `r_s`.
    pub shared_ratio: f64,
    /// Expansion ratio of each normal expert, `r_n`.
    pub normal_ratio: f64,
    pub n_experts: usize,
    pub top_k: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            shared_ratio: 1.0,
            normal_ratio: 0.25,
            n_experts: 12,
            top_k: 2,
        }
    }
}

fn integral(v: f64) -> Option<usize> {
    let r = libm::round(v);
    (libm::fabs(v - r) < RATIO_EPS && r >= 0.0).then_some(r as usize)
}

impl MoeConfig {
    /// Checks `r_s + n·r_n == r`, integer widths and `k ≤ n`.
    pub fn validate(&self, hidden: usize, ffn_ratio: f64) -> Result<()> {
        let total = self.shared_ratio + self.n_experts as f64 * self.normal_ratio;
        if libm::fabs(total - ffn_ratio) > RATIO_EPS {
            return Err(config(format!(
                "r_s + n·r_n = {total} but the replaced FFN has r = {ffn_ratio}"
            )));
        }
        if self.top_k > self.n_experts {
            return Err(config(format!("top_k {} > n_experts {}", self.top_k, self.n_experts)));
        }
        match integral(self.shared_ratio * hidden as f64) {
            Some(w) if w > 0 => {}
            _ => return Err(config("r_s·h must be a positive integer")),
        }
        if self.n_experts > 0 {
            match integral(self.normal_ratio * hidden as f64) {
                Some(w) if w > 0 => {}
                _ => return Err(config("r_n·h must be a positive integer")),
            }
        }
        Ok(())
    }

    pub fn shared_width(&self, hidden: usize) -> usize {
        libm::round(self.shared_ratio * hidden as f64) as usize
    }

    pub fn expert_width(&self, hidden: usize) -> usize {
        libm::round(self.normal_ratio * hidden as f64) as usize
    }

    /// `r_a = r_s + k·r_n`
    pub fn activated_ratio(&self) -> f64 {
        self.activated_ratio_at(self.top_k)
    }

    pub fn activated_ratio_at(&self, k: usize) -> f64 {
        self.shared_ratio + k as f64 * self.normal_ratio
    }

    /// Activated-parameter compression rate of the FFN, `r_a / r`.
    pub fn compression_rate(&self, ffn_ratio: f64) -> f64 {
        self.activated_ratio() / ffn_ratio
    }

    /// `xSyEzA` label, e.g. `1S12E2A`.
    pub fn label(&self) -> String {
        format!("{}S{}E{}A", self.shared_ratio, self.n_experts, self.top_k)
    }
}

/// Routing of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    /// Softmax scores over all `n` experts.
    pub alpha: Vec<f64>,
    /// Selected experts in rank order.
    pub selected: Vec<usize>,
    /// Weight per expert: renormalized `alpha` on the selected set, 0 elsewhere.
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest scores, best first; equal scores go to the
/// lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Renormalizes `alpha` over `selected`.
pub fn renormalize(alpha: &[f64], selected: &[usize]) -> Vec<f64> {
    let mut weights = vec![0.0; alpha.len()];
    let s: f64 = selected.iter().map(|&i| alpha[i]).sum();
    if s > 0.0 {
        for &i in selected {
            weights[i] = alpha[i] / s;
        }
    }
    weights
}

/// Gate for a single token: `α = softmax(W_g x)`, top-k, renormalize.
pub fn gate(x_token: &[f64], w_g: &Tensor, k: usize) -> Result<GateDecision> {
    let (n, h) = w_g.dims2();
    if k > n {
        return Err(config(format!("top_k {k} > n_experts {n}")));
    }
    if x_token.len() != h {
        return Err(crate::error::Error::Shape {
            op: "gate",
            lhs: vec![x_token.len()],
            rhs: w_g.shape().to_vec(),
        });
    }
    let logits: Vec<f64> = (0..n)
        .map(|i| w_g.row(i).iter().zip(x_token).map(|(a, b)| a * b).sum())
        .collect();
    let alpha = softmax(&logits);
    let selected = top_k_indices(&alpha, k);
    let weights = renormalize(&alpha, &selected);
    Ok(GateDecision {
        alpha,
        selected,
        weights,
    })
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Routing of every token of one MoE layer in one forward pass.
#[derive(Debug, Clone)]
pub struct MoeTrace {
    pub slot: FfnSlot,
    pub output: Var,
    /// Gate weights `[T × n]`; `None` when `k = 0`.
    pub gates: Option<Var>,
    pub selected: Vec<Vec<usize>>,
    pub n_experts: usize,
    pub top_k: usize,
}

/// Two-layer GeLU MLP with parameters `{prefix}.w1/b1/w2[/b2]`.
pub fn mlp(ctx: &mut Ctx, prefix: &str, x: Var, with_b2: bool) -> Result<Var> {
    let w1 = ctx.p(&format!("{prefix}.w1"))?;
    let b1 = ctx.p(&format!("{prefix}.b1"))?;
    let w2 = ctx.p(&format!("{prefix}.w2"))?;
    let b2 = if with_b2 {
        Some(ctx.p(&format!("{prefix}.b2"))?)
    } else {
        None
    };
    let hdn = ctx.tape.linear(x, w1, Some(b1))?;
    let hdn = ctx.tape.gelu(hdn)?;
    ctx.tape.linear(hdn, w2, b2)
}

pub fn shared_prefix(slot: &FfnSlot) -> String {
    format!("{}.shared", slot.prefix())
}

pub fn expert_prefix(slot: &FfnSlot, j: usize) -> String {
    format!("{}.expert.{j:02}", slot.prefix())
}

pub fn gate_name(slot: &FfnSlot) -> String {
    format!("{}.gate", slot.prefix())
}

/// Gate all tokens of `x [T×h]`: returns `g [T×n]` on the tape and the
/// selected experts per token.
pub fn route_tokens(ctx: &mut Ctx, x: Var, gate: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let n = ctx.value(gate).dims2().0;
    if k > n {
        return Err(config(format!("top_k {k} > n_experts {n}")));
    }
    let gt = ctx.tape.transpose(gate)?;
    let logits = ctx.tape.matmul(x, gt)?;
    let alpha = ctx.tape.softmax_lastdim(logits)?;
    let (t, _) = ctx.value(alpha).dims2();
    let mut mask = vec![false; t * n];
    let mut selected = Vec::with_capacity(t);
    for row in 0..t {
        let sel = top_k_indices(ctx.value(alpha).row(row), k);
        for &j in &sel {
            mask[row * n + j] = true;
        }
        selected.push(sel);
    }
    let g = ctx.tape.topk_renorm(alpha, &mask)?;
    Ok((g, selected))
}

/// `y = MLP_s(x) + Σ_{i∈I} g_i · MLP_i(x)` for every token of `x [T×h]`.
pub fn moe_forward(ctx: &mut Ctx, slot: FfnSlot, x: Var, cfg: &MoeConfig, k: usize) -> Result<MoeTrace> {
    if k > cfg.n_experts {
        return Err(config(format!("top_k {k} > n_experts {}", cfg.n_experts)));
    }
    let shared = mlp(ctx, &shared_prefix(&slot), x, true)?;
    let t = ctx.value(x).dims2().0;
    if k == 0 || cfg.n_experts == 0 {
        return Ok(MoeTrace {
            slot,
            output: shared,
            gates: None,
            selected: vec![Vec::new(); t],
            n_experts: cfg.n_experts,
            top_k: 0,
        });
    }
    let gate = ctx.p(&gate_name(&slot))?;
    let (g, selected) = route_tokens(ctx, x, gate, k)?;
    let n = cfg.n_experts;
    let mut y = shared;
    for j in 0..n {
        let tokens: Vec<usize> = (0..t).filter(|&row| selected[row].contains(&j)).collect();
        if tokens.is_empty() {
            continue;
        }
        let xs = ctx.tape.gather_rows(x, &tokens)?;
        let out = mlp(ctx, &expert_prefix(&slot, j), xs, false)?;
        let flat: Vec<usize> = tokens.iter().map(|&row| row * n + j).collect();
        let w = ctx.tape.take(g, &flat, &[tokens.len()])?;
        let scaled = ctx.tape.scale_rows(out, w)?;
        let contrib = ctx.tape.scatter_add_rows(scaled, &tokens, t)?;
        y = ctx.tape.add(y, contrib)?;
    }
    Ok(MoeTrace {
        slot,
        output: y,
        gates: Some(g),
        selected,
        n_experts: n,
        top_k: k,
    })
}

/// Selection counts `Σ_t I(t,i)` per expert.
pub fn selection_counts(selected: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for sel in selected {
        for &i in sel {
            counts[i] += 1;
        }
    }
    counts
}

/// `Σᵢ (n/(T k) Σₜ I(t,i)) · (1/T Σₜ g(t,i))` evaluated directly.
/// `gates` is `[T × n]`. Zero when `k = 0`.
pub fn load_balance_value(selected: &[Vec<usize>], gates: &Tensor, n: usize, k: usize) -> f64 {
    let t = selected.len();
    if k == 0 || t == 0 {
        return 0.0;
    }
    let counts = selection_counts(selected, n);
    (0..n)
        .map(|i| {
            let frac = n as f64 / (t * k) as f64 * counts[i] as f64;
            let mean_g: f64 = (0..t).map(|row| gates.data()[row * n + i]).sum::<f64>() / t as f64;
            frac * mean_g
        })
        .sum()
}

/// Load-balancing loss on the tape. The selection fraction is a constant;
/// the gradient flows through the gate weights only.
pub fn load_balance_loss(tape: &mut Tape, gates: Var, selected: &[Vec<usize>], n: usize, k: usize) -> Result<Var> {
    let t = selected.len();
    if k == 0 || t == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if tape.value(gates).shape() != [t, n] {
        return Err(contract("load_balance_loss: gate matrix does not match the routing"));
    }
    let counts = selection_counts(selected, n);
    let mut coef = Tensor::zeros(&[t, n]);
    for row in 0..t {
        for i in 0..n {
            coef.data_mut()[row * n + i] = n as f64 / (t * k) as f64 * counts[i] as f64 / t as f64;
        }
    }
    let coef = tape.constant(coef);
    let weighted = tape.mul(gates, coef)?;
    tape.sum(weighted)
}

/// Weights of one two-layer MLP, used outside the tape for assembly and
/// exact-reassembly checks.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Option<Tensor>,
}

impl FfnWeights {
    pub fn read(params: &Params, prefix: &str, with_b2: bool) -> Result<Self> {
        Ok(Self {
            w1: params.get(&format!("{prefix}.w1"))?.clone(),
            b1: params.get(&format!("{prefix}.b1"))?.clone(),
            w2: params.get(&format!("{prefix}.w2"))?.clone(),
            b2: if with_b2 {
                Some(params.get(&format!("{prefix}.b2"))?.clone())
            } else {
                None
            },
        })
    }

    pub fn write(&self, params: &mut Params, prefix: &str) {
        params.insert(format!("{prefix}.w1"), self.w1.clone());
        params.insert(format!("{prefix}.b1"), self.b1.clone());
        params.insert(format!("{prefix}.w2"), self.w2.clone());
        if let Some(b2) = &self.b2 {
            params.insert(format!("{prefix}.b2"), b2.clone());
        }
    }

    pub fn width(&self) -> usize {
        self.b1.numel()
    }

    pub fn numel(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.as_ref().map_or(0, Tensor::numel)
    }

    /// Plain evaluation on one token.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (h, width) = self.w1.dims2();
        let out_dim = self.w2.dims2().1;
        let mut hidden = self.b1.data().to_vec();
        for (i, &xv) in x.iter().enumerate().take(h) {
            for (hv, wv) in hidden.iter_mut().zip(self.w1.row(i)) {
                *hv += xv * wv;
            }
        }
        let mut out = match &self.b2 {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; out_dim],
        };
        for (j, hv) in hidden.iter().enumerate().take(width) {
            let a = tape::gelu(*hv);
            for (o, wv) in out.iter_mut().zip(self.w2.row(j)) {
                *o += a * wv;
            }
        }
        out
    }
}

/// All expert weights of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeWeights {
    pub shared: FfnWeights,
    pub experts: Vec<FfnWeights>,
    /// `W_g`, `[n × h]`.
    pub gate: Tensor,
}

impl MoeWeights {
    pub fn read(params: &Params, slot: &FfnSlot, n: usize) -> Result<Self> {
        Ok(Self {
            shared: FfnWeights::read(params, &shared_prefix(slot), true)?,
            experts: (0..n)
                .map(|j| FfnWeights::read(params, &expert_prefix(slot, j), false))
                .collect::<Result<_>>()?,
            gate: params.get(&gate_name(slot))?.clone(),
        })
    }

    pub fn write(&self, params: &mut Params, slot: &FfnSlot) {
        params.remove_prefix(&format!("{}.", slot.prefix()));
        self.shared.write(params, &shared_prefix(slot));
        for (j, e) in self.experts.iter().enumerate() {
            e.write(params, &expert_prefix(slot, j));
        }
        params.insert(gate_name(slot), self.gate.clone());
    }

    /// Plain forward of one token; `k = 0` is the shared expert alone.
    pub fn forward(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut y = self.shared.forward(x);
        if k == 0 || self.experts.is_empty() {
            return Ok(y);
        }
        let d = gate(x, &self.gate, k)?;
        for &i in &d.selected {
            let e = self.experts[i].forward(x);
            for (yv, ev) in y.iter_mut().zip(e) {
                *yv += d.weights[i] * ev;
            }
        }
        Ok(y)
    }

    /// `shared(x) + Σᵢ expertᵢ(x)` with every expert weighted 1.
    pub fn unweighted_sum(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.shared.forward(x);
        for e in &self.experts {
            for (yv, ev) in y.iter_mut().zip(e.forward(x)) {
                *yv += ev;
            }
        }
        y
    }
}

/// Replaces every FFN outside `skip_blocks` with an MoE layer whose experts
/// are carved from the dense weights by `planner`. Gates are drawn from
/// N(0, 0.02²).
pub fn replace_ffns(
    model: &DitModel,
    cfg: &MoeConfig,
    skip_blocks: &[usize],
    seed: u64,
    mut planner: impl FnMut(&FfnSlot) -> Result<PartitionPlan>,
) -> Result<DitModel> {
    let n_blocks = model.config.n_blocks();
    for (i, &b) in skip_blocks.iter().enumerate() {
        if b >= n_blocks {
            return Err(config(format!("skip index {b} outside 0..{n_blocks}")));
        }
        if skip_blocks[..i].contains(&b) {
            return Err(config(format!("skip index {b} listed twice")));
        }
    }
    cfg.validate(model.config.hidden, model.config.ffn_ratio as f64)?;
    let mut out = model.clone();
    for l in 0..n_blocks {
        if skip_blocks.contains(&l) {
            continue;
        }
        for slot in model.ffn_slots(l) {
            if !matches!(model.layout.kind(&slot), Some(FfnKind::Dense)) {
                continue;
            }
            let dense = FfnWeights::read(&model.params, &slot.prefix(), true)?;
            let plan = planner(&slot)?;
            let mut rng = rng::stream(seed, &[rng::tag("gate"), rng::tag(&slot.prefix())]);
            let weights = taylor::assemble_experts(&dense, &plan, &mut rng)?;
            weights.write(&mut out.params, &slot);
            out.layout.set_kind(slot, FfnKind::Moe(cfg.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_1s12e2a() {
        let c = MoeConfig::default();
        assert_eq!(c.label(), "1S12E2A");
        assert!(c.validate(64, 4.0).is_ok());
        assert_eq!(c.activated_ratio(), 1.5);
        assert_eq!(c.compression_rate(4.0), 0.375);
    }

    #[test]
    fn validation_errors() {
        let c = MoeConfig { top_k: 13, ..MoeConfig::default() };
        assert!(c.validate(64, 4.0).is_err());
        let c = MoeConfig { n_experts: 11, ..MoeConfig::default() };
        assert!(c.validate(64, 4.0).is_err());
        // r_n·h = 0.25·6 is not integral
        assert!(MoeConfig::default().validate(6, 4.0).is_err());
    }

    #[test]
    fn gate_example() {
        // W_g rows picked so that x = e0 produces logits ln(0.5), ln(0.3), ln(0.2)
        let w = Tensor::from_rows(&[&[libm::log(0.5)], &[libm::log(0.3)], &[libm::log(0.2)]]).unwrap();
        let d = gate(&[1.0], &w, 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert!((d.weights[0] - 0.625).abs() < 1e-12);
        assert!((d.weights[1] - 0.375).abs() < 1e-12);
        assert_eq!(d.weights[2], 0.0);
    }

    #[test]
    fn gate_uniform_and_empty() {
        let w = Tensor::zeros(&[4, 3]);
        let d = gate(&[0.3, -1.0, 2.0], &w, 4).unwrap();
        for g in &d.weights {
            assert!((g - 0.25).abs() < 1e-15);
        }
        let d = gate(&[0.3, -1.0, 2.0], &w, 0).unwrap();
        assert!(d.selected.is_empty());
        assert!(d.weights.iter().all(|&g| g == 0.0));
        assert!(gate(&[0.0; 3], &w, 5).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.4, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.25; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn balance_analytic_values() {
        let n = 4;
        let k = 2;
        // 8 tokens, each expert chosen by exactly T·k/n = 4 tokens, gates 1/k
        let selected: Vec<Vec<usize>> = (0..8).map(|t| vec![t % 4, (t + 1) % 4]).collect();
        let mut g = Tensor::zeros(&[8, n]);
        for (t, sel) in selected.iter().enumerate() {
            for &i in sel {
                g.data_mut()[t * n + i] = 0.5;
            }
        }
        assert!((load_balance_value(&selected, &g, n, k) - 1.0).abs() < 1e-12);

        let collapsed: Vec<Vec<usize>> = (0..5).map(|_| vec![0]).collect();
        let mut g = Tensor::zeros(&[5, n]);
        for t in 0..5 {
            g.data_mut()[t * n] = 1.0;
        }
        assert!((load_balance_value(&collapsed, &g, n, 1) - n as f64).abs() < 1e-12);
        assert_eq!(load_balance_value(&collapsed, &g, n, 0), 0.0);
    }
}
