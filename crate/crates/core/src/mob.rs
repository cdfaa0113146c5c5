//! Mixture of Blocks: a group of `m` consecutive blocks of which one
//! contiguous window of `κ` blocks runs per sample.
//!
//! The router scores every block of the group from the token-mean of both
//! streams and from the global embedding,
//! `s = α·W_x [mean(x), mean(c)] + (1 − α)·W_y y`, and picks the window with
//! the largest score sum (lowest start on ties). The group output is
//! `in + p·(window(in) − in)` where `p` is the softmax probability of the
//! chosen window among all windows, so the router gets a gradient.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dit::{BlockKind, DitModel, ForwardOptions, ForwardOutput, StreamState};
use crate::error::{config, Result};
use crate::params::Ctx;
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Standard deviation of fresh router weights.
pub const ROUTER_INIT_STD: f64 = 0.02;

/// One MoB group: blocks `start..start + len`, of which `active` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobGroupSpec {
    pub start: usize,
    /// `m`
    pub len: usize,
    /// `κ`
    pub active: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.5
}

impl MobGroupSpec {
    pub fn new(start: usize, len: usize, active: usize) -> Self {
        Self {
            start,
            len,
            active,
            alpha: default_alpha(),
        }
    }

    pub fn contains(&self, l: usize) -> bool {
        (self.start..self.start + self.len).contains(&l)
    }

    pub fn last(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn n_windows(&self) -> usize {
        self.len - self.active + 1
    }
}

pub fn wx_name(g: usize) -> alloc::string::String {
    format!("mob.{g}.wx")
}

pub fn wy_name(g: usize) -> alloc::string::String {
    format!("mob.{g}.wy")
}

/// Routing of one sample through one group.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecision {
    /// Per-block scores `s`, length `m`.
    pub scores: Vec<f64>,
    /// Absolute index of the first executed block.
    pub start: usize,
    /// Sum of the scores inside the chosen window.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub group: usize,
    pub decision: WindowDecision,
    /// Softmax over window score sums, `[1 × windows]`.
    pub probs: Var,
}

/// Offset of the contiguous length-`κ` window with the largest score sum;
/// ties go to the smallest offset.
pub fn select_window(scores: &[f64], active: usize) -> (usize, f64) {
    let sums = window_sums(scores, active);
    let mut best = 0;
    for (q, &s) in sums.iter().enumerate() {
        if s.partial_cmp(&sums[best]) == Some(Ordering::Greater) {
            best = q;
        }
    }
    (best, sums[best])
}

pub fn window_sums(scores: &[f64], active: usize) -> Vec<f64> {
    (0..=scores.len() - active)
        .map(|q| scores[q..q + active].iter().sum())
        .collect()
}

fn window_matrix(m: usize, active: usize) -> Tensor {
    let w = m - active + 1;
    let mut t = Tensor::zeros(&[m, w]);
    for q in 0..w {
        for i in q..q + active {
            t.data_mut()[i * w + q] = 1.0;
        }
    }
    t
}

fn pooled(ctx: &mut Ctx, model: &DitModel, state: StreamState) -> Result<Var> {
    let x = model.image_features(ctx, state)?;
    let c = model.text_features(ctx, state)?;
    let mx = ctx.tape.mean_rows(x)?;
    let mc = ctx.tape.mean_rows(c)?;
    ctx.tape.concat_cols(&[mx, mc])
}

/// Block scores `[1 × m]` on the tape.
pub fn router_scores(ctx: &mut Ctx, model: &DitModel, g: usize, spec: &MobGroupSpec, state: StreamState, y: Var) -> Result<Var> {
    let feats = pooled(ctx, model, state)?;
    let wx = ctx.p(&wx_name(g))?;
    let wy = ctx.p(&wy_name(g))?;
    let wxt = ctx.tape.transpose(wx)?;
    let wyt = ctx.tape.transpose(wy)?;
    let lx = ctx.tape.matmul(feats, wxt)?;
    let ly = ctx.tape.matmul(y, wyt)?;
    let lx = ctx.tape.scale(lx, spec.alpha)?;
    let ly = ctx.tape.scale(ly, 1.0 - spec.alpha)?;
    ctx.tape.add(lx, ly)
}

/// Routes one sample: block scores, window scores and the chosen window.
pub fn mob_route(
    ctx: &mut Ctx,
    model: &DitModel,
    g: usize,
    spec: &MobGroupSpec,
    state: StreamState,
    y: Var,
) -> Result<(WindowDecision, Var)> {
    let s = router_scores(ctx, model, g, spec, state, y)?;
    let ind = ctx.constant(window_matrix(spec.len, spec.active));
    let ws = ctx.tape.matmul(s, ind)?;
    let probs = ctx.tape.softmax_lastdim(ws)?;
    let scores = ctx.value(s).data().to_vec();
    let (q, weight) = select_window(&scores, spec.active);
    Ok((
        WindowDecision {
            scores,
            start: spec.start + q,
            weight,
        },
        probs,
    ))
}

fn blend(ctx: &mut Ctx, input: Var, output: Var, p: Var) -> Result<Var> {
    let delta = ctx.tape.sub(output, input)?;
    let delta = ctx.tape.mul(delta, p)?;
    ctx.tape.add(input, delta)
}

/// Runs group `g` on `state`; only the chosen window's blocks execute.
#[allow(clippy::too_many_arguments)]
pub fn mob_forward(
    ctx: &mut Ctx,
    model: &DitModel,
    g: usize,
    spec: &MobGroupSpec,
    state: StreamState,
    y: Var,
    opts: ForwardOptions,
    out: &mut ForwardOutput,
) -> Result<StreamState> {
    let (decision, probs) = mob_route(ctx, model, g, spec, state, y)?;
    let q = decision.start - spec.start;
    let p = ctx.tape.take(probs, &[q], &[])?;
    let mut inner = state;
    for l in decision.start..decision.start + spec.active {
        inner = model.apply_block(ctx, l, inner, y, opts, &mut out.moe)?;
        out.taps[l] = Some(model.image_features(ctx, inner)?);
    }
    let result = match (state, inner) {
        (StreamState::Dual { x, c }, StreamState::Dual { x: xo, c: co }) => StreamState::Dual {
            x: blend(ctx, x, xo, p)?,
            c: blend(ctx, c, co, p)?,
        },
        (StreamState::Joint { xc }, StreamState::Joint { xc: xo }) => StreamState::Joint {
            xc: blend(ctx, xc, xo, p)?,
        },
        _ => return Err(config(format!("group {g} changes stream layout"))),
    };
    out.group_taps.push(model.image_features(ctx, result)?);
    out.windows.push(WindowTrace { group: g, decision, probs });
    Ok(result)
}

/// Checks a grouping against a model's block taxonomy.
pub fn validate_groups(model: &DitModel, groups: &[MobGroupSpec]) -> Result<()> {
    let cfg = &model.config;
    for (i, g) in groups.iter().enumerate() {
        if g.len == 0 || g.active == 0 || g.active > g.len {
            return Err(config(format!("group {i}: need 1 <= active <= len, got {} of {}", g.active, g.len)));
        }
        if g.start + g.len > cfg.n_blocks() {
            return Err(config(format!("group {i} runs past the last block")));
        }
        if cfg.block_kind(g.start) != cfg.block_kind(g.last()) {
            return Err(config(format!("group {i} mixes double- and single-stream blocks")));
        }
        if !(0.0..=1.0).contains(&g.alpha) {
            return Err(config(format!("group {i}: alpha {} outside [0, 1]", g.alpha)));
        }
        for (j, other) in groups[..i].iter().enumerate() {
            if g.start < other.start + other.len && other.start < g.start + g.len {
                return Err(config(format!("groups {j} and {i} overlap")));
            }
        }
    }
    Ok(())
}

/// Rewires `model` into MoB groups and adds fresh router weights.
pub fn group_blocks(model: &DitModel, groups: &[MobGroupSpec], seed: u64) -> Result<DitModel> {
    if !model.layout.groups.is_empty() {
        return Err(config("model is already grouped"));
    }
    validate_groups(model, groups)?;
    let mut out = model.clone();
    let h = model.config.hidden;
    let da = model.config.adaln();
    for (g, spec) in groups.iter().enumerate() {
        let wx = wx_name(g);
        let wy = wy_name(g);
        let mut r = rng::stream(seed, &[rng::tag(&wx)]);
        out.params.insert(wx, rng::randn(&mut r, &[spec.len, 2 * h], ROUTER_INIT_STD));
        let mut r = rng::stream(seed, &[rng::tag(&wy)]);
        out.params.insert(wy, rng::randn(&mut r, &[spec.len, da], ROUTER_INIT_STD));
    }
    out.layout.groups = groups.to_vec();
    Ok(out)
}

/// Blocks in no group.
pub fn isolated_blocks(model: &DitModel) -> Vec<usize> {
    (0..model.config.n_blocks())
        .filter(|&l| model.layout.group_of(l).is_none())
        .collect()
}

/// Block kind shared by all members of a group.
pub fn group_kind(model: &DitModel, spec: &MobGroupSpec) -> BlockKind {
    model.config.block_kind(spec.start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_window() {
        assert_eq!(select_window(&[0.1, 0.7, 0.2], 1).0, 1);
        assert_eq!(select_window(&[0.5, 0.5, 0.5], 1).0, 0);
        assert_eq!(select_window(&[9.0, -3.0, 1.0], 3).0, 0);
        assert_eq!(select_window(&[0.0, 0.4, 0.3, -1.0], 2), (1, 0.7));
    }

    #[test]
    fn window_matrix_sums() {
        let m = window_matrix(4, 2);
        assert_eq!(m.shape(), &[4, 3]);
        let s = Tensor::matrix(1, 4, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.matmul(&m).unwrap().data(), &[3.0, 5.0, 7.0]);
    }
}
