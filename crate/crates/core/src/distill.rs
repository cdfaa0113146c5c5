//! Distillation losses and the three training stages.
//!
//! * `init_distill`: the student runs its shared experts only (`k = 0`) and
//!   learns from the dense teacher's outputs and per-block features.
//! * `moe_distill`: shared experts frozen; normal experts and gates learn,
//!   with the load-balancing loss added.
//! * `mob_distill`: blocks outside every MoB group frozen; group outputs
//!   are matched to the teacher feature after each group's last block.
//!
//! The total loss is `L_distill + λ_feature·L_feature + λ_balance·L_balance`.
//! Per-layer feature weights are recomputed from every batch and treated as
//! constants.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dit::{block_prefix, DitModel, ForwardOptions};
use crate::error::{config, contract, Error, Result};
use crate::flow::FlowSample;
use crate::moe;
use crate::optim::{Adam, AdamConfig};
use crate::params::Ctx;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAMBDA_FEATURE: f64 = 1.0;
pub const LAMBDA_BALANCE: f64 = 1e-2;

fn as_contract(e: Error) -> Error {
    match e {
        Error::Shape { op, lhs, rhs } => contract(format!("{op}: shapes {lhs:?} and {rhs:?} differ")),
        other => other,
    }
}

/// `MSE(student, teacher)` with the teacher as a constant.
pub fn output_distill_loss(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    let t = tape.constant(teacher.clone());
    tape.mse(student, t).map_err(as_contract)
}

/// Plain mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse").map_err(as_contract)?;
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `w_l = (|L_distill| / |L_l|) · (Σ_j ‖f_j‖) / (L · ‖f_l‖)`.
///
/// A layer with zero loss or zero teacher norm gets weight 0.
pub fn feature_weights(teacher_norms: &[f64], layer_losses: &[f64], l_distill: f64) -> Vec<f64> {
    let n_layers = teacher_norms.len() as f64;
    let norm_sum: f64 = teacher_norms.iter().sum();
    teacher_norms
        .iter()
        .zip(layer_losses)
        .enumerate()
        .map(|(l, (&norm, &loss))| {
            if loss == 0.0 || norm == 0.0 {
                log::warn!("feature weight of layer {l} set to 0 (loss {loss}, teacher norm {norm})");
                0.0
            } else {
                (libm::fabs(l_distill) / libm::fabs(loss)) * norm_sum / (n_layers * norm)
            }
        })
        .collect()
}

/// `Σ_l w_l · L_l` on the tape.
pub fn weighted_sum(tape: &mut Tape, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.len() != weights.len() {
        return Err(contract(format!("{} losses but {} weights", losses.len(), weights.len())));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (&l, &w) in losses.iter().zip(weights) {
        let term = tape.scale(l, w)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Per-layer feature MSEs of one sample.
pub fn layer_losses(tape: &mut Tape, teacher: &[Tensor], student: &[Var]) -> Result<Vec<Var>> {
    if teacher.len() != student.len() {
        return Err(contract(format!(
            "{} teacher taps but {} student taps",
            teacher.len(),
            student.len()
        )));
    }
    teacher
        .iter()
        .zip(student)
        .map(|(t, &s)| output_distill_loss(tape, t, s))
        .collect()
}

/// `Σ_l w_l · MSE(f_tea^(l), f_stu^(l))`
pub fn block_feature_loss(tape: &mut Tape, teacher: &[Tensor], student: &[Var], weights: &[f64]) -> Result<Var> {
    let losses = layer_losses(tape, teacher, student)?;
    weighted_sum(tape, &losses, weights)
}

/// Teacher features matched by the group feature loss: the tap after the
/// last original block of every group.
pub fn group_teacher_taps(teacher_taps: &[Tensor], student: &DitModel) -> Result<Vec<Tensor>> {
    student
        .layout
        .groups
        .iter()
        .map(|g| {
            teacher_taps
                .get(g.last())
                .cloned()
                .ok_or_else(|| contract(format!("teacher has no block {}", g.last())))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InitDistill,
    MoeDistill,
    MobDistill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::InitDistill => "init_distill",
            Stage::MoeDistill => "moe_distill",
            Stage::MobDistill => "mob_distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    #[serde(default)]
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda_feature")]
    pub lambda_feature: f64,
    #[serde(default = "default_lambda_balance")]
    pub lambda_balance: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_lambda_feature() -> f64 {
    LAMBDA_FEATURE
}
fn default_lambda_balance() -> f64 {
    LAMBDA_BALANCE
}
fn default_batch() -> usize {
    4
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: 0,
            lr: default_lr(),
            lambda_feature: LAMBDA_FEATURE,
            lambda_balance: LAMBDA_BALANCE,
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

/// Components of one training step's loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub distill: f64,
    pub feature: f64,
    pub feature_per_layer: Vec<f64>,
    pub weights: Vec<f64>,
    pub balance: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossReport {
    /// `L_distill + λ_feature·L_feature + λ_balance·L_balance` from the
    /// logged components.
    pub fn recombine(&self, lambda_feature: f64, lambda_balance: f64) -> f64 {
        self.distill + self.feature * lambda_feature + self.balance * lambda_balance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeGroup {
    SharedExperts,
    IsolatedBlocks,
}

/// Parameter names that the optimizer must not touch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub groups: Vec<FreezeGroup>,
    pub names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn for_groups(model: &DitModel, groups: &[FreezeGroup]) -> Self {
        let mut names = BTreeSet::new();
        for &g in groups {
            match g {
                FreezeGroup::SharedExperts => {
                    for (slot, _) in model.layout.moe_slots() {
                        let p = format!("{}.", moe::shared_prefix(&slot));
                        names.extend(model.params.names().filter(|n| n.starts_with(&p)).cloned());
                    }
                }
                FreezeGroup::IsolatedBlocks => {
                    for l in crate::mob::isolated_blocks(model) {
                        let p = format!("{}.", block_prefix(l));
                        names.extend(model.params.names().filter(|n| n.starts_with(&p)).cloned());
                    }
                }
            }
        }
        Self {
            groups: groups.to_vec(),
            names,
        }
    }

    pub fn for_stage(stage: Stage, model: &DitModel) -> Self {
        match stage {
            Stage::InitDistill => Self::default(),
            Stage::MoeDistill => Self::for_groups(model, &[FreezeGroup::SharedExperts]),
            Stage::MobDistill => Self::for_groups(model, &[FreezeGroup::IsolatedBlocks]),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }
}

/// Refuses a student whose topology does not fit `stage`.
pub fn check_student(stage: Stage, student: &DitModel) -> Result<()> {
    let has_gates = student.layout.has_moe()
        && student
            .layout
            .moe_slots()
            .iter()
            .all(|(slot, _)| student.params.contains(&moe::gate_name(slot)));
    match stage {
        Stage::InitDistill if !student.layout.has_moe() => {
            Err(config("init_distill needs a student with MoE layers"))
        }
        Stage::InitDistill if !student.layout.groups.is_empty() => {
            Err(config("init_distill runs before blocks are grouped"))
        }
        Stage::MoeDistill if !has_gates => Err(config("moe_distill needs a student with gate parameters")),
        Stage::MobDistill if student.layout.groups.is_empty() => {
            Err(config("mob_distill needs a student with MoB groups"))
        }
        _ => Ok(()),
    }
}

/// Teacher outputs for one sample.
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    pub velocity: Tensor,
    pub taps: Vec<Tensor>,
}

pub fn teacher_signal(teacher: &DitModel, sample: &FlowSample) -> Result<TeacherSignal> {
    let mut ctx = Ctx::eval(&teacher.params);
    let out = teacher.forward(&mut ctx, &sample.x_t()?, &sample.prompt, sample.t, ForwardOptions::default())?;
    let taps = out
        .taps
        .iter()
        .map(|t| {
            t.map(|v| ctx.value(v).clone())
                .ok_or_else(|| contract("teacher skipped a block"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherSignal {
        velocity: ctx.value(out.velocity).clone(),
        taps,
    })
}

/// Optimizer state and freeze mask of one stage.
#[derive(Debug, Clone)]
pub struct StageTrainer {
    pub config: StageConfig,
    pub adam: Adam,
    pub freeze: FreezeMask,
    pub step: u64,
}

impl StageTrainer {
    pub fn new(config: StageConfig, student: &DitModel) -> Result<Self> {
        check_student(config.stage, student)?;
        let freeze = FreezeMask::for_stage(config.stage, student);
        let adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        Ok(Self {
            config,
            adam,
            freeze,
            step: 0,
        })
    }

    pub fn forward_options(&self) -> ForwardOptions {
        match self.config.stage {
            Stage::InitDistill => ForwardOptions { topk: Some(0) },
            _ => ForwardOptions::default(),
        }
    }

    /// Builds the stage loss for `batch` on `ctx` without stepping.
    pub fn loss(
        &self,
        ctx: &mut Ctx,
        teacher: &DitModel,
        student: &DitModel,
        batch: &[FlowSample],
    ) -> Result<(Var, LossReport)> {
        if batch.is_empty() {
            return Err(contract("distillation on an empty batch"));
        }
        let opts = self.forward_options();
        let inv_b = 1.0 / batch.len() as f64;
        let mut distill_terms = Vec::with_capacity(batch.len());
        let mut per_layer: Vec<Vec<Var>> = Vec::new();
        let mut norms: Vec<f64> = Vec::new();
        let mut balance_terms = Vec::new();
        for sample in batch {
            let signal = teacher_signal(teacher, sample)?;
            let out = student.forward(ctx, &sample.x_t()?, &sample.prompt, sample.t, opts)?;
            distill_terms.push(output_distill_loss(&mut ctx.tape, &signal.velocity, out.velocity)?);

            let (t_taps, s_taps) = match self.config.stage {
                Stage::MobDistill => (group_teacher_taps(&signal.taps, student)?, out.group_taps.clone()),
                _ => {
                    let s = out
                        .taps
                        .iter()
                        .map(|t| t.ok_or_else(|| contract("student skipped a block outside MoB")))
                        .collect::<Result<Vec<_>>>()?;
                    (signal.taps, s)
                }
            };
            let losses = layer_losses(&mut ctx.tape, &t_taps, &s_taps)?;
            if per_layer.is_empty() {
                per_layer = losses.iter().map(|_| Vec::new()).collect();
                norms = alloc::vec![0.0; losses.len()];
            }
            for (l, v) in losses.into_iter().enumerate() {
                per_layer[l].push(v);
                norms[l] += t_taps[l].l2_norm() * inv_b;
            }
            for trace in &out.moe {
                if let Some(g) = trace.gates {
                    balance_terms.push(moe::load_balance_loss(
                        &mut ctx.tape,
                        g,
                        &trace.selected,
                        trace.n_experts,
                        trace.top_k,
                    )?);
                }
            }
        }

        let tape = &mut ctx.tape;
        let distill = mean_of(tape, &distill_terms)?;
        let layer_means = per_layer
            .iter()
            .map(|terms| mean_of(tape, terms))
            .collect::<Result<Vec<_>>>()?;
        let layer_values: Vec<f64> = layer_means.iter().map(|&v| tape.value(v).item()).collect();
        let weights = feature_weights(&norms, &layer_values, tape.value(distill).item());
        let feature = weighted_sum(tape, &layer_means, &weights)?;
        let balance = if balance_terms.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            mean_of(tape, &balance_terms)?
        };
        let f = tape.scale(feature, self.config.lambda_feature)?;
        let b = tape.scale(balance, self.config.lambda_balance)?;
        let total = tape.add(distill, f)?;
        let total = tape.add(total, b)?;
        let report = LossReport {
            step: self.step,
            distill: tape.value(distill).item(),
            feature: tape.value(feature).item(),
            feature_per_layer: layer_values,
            weights,
            balance: tape.value(balance).item(),
            total: tape.value(total).item(),
            lr: self.config.lr,
        };
        Ok((total, report))
    }

    /// One optimizer step on `student`.
    pub fn step(&mut self, teacher: &DitModel, student: &mut DitModel, batch: &[FlowSample]) -> Result<LossReport> {
        let (report, grads) = {
            let mut ctx = Ctx::train(&student.params);
            let (total, report) = self.loss(&mut ctx, teacher, student, batch)?;
            ctx.backward(total)?;
            (report, ctx.grads())
        };
        self.adam.step(&mut student.params, &grads, &self.freeze.names);
        self.step += 1;
        Ok(report)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| contract("mean of no terms"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distill_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[4], 1.0));
        let l = output_distill_loss(&mut tape, &Tensor::zeros(&[4]), s).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let bad = output_distill_loss(&mut tape, &Tensor::zeros(&[3]), s);
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn weights_single_and_symmetric() {
        let w = feature_weights(&[3.0], &[0.5], 2.0);
        assert!((w[0] - 4.0).abs() < 1e-15);
        let w = feature_weights(&[2.0, 2.0], &[0.1, 0.1], 1.0);
        assert_eq!(w[0], w[1]);
        let w = feature_weights(&[2.0, 0.0], &[0.1, 0.1], 1.0);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn block_feature_example() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[4], 1.0));
        let l = block_feature_loss(&mut tape, &[Tensor::zeros(&[4])], &[s], &[1.0]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l2 = block_feature_loss(&mut tape, &[Tensor::zeros(&[4])], &[s], &[2.0]).unwrap();
        assert_eq!(tape.value(l2).item(), 2.0);
        assert!(block_feature_loss(&mut tape, &[], &[s], &[]).is_err());
    }
}
