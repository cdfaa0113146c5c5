//! The pipeline steps behind each subcommand. Every step reads its inputs
//! from checkpoint files and writes its outputs to a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use dense2moe_core::analysis::{self, Axis, LabeledPrompt, ParamReport};
use dense2moe_core::corpus::{Corpus, Split};
use dense2moe_core::dit::{DitModel, FfnKind, ForwardOptions, Stream};
use dense2moe_core::distill::{FreezeMask, LossReport, Stage, StageTrainer};
use dense2moe_core::flow::{self, FlowSample};
use dense2moe_core::moe::{self, FfnWeights, MoeWeights};
use dense2moe_core::optim::{Adam, AdamConfig};
use dense2moe_core::params::Ctx;
use dense2moe_core::{mob, rng, taylor, Tensor};
use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, Link, SaveMeta, StageTag};
use crate::config::{RunConfig, TrainSection};
use crate::error::{CliError, Result};
use crate::output::{self, fmt_f64, CsvWriter};

pub const DISTILL_COLUMNS: [&str; 7] = ["step", "distill", "feature", "balance", "total", "lr", "feature_raw"];

/// Checkpoint stem and loss log of each training step.
pub fn stem(tag: StageTag) -> &'static str {
    match tag {
        StageTag::TrainTeacher => "teacher",
        StageTag::StageInit => "init",
        StageTag::StageMoe => "moe",
        StageTag::StageMob => "mob",
    }
}

pub fn loss_log(out: &Path, tag: StageTag) -> PathBuf {
    out.join(format!("{}_loss.csv", stem(tag)))
}

/// What a training step produced.
#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub log: PathBuf,
    /// Validation loss before and after training: rectified-flow loss for
    /// the teacher, stage total loss for distillation stages.
    pub val_before: f64,
    pub val_after: f64,
}

/// Logs the resolved config and writes it next to the outputs.
pub fn record_config(cfg: &RunConfig, out: &Path, command: &str) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let text = cfg.to_toml();
    info!("{command}: resolved config\n{text}");
    let path = out.join(format!("{command}.config.toml"));
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(Corpus::new(cfg.corpus.clone(), &cfg.model)?)
}

fn validation(cfg: &RunConfig) -> Result<Vec<FlowSample>> {
    Ok(corpus(cfg)?.split(Split::Validation, cfg.analysis.validation_size))
}

/// Training batches of different steps never share draws.
fn batch_offset(tag: StageTag) -> u64 {
    (tag as u64) << 32
}

fn write_summary(out: &Path, tag: StageTag, summary: &StageSummary) -> Result<()> {
    let path = out.join(format!("{}_summary.json", stem(tag)));
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn check_model_config(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    if ck.model.config != cfg.model {
        return Err(CliError::Config(format!(
            "[model] of the run config differs from the model in {}",
            ck.path.display()
        )));
    }
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig, out: &Path) -> Result<StageSummary> {
    record_config(cfg, out, "train-teacher")?;
    let tag = StageTag::TrainTeacher;
    let sec = &cfg.stage.teacher;
    let corpus = corpus(cfg)?;
    let val = validation(cfg)?;
    let opts = ForwardOptions::default();
    let mut model = DitModel::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: sec.lr, ..AdamConfig::default() });
    let val_before = flow::rf_loss_value(&model, &val, opts)?;
    let log = loss_log(out, tag);
    let mut csv = CsvWriter::create(&log, &["step", "rf_loss", "lr"])?;
    let frozen = BTreeSet::new();
    for step in 0..sec.steps {
        let batch = corpus.train_batch(batch_offset(tag) + step, sec.batch_size);
        let (loss, grads) = {
            let mut ctx = Ctx::train(&model.params);
            let loss = flow::rf_loss(&mut ctx, &model, &batch, opts)?;
            ctx.backward(loss)?;
            (ctx.value(loss).item(), ctx.grads())
        };
        adam.step(&mut model.params, &grads, &frozen);
        csv.row(&[step.to_string(), fmt_f64(loss), fmt_f64(sec.lr)])?;
        if step % 50 == 0 {
            info!("train-teacher step {step}: rf_loss {loss:.6}");
        }
        if sec.checkpoint_every > 0 && (step + 1) % sec.checkpoint_every == 0 && step + 1 < sec.steps {
            let meta = teacher_meta(cfg, step + 1);
            checkpoint::save(out, &format!("teacher_step{:06}", step + 1), &model, Some(&adam), meta)?;
        }
    }
    csv.finish()?;
    let val_after = flow::rf_loss_value(&model, &val, opts)?;
    let path = checkpoint::save(out, stem(tag), &model, Some(&adam), teacher_meta(cfg, sec.steps))?;
    finish(out, tag, sec.steps, path, log, val_before, val_after)
}

fn teacher_meta(cfg: &RunConfig, steps: u64) -> SaveMeta {
    SaveMeta {
        stage: StageTag::TrainTeacher,
        seed: cfg.seed,
        steps,
        run_config: cfg.clone(),
        parent: None,
        teacher: None,
    }
}

fn finish(
    out: &Path,
    tag: StageTag,
    steps: u64,
    checkpoint: PathBuf,
    log: PathBuf,
    val_before: f64,
    val_after: f64,
) -> Result<StageSummary> {
    let summary = StageSummary {
        stage: tag.name().into(),
        steps,
        checkpoint_hash: checkpoint::checkpoint_hash(&checkpoint)?,
        checkpoint,
        log,
        val_before,
        val_after,
    };
    info!(
        "{}: validation {:.6} -> {:.6}, checkpoint {}",
        tag.name(),
        val_before,
        val_after,
        summary.checkpoint.display()
    );
    write_summary(out, tag, &summary)?;
    Ok(summary)
}

fn load_teacher(cfg: &RunConfig, teacher_path: &Path) -> Result<Checkpoint> {
    let teacher = checkpoint::load_from_stage(teacher_path, StageTag::TrainTeacher)?;
    check_model_config(cfg, &teacher)?;
    Ok(teacher)
}

/// Loads the student a stage consumes and checks it was distilled from `teacher`.
fn load_student(cfg: &RunConfig, tag: StageTag, student_path: &Path, teacher_path: &Path) -> Result<Checkpoint> {
    let parent = tag.parent().expect("distillation stages have a parent");
    let student = checkpoint::load_from_stage(student_path, parent)?;
    check_model_config(cfg, &student)?;
    let teacher = Link::to(teacher_path)?;
    if student.manifest.teacher.as_ref() != Some(&teacher) {
        return Err(CliError::Provenance {
            expected: format!("{} (teacher {})", StageTag::TrainTeacher.name(), short(&teacher.sha256)),
            found: format!(
                "student distilled from {}",
                student.manifest.teacher.as_ref().map_or("no teacher", |l| short(&l.sha256))
            ),
        });
    }
    Ok(student)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Calibration batches for the importance metric.
pub fn calibration_batches(cfg: &RunConfig) -> Result<Vec<Vec<FlowSample>>> {
    let n = cfg.moe.calibration_batches * cfg.moe.calibration_batch_size;
    let all = corpus(cfg)?.split(Split::Calibration, n);
    Ok(all
        .chunks(cfg.moe.calibration_batch_size.max(1))
        .map(<[FlowSample]>::to_vec)
        .collect())
}

/// Converts the teacher's FFNs by Taylor importance and runs the
/// shared-expert distillation.
pub fn stage_init(cfg: &RunConfig, teacher_path: &Path, out: &Path) -> Result<StageSummary> {
    record_config(cfg, out, "stage-init")?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let moe_cfg = cfg.moe.layer();
    let (h, r) = (cfg.model.hidden, cfg.model.ffn_ratio as f64);
    let scores = taylor::accumulate_importance(&teacher.model, &calibration_batches(cfg)?)?;
    let mut plans = BTreeMap::new();
    let student = moe::replace_ffns(&teacher.model, &moe_cfg, &cfg.moe.skip_blocks, cfg.seed, |slot| {
        let s = scores
            .get(slot)
            .ok_or_else(|| dense2moe_core::Error::Contract(format!("no importance for {slot}")))?;
        let plan = taylor::partition(&s.scores, &moe_cfg, h, r)?;
        plans.insert(*slot, plan.clone());
        Ok(plan)
    })?;
    let mut csv = CsvWriter::create(&out.join("taylor_scores.csv"), &["slot", "segment", "score", "assigned"])?;
    for (slot, plan) in &plans {
        let mut owner = vec![String::new(); scores[slot].scores.len()];
        for &j in &plan.shared {
            owner[j] = "shared".into();
        }
        for (e, segs) in plan.experts.iter().enumerate() {
            for &j in segs {
                owner[j] = format!("expert_{e:02}");
            }
        }
        for (j, s) in scores[slot].scores.iter().enumerate() {
            csv.row(&[slot.to_string(), j.to_string(), fmt_f64(*s), owner[j].clone()])?;
        }
    }
    csv.finish()?;
    let link = Link::to(teacher_path)?;
    run_stage(cfg, StageTag::StageInit, &teacher, student, link.clone(), link, out)
}

pub fn stage_moe(cfg: &RunConfig, student_path: &Path, teacher_path: &Path, out: &Path) -> Result<StageSummary> {
    record_config(cfg, out, "stage-moe")?;
    let student = load_student(cfg, StageTag::StageMoe, student_path, teacher_path)?;
    let teacher = load_teacher(cfg, teacher_path)?;
    run_stage(cfg, StageTag::StageMoe, &teacher, student.model, Link::to(student_path)?, Link::to(teacher_path)?, out)
}

pub fn stage_mob(cfg: &RunConfig, student_path: &Path, teacher_path: &Path, out: &Path) -> Result<StageSummary> {
    record_config(cfg, out, "stage-mob")?;
    let student = load_student(cfg, StageTag::StageMob, student_path, teacher_path)?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let grouped = mob::group_blocks(&student.model, &cfg.mob.groups, cfg.seed)?;
    run_stage(cfg, StageTag::StageMob, &teacher, grouped, Link::to(student_path)?, Link::to(teacher_path)?, out)
}

fn stage_of(tag: StageTag) -> Option<Stage> {
    match tag {
        StageTag::TrainTeacher => None,
        StageTag::StageInit => Some(Stage::InitDistill),
        StageTag::StageMoe => Some(Stage::MoeDistill),
        StageTag::StageMob => Some(Stage::MobDistill),
    }
}

fn section(cfg: &RunConfig, tag: StageTag) -> &TrainSection {
    match tag {
        StageTag::TrainTeacher => &cfg.stage.teacher,
        StageTag::StageInit => &cfg.stage.init,
        StageTag::StageMoe => &cfg.stage.moe,
        StageTag::StageMob => &cfg.stage.mob,
    }
}

fn trainer_for(cfg: &RunConfig, tag: StageTag, student: &DitModel) -> Result<StageTrainer> {
    let stage = stage_of(tag).ok_or_else(|| CliError::Config(format!("{} is not a distillation stage", tag.name())))?;
    Ok(StageTrainer::new(section(cfg, tag).stage_config(stage, cfg.seed), student)?)
}

/// Stage loss on the validation split without updating anything.
fn stage_val_loss(trainer: &StageTrainer, teacher: &DitModel, student: &DitModel, val: &[FlowSample]) -> Result<LossReport> {
    let mut ctx = Ctx::eval(&student.params);
    Ok(trainer.loss(&mut ctx, teacher, student, val)?.1)
}

fn distill_row(r: &LossReport) -> Vec<String> {
    vec![
        r.step.to_string(),
        fmt_f64(r.distill),
        fmt_f64(r.feature),
        fmt_f64(r.balance),
        fmt_f64(r.total),
        fmt_f64(r.lr),
        fmt_f64(r.feature_per_layer.iter().sum()),
    ]
}

fn run_stage(
    cfg: &RunConfig,
    tag: StageTag,
    teacher: &Checkpoint,
    mut student: DitModel,
    parent: Link,
    teacher_link: Link,
    out: &Path,
) -> Result<StageSummary> {
    let sec = section(cfg, tag).clone();
    let mut trainer = trainer_for(cfg, tag, &student)?;
    info!(
        "{}: {} trainable of {} tensors, frozen groups {:?}",
        tag.name(),
        student.params.len() - trainer.freeze.names.len(),
        student.params.len(),
        trainer.freeze.groups
    );
    let corpus = corpus(cfg)?;
    let val = validation(cfg)?;
    let val_before = stage_val_loss(&trainer, &teacher.model, &student, &val)?.total;
    let log = loss_log(out, tag);
    let mut csv = CsvWriter::create(&log, &DISTILL_COLUMNS)?;
    let meta = |steps: u64| SaveMeta {
        stage: tag,
        seed: cfg.seed,
        steps,
        run_config: cfg.clone(),
        parent: Some(parent.clone()),
        teacher: Some(teacher_link.clone()),
    };
    for step in 0..sec.steps {
        let batch = corpus.train_batch(batch_offset(tag) + step, sec.batch_size);
        let report = trainer.step(&teacher.model, &mut student, &batch)?;
        let recombined = report.recombine(sec.lambda_feature, sec.lambda_balance);
        if (recombined - report.total).abs() > 1e-12 * report.total.abs().max(1.0) {
            warn!("{} step {step}: total {} != recombined {recombined}", tag.name(), report.total);
        }
        csv.row(&distill_row(&report))?;
        if step % 25 == 0 {
            info!(
                "{} step {step}: total {:.6} distill {:.6} feature {:.6} balance {:.4}",
                tag.name(),
                report.total,
                report.distill,
                report.feature,
                report.balance
            );
        }
        if sec.checkpoint_every > 0 && (step + 1) % sec.checkpoint_every == 0 && step + 1 < sec.steps {
            let name = format!("{}_step{:06}", stem(tag), step + 1);
            checkpoint::save(out, &name, &student, Some(&trainer.adam), meta(step + 1))?;
        }
    }
    csv.finish()?;
    let val_after = stage_val_loss(&trainer, &teacher.model, &student, &val)?.total;
    let path = checkpoint::save(out, stem(tag), &student, Some(&trainer.adam), meta(sec.steps))?;
    finish(out, tag, sec.steps, path, log, val_before, val_after)
}

/// One clean prompt per category, in category order.
pub fn category_prompts(cfg: &RunConfig, per_category: usize) -> Result<Vec<LabeledPrompt>> {
    let n = cfg.corpus.n_categories * per_category;
    let mut prompts: Vec<LabeledPrompt> = corpus(cfg)?
        .clean(Split::Validation, n)
        .iter()
        .map(LabeledPrompt::from)
        .collect();
    prompts.sort_by_key(|p| p.category);
    Ok(prompts)
}

fn topk_opts(topk: Option<usize>) -> ForwardOptions {
    ForwardOptions { topk }
}

/// Generates one image per category and writes them as a grid.
pub fn sample(ck: &Checkpoint, cfg: &RunConfig, steps: usize, topk: Option<usize>, out: &Path) -> Result<PathBuf> {
    record_config(cfg, out, "sample")?;
    let prompts = category_prompts(cfg, 1)?;
    let images = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| flow::euler_sample(&ck.model, &p.prompt, steps, cfg.seed + i as u64, topk_opts(topk)))
        .collect::<dense2moe_core::Result<Vec<Tensor>>>()?;
    let (c, h, w, data) = output::grid(&images, images.len())?;
    let path = out.join(match topk {
        Some(k) => format!("samples_k{k}.ppm"),
        None => "samples.ppm".into(),
    });
    output::write_image(&path, c, h, w, &data)?;
    Ok(path)
}

/// Expert-selection histograms of every MoE layer along every axis, MoB
/// window choices, token assignment maps and a dynamic top-k sweep.
pub fn analyze_experts(ck: &Checkpoint, cfg: &RunConfig, steps: usize, topk: Option<usize>, out: &Path) -> Result<Vec<PathBuf>> {
    record_config(cfg, out, "analyze-experts")?;
    let model = &ck.model;
    let slots = model.layout.moe_slots();
    if slots.is_empty() {
        return Err(dense2moe_core::Error::Query("checkpoint has no MoE layers".into()).into());
    }
    let dir = out.join("experts");
    let prompts = category_prompts(cfg, cfg.analysis.prompts_per_category)?;
    let log = analysis::collect_routing(model, &prompts, steps, cfg.seed, topk_opts(topk))?;
    let mut written = Vec::new();
    for (slot, _) in &slots {
        if !log.records.iter().any(|r| r.slot == *slot) {
            info!("analyze-experts: {slot} never ran (outside every selected MoB window)");
            continue;
        }
        for axis in Axis::ALL {
            let h = analysis::histogram(&log, *slot, axis)?;
            debug_assert!(h.row_sums_hold());
            let mut header = vec!["bin".to_string(), "tokens".to_string()];
            header.extend((0..h.n_experts).map(|e| format!("expert_{e:02}")));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let path = dir.join(format!("{slot}.{}.csv", axis.name()));
            let mut csv = CsvWriter::create(&path, &header)?;
            for (bin, (row, tokens)) in h.counts.iter().zip(&h.tokens).enumerate() {
                let mut fields = vec![bin.to_string(), tokens.to_string()];
                fields.extend(row.iter().map(u64::to_string));
                csv.row(&fields)?;
            }
            csv.finish()?;
            written.push(path);
        }
        if slot.stream == Stream::Image {
            let g = model.config.grid();
            let n = slots.iter().find(|(s, _)| s == slot).map_or(0, |(_, c)| c.n_experts);
            let record = log
                .records
                .iter()
                .find(|r| r.slot == *slot && r.prompt == 0 && r.step + 1 == steps);
            if let Some(record) = record {
                let path = dir.join(format!("{slot}.tokens.pgm"));
                output::write_label_map(&path, g, g, &analysis::token_assignment(record), n)?;
                written.push(path);
            }
        }
    }
    if !log.windows.is_empty() {
        let path = dir.join("mob_windows.csv");
        let mut csv = CsvWriter::create(&path, &["prompt", "step", "t", "group", "start"])?;
        for w in &log.windows {
            csv.row(&[w.prompt.to_string(), w.step.to_string(), fmt_f64(w.t), w.group.to_string(), w.start.to_string()])?;
        }
        csv.finish()?;
        written.push(path);
    }
    written.extend(topk_sweep(ck, cfg, steps, out)?);
    Ok(written)
}

/// Validation loss and samples for every configured top-k.
pub fn topk_sweep(ck: &Checkpoint, cfg: &RunConfig, steps: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let prompts = category_prompts(cfg, 1)?;
    let results = analysis::topk_sweep(&ck.model, &prompts, &cfg.analysis.topk_values, &validation(cfg)?, steps, cfg.seed)?;
    let path = out.join("topk_sweep.csv");
    let mut csv = CsvWriter::create(&path, &["k", "val_loss"])?;
    let mut written = vec![path.clone()];
    for r in &results {
        csv.row(&[r.k.to_string(), fmt_f64(r.val_loss)])?;
        let (c, h, w, data) = output::grid(&r.samples, r.samples.len())?;
        let img = out.join(format!("topk_k{}.ppm", r.k));
        output::write_image(&img, c, h, w, &data)?;
        written.push(img);
    }
    csv.finish()?;
    Ok(written)
}

/// Input/output MSE of every block over prompts and timesteps.
pub fn probe_blocks(ck: &Checkpoint, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    record_config(cfg, out, "probe-blocks")?;
    let n = cfg.corpus.n_categories * cfg.analysis.prompts_per_category;
    let samples = corpus(cfg)?.clean(Split::Validation, n);
    let table = analysis::block_io_mse_probe(&ck.model, &samples, &cfg.analysis.probe_timesteps, cfg.seed)?;
    let path = out.join("probe.csv");
    let mut csv = CsvWriter::create(&path, &["block", "t", "category", "mse", "log_mse"])?;
    for r in &table.records {
        csv.row(&[
            r.block.to_string(),
            fmt_f64(table.timesteps[r.t_index]),
            r.category.to_string(),
            fmt_f64(r.mse),
            fmt_f64(analysis::log_mse(r.mse)),
        ])?;
    }
    csv.finish()?;
    let by_t = table.by_timestep();
    let mut csv = CsvWriter::create(&out.join("probe_by_timestep.csv"), &["block", "t", "mse"])?;
    for (l, row) in by_t.iter().enumerate() {
        for (ti, v) in row.iter().enumerate() {
            csv.row(&[l.to_string(), fmt_f64(table.timesteps[ti]), fmt_f64(*v)])?;
        }
    }
    csv.finish()?;
    Ok(path)
}

pub fn report_params(ck: &Checkpoint, topk: Option<usize>, out: &Path) -> Result<ParamReport> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let report = analysis::param_flop_report_at(&ck.model, topk_opts(topk))?;
    let path = out.join("params.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| CliError::io(&path, e))?;
    let mut csv = CsvWriter::create(&out.join("params_modules.csv"), &["module", "total", "activated"])?;
    for m in &report.modules {
        csv.row(&[m.name.clone(), m.total.to_string(), m.activated.to_string()])?;
    }
    csv.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub check: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

fn check(check: &'static str, ok: bool, detail: String) -> Check {
    let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
    Check { check, status, detail }
}

fn skipped(check: &'static str, detail: impl Into<String>) -> Check {
    Check { check, status: CheckStatus::Skipped, detail: detail.into() }
}

pub const REASSEMBLY_TOL: f64 = 1e-9;
pub const GATE_TOL: f64 = 1e-12;
pub const DECOMPOSITION_TOL: f64 = 1e-12;

/// Runs the structural checks on a checkpoint. `teacher` defaults to the
/// teacher recorded in the manifest, looked up next to the checkpoint.
pub fn verify(ck: &Checkpoint, teacher_path: Option<&Path>, seed: u64) -> Result<Vec<Check>> {
    let m = &ck.manifest;
    let mut checks = Vec::new();
    let teacher_path = match (teacher_path, &m.teacher) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(link)) => Some(checkpoint::resolve(&ck.path, link)),
        (None, None) => None,
    };
    let teacher = match &teacher_path {
        Some(p) if m.stage != StageTag::TrainTeacher => {
            let t = checkpoint::load_from_stage(p, StageTag::TrainTeacher)?;
            let link = Link::to(p)?;
            let matches = m.teacher.as_ref() == Some(&link);
            checks.push(check("teacher_link", matches, format!("teacher {}", short(&link.sha256))));
            Some(t)
        }
        _ => None,
    };

    checks.push(match (&teacher, m.stage, m.steps) {
        (Some(t), StageTag::StageInit, 0) => reassembly(&t.model, &ck.model)?,
        (_, StageTag::StageInit, 0) => skipped("reassembly", "teacher checkpoint not available"),
        (_, StageTag::StageInit, n) => skipped("reassembly", format!("shared experts trained for {n} steps")),
        _ => skipped("reassembly", "only fresh stage-init checkpoints are reassembled"),
    });
    checks.push(gate_normalization(&ck.model, seed)?);
    checks.push(freeze_contract(ck)?);
    checks.push(match (&teacher, m.stage) {
        (Some(t), StageTag::StageInit | StageTag::StageMoe | StageTag::StageMob) => {
            loss_decomposition(&m.run_config, m.stage, &t.model, &ck.model)?
        }
        _ => skipped("loss_decomposition", "no distillation stage or no teacher"),
    });
    Ok(checks)
}

/// Dense FFN against the unweighted sum of its experts, 100 inputs per layer.
pub fn reassembly(teacher: &DitModel, student: &DitModel) -> Result<Check> {
    let h = student.config.hidden;
    let mut worst: f64 = 0.0;
    let slots = student.layout.moe_slots();
    for (slot, cfg) in &slots {
        if !matches!(teacher.layout.kind(slot), Some(FfnKind::Dense)) {
            return Ok(check("reassembly", false, format!("{slot} is not dense in the teacher")));
        }
        let dense = FfnWeights::read(&teacher.params, &slot.prefix(), true)?;
        let experts = MoeWeights::read(&student.params, slot, cfg.n_experts)?;
        let mut r = rng::stream(0, &[rng::tag("reassembly"), rng::tag(&slot.prefix())]);
        for _ in 0..100 {
            let x = rng::randn(&mut r, &[h], 1.0);
            let a = dense.forward(x.data());
            let b = experts.unweighted_sum(x.data());
            for (u, v) in a.iter().zip(&b) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    Ok(check(
        "reassembly",
        !slots.is_empty() && worst <= REASSEMBLY_TOL,
        format!("{} layers, max abs difference {worst:e}", slots.len()),
    ))
}

/// Selected gate weights sum to one on random tokens of every MoE layer.
pub fn gate_normalization(model: &DitModel, seed: u64) -> Result<Check> {
    let slots = model.layout.moe_slots();
    if slots.is_empty() {
        return Ok(skipped("gate_normalization", "no MoE layers"));
    }
    let h = model.config.hidden;
    let mut worst: f64 = 0.0;
    let mut r = rng::stream(seed, &[rng::tag("verify-gate")]);
    for (slot, cfg) in &slots {
        let w = model.params.get(&moe::gate_name(slot))?;
        for _ in 0..1000 {
            let x = rng::randn(&mut r, &[h], 3.0);
            let d = moe::gate(x.data(), w, cfg.top_k)?;
            let s: f64 = d.selected.iter().map(|&i| d.weights[i]).sum();
            if cfg.top_k > 0 {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    Ok(check(
        "gate_normalization",
        worst <= GATE_TOL,
        format!("{} layers, max |sum - 1| {worst:e}", slots.len()),
    ))
}

/// Parameters frozen by the stage that wrote `ck` hash identically to the
/// parent checkpoint.
pub fn freeze_contract(ck: &Checkpoint) -> Result<Check> {
    let m = &ck.manifest;
    let Some(stage) = stage_of(m.stage) else {
        return Ok(skipped("freeze_contract", "teacher checkpoints freeze nothing"));
    };
    let mask = FreezeMask::for_stage(stage, &ck.model);
    if mask.names.is_empty() {
        return Ok(check("freeze_contract", true, format!("{} freezes nothing", m.stage.name())));
    }
    let Some(link) = &m.parent else {
        return Ok(check("freeze_contract", false, "no parent recorded".into()));
    };
    let parent = checkpoint::read_manifest(&checkpoint::resolve(&ck.path, link))?;
    let changed: Vec<&String> = mask
        .names
        .iter()
        .filter(|n| parent.tensor(n).map(|e| &e.sha256) != m.tensor(n).map(|e| &e.sha256))
        .collect();
    Ok(check(
        "freeze_contract",
        changed.is_empty(),
        if changed.is_empty() {
            format!("{} frozen tensors unchanged", mask.names.len())
        } else {
            format!("changed: {changed:?}")
        },
    ))
}

/// The total loss equals its weighted components on a validation batch.
pub fn loss_decomposition(cfg: &RunConfig, tag: StageTag, teacher: &DitModel, student: &DitModel) -> Result<Check> {
    let trainer = trainer_for(cfg, tag, student)?;
    let val = validation(cfg)?;
    let batch = &val[..val.len().min(8)];
    let r = stage_val_loss(&trainer, teacher, student, batch)?;
    let sec = section(cfg, tag);
    let err = (r.recombine(sec.lambda_feature, sec.lambda_balance) - r.total).abs();
    Ok(check("loss_decomposition", err <= DECOMPOSITION_TOL, format!("|total - sum| {err:e}")))
}
