//! Supervised and offline baselines, and sequential multi-task runs.
//!
//! All methods go through [`train_loop`], so they share the optimizer,
//! schedule, batching, evaluation cadence and checkpoint selection with SDFT
//! and differ only in the per-batch objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{DistillTerms, EstimatorId};
use crate::exec::{map_indexed, map_slice, Exec};
use crate::grad::GradientVector;
use crate::metrics::{AccuracyMatrix, CadenceRow};
use crate::optim::{optimizer_step, AdamState};
use crate::policy::{forward_response, log_softmax, response_log_dists, sample_response, score_cotangent, PolicyParams, TokenId, TokenSeq};
use crate::rng::{derive_seed, stream_rng};
use crate::tasks::TaskInstance;
use crate::trainer::{
    average_outcomes, run_sdft_in, split_validation, train_loop, BatchOutcome, EvalPlan, MetricRecord, Objective,
    RunContext, SftTarget, StepStats, TrainConfig, TrainOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sdft,
    Sft,
    TeacherSft,
    OfflineDistill,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sdft, Method::Sft, Method::TeacherSft, Method::OfflineDistill];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sdft => "sdft",
            Method::Sft => "sft",
            Method::TeacherSft => "teacher-sft",
            Method::OfflineDistill => "offline-distill",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected sdft, sft, teacher-sft or offline-distill)")))
    }
}

/// Gradient of the mean per-token NLL of `target` after `prompt`, and that NLL.
pub fn nll_gradient(params: &PolicyParams, prompt: &[TokenId], target: &[TokenId]) -> Result<(GradientVector, f64)> {
    let fwd = forward_response(params, prompt, target)?;
    let n = target.len() as f64;
    let mut nll = 0.0;
    let cots: Vec<Vec<f64>> = target
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let lp = log_softmax(fwd.logits_after(prompt.len() + t));
            nll -= lp[y as usize];
            score_cotangent(&lp, y).into_iter().map(|c| -c / n).collect()
        })
        .collect();
    Ok((fwd.backward(prompt.len(), &cots), nll / n))
}

fn sft_sequence(inst: &TaskInstance, params: &PolicyParams, target: SftTarget) -> TokenSeq {
    match target {
        SftTarget::Answer => inst.target(&params.vocab),
        SftTarget::Demonstration => {
            let mut s = inst.c.clone();
            s.push(params.vocab.eos);
            s
        }
    }
}

/// Next-token NLL on the demonstration (or answer) after the student prompt.
pub struct SftObjective {
    pub target: SftTarget,
}

impl Objective for SftObjective {
    fn batch_gradient(&mut self, student: &PolicyParams, batch: &[&TaskInstance], _ids: &[usize], _step: usize, exec: Exec) -> Result<BatchOutcome> {
        let parts = map_slice(batch, exec, |_, inst| {
            let sp = inst.student_prompt(&student.vocab)?;
            nll_gradient(student, &sp, &sft_sequence(inst, student, self.target)).map(Some)
        });
        average_outcomes(student.n_params(), parts)
    }
}

/// One SFT update.
pub fn sft_step(
    batch: &[&TaskInstance],
    policy: &mut PolicyParams,
    opt: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut obj = SftObjective { target: cfg.sft_target };
    let ids: Vec<usize> = (0..batch.len()).collect();
    let out = obj.batch_gradient(policy, batch, &ids, 0, exec)?;
    let info = optimizer_step(&mut policy.theta, &out.grad, opt, lr, &cfg.adam)?;
    Ok(StepStats { loss: out.loss, skipped: out.skipped, grad_norm: info.grad_norm })
}

/// One frozen sample of the base model under the teacher prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSample {
    pub response: TokenSeq,
    pub teacher_logp: Vec<Vec<f64>>,
}

/// Samples one response per instance from `base` conditioned on the
/// demonstration. Empty samples are kept as `None`.
pub fn build_offline_corpus(
    instances: &[TaskInstance],
    base: &PolicyParams,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Vec<Option<OfflineSample>>> {
    let seed = derive_seed(cfg.seed, &[0x0ff1]);
    map_indexed(instances.len(), exec, |i| {
        let tp = instances[i].teacher_prompt(&base.vocab)?;
        let traj = sample_response(base, &tp, cfg.max_gen_len, cfg.temperature, &mut stream_rng(seed, 0, i as u64))?;
        if traj.is_empty() {
            return Ok(None);
        }
        let teacher_logp = response_log_dists(base, &tp, &traj.response)?;
        Ok(Some(OfflineSample { response: traj.response, teacher_logp }))
    })
    .into_iter()
    .collect()
}

/// Stepwise KL to the frozen teacher along the fixed teacher samples.
pub struct OfflineDistillObjective {
    pub corpus: Vec<Option<OfflineSample>>,
}

impl Objective for OfflineDistillObjective {
    fn batch_gradient(&mut self, student: &PolicyParams, batch: &[&TaskInstance], ids: &[usize], _step: usize, exec: Exec) -> Result<BatchOutcome> {
        let parts = map_indexed(batch.len(), exec, |i| {
            let Some(s) = &self.corpus[ids[i]] else { return Ok(None) };
            let sp = batch[i].student_prompt(&student.vocab)?;
            let terms = DistillTerms::with_teacher_logp(student, &sp, &s.response, s.teacher_logp.clone())?;
            let ones = vec![1.0; s.response.len()];
            Ok(Some((terms.gradient(EstimatorId::Analytic, &ones), terms.stepwise_kls().iter().sum())))
        });
        average_outcomes(student.n_params(), parts)
    }
}

/// NLL of the frozen teacher samples after the student prompt.
pub struct TeacherSftObjective {
    pub corpus: Vec<Option<OfflineSample>>,
}

impl Objective for TeacherSftObjective {
    fn batch_gradient(&mut self, student: &PolicyParams, batch: &[&TaskInstance], ids: &[usize], _step: usize, exec: Exec) -> Result<BatchOutcome> {
        let parts = map_indexed(batch.len(), exec, |i| {
            let Some(s) = &self.corpus[ids[i]] else { return Ok(None) };
            let sp = batch[i].student_prompt(&student.vocab)?;
            nll_gradient(student, &sp, &s.response).map(Some)
        });
        average_outcomes(student.n_params(), parts)
    }
}

fn run_objective_in<F>(dataset: &[TaskInstance], start: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>, ctx: RunContext, make: F) -> Result<TrainOutput>
where
    F: FnOnce(&[TaskInstance]) -> Result<Box<dyn Objective>>,
{
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    cfg.validate()?;
    let (train, val) = split_validation(dataset, cfg.val_fraction, cfg.seed);
    let mut obj = make(&train)?;
    train_loop(&train, &val, start, cfg, eval, obj.as_mut(), ctx)
}

/// Runs `method` from `start`, as one phase of a possibly longer run.
pub fn run_method_in(
    method: Method,
    dataset: &[TaskInstance],
    start: &PolicyParams,
    cfg: &TrainConfig,
    eval: &EvalPlan<'_>,
    ctx: RunContext,
) -> Result<TrainOutput> {
    match method {
        Method::Sdft => run_sdft_in(dataset, start, cfg, eval, ctx),
        Method::Sft => run_objective_in(dataset, start, cfg, eval, ctx, |_| Ok(Box::new(SftObjective { target: cfg.sft_target }))),
        Method::OfflineDistill => run_objective_in(dataset, start, cfg, eval, ctx, |train| {
            Ok(Box::new(OfflineDistillObjective { corpus: build_offline_corpus(train, start, cfg, eval.exec)? }))
        }),
        Method::TeacherSft => run_objective_in(dataset, start, cfg, eval, ctx, |train| {
            Ok(Box::new(TeacherSftObjective { corpus: build_offline_corpus(train, start, cfg, eval.exec)? }))
        }),
    }
}

pub fn run_method(method: Method, dataset: &[TaskInstance], base: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>) -> Result<TrainOutput> {
    run_method_in(method, dataset, base, cfg, eval, RunContext { emit_initial: true, ..Default::default() })
}

pub fn run_sft(dataset: &[TaskInstance], base: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>) -> Result<TrainOutput> {
    run_method(Method::Sft, dataset, base, cfg, eval)
}

pub fn run_offline_distill(dataset: &[TaskInstance], base: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>) -> Result<TrainOutput> {
    run_method(Method::OfflineDistill, dataset, base, cfg, eval)
}

pub fn run_teacher_sft(dataset: &[TaskInstance], base: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>) -> Result<TrainOutput> {
    run_method(Method::TeacherSft, dataset, base, cfg, eval)
}

// ---------------------------------------------------------------------------
// sequential

#[derive(Debug, Clone)]
pub struct SequentialTask {
    pub id: String,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct SequentialPlan {
    pub method: Method,
    pub tasks: Vec<SequentialTask>,
}

#[derive(Debug, Clone)]
pub struct SequentialOutput {
    pub matrix: AccuracyMatrix,
    /// metric records per task, with global step numbers
    pub logs: Vec<Vec<MetricRecord>>,
    pub policy: PolicyParams,
}

/// Trains on the tasks in order, each phase starting from the previous
/// phase's selected checkpoint, and records accuracy on every task's held-out
/// set at each evaluation point.
#[allow(clippy::too_many_arguments)]
pub fn run_sequential(
    plan: &SequentialPlan,
    base: &PolicyParams,
    probes: &[TokenSeq],
    probe_len: usize,
    kl_mode: crate::metrics::KlMode,
    seed: u64,
    exec: Exec,
) -> Result<SequentialOutput> {
    if plan.tasks.is_empty() {
        return Err(Error::Config("sequential plan has no tasks".into()));
    }
    let names: Vec<String> = plan.tasks.iter().map(|t| t.id.clone()).collect();
    let mut rows: Vec<CadenceRow> = Vec::new();
    let mut logs = Vec::new();
    let mut policy = base.clone();
    let mut offset = 0;
    for (j, task) in plan.tasks.iter().enumerate() {
        let eval = EvalPlan {
            base,
            probes,
            probe_len,
            kl_mode,
            tasks: plan.tasks.iter().map(|t| (t.id.clone(), &t.test[..])).collect(),
            current: j,
            seed,
            exec,
        };
        let ctx = RunContext { step_offset: offset, phase: Some(j), emit_initial: j == 0 };
        let out = run_method_in(plan.method, &task.train, &policy, &task.config, &eval, ctx)?;
        offset += out.steps;
        rows.extend(out.cadence);
        logs.push(out.records);
        policy = out.policy;
    }
    Ok(SequentialOutput { matrix: AccuracyMatrix { tasks: names, rows }, logs, policy })
}
