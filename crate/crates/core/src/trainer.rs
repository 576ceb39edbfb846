//! The SDFT training loop and the machinery every trainer shares.
//!
//! One update: roll out one response per instance from the student prompt
//! `⟨bos⟩ x`, score it under the teacher prompt `⟨bos⟩ x ⟨sep⟩ c ⟨sep⟩`,
//! build the configured estimator with importance weights and the
//! first-token mask, average over the batch, take an AdamW step, and move the
//! EMA teacher.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{DistillTerms, EstimatorId};
use crate::exec::{map_indexed, Exec};
use crate::grad::GradientVector;
use crate::metrics::{exact_match_accuracy, kl_to_base, CadenceRow, KlMode};
use crate::optim::{optimizer_step, AdamState, AdamWConfig, Schedule};
use crate::policy::{sample_response, PolicyParams, TokenId, TokenSeq, Trajectory, Vocab};
use crate::rng::{derive_seed, rng_from_seed, stream_rng};
use crate::tasks::TaskInstance;

/// Teacher prompt `⟨bos⟩ x ⟨sep⟩ c ⟨sep⟩`. The student prompt is `⟨bos⟩ x`.
pub fn build_teacher_prompt(x: &[TokenId], c: &[TokenId], vocab: &Vocab) -> Result<TokenSeq> {
    if x.is_empty() || c.is_empty() {
        return Err(Error::Input("teacher prompt needs non-empty query and demonstration".into()));
    }
    let mut p = Vec::with_capacity(x.len() + c.len() + 3);
    p.push(vocab.bos);
    p.extend_from_slice(x);
    p.push(vocab.sep);
    p.extend_from_slice(c);
    p.push(vocab.sep);
    vocab.check_tokens(&p)?;
    Ok(p)
}

pub fn build_student_prompt(x: &[TokenId], vocab: &Vocab) -> Result<TokenSeq> {
    if x.is_empty() {
        return Err(Error::Input("empty query".into()));
    }
    let mut p = Vec::with_capacity(x.len() + 1);
    p.push(vocab.bos);
    p.extend_from_slice(x);
    vocab.check_tokens(&p)?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// teacher

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    #[default]
    Ema,
    FrozenBase,
    CurrentStudent,
}

impl TeacherMode {
    pub const ALL: [TeacherMode; 3] = [TeacherMode::Ema, TeacherMode::FrozenBase, TeacherMode::CurrentStudent];

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherMode::Ema => "ema",
            TeacherMode::FrozenBase => "frozen-base",
            TeacherMode::CurrentStudent => "current-student",
        }
    }
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TeacherMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown teacher mode `{s}` (expected ema, frozen-base or current-student)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub mode: TeacherMode,
    /// teacher parameters; `None` when the teacher is the current student
    pub phi: Option<Vec<f64>>,
    pub alpha: f64,
}

impl TeacherState {
    /// Teacher initialized from the student (`φ = θ`).
    pub fn new(mode: TeacherMode, alpha: f64, student: &PolicyParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let phi = match mode {
            TeacherMode::CurrentStudent => None,
            TeacherMode::Ema | TeacherMode::FrozenBase => Some(student.theta.clone()),
        };
        Ok(TeacherState { mode, phi, alpha })
    }

    pub fn params<'a>(&'a self, student: &'a PolicyParams) -> Cow<'a, PolicyParams> {
        match &self.phi {
            Some(phi) => Cow::Owned(student.with_theta(phi.clone())),
            None => Cow::Borrowed(student),
        }
    }

    /// Applies the per-step teacher update for this mode.
    pub fn after_update(&mut self, theta: &[f64]) -> Result<()> {
        if self.mode == TeacherMode::Ema {
            *self = ema_update(self, theta, self.alpha)?;
        }
        Ok(())
    }
}

/// `φ' = α θ + (1 − α) φ`.
pub fn ema_update(teacher: &TeacherState, theta: &[f64], alpha: f64) -> Result<TeacherState> {
    if teacher.mode != TeacherMode::Ema {
        return Err(Error::Internal(format!("ema_update on a {} teacher", teacher.mode)));
    }
    let phi = teacher.phi.as_ref().ok_or_else(|| Error::Internal("ema teacher without parameters".into()))?;
    if phi.len() != theta.len() {
        return Err(Error::Internal(format!("teacher has {} parameters, student {}", phi.len(), theta.len())));
    }
    let phi = phi.iter().zip(theta).map(|(p, t)| alpha * t + (1.0 - alpha) * p).collect();
    Ok(TeacherState { mode: teacher.mode, phi: Some(phi), alpha: teacher.alpha })
}

/// `w_t = exp(student_logprob − sampler_logprob)`, clipped to `[1/clip, clip]`.
pub fn importance_weights(traj: &Trajectory, clip: Option<f64>) -> Vec<f64> {
    traj.student_logprobs
        .iter()
        .zip(&traj.sampler_logprobs)
        .map(|(s, q)| {
            let w = (s - q).exp();
            match clip {
                Some(c) => w.clamp(1.0 / c, c),
                None => w,
            }
        })
        .collect()
}

/// Zeroes the contributions of the first `n` response positions.
pub fn apply_first_token_mask(contributions: &mut [f64], n: usize) {
    let n = n.min(contributions.len());
    contributions[..n].iter_mut().for_each(|c| *c = 0.0);
}

// ---------------------------------------------------------------------------
// configuration and records

/// Target sequence for supervised baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftTarget {
    Demonstration,
    #[default]
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// cap on optimizer updates; `None` runs every epoch
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    pub max_gen_len: usize,
    pub estimator: EstimatorId,
    pub teacher_mode: TeacherMode,
    pub alpha: f64,
    pub mask_first_n: usize,
    pub is_clip: Option<f64>,
    pub temperature: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
    /// optimizer updates between evaluations
    pub eval_every: usize,
    pub val_fraction: f64,
    /// return the best-validation checkpoint instead of the last one
    pub select_best: bool,
    pub sft_target: SftTarget,
    pub kl_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 2,
            max_steps: None,
            warmup_steps: 10,
            max_gen_len: 3,
            estimator: EstimatorId::Analytic,
            teacher_mode: TeacherMode::Ema,
            alpha: 0.02,
            mask_first_n: 2,
            is_clip: None,
            temperature: 1.0,
            seed: 0,
            adam: AdamWConfig::default(),
            eval_every: 25,
            val_fraction: 0.05,
            select_best: true,
            sft_target: SftTarget::Answer,
            kl_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_gen_len == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs, max_gen_len and eval_every must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if let Some(c) = self.is_clip {
            if !(c >= 1.0) {
                return bad("is_clip must be ≥ 1");
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be > 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.kl_samples == 0 {
            return bad("kl_samples must be ≥ 1");
        }
        self.adam.validate()
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Number of optimizer updates on a training set of `n` instances.
    pub fn total_updates(&self, n: usize) -> usize {
        let full = self.epochs * self.batches_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self, n: usize) -> Schedule {
        Schedule::for_updates(self.learning_rate, self.warmup_steps, self.total_updates(n))
    }
}

/// Learning rate at schedule position `step` for a training set of `n`.
pub fn lr_at(step: usize, cfg: &TrainConfig, n: usize) -> f64 {
    cfg.schedule(n).lr_at(step)
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// mean training loss over the updates since the previous record
    pub loss: f64,
    pub accuracy: f64,
    pub kl_to_base: f64,
    pub learning_rate: f64,
    pub skipped: usize,
    pub wall_clock_s: f64,
}

impl MetricRecord {
    /// Columns written to metric CSVs; wall-clock time is kept out so that
    /// reruns produce identical files.
    pub const CSV_HEADER: [&'static str; 6] = ["step", "loss", "accuracy", "kl_to_base", "learning_rate", "skipped"];

    pub fn csv_fields(&self) -> Vec<String> {
        use crate::metrics::fmt_f;
        vec![
            self.step.to_string(),
            fmt_f(self.loss),
            fmt_f(self.accuracy),
            fmt_f(self.kl_to_base),
            fmt_f(self.learning_rate),
            self.skipped.to_string(),
        ]
    }
}

// ---------------------------------------------------------------------------
// evaluation hook

/// What to measure at each evaluation point.
#[derive(Debug, Clone)]
pub struct EvalPlan<'a> {
    pub base: &'a PolicyParams,
    pub probes: &'a [TokenSeq],
    pub probe_len: usize,
    pub kl_mode: KlMode,
    /// held-out instances per task
    pub tasks: Vec<(String, &'a [TaskInstance])>,
    /// task whose accuracy goes into [`MetricRecord::accuracy`]
    pub current: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl EvalPlan<'_> {
    fn evaluate(&self, policy: &PolicyParams, point: usize) -> Result<(Vec<f64>, f64)> {
        let accs = self
            .tasks
            .iter()
            .map(|(_, inst)| exact_match_accuracy(policy, inst, self.exec))
            .collect::<Result<Vec<f64>>>()?;
        let kl = if self.probes.is_empty() {
            0.0
        } else {
            kl_to_base(policy, self.base, self.probes, self.probe_len, self.kl_mode, derive_seed(self.seed, &[point as u64]), self.exec)?
        };
        Ok((accs, kl))
    }
}

// ---------------------------------------------------------------------------
// shared loop

/// Averaged descent gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub grad: GradientVector,
    pub loss: f64,
    pub skipped: usize,
}

/// A training method: how a batch becomes a gradient, and what happens
/// after each update.
pub trait Objective {
    /// `ids` index the instances in the training set.
    fn batch_gradient(
        &mut self,
        student: &PolicyParams,
        batch: &[&TaskInstance],
        ids: &[usize],
        step: usize,
        exec: Exec,
    ) -> Result<BatchOutcome>;

    fn after_update(&mut self, _student: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

/// Sums per-instance `(gradient, loss)` results in order and averages them.
pub fn average_outcomes(n_params: usize, parts: Vec<Result<Option<(GradientVector, f64)>>>) -> Result<BatchOutcome> {
    let mut grad = GradientVector::zeros(n_params);
    let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for p in parts {
        match p? {
            Some((g, l)) => {
                grad.add_scaled(&g, 1.0);
                loss += l;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used > 0 {
        grad.scale(1.0 / used as f64);
        loss /= used as f64;
    }
    Ok(BatchOutcome { grad, loss, skipped })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// best-validation checkpoint (or the last one when selection is off)
    pub policy: PolicyParams,
    pub final_policy: PolicyParams,
    pub records: Vec<MetricRecord>,
    pub cadence: Vec<CadenceRow>,
    pub best_step: usize,
    pub steps: usize,
}

/// Holds out `max(1, round(fraction · n))` instances for validation when
/// `fraction > 0` and at least two instances exist.
pub fn split_validation(dataset: &[TaskInstance], fraction: f64, seed: u64) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let n = dataset.len();
    if fraction <= 0.0 || n < 2 {
        return (dataset.to_vec(), Vec::new());
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, &[0x5a11])));
    let val = idx[..k].iter().map(|&i| dataset[i].clone()).collect();
    let mut rest = idx[k..].to_vec();
    rest.sort_unstable();
    (rest.into_iter().map(|i| dataset[i].clone()).collect(), val)
}

/// Where a run sits inside a longer sequential run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunContext {
    pub step_offset: usize,
    pub phase: Option<usize>,
    /// record an evaluation before the first update
    pub emit_initial: bool,
}

/// Epochs of shuffled minibatches through `obj`, with periodic evaluation
/// and best-validation checkpoint selection (ties go to the later point).
pub fn train_loop(
    train: &[TaskInstance],
    val: &[TaskInstance],
    start: &PolicyParams,
    cfg: &TrainConfig,
    eval: &EvalPlan<'_>,
    obj: &mut dyn Objective,
    ctx: RunContext,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let clock = Instant::now();
    let total = cfg.total_updates(train.len());
    let sched = cfg.schedule(train.len());
    let mut student = start.clone();
    let mut opt = AdamState::new(student.n_params());
    let mut records = Vec::new();
    let mut cadence = Vec::new();
    let mut best = (f64::NEG_INFINITY, student.clone(), 0usize);
    let (mut loss_acc, mut loss_n, mut skipped_acc) = (0.0, 0usize, 0usize);

    let checkpoint = |step: usize,
                          student: &PolicyParams,
                          loss: Option<f64>,
                          skipped: usize,
                          records: &mut Vec<MetricRecord>,
                          cadence: &mut Vec<CadenceRow>,
                          best: &mut (f64, PolicyParams, usize)|
     -> Result<()> {
        let global = ctx.step_offset + step;
        let (accs, kl) = eval.evaluate(student, global)?;
        let score = if val.is_empty() { 0.0 } else { exact_match_accuracy(student, val, eval.exec)? };
        if score >= best.0 {
            *best = (score, student.clone(), step);
        }
        if let Some(loss) = loss {
            records.push(MetricRecord {
                step: global,
                loss,
                accuracy: accs.get(eval.current).copied().unwrap_or(f64::NAN),
                kl_to_base: kl,
                learning_rate: sched.lr_at(step),
                skipped,
                wall_clock_s: clock.elapsed().as_secs_f64(),
            });
        }
        cadence.push(CadenceRow { step: global, phase: ctx.phase, accuracy: accs, kl_to_base: kl });
        Ok(())
    };

    if ctx.emit_initial {
        let mut initial = Vec::new();
        checkpoint(0, &student, None, 0, &mut records, &mut initial, &mut best)?;
        for row in &mut initial {
            row.phase = None;
        }
        cadence.extend(initial);
    } else {
        // the starting point still competes for checkpoint selection
        let score = if val.is_empty() { 0.0 } else { exact_match_accuracy(&student, val, eval.exec)? };
        best = (score, student.clone(), 0);
    }

    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, &[0xe90c, epoch as u64])));
        for ids in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch: Vec<&TaskInstance> = ids.iter().map(|&i| &train[i]).collect();
            let out = obj.batch_gradient(&student, &batch, ids, step, eval.exec)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            let lr = sched.lr_for_update(step);
            optimizer_step(&mut student.theta, &out.grad, &mut opt, lr, &cfg.adam)?;
            obj.after_update(&student)?;
            loss_acc += out.loss;
            loss_n += 1;
            skipped_acc += out.skipped;
            step += 1;
            if step % cfg.eval_every == 0 || step == total {
                let loss = loss_acc / loss_n as f64;
                debug!("step {step}: loss {loss:.5}");
                checkpoint(step, &student, Some(loss), skipped_acc, &mut records, &mut cadence, &mut best)?;
                loss_acc = 0.0;
                loss_n = 0;
                skipped_acc = 0;
            }
        }
    }
    let policy = if cfg.select_best { best.1 } else { student.clone() };
    let best_step = if cfg.select_best { best.2 } else { step };
    Ok(TrainOutput { policy, final_policy: student, records, cadence, best_step, steps: step })
}

// ---------------------------------------------------------------------------
// SDFT

/// On-policy self-distillation against the demonstration-conditioned teacher.
pub struct SdftObjective {
    pub teacher: TeacherState,
    pub cfg: TrainConfig,
}

impl SdftObjective {
    pub fn new(start: &PolicyParams, cfg: &TrainConfig) -> Result<Self> {
        Ok(SdftObjective { teacher: TeacherState::new(cfg.teacher_mode, cfg.alpha, start)?, cfg: cfg.clone() })
    }
}

/// Gradient and loss of one instance's SDFT term, or `None` if its rollout is
/// empty. The loss is the masked sum of stepwise KLs along the rollout.
pub fn sdft_instance(
    student: &PolicyParams,
    teacher: &PolicyParams,
    inst: &TaskInstance,
    cfg: &TrainConfig,
    rng: &mut crate::rng::Rng,
) -> Result<Option<(GradientVector, f64)>> {
    let sp = inst.student_prompt(&student.vocab)?;
    let tp = inst.teacher_prompt(&student.vocab)?;
    let traj = sample_response(student, &sp, cfg.max_gen_len, cfg.temperature, rng)?;
    if traj.is_empty() {
        return Ok(None);
    }
    let mut weights = importance_weights(&traj, cfg.is_clip);
    apply_first_token_mask(&mut weights, cfg.mask_first_n);
    let terms = DistillTerms::new(student, teacher, &sp, &tp, &traj.response)?;
    let loss = terms.stepwise_kls().iter().zip(&weights).map(|(k, w)| if *w == 0.0 { 0.0 } else { *k }).sum();
    Ok(Some((terms.gradient(cfg.estimator, &weights), loss)))
}

impl Objective for SdftObjective {
    fn batch_gradient(
        &mut self,
        student: &PolicyParams,
        batch: &[&TaskInstance],
        _ids: &[usize],
        step: usize,
        exec: Exec,
    ) -> Result<BatchOutcome> {
        let teacher = self.teacher.params(student);
        let seed = derive_seed(self.cfg.seed, &[0x5df7]);
        let parts = map_indexed(batch.len(), exec, |i| {
            let mut rng = stream_rng(seed, step as u64, i as u64);
            sdft_instance(student, &teacher, batch[i], &self.cfg, &mut rng)
        });
        average_outcomes(student.n_params(), parts)
    }

    fn after_update(&mut self, student: &PolicyParams) -> Result<()> {
        self.teacher.after_update(&student.theta)
    }
}

/// Statistics of a single update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub skipped: usize,
    pub grad_norm: f64,
}

/// One SDFT update of `student` (and of the teacher in EMA mode).
#[allow(clippy::too_many_arguments)]
pub fn sdft_step(
    batch: &[&TaskInstance],
    student: &mut PolicyParams,
    teacher: &mut TeacherState,
    opt: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
    step: usize,
    exec: Exec,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut obj = SdftObjective { teacher: teacher.clone(), cfg: cfg.clone() };
    let ids: Vec<usize> = (0..batch.len()).collect();
    let out = obj.batch_gradient(student, batch, &ids, step, exec)?;
    let info = optimizer_step(&mut student.theta, &out.grad, opt, lr, &cfg.adam)?;
    obj.after_update(student)?;
    *teacher = obj.teacher;
    Ok(StepStats { loss: out.loss, skipped: out.skipped, grad_norm: info.grad_norm })
}

/// Full SDFT run: validation split, epochs of [`sdft_step`], evaluation and
/// checkpoint selection.
pub fn run_sdft(dataset: &[TaskInstance], base: &PolicyParams, cfg: &TrainConfig, eval: &EvalPlan<'_>) -> Result<TrainOutput> {
    run_sdft_in(dataset, base, cfg, eval, RunContext { emit_initial: true, ..Default::default() })
}

pub fn run_sdft_in(
    dataset: &[TaskInstance],
    start: &PolicyParams,
    cfg: &TrainConfig,
    eval: &EvalPlan<'_>,
    ctx: RunContext,
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let (train, val) = split_validation(dataset, cfg.val_fraction, cfg.seed);
    let mut obj = SdftObjective::new(start, cfg)?;
    train_loop(&train, &val, start, cfg, eval, &mut obj, ctx)
}
