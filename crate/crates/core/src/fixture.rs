//! The reference toy setup: vocabulary, pretraining recipe, new tasks, probe
//! prompts and fine-tuning budget. The CLI defaults and the acceptance suite
//! both start from here.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::baselines::SequentialTask;
use crate::error::Result;
use crate::exec::Exec;
use crate::metrics::KlMode;
use crate::policy::{PolicyParams, TokenId, TokenSeq, Vocab};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tasks::{
    evaluate_icl_gate, gen_meta_corpus, gen_task_instances, pretrain_base, IclGateReport, MappingTask,
    MetaCorpusConfig, PretrainConfig, PretrainReport, TaskInstance, TaskSpec,
};
use crate::trainer::{build_student_prompt, EvalPlan, TrainConfig};

pub const VOCAB_SIZE: usize = 28;
pub const META_TASKS: usize = 4000;
pub const META_PER_TASK: usize = 8;
pub const GATE_SEED: u64 = 999;
pub const GATE_TASKS: usize = 20;
pub const GATE_PER_TASK: usize = 10;
/// instances per new task; the first `TRAIN_SIZE` train, the rest test
pub const TASK_SIZE: usize = 56;
pub const TRAIN_SIZE: usize = 40;
pub const PROBE_LEN: usize = 3;

pub fn vocab() -> Vocab {
    Vocab::standard(VOCAB_SIZE).expect("reference vocabulary is valid")
}

pub fn meta_config() -> MetaCorpusConfig {
    MetaCorpusConfig::default()
}

pub fn pretrain_config() -> PretrainConfig {
    PretrainConfig::default()
}

pub fn meta_corpus(seed: u64) -> Result<Vec<TokenSeq>> {
    gen_meta_corpus(seed, META_TASKS, META_PER_TASK, &vocab(), &meta_config())
}

pub fn pretrain_reference(cfg: &PretrainConfig, exec: Exec) -> Result<(PolicyParams, PretrainReport)> {
    pretrain_base(&meta_corpus(cfg.seed)?, vocab(), cfg, exec)
}

pub fn icl_gate(base: &PolicyParams, exec: Exec) -> Result<IclGateReport> {
    evaluate_icl_gate(base, &meta_config(), GATE_SEED, GATE_TASKS, GATE_PER_TASK, exec)
}

/// Fine-tuning budget of the reference experiments: 50 updates, annealed.
pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        epochs: 10,
        warmup_steps: 10,
        max_gen_len: 3,
        mask_first_n: 0,
        eval_every: 10,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct NewTask {
    pub task: MappingTask,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

/// A fresh mapping on `subset` (or a random subset), with disjoint train and
/// test queries.
pub fn new_task(seed: u64, id: &str, subset: Option<Vec<TokenId>>) -> Result<NewTask> {
    new_task_with(seed, id, subset, &vocab(), &meta_config(), TRAIN_SIZE, TASK_SIZE - TRAIN_SIZE)
}

pub fn new_task_with(
    seed: u64,
    id: &str,
    subset: Option<Vec<TokenId>>,
    vocab: &Vocab,
    mc: &MetaCorpusConfig,
    n_train: usize,
    n_test: usize,
) -> Result<NewTask> {
    let task = match subset {
        Some(s) => MappingTask::on_subset(derive_seed(seed, &[0x7a5c]), s, mc.query_len, mc.demo_len)?,
        None => MappingTask::random(derive_seed(seed, &[0x7a5c]), vocab, mc.subset_size, mc.query_len, mc.demo_len)?,
    };
    if n_train == 0 || n_test == 0 {
        return Err(crate::Error::Config("a task needs at least one train and one test instance".into()));
    }
    let all = gen_task_instances(&TaskSpec::Mapping(task.clone()), id, n_train + n_test, derive_seed(seed, &[0x1457]))?;
    let (train, test) = all.split_at(n_train);
    Ok(NewTask { task, train: train.to_vec(), test: test.to_vec() })
}

/// Three tasks on disjoint token subsets, so that the bare prompts of
/// different tasks never ask for conflicting answers.
pub fn sequential_tasks(seed: u64, n: usize) -> Result<Vec<SequentialTask>> {
    sequential_tasks_with(seed, n, &vocab(), &meta_config(), &train_config(0), TRAIN_SIZE, TASK_SIZE - TRAIN_SIZE)
}

/// `n` tasks on disjoint subsets; task `j` trains with `cfg` under its own seed.
pub fn sequential_tasks_with(
    seed: u64,
    n: usize,
    vocab: &Vocab,
    mc: &MetaCorpusConfig,
    cfg: &TrainConfig,
    n_train: usize,
    n_test: usize,
) -> Result<Vec<SequentialTask>> {
    let mut toks = vocab.content_tokens();
    let k = mc.subset_size;
    if k * n > toks.len() {
        return Err(crate::Error::Config(format!("{n} disjoint subsets of size {k} need {} content tokens, have {}", k * n, toks.len())));
    }
    toks.shuffle(&mut rng_from_seed(derive_seed(seed, &[0x5e9])));
    (0..n)
        .map(|j| {
            let id = format!("task{}", j + 1);
            let subset = Some(toks[k * j..k * (j + 1)].to_vec());
            let t = new_task_with(derive_seed(seed, &[j as u64]), &id, subset, vocab, mc, n_train, n_test)?;
            let config = TrainConfig { seed: derive_seed(seed, &[0xc0, j as u64]), ..cfg.clone() };
            Ok(SequentialTask { id, train: t.train, test: t.test, config })
        })
        .collect()
}

/// Held-out prompts from the pretraining distribution: bare queries, and
/// demonstration-conditioned prompts of fresh mappings.
pub fn probes(seed: u64, n_each: usize) -> Result<Vec<TokenSeq>> {
    probes_with(seed, n_each, &vocab(), &meta_config())
}

pub fn probes_with(seed: u64, n_each: usize, v: &Vocab, mc: &MetaCorpusConfig) -> Result<Vec<TokenSeq>> {
    let mut rng = rng_from_seed(derive_seed(seed, &[0x9b0b]));
    let content = v.content_tokens();
    let mut out = Vec::with_capacity(2 * n_each);
    for _ in 0..n_each {
        let x: TokenSeq = content.choose_multiple(&mut rng, mc.query_len).copied().collect();
        out.push(build_student_prompt(&x, v)?);
    }
    for k in 0..n_each {
        let t = MappingTask::random(derive_seed(seed, &[0xf5e, k as u64]), v, mc.subset_size, mc.query_len, mc.demo_len)?;
        let inst = gen_task_instances(&TaskSpec::Mapping(t), "probe", 1, rng.gen())?.remove(0);
        out.push(inst.teacher_prompt(v)?);
    }
    Ok(out)
}

pub const KL_MODE: KlMode = KlMode::McStepwise(4);

/// Evaluation of one task against `base` on `probes`.
pub fn eval_plan<'a>(base: &'a PolicyParams, probes: &'a [TokenSeq], task: &'a [TaskInstance], exec: Exec) -> EvalPlan<'a> {
    EvalPlan {
        base,
        probes,
        probe_len: PROBE_LEN,
        kl_mode: KL_MODE,
        tasks: vec![("task".into(), task)],
        current: 0,
        seed: 0xe7a1,
        exec,
    }
}

/// Tabular student/teacher pair small enough to enumerate: the estimator
/// ablation fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorFixture {
    pub student: PolicyParams,
    pub teacher: PolicyParams,
    pub student_prompt: TokenSeq,
    pub teacher_prompt: TokenSeq,
    pub max_len: usize,
}

impl EstimatorFixture {
    /// Independent random tables on `vocab_size` tokens, logits spread by
    /// ±`spread` around the initialization.
    pub fn random(seed: u64, vocab_size: usize, window: usize, max_len: usize, spread: f64) -> Result<Self> {
        let v = Vocab::standard(vocab_size)?;
        let c = *v.content_tokens().first().ok_or_else(|| crate::Error::Config("fixture vocabulary has no content token".into()))?;
        let shape = crate::policy::Shape::Tabular { window };
        let mut student = crate::policy::init_policy(v, shape, derive_seed(seed, &[1]))?;
        let mut teacher = crate::policy::init_policy(v, shape, derive_seed(seed, &[2]))?;
        let mut rng = rng_from_seed(derive_seed(seed, &[3]));
        if spread > 0.0 {
            student.theta.iter_mut().for_each(|x| *x += rng.gen_range(-spread..spread));
            teacher.theta.iter_mut().for_each(|x| *x += rng.gen_range(-spread..spread));
        }
        Ok(EstimatorFixture { student, teacher, student_prompt: vec![v.bos, c], teacher_prompt: vec![v.bos, c, v.sep, c, v.sep], max_len })
    }

    /// The designated fixture: V = 5, window 1, T = 3.
    pub fn reference() -> Self {
        Self::random(0, 5, 1, 3, 1.5).expect("reference estimator fixture is valid")
    }

    pub fn view(&self) -> crate::estimators::DistillFixture<'_> {
        crate::estimators::DistillFixture {
            student: &self.student,
            teacher: &self.teacher,
            student_prompt: &self.student_prompt,
            teacher_prompt: &self.teacher_prompt,
            max_len: self.max_len,
        }
    }
}
