use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;

use sdft_core::baselines::{run_method, run_sequential, SequentialPlan};
use sdft_core::estimators::{estimator_stats, expected_estimate_exact, sequence_kl_grad_exact, EstimatorId};
use sdft_core::exec::Exec;
use sdft_core::fixture::{self, EstimatorFixture};
use sdft_core::metrics::{exact_match_accuracy, fmt_f, forgetting_matrix, kl_to_base, pass_at_k_eval, plot_rows, EvalReport};
use sdft_core::policy::{enumerate_responses, load_checkpoint, save_checkpoint, PolicyParams, TokenSeq, Vocab};
use sdft_core::rng::derive_seed;
use sdft_core::tasks::{evaluate_icl_gate, gen_meta_corpus, load_dataset, pretrain_base, save_dataset, TaskInstance};
use sdft_core::trainer::{EvalPlan, MetricRecord};
use sdft_core::Error;

use crate::artifacts::{strings, RunDir};
use crate::config::RunConfig;

pub struct Ctx {
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Ctx {
    fn run_dir(&self, command: &str) -> Result<RunDir> {
        let mut rd = RunDir::create(&self.out, command, self.config_path.clone(), &self.cfg)?;
        if let Some(p) = &self.config_path {
            rd.input(p);
        }
        Ok(rd)
    }

    fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::standard(self.cfg.vocab_size)?)
    }
}

fn load_model(rd: &mut RunDir, path: Option<&Path>, what: &str) -> Result<PolicyParams> {
    let path = path.ok_or_else(|| Error::Input(format!("no {what} checkpoint given (set `{what}` in the config)")))?;
    if !path.exists() {
        return Err(Error::Input(format!("missing {what} checkpoint {}", path.display())).into());
    }
    rd.input(path);
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn metric_rows(records: &[MetricRecord]) -> impl Iterator<Item = Vec<String>> + '_ {
    records.iter().map(|r| r.csv_fields())
}

fn metric_header() -> Vec<String> {
    MetricRecord::CSV_HEADER.iter().map(|s| s.to_string()).collect()
}

pub fn pretrain(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut rd = ctx.run_dir("pretrain")?;
    let vocab = ctx.vocab()?;
    let corpus = gen_meta_corpus(cfg.seed, cfg.corpus.tasks, cfg.corpus.per_task, &vocab, &cfg.meta)?;
    info!("pretraining on {} documents for {} steps", corpus.len(), cfg.pretrain.steps);
    let (base, report) = pretrain_base(&corpus, vocab, &cfg.pretrain, ctx.exec)?;
    save_checkpoint(&base, rd.output("base.ckpt"))?;
    rd.write_csv(
        "pretrain_loss.csv",
        &strings(["step", "loss"]),
        report.losses.iter().map(|(s, l)| vec![s.to_string(), fmt_f(*l)]),
    )?;
    let gate = evaluate_icl_gate(&base, &cfg.meta, cfg.gate.seed, cfg.gate.tasks, cfg.gate.per_task, ctx.exec)?;
    rd.write_csv(
        "gate.csv",
        &strings(["conditioned_accuracy", "unconditioned_accuracy", "chance", "n", "passed"]),
        [vec![
            fmt_f(gate.conditioned_accuracy),
            fmt_f(gate.unconditioned_accuracy),
            fmt_f(gate.chance),
            gate.n.to_string(),
            gate.passed().to_string(),
        ]],
    )?;
    let dir = rd.finish()?;
    println!(
        "icl gate: conditioned {:.4} unconditioned {:.4} chance {:.4} (n = {})",
        gate.conditioned_accuracy, gate.unconditioned_accuracy, gate.chance, gate.n
    );
    if !gate.passed() {
        println!("run directory: {}", dir.display());
        return Err(Error::Gate(format!(
            "need conditioned ≥ {} and unconditioned ≤ chance + {}",
            sdft_core::tasks::IclGateReport::MIN_CONDITIONED,
            sdft_core::tasks::IclGateReport::MAX_ABOVE_CHANCE,
        ))
        .into());
    }
    Ok(dir)
}

/// Train and test sets: loaded when configured, otherwise a fresh mapping
/// drawn from the seed.
fn task_data(ctx: &Ctx, rd: &mut RunDir, vocab: &Vocab) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let t = &ctx.cfg.task;
    let generated = || fixture::new_task_with(ctx.cfg.seed, "task", None, vocab, &ctx.cfg.meta, t.train_size, t.test_size);
    let mut load = |p: &PathBuf| -> Result<Vec<TaskInstance>> {
        rd.input(p);
        let d = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
        for inst in &d {
            vocab.check_tokens(&inst.x)?;
            vocab.check_tokens(&inst.c)?;
            vocab.check_tokens(&inst.answer)?;
        }
        Ok(d)
    };
    let train = match &t.train_data {
        Some(p) => load(p)?,
        None => generated()?.train,
    };
    let test = match &t.test_data {
        Some(p) => load(p)?,
        None => generated()?.test,
    };
    Ok((train, test))
}

fn probes(ctx: &Ctx, vocab: &Vocab) -> Result<Vec<TokenSeq>> {
    Ok(fixture::probes_with(ctx.cfg.seed, ctx.cfg.eval.probes_per_kind, vocab, &ctx.cfg.meta)?)
}

pub fn train(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut rd = ctx.run_dir("train")?;
    let base = load_model(&mut rd, cfg.base.as_deref(), "base")?;
    let method = cfg.method()?;
    let (train, test) = task_data(ctx, &mut rd, &base.vocab)?;
    save_dataset(&train, rd.output("train.jsonl"))?;
    save_dataset(&test, rd.output("test.jsonl"))?;
    let probes = probes(ctx, &base.vocab)?;
    let plan = EvalPlan {
        base: &base,
        probes: &probes,
        probe_len: cfg.eval.probe_len,
        kl_mode: cfg.eval.kl_mode,
        tasks: vec![("task".into(), &test[..])],
        current: 0,
        seed: derive_seed(cfg.seed, &[0xe7a1]),
        exec: ctx.exec,
    };
    info!("training {method} for {} updates", cfg.train.total_updates(train.len()));
    let out = run_method(method, &train, &base, &cfg.train, &plan)?;
    save_checkpoint(&out.policy, rd.output("checkpoint.ckpt"))?;
    rd.write_csv("metrics.csv", &metric_header(), metric_rows(&out.records))?;
    rd.write_csv(
        "timings.csv",
        &strings(["step", "wall_clock_s"]),
        out.records.iter().map(|r| vec![r.step.to_string(), format!("{:.3}", r.wall_clock_s)]),
    )?;
    if let Some(last) = out.records.last() {
        println!(
            "{method}: {} updates, best step {}, final accuracy {:.4}, kl_to_base {:.4}",
            out.steps, out.best_step, last.accuracy, last.kl_to_base
        );
    }
    rd.finish()
}

pub fn eval(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut rd = ctx.run_dir("eval")?;
    let base = load_model(&mut rd, cfg.base.as_deref(), "base")?;
    let model = match &cfg.checkpoint {
        Some(p) => load_model(&mut rd, Some(p), "checkpoint")?,
        None => base.clone(),
    };
    let (_, test) = task_data(ctx, &mut rd, &model.vocab)?;
    let probes = probes(ctx, &model.vocab)?;
    let e = &cfg.eval;
    let report = EvalReport {
        task_id: "task".into(),
        n: test.len(),
        accuracy: exact_match_accuracy(&model, &test, ctx.exec)?,
        pass_at_k: pass_at_k_eval(&model, &test, e.pass_samples, &e.pass_k, derive_seed(cfg.seed, &[0x9a55]), ctx.exec)?,
        kl_to_base: kl_to_base(&model, &base, &probes, e.probe_len, e.kl_mode, derive_seed(cfg.seed, &[0xe7a1]), ctx.exec)?,
    };
    rd.write_csv("eval.csv", &report.csv_header(), [report.csv_fields()])?;
    println!("{}", report.csv_header().join(","));
    println!("{}", report.csv_fields().join(","));
    rd.finish()
}

pub fn ablate_estimators(ctx: &Ctx) -> Result<PathBuf> {
    let a = &ctx.cfg.ablate;
    let mut rd = ctx.run_dir("ablate-estimators")?;
    let fx = EstimatorFixture::random(a.fixture_seed, a.vocab_size, a.window, a.max_len, a.spread)?;
    // fail before any sampling if the oracle cannot be enumerated
    enumerate_responses(&fx.student.vocab, fx.max_len, a.enumeration_budget as u128)?;
    let oracle = sequence_kl_grad_exact(&fx.student, &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len)?;
    let mut rows = Vec::new();
    for id in EstimatorId::ALL {
        let expected = expected_estimate_exact(id, &fx.student, &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len)?;
        let st = estimator_stats(id, fx.view(), a.samples, derive_seed(ctx.cfg.seed, &[0xab1a]), ctx.exec)?;
        rows.push(vec![
            id.as_str().to_string(),
            fmt_f(expected.max_abs_diff(&oracle)),
            fmt_f(st.max_bias(&oracle)),
            fmt_f(st.max_bias_z(&oracle)),
            fmt_f(st.variance_trace),
            st.n_samples.to_string(),
        ]);
    }
    let header = strings(["estimator", "exact_bias", "sample_bias", "sample_bias_z", "variance_trace", "n_samples"]);
    println!("{}", header.join(","));
    for r in &rows {
        println!("{}", r.join(","));
    }
    rd.write_csv("estimators.csv", &header, rows)?;
    rd.finish()
}

pub fn sequential(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut rd = ctx.run_dir("sequential")?;
    let base = load_model(&mut rd, cfg.base.as_deref(), "base")?;
    if cfg.sequential.tasks < 2 {
        return Err(Error::Config(format!("sequential.tasks must be ≥ 2, got {}", cfg.sequential.tasks)).into());
    }
    let tasks = fixture::sequential_tasks_with(
        cfg.seed,
        cfg.sequential.tasks,
        &base.vocab,
        &cfg.meta,
        &cfg.train,
        cfg.task.train_size,
        cfg.task.test_size,
    )?;
    let plan = SequentialPlan { method: cfg.method()?, tasks };
    let probes = probes(ctx, &base.vocab)?;
    let out = run_sequential(&plan, &base, &probes, cfg.eval.probe_len, cfg.eval.kl_mode, derive_seed(cfg.seed, &[0xe7a1]), ctx.exec)?;
    let m = &out.matrix;

    let mut header = strings(["step", "phase"]);
    header.extend(m.tasks.iter().cloned());
    header.push("kl_to_base".into());
    rd.write_csv(
        "matrix.csv",
        &header,
        m.rows.iter().map(|r| {
            let mut row = vec![r.step.to_string(), r.phase.map_or(String::new(), |p| p.to_string())];
            row.extend(r.accuracy.iter().map(|a| fmt_f(*a)));
            row.push(fmt_f(r.kl_to_base));
            row
        }),
    )?;
    let forgetting = forgetting_matrix(m);
    rd.write_csv("forgetting.csv", &m.tasks, [forgetting.iter().map(|f| fmt_f(*f)).collect()])?;
    rd.write_csv(
        "plot_data.csv",
        &strings(["step", "task", "metric", "value"]),
        plot_rows(m).into_iter().map(|r| vec![r.step.to_string(), r.task, r.metric, fmt_f(r.value)]),
    )?;
    for (t, log) in m.tasks.iter().zip(&out.logs) {
        rd.write_csv(&format!("metrics_{t}.csv"), &metric_header(), metric_rows(log))?;
    }
    save_checkpoint(&out.policy, rd.output("checkpoint.ckpt"))?;
    println!("forgetting: {}", m.tasks.iter().zip(&forgetting).map(|(t, f)| format!("{t} {f:.4}")).collect::<Vec<_>>().join(", "));
    rd.finish()
}
