//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 8 and 9 are exact or engineering checks and are asserted.
//! Criteria 5-7 are directional replications on the toy model; their lines
//! report what the runs measured and are not asserted (see the README for the
//! measured outcomes and why some of them do not hold at this scale).
//!
//! The whole suite pretrains the reference base once through the binary and
//! runs about 60 fine-tuning jobs; expect several minutes on one core.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::Rng;
use sdft_core::baselines::{run_method, run_sequential, Method, SequentialPlan};
use sdft_core::estimators::{
    estimator_stats, expected_estimate_exact, sequence_kl_exact, sequence_kl_grad_exact, stepwise_kl, EstimatorId,
};
use sdft_core::exec::Exec;
use sdft_core::fixture::{self, EstimatorFixture};
use sdft_core::grad::GradientVector;
use sdft_core::metrics::{forgetting_matrix, median, normalized_score, pass_at_k, sample_variance};
use sdft_core::policy::{
    grad_logprob, init_policy, load_checkpoint, logprob_response, PolicyParams, Shape, StepDistribution, TransformerShape, Vocab,
};
use sdft_core::rng::{derive_seed, rng_from_seed};
use sdft_core::trainer::{ema_update, TeacherMode, TeacherState, TrainConfig, TrainOutput};

struct Verdict {
    id: &'static str,
    pass: bool,
    asserted: bool,
    detail: String,
}

fn verdict(id: &'static str, pass: bool, asserted: bool, detail: String) -> Verdict {
    let v = Verdict { id, pass, asserted, detail };
    // printed as soon as known so a long run shows progress
    eprintln!("  [{}] {} {}", v.id, if v.pass { "pass" } else { "fail" }, v.detail);
    v
}

// ---------------------------------------------------------------- criterion 1

fn estimator_fixtures() -> Vec<EstimatorFixture> {
    let mut out = vec![EstimatorFixture::reference()];
    for seed in 1..8u64 {
        let spread = [0.5, 1.5, 3.0][seed as usize % 3];
        out.push(EstimatorFixture::random(seed, 5, 1 + seed as usize % 2, 1 + seed as usize % 4, spread).unwrap());
    }
    out
}

fn exact(id: EstimatorId, fx: &EstimatorFixture) -> GradientVector {
    expected_estimate_exact(id, &fx.student, &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len).unwrap()
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let (mut unbiased_err, mut shared_err, mut bias_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for fx in estimator_fixtures() {
        assert!(fx.student.vocab.size <= 5 && fx.max_len <= 4);
        let g = sequence_kl_grad_exact(&fx.student, &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len).unwrap();
        // the irl expectation is the descent form, i.e. E[-ĝ_irl] of the ascent estimator
        unbiased_err = unbiased_err.max(exact(EstimatorId::Rb, &fx).max_abs_diff(&g)).max(exact(EstimatorId::Irl, &fx).max_abs_diff(&g));
        let (tok, ana) = (exact(EstimatorId::Token, &fx), exact(EstimatorId::Analytic, &fx));
        shared_err = shared_err.max(tok.max_abs_diff(&ana));
        bias_gap = bias_gap.max(ana.max_abs_diff(&g));
    }
    let fx = EstimatorFixture::reference();
    let tok = estimator_stats(EstimatorId::Token, fx.view(), 100_000, 1, Exec::Parallel).unwrap();
    let ana = estimator_stats(EstimatorId::Analytic, fx.view(), 100_000, 1, Exec::Parallel).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = unbiased_err < 1e-6 && shared_err < 1e-6 && bias_gap > 1e-3 && ana.variance_trace < tok.variance_trace && secs < 60.0;
    verdict(
        "1",
        pass,
        true,
        format!(
            "rb/irl error {unbiased_err:.1e}, token-analytic {shared_err:.1e}, bias gap {bias_gap:.3}, variance analytic {:.3} < token {:.3}, {secs:.1}s",
            ana.variance_trace, tok.variance_trace
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

const H: f64 = 1e-5;

fn fd_gradient(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + H;
            let up = f(&x);
            x[i] = theta[i] - H;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    n(&d) / n(a).max(n(b)).max(1e-12)
}

fn logprob_check(p: &PolicyParams, rng: &mut impl Rng) -> f64 {
    let v = p.vocab.size as u32;
    let mut prompt = vec![p.vocab.bos];
    let n = rng.gen_range(0..4);
    prompt.extend((0..n).map(|_| rng.gen_range(0..v)));
    let n = rng.gen_range(1..5);
    let response: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let g = grad_logprob(p, &prompt, &response).unwrap();
    let num = fd_gradient(&p.theta, |t| logprob_response(&p.with_theta(t.to_vec()), &prompt, &response).unwrap().total);
    rel_err(g.as_slice(), &num)
}

fn criterion_2() -> Verdict {
    let mut rng = rng_from_seed(20);
    let (mut tab, mut tf, mut kl): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for case in 0..20u64 {
        let p = init_policy(Vocab::standard(5 + case as usize % 2).unwrap(), Shape::Tabular { window: 1 + case as usize % 2 }, case).unwrap();
        let p = p.with_theta(p.theta.iter().map(|x| x + rng.gen_range(-1.0..1.0)).collect());
        tab = tab.max(logprob_check(&p, &mut rng));

        let shape = TransformerShape { d_model: 8, n_layers: 1 + case as usize % 2, n_heads: 2, ctx_len: 10, mlp_hidden: 16 };
        let p = init_policy(Vocab::standard(8).unwrap(), Shape::Transformer(shape), case).unwrap();
        let p = p.with_theta(p.theta.iter().map(|x| x + 0.1 * rng.gen_range(-0.5..0.5)).collect());
        tf = tf.max(logprob_check(&p, &mut rng));

        let fx = EstimatorFixture::random(100 + case, 5, 1, 1 + case as usize % 3, 1.5).unwrap();
        let g = sequence_kl_grad_exact(&fx.student, &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len).unwrap();
        let num = fd_gradient(&fx.student.theta, |t| {
            sequence_kl_exact(&fx.student.with_theta(t.to_vec()), &fx.teacher, &fx.student_prompt, &fx.teacher_prompt, fx.max_len).unwrap()
        });
        kl = kl.max(rel_err(g.as_slice(), &num));
    }
    let worst = tab.max(tf).max(kl);
    verdict("2", worst < 1e-4, true, format!("worst relative error: tabular {tab:.1e}, transformer {tf:.1e}, sequence KL {kl:.1e} (20 cases each)"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Verdict {
    let theta: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let student = init_policy(Vocab::standard(5).unwrap(), Shape::Tabular { window: 1 }, 0).unwrap();
    let zero = student.with_theta(vec![0.0; student.n_params()]);
    let theta = theta.iter().cycle().take(zero.n_params()).copied().collect::<Vec<_>>();
    let mut worst: f64 = 0.0;
    for alpha in [0.01, 0.02, 0.05] {
        let mut t = TeacherState::new(TeacherMode::Ema, alpha, &zero).unwrap();
        for _ in 0..100 {
            t = ema_update(&t, &theta, alpha).unwrap();
        }
        let scale = 1.0 - (1.0 - alpha).powi(100);
        let phi = t.phi.unwrap();
        worst = worst.max(phi.iter().zip(&theta).map(|(p, th)| (p - scale * th).abs()).fold(0.0, f64::max));
    }
    verdict("3", worst < 1e-10, true, format!("max |φ - (1-(1-α)^100)θ| = {worst:.1e} for α in {{0.01, 0.02, 0.05}}"))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let p211 = pass_at_k(2, 1, 1).unwrap();
    let monotone = (1..=10).all(|c| (1..10).all(|k| pass_at_k(10, c, k).unwrap() <= pass_at_k(10, c, k + 1).unwrap()));
    let n0 = normalized_score(0.3, 0.3, 0.9).unwrap();
    let n1 = normalized_score(0.9, 0.3, 0.9).unwrap();
    let d = |p: [f64; 2]| StepDistribution::from_logits(&p.map(f64::ln));
    let kl = stepwise_kl(&d([0.5, 0.5]), &d([0.75, 0.25])).unwrap();
    let pass = p211 == 0.5 && monotone && n0 == 0.0 && n1 == 1.0 && (kl - 0.143841).abs() < 1e-6;
    verdict("8", pass, true, format!("pass@1(2,1) = {p211}, monotone in k = {monotone}, normalized endpoints {n0}/{n1}, stepwise KL {kl:.6}"))
}

// ---------------------------------------------------------------- binary helpers

fn sdft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdft")).args(args).output().expect("binary runs")
}

fn run_dir(o: &Output) -> PathBuf {
    let s = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(s.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap_or_else(|| panic!("no run directory: {s}")))
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap()
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(out: &Path) -> (Verdict, PathBuf) {
    let t0 = Instant::now();
    let o = sdft(&["pretrain", "--out", out.to_str().unwrap()]);
    let secs = t0.elapsed().as_secs_f64();
    let dir = run_dir(&o);
    let gate = read(dir.join("gate.csv"));
    let row: Vec<f64> = gate.lines().nth(1).unwrap().split(',').take(3).map(|v| v.parse().unwrap()).collect();
    let pass = o.status.code() == Some(0) && row[0] >= 0.90 && row[1] <= row[2] + 0.05 && secs <= 900.0;
    let v = verdict(
        "4",
        pass,
        true,
        format!("conditioned {:.3}, unconditioned {:.3} (chance {:.3}), pretrain {secs:.0}s, exit {:?}", row[0], row[1], row[2], o.status.code()),
    );
    (v, dir.join("base.ckpt"))
}

// ---------------------------------------------------------------- criteria 5-7

struct Final {
    accuracy: f64,
    kl: f64,
    loss: f64,
}

fn single_task(base: &PolicyParams, method: Method, seed: u64, mode: TeacherMode) -> Final {
    let task = fixture::new_task(seed, "task", None).unwrap();
    let probes = fixture::probes(seed, 8).unwrap();
    let plan = fixture::eval_plan(base, &probes, &task.test, Exec::Parallel);
    let cfg = TrainConfig { teacher_mode: mode, ..fixture::train_config(seed) };
    let out: TrainOutput = run_method(method, &task.train, base, &cfg, &plan).unwrap();
    let last = out.records.last().unwrap();
    Final { accuracy: last.accuracy, kl: last.kl_to_base, loss: last.loss }
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn criterion_5(base: &PolicyParams) -> (Vec<Verdict>, Vec<Final>) {
    let t0 = Instant::now();
    let runs = |m: Method| SEEDS.iter().map(|&s| single_task(base, m, s, TeacherMode::Ema)).collect::<Vec<_>>();
    let (sdft, sft, off) = (runs(Method::Sdft), runs(Method::Sft), runs(Method::OfflineDistill));
    let secs = t0.elapsed().as_secs_f64();
    let acc = |r: &[Final]| r.iter().map(|f| f.accuracy).collect::<Vec<_>>();
    let kl = |r: &[Final]| r.iter().map(|f| f.kl).collect::<Vec<_>>();
    let reach = |r: &[Final]| r.iter().all(|f| f.accuracy >= 0.90);
    let a = verdict(
        "5a",
        reach(&sdft) && reach(&sft) && secs <= 1800.0,
        false,
        format!("final accuracy sdft [{}] sft [{}], {secs:.0}s", fmt_list(&acc(&sdft)), fmt_list(&acc(&sft))),
    );
    let (ks, kf) = (median(&kl(&sdft)), median(&kl(&sft)));
    let b = verdict("5b", ks < kf, false, format!("median kl_to_base sdft {ks:.4} vs sft {kf:.4}"));
    let (m_sft, m_off, m_sdft) = (median(&acc(&sft)), median(&acc(&off)), median(&acc(&sdft)));
    let c = verdict(
        "5c",
        m_sft < m_off && m_off < m_sdft,
        false,
        format!("median accuracy sft {m_sft:.3} < offline-distill {m_off:.3} < sdft {m_sdft:.3}"),
    );
    (vec![a, b, c], sdft)
}

fn criterion_6(base: &PolicyParams) -> Verdict {
    let probes = fixture::probes(0, 8).unwrap();
    let mut f = Vec::new();
    for method in [Method::Sdft, Method::Sft] {
        let mut per_seed = Vec::new();
        for seed in [1u64, 2, 3] {
            let plan = SequentialPlan { method, tasks: fixture::sequential_tasks(seed, 3).unwrap() };
            let out = run_sequential(&plan, base, &probes, fixture::PROBE_LEN, fixture::KL_MODE, derive_seed(seed, &[0xe7a1]), Exec::Parallel).unwrap();
            per_seed.push(forgetting_matrix(&out.matrix));
        }
        f.push(per_seed);
    }
    let sdft_ok = f[0].iter().all(|s| s.iter().all(|&x| x <= 0.05));
    let sft_ok = f[1].iter().all(|s| s[0] >= 0.20);
    let show = |v: &[Vec<f64>]| v.iter().map(|s| format!("[{}]", fmt_list(s))).collect::<Vec<_>>().join(" ");
    verdict("6", sdft_ok && sft_ok, false, format!("forgetting per seed: sdft {} sft {}", show(&f[0]), show(&f[1])))
}

fn criterion_7(base: &PolicyParams, ema: &[Final]) -> Verdict {
    let runs = |mode| SEEDS.iter().map(|&s| single_task(base, Method::Sdft, s, mode)).collect::<Vec<_>>();
    let (frozen, current) = (runs(TeacherMode::FrozenBase), runs(TeacherMode::CurrentStudent));
    let acc = |r: &[Final]| median(&r.iter().map(|f| f.accuracy).collect::<Vec<_>>());
    let var = |r: &[Final]| sample_variance(&r.iter().map(|f| f.loss).collect::<Vec<_>>());
    let (a_frozen, a_ema) = (acc(&frozen), acc(ema));
    let (v_cur, v_ema) = (var(&current), var(ema));
    verdict(
        "7",
        a_frozen < a_ema && v_cur > v_ema,
        false,
        format!(
            "median accuracy frozen-base {a_frozen:.3} vs ema {a_ema:.3}; final-loss variance current-student {v_cur:.4} vs ema {v_ema:.4}; current-student accuracy [{}]",
            fmt_list(&current.iter().map(|f| f.accuracy).collect::<Vec<_>>())
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

const SMALL: &str = r#"
[corpus]
tasks = 200
per_task = 4
[pretrain]
steps = 40
[gate]
tasks = 4
per_task = 5
[train]
epochs = 2
[sequential]
tasks = 2
[eval]
pass_samples = 8
pass_k = [1, 8]
[ablate]
samples = 20000
"#;

fn criterion_9(tmp: &Path, base: &Path) -> Verdict {
    let cfg = tmp.join("small.toml");
    std::fs::write(&cfg, format!("base = {:?}\n{SMALL}", base.to_str().unwrap())).unwrap();
    let c = cfg.to_str().unwrap();
    let cases: [(&str, &[&str], &[&str]); 5] = [
        ("pretrain", &[], &["pretrain_loss.csv", "gate.csv"]),
        ("train", &["--method", "sdft"], &["metrics.csv"]),
        ("eval", &[], &["eval.csv"]),
        ("ablate-estimators", &[], &["estimators.csv"]),
        ("sequential", &["--method", "sft"], &["matrix.csv", "forgetting.csv", "plot_data.csv"]),
    ];
    let mut failures = Vec::new();
    for (cmd, extra, files) in cases {
        let mut outputs = Vec::new();
        for (k, threads) in ["1", "1", "4"].iter().enumerate() {
            let out = tmp.join(format!("r9-{k}"));
            let mut args = vec![cmd, "--config", c, "--seed", "7", "--threads", threads, "--out", out.to_str().unwrap()];
            args.extend_from_slice(extra);
            let o = sdft(&args);
            let dir = run_dir(&o);
            outputs.push(files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect::<Vec<_>>());
        }
        if outputs[0] != outputs[1] {
            failures.push(format!("{cmd}: rerun differs"));
        }
        if outputs[0] != outputs[2] {
            failures.push(format!("{cmd}: --threads 4 differs from --threads 1"));
        }
    }
    let pass = failures.is_empty();
    verdict("9", pass, true, if pass { "all five commands byte-identical across reruns and thread counts".into() } else { failures.join("; ") })
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3()];
    let (v4, base_path) = criterion_4(tmp.path());
    verdicts.push(v4);
    let base = load_checkpoint(&base_path).unwrap();
    let (v5, ema) = criterion_5(&base);
    verdicts.extend(v5);
    verdicts.push(criterion_6(&base));
    verdicts.push(criterion_7(&base, &ema));
    verdicts.push(criterion_8());
    verdicts.push(criterion_9(tmp.path(), &base_path));

    println!();
    for v in &verdicts {
        println!("criterion {:<3} {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let hard: Vec<&str> = verdicts.iter().filter(|v| v.asserted && !v.pass).map(|v| v.id).collect();
    if !hard.is_empty() {
        eprintln!("asserted criteria failed: {hard:?}");
        std::process::exit(1);
    }
}
