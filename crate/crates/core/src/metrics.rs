//! Evaluation: exact match, pass@k, KL to the base policy, score
//! normalization and forgetting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{kl_from_logs, sequence_kl_exact_with_budget};
use crate::exec::{map_indexed, map_slice, Exec};
use crate::policy::{
    greedy_decode, logprob_response, response_log_dists, sample_response, PolicyParams, TokenSeq,
    DEFAULT_ENUMERATION_BUDGET,
};
use crate::rng::stream_rng;
use crate::tasks::TaskInstance;

/// Fraction of instances whose greedy decode from the student prompt is
/// exactly `answer ⧺ [eos]`.
pub fn exact_match_accuracy(policy: &PolicyParams, instances: &[TaskInstance], exec: Exec) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Input("accuracy needs at least one instance".into()));
    }
    let hits = map_slice(instances, exec, |_, inst| -> Result<bool> {
        let target = inst.target(&policy.vocab);
        Ok(greedy_decode(policy, &inst.student_prompt(&policy.vocab)?, target.len())? == target)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / instances.len() as f64)
}

/// Unbiased pass@k, `1 − C(n−c, k) / C(n, k)`, evaluated in log space.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Input(format!("pass@k needs 0 ≤ c ≤ n and 1 ≤ k ≤ n, got n={n} c={c} k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n−c, k) / C(n, k) = Π_{i=0}^{k−1} (n−c−i) / (n−i)
    let log_ratio: f64 = (0..k).map(|i| ((n - c - i) as f64).ln() - ((n - i) as f64).ln()).sum();
    Ok(-log_ratio.exp_m1())
}

/// Mean pass@k over instances from `n_samples` temperature-1 samples each.
pub fn pass_at_k_eval(
    policy: &PolicyParams,
    instances: &[TaskInstance],
    n_samples: usize,
    ks: &[usize],
    seed: u64,
    exec: Exec,
) -> Result<Vec<(usize, f64)>> {
    if instances.is_empty() {
        return Err(Error::Input("pass@k needs at least one instance".into()));
    }
    let counts = map_slice(instances, exec, |i, inst| -> Result<usize> {
        let target = inst.target(&policy.vocab);
        let prompt = inst.student_prompt(&policy.vocab)?;
        let mut c = 0;
        for s in 0..n_samples {
            let mut rng = stream_rng(seed, i as u64, s as u64);
            c += (sample_response(policy, &prompt, target.len(), 1.0, &mut rng)?.response == target) as usize;
        }
        Ok(c)
    });
    let counts: Vec<usize> = counts.into_iter().collect::<Result<_>>()?;
    ks.iter()
        .map(|&k| {
            let total: f64 = counts.iter().map(|&c| pass_at_k(n_samples, c, k)).sum::<Result<f64>>()?;
            Ok((k, total / counts.len() as f64))
        })
        .collect()
}

/// How sequence KL to the base is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// full enumeration
    Exact,
    /// mean of `log π(y) − log π_base(y)` over `n` samples per probe
    Mc(usize),
    /// mean of `Σ_t KL(π_t ‖ π_base,t)` along `n` samples per probe; same
    /// expectation as `Mc`, never negative
    McStepwise(usize),
}

/// Mean over probes of `KL(π(·|probe) ‖ π_base(·|probe))` on responses of
/// length at most `max_len`.
pub fn kl_to_base(
    policy: &PolicyParams,
    base: &PolicyParams,
    probes: &[TokenSeq],
    max_len: usize,
    mode: KlMode,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Input("kl_to_base needs at least one probe".into()));
    }
    let per_probe = match mode {
        KlMode::Exact => map_slice(probes, exec, |_, p| {
            sequence_kl_exact_with_budget(policy, base, p, p, max_len, DEFAULT_ENUMERATION_BUDGET)
        }),
        KlMode::Mc(n) | KlMode::McStepwise(n) => {
            if n == 0 {
                return Err(Error::Input("Monte Carlo KL needs n ≥ 1".into()));
            }
            let stepwise = matches!(mode, KlMode::McStepwise(_));
            map_indexed(probes.len() * n, exec, |j| -> Result<f64> {
                let (i, s) = (j / n, j % n);
                let prompt = &probes[i];
                let mut rng = stream_rng(seed, i as u64, s as u64);
                let tr = sample_response(policy, prompt, max_len, 1.0, &mut rng)?;
                if stepwise {
                    let a = response_log_dists(policy, prompt, &tr.response)?;
                    let b = response_log_dists(base, prompt, &tr.response)?;
                    Ok(a.iter().zip(&b).map(|(x, y)| kl_from_logs(x, y)).sum())
                } else {
                    let lb = logprob_response(base, prompt, &tr.response)?.total;
                    Ok(tr.student_logprobs.iter().sum::<f64>() - lb)
                }
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?
            .chunks(n)
            .map(|c| Ok(c.iter().sum::<f64>() / n as f64))
            .collect()
        }
    };
    let total: f64 = per_probe.into_iter().sum::<Result<f64>>()?;
    Ok((total / probes.len() as f64).max(0.0))
}

/// `(acc − base) / (max − base)`.
pub fn normalized_score(acc: f64, base_acc: f64, max_acc: f64) -> Result<f64> {
    if !(max_acc > base_acc) {
        return Err(Error::Input(format!("normalization needs max_acc > base_acc, got {max_acc} ≤ {base_acc}")));
    }
    Ok((acc - base_acc) / (max_acc - base_acc))
}

/// Accuracy on every task at every evaluation point of a sequential run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: Vec<String>,
    pub rows: Vec<CadenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadenceRow {
    /// global optimizer step
    pub step: usize,
    /// index of the task being trained, `None` before training starts
    pub phase: Option<usize>,
    pub accuracy: Vec<f64>,
    pub kl_to_base: f64,
}

impl AccuracyMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.tasks.len())
    }
}

/// Per task: peak accuracy from the start of its training phase onwards,
/// minus its final accuracy.
pub fn forgetting_matrix(m: &AccuracyMatrix) -> Vec<f64> {
    let Some(last) = m.rows.last() else {
        return vec![0.0; m.tasks.len()];
    };
    (0..m.tasks.len())
        .map(|j| {
            let peak = m
                .rows
                .iter()
                .filter(|r| r.phase.is_some_and(|p| p >= j))
                .map(|r| r.accuracy[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if peak.is_finite() {
                (peak - last.accuracy[j]).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n: usize,
    pub accuracy: f64,
    pub pass_at_k: Vec<(usize, f64)>,
    pub kl_to_base: f64,
}

impl EvalReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["task".to_string(), "n".into(), "accuracy".into()];
        h.extend(self.pass_at_k.iter().map(|(k, _)| format!("pass@{k}")));
        h.push("kl_to_base".into());
        h
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let mut r = vec![self.task_id.clone(), self.n.to_string(), fmt_f(self.accuracy)];
        r.extend(self.pass_at_k.iter().map(|(_, v)| fmt_f(*v)));
        r.push(fmt_f(self.kl_to_base));
        r
    }
}

/// Long-format plot row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

pub fn plot_rows(m: &AccuracyMatrix) -> Vec<PlotRow> {
    let mut out = Vec::new();
    for r in &m.rows {
        for (j, t) in m.tasks.iter().enumerate() {
            out.push(PlotRow { step: r.step, task: t.clone(), metric: "accuracy".into(), value: r.accuracy[j] });
        }
        out.push(PlotRow { step: r.step, task: "*".into(), metric: "kl_to_base".into(), value: r.kl_to_base });
    }
    out
}

/// Fixed-precision float formatting used by every CSV writer.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.10}")
}

/// Mean and half-width of a Student-t 95% interval.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Input("a confidence interval needs at least two values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Internal(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::stepwise_kl;
    use crate::policy::{init_policy, step_distribution, Shape, Vocab};
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pass_at_k_values() {
        assert_eq!(pass_at_k(2, 1, 1).unwrap(), 0.5);
        assert_eq!(pass_at_k(10, 10, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(10, 0, 3).unwrap(), 0.0);
        assert!((pass_at_k(10, 3, 1).unwrap() - 0.3).abs() < 1e-15);
        // 1 − C(2,2)/C(4,2) = 5/6
        assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 4, 1).is_err());
        // large n stays finite
        let v = pass_at_k(100_000, 3, 50_000).unwrap();
        assert!(v > 0.8 && v < 1.0);
    }

    proptest! {
        #[test]
        fn pass_at_k_is_monotone(n in 1usize..60, c in 0usize..60, k in 1usize..60) {
            prop_assume!(c <= n && k <= n);
            let v = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if k < n {
                prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v - 1e-12);
            }
            if c < n {
                prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v - 1e-12);
            }
            prop_assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-12);
            prop_assert_eq!(pass_at_k(n, c, n).unwrap(), if c > 0 { 1.0 } else { 0.0 });
        }

        #[test]
        fn normalized_score_is_affine_invariant(acc in 0.0f64..1.0, b in 0.0f64..0.5, m in 0.5f64..1.0, s in 0.1f64..5.0, o in -3.0f64..3.0) {
            let x = normalized_score(acc, b, m).unwrap();
            let y = normalized_score(s * acc + o, s * b + o, s * m + o).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_score_values() {
        assert_eq!(normalized_score(0.2, 0.2, 0.8).unwrap(), 0.0);
        assert_eq!(normalized_score(0.8, 0.2, 0.8).unwrap(), 1.0);
        assert!((normalized_score(0.5, 0.2, 0.8).unwrap() - 0.5).abs() < 1e-15);
        assert!(normalized_score(0.5, 0.5, 0.5).is_err());
    }

    fn matrix(cols: Vec<Vec<f64>>, phases: Vec<Option<usize>>) -> AccuracyMatrix {
        let n_rows = cols[0].len();
        AccuracyMatrix {
            tasks: (0..cols.len()).map(|j| format!("t{j}")).collect(),
            rows: (0..n_rows)
                .map(|i| CadenceRow {
                    step: i,
                    phase: phases[i],
                    accuracy: cols.iter().map(|c| c[i]).collect(),
                    kl_to_base: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn forgetting_scores() {
        let m = matrix(vec![vec![0.1, 0.5, 0.9, 0.6], vec![0.0, 0.1, 0.2, 0.4]], vec![None, Some(0), Some(0), Some(1)]);
        let f = forgetting_matrix(&m);
        assert!((f[0] - 0.3).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        let single = matrix(vec![vec![0.7], vec![0.2]], vec![Some(0)]);
        assert_eq!(forgetting_matrix(&single), vec![0.0, 0.0]);
        // accuracy before the task's own phase does not count as a peak
        let early = matrix(vec![vec![0.0, 0.0], vec![0.9, 0.3]], vec![Some(0), Some(1)]);
        assert_eq!(forgetting_matrix(&early)[1], 0.0);
    }

    #[test]
    fn exact_kl_to_self_is_zero_and_one_step_reduces() {
        let v = Vocab::standard(5).unwrap();
        let mut rng = rng_from_seed(0);
        let mut a = init_policy(v, Shape::Tabular { window: 1 }, 0).unwrap();
        a.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
        let mut b = a.clone();
        b.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
        let probes = vec![vec![1u32, 4]];
        assert_eq!(kl_to_base(&a, &a, &probes, 3, KlMode::Exact, 0, Exec::Sequential).unwrap(), 0.0);
        let k1 = kl_to_base(&a, &b, &probes, 1, KlMode::Exact, 0, Exec::Sequential).unwrap();
        let want = stepwise_kl(&step_distribution(&a, &probes[0]).unwrap(), &step_distribution(&b, &probes[0]).unwrap()).unwrap();
        assert!((k1 - want).abs() < 1e-12);
    }

    #[test]
    fn mc_kl_is_within_three_standard_errors() {
        let v = Vocab::standard(5).unwrap();
        let mut rng = rng_from_seed(1);
        let mut a = init_policy(v, Shape::Tabular { window: 1 }, 0).unwrap();
        a.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
        let mut b = a.clone();
        b.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.0..1.0));
        let probe = vec![1u32, 4];
        let exact = kl_to_base(&a, &b, &[probe.clone()], 3, KlMode::Exact, 0, Exec::Sequential).unwrap();
        let n = 10_000;
        // standard error from the per-sample log ratios
        let xs: Vec<f64> = (0..n)
            .map(|s| {
                let mut r = stream_rng(99, 0, s);
                let tr = sample_response(&a, &probe, 3, 1.0, &mut r).unwrap();
                tr.student_logprobs.iter().sum::<f64>() - logprob_response(&b, &probe, &tr.response).unwrap().total
            })
            .collect();
        let se = (sample_variance(&xs) / n as f64).sqrt();
        let mc = kl_to_base(&a, &b, &[probe.clone()], 3, KlMode::Mc(n as usize), 99, Exec::Parallel).unwrap();
        assert!((mc - exact).abs() < 3.0 * se, "mc {mc} exact {exact} se {se}");
        let st = kl_to_base(&a, &b, &[probe], 3, KlMode::McStepwise(n as usize), 99, Exec::Parallel).unwrap();
        assert!((st - exact).abs() < 3.0 * se);
    }

    #[test]
    fn t_interval_matches_table() {
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        // t_{0.975, 2} = 4.302653
        assert!((h - 4.302653 * (1.0f64 / 3.0).sqrt()).abs() < 1e-5);
        assert!(mean_ci95(&[1.0]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
