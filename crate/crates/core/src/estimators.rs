//! Reverse-KL gradient estimators and their exact enumeration oracles.
//!
//! Every estimator is expressed as a set of cotangents on the student's
//! per-step logits, which the policy then backpropagates once. With
//! `p_t = π_θ(·|y_<t)`, `q_t = π_teacher(·|y_<t)`, `ℓ_t = log p_t − log q_t`
//! and `k_t = KL(p_t ‖ q_t)`:
//!
//! | id         | cotangent at step t                                  |
//! |------------|------------------------------------------------------|
//! | `token`    | `ℓ_t(y_t) · (e_{y_t} − p_t)`                          |
//! | `analytic` | `p_t ⊙ (ℓ_t − k_t)`  (= ∂k_t/∂logits)                 |
//! | `rb`       | analytic + `(Σ_{s>t} k_s) · (e_{y_t} − p_t)`          |
//! | `irl`      | `(log p(y) − log q(y)) · (e_{y_t} − p_t)`             |
//!
//! All four are descent directions: subtract them from the parameters.
//! The log-ratio multipliers are constants with respect to θ.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::grad::GradientVector;
use crate::policy::{
    enumerate_responses, forward_response, log_softmax, logprob_response, sample_response, score_cotangent,
    Forward, PolicyParams, StepDistribution, TokenId, Trajectory, DEFAULT_ENUMERATION_BUDGET,
};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorId {
    Token,
    Analytic,
    Rb,
    Irl,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 4] = [EstimatorId::Token, EstimatorId::Analytic, EstimatorId::Rb, EstimatorId::Irl];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Token => "token",
            EstimatorId::Analytic => "analytic",
            EstimatorId::Rb => "rb",
            EstimatorId::Irl => "irl",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}` (expected token, analytic, rb or irl)")))
    }
}

/// `Σ_v p(v) (log p(v) − log q(v))` from log-distributions, with `0 · log 0 = 0`.
pub fn kl_from_logs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(a, b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn stepwise_kl(p: &StepDistribution, q: &StepDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!("distribution lengths differ: {} vs {}", p.len(), q.len())));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a.ln() - b.ln()) })
        .sum::<f64>()
        .max(0.0))
}

/// Student forward pass plus per-step student and teacher log-distributions
/// along one response. Everything an estimator needs.
pub struct DistillTerms<'a> {
    fwd: Forward<'a>,
    prompt_len: usize,
    pub response: Vec<TokenId>,
    pub student_logp: Vec<Vec<f64>>,
    pub teacher_logp: Vec<Vec<f64>>,
}

impl<'a> DistillTerms<'a> {
    pub fn new(
        student: &'a PolicyParams,
        teacher: &PolicyParams,
        student_prompt: &[TokenId],
        teacher_prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Self> {
        if student.vocab != teacher.vocab {
            return Err(Error::Input("student and teacher vocabularies differ".into()));
        }
        let fwd = forward_response(student, student_prompt, response)?;
        let student_logp = (0..response.len())
            .map(|t| log_softmax(fwd.logits_after(student_prompt.len() + t)))
            .collect();
        let tfwd = forward_response(teacher, teacher_prompt, response)?;
        let teacher_logp = (0..response.len())
            .map(|t| log_softmax(tfwd.logits_after(teacher_prompt.len() + t)))
            .collect();
        Ok(DistillTerms { fwd, prompt_len: student_prompt.len(), response: response.to_vec(), student_logp, teacher_logp })
    }

    /// Terms against precomputed teacher log-distributions, one per response
    /// position.
    pub fn with_teacher_logp(
        student: &'a PolicyParams,
        student_prompt: &[TokenId],
        response: &[TokenId],
        teacher_logp: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if teacher_logp.len() != response.len() || teacher_logp.iter().any(|r| r.len() != student.vocab.size) {
            return Err(Error::Input("teacher log-distributions do not match the response".into()));
        }
        let fwd = forward_response(student, student_prompt, response)?;
        let student_logp = (0..response.len())
            .map(|t| log_softmax(fwd.logits_after(student_prompt.len() + t)))
            .collect();
        Ok(DistillTerms { fwd, prompt_len: student_prompt.len(), response: response.to_vec(), student_logp, teacher_logp })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// `KL(p_t ‖ q_t)` at every visited prefix.
    pub fn stepwise_kls(&self) -> Vec<f64> {
        self.student_logp.iter().zip(&self.teacher_logp).map(|(a, b)| kl_from_logs(a, b)).collect()
    }

    /// `log p_t(y_t) − log q_t(y_t)` per token.
    pub fn token_log_ratios(&self) -> Vec<f64> {
        self.response
            .iter()
            .enumerate()
            .map(|(t, &y)| self.student_logp[t][y as usize] - self.teacher_logp[t][y as usize])
            .collect()
    }

    /// Per-step logit cotangents of estimator `id`; `weights[t]` scales the
    /// contribution of step `t` (importance weight × mask).
    pub fn cotangents(&self, id: EstimatorId, weights: &[f64]) -> Vec<Vec<f64>> {
        let n = self.len();
        debug_assert_eq!(weights.len(), n);
        let kls = self.stepwise_kls();
        let analytic = |t: usize| -> Vec<f64> {
            let (lp, lq) = (&self.student_logp[t], &self.teacher_logp[t]);
            lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b - kls[t])).collect()
        };
        let score = |t: usize| score_cotangent(&self.student_logp[t], self.response[t]);
        let scaled = |mut v: Vec<f64>, s: f64| {
            v.iter_mut().for_each(|x| *x *= s);
            v
        };
        match id {
            EstimatorId::Token => {
                let ratios = self.token_log_ratios();
                (0..n).map(|t| scaled(score(t), weights[t] * ratios[t])).collect()
            }
            EstimatorId::Analytic => (0..n).map(|t| scaled(analytic(t), weights[t])).collect(),
            EstimatorId::Rb => {
                // future_kl[t] = Σ_{s>t} w_s k_s
                let mut future = vec![0.0; n];
                for t in (0..n.saturating_sub(1)).rev() {
                    future[t] = future[t + 1] + weights[t + 1] * kls[t + 1];
                }
                (0..n)
                    .map(|t| {
                        let mut c = scaled(analytic(t), weights[t]);
                        if future[t] != 0.0 {
                            for (a, b) in c.iter_mut().zip(score(t)) {
                                *a += future[t] * b;
                            }
                        }
                        c
                    })
                    .collect()
            }
            EstimatorId::Irl => {
                let seq_ratio: f64 = self.token_log_ratios().iter().sum();
                (0..n).map(|t| scaled(score(t), weights[t] * seq_ratio)).collect()
            }
        }
    }

    pub fn gradient(&self, id: EstimatorId, weights: &[f64]) -> GradientVector {
        self.fwd.backward(self.prompt_len, &self.cotangents(id, weights))
    }

    /// Backpropagates arbitrary per-step cotangents through the student.
    pub fn backward(&self, cotangents: &[Vec<f64>]) -> GradientVector {
        self.fwd.backward(self.prompt_len, cotangents)
    }
}

/// Single-trajectory estimate of `∇_θ KL(π_θ(·|x) ‖ π_teacher(·|x, c))`
/// (descent convention, unit weights).
pub fn estimate(
    id: EstimatorId,
    traj: &Trajectory,
    student: &PolicyParams,
    teacher: &PolicyParams,
    teacher_prompt: &[TokenId],
) -> Result<GradientVector> {
    let terms = DistillTerms::new(student, teacher, &traj.prompt, teacher_prompt, &traj.response)?;
    Ok(terms.gradient(id, &vec![1.0; traj.len()]))
}

pub fn grad_token(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    estimate(EstimatorId::Token, traj, student, teacher, teacher_prompt)
}

pub fn grad_analytic(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    estimate(EstimatorId::Analytic, traj, student, teacher, teacher_prompt)
}

pub fn grad_rb(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    estimate(EstimatorId::Rb, traj, student, teacher, teacher_prompt)
}

/// REINFORCE with the implicit reward, negated so that subtracting it ascends
/// the reward.
pub fn grad_irl_trajectory(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    estimate(EstimatorId::Irl, traj, student, teacher, teacher_prompt)
}

/// The reward-ascent policy gradient `r(y) · ∇_θ log π_θ(y)` with the implicit
/// reward `r = log π_teacher(y) − log π_θ(y)`; the negation of
/// [`grad_irl_trajectory`].
pub fn policy_gradient_irl(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    let mut g = grad_irl_trajectory(traj, student, teacher, teacher_prompt)?;
    g.scale(-1.0);
    Ok(g)
}

/// Rao-Blackwell correction `Σ_t k_t Σ_{i<t} ∇ log p_i(y_i)`, i.e. `rb − analytic`.
pub fn rb_correction(traj: &Trajectory, student: &PolicyParams, teacher: &PolicyParams, teacher_prompt: &[TokenId]) -> Result<GradientVector> {
    let terms = DistillTerms::new(student, teacher, &traj.prompt, teacher_prompt, &traj.response)?;
    let kls = terms.stepwise_kls();
    let n = terms.len();
    let mut cots = Vec::with_capacity(n);
    for i in 0..n {
        let future: f64 = kls[i + 1..].iter().sum();
        let mut c = score_cotangent(&terms.student_logp[i], terms.response[i]);
        c.iter_mut().for_each(|x| *x *= future);
        cots.push(c);
    }
    Ok(terms.backward(&cots))
}

/// Implicit reward of a trajectory under a snapshot of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitReward {
    pub total: f64,
    pub per_token: Vec<f64>,
}

pub fn implicit_reward(
    traj: &Trajectory,
    snapshot: &PolicyParams,
    teacher: &PolicyParams,
    teacher_prompt: &[TokenId],
) -> Result<ImplicitReward> {
    let s = logprob_response(snapshot, &traj.prompt, &traj.response)?;
    let t = logprob_response(teacher, teacher_prompt, &traj.response)?;
    let per_token: Vec<f64> = t.per_token.iter().zip(&s.per_token).map(|(a, b)| a - b).collect();
    Ok(ImplicitReward { total: per_token.iter().sum(), per_token })
}

/// Trajectory with temperature-1 log-probabilities, as if sampled on-policy.
pub fn on_policy_trajectory(student: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Trajectory> {
    let lp = logprob_response(student, prompt, response)?;
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        response: response.to_vec(),
        student_logprobs: lp.per_token.clone(),
        sampler_logprobs: lp.per_token,
        temperature: 1.0,
    })
}

/// `Σ_y π_θ(y|x) log(π_θ(y|x) / π_teacher(y|x, c))` by enumeration.
pub fn sequence_kl_exact(
    student: &PolicyParams,
    teacher: &PolicyParams,
    student_prompt: &[TokenId],
    teacher_prompt: &[TokenId],
    max_len: usize,
) -> Result<f64> {
    sequence_kl_exact_with_budget(student, teacher, student_prompt, teacher_prompt, max_len, DEFAULT_ENUMERATION_BUDGET)
}

pub fn sequence_kl_exact_with_budget(
    student: &PolicyParams,
    teacher: &PolicyParams,
    student_prompt: &[TokenId],
    teacher_prompt: &[TokenId],
    max_len: usize,
    budget: u128,
) -> Result<f64> {
    let mut kl = 0.0;
    for y in enumerate_responses(&student.vocab, max_len, budget)? {
        let lp = logprob_response(student, student_prompt, &y)?.total;
        let lq = logprob_response(teacher, teacher_prompt, &y)?.total;
        kl += lp.exp() * (lp - lq);
    }
    Ok(kl.max(0.0))
}

/// Exact `∇_θ` of [`sequence_kl_exact`] with the teacher held fixed:
/// `Σ_y π_θ(y) (log π_θ(y) − log π_teacher(y)) ∇_θ log π_θ(y)`.
pub fn sequence_kl_grad_exact(
    student: &PolicyParams,
    teacher: &PolicyParams,
    student_prompt: &[TokenId],
    teacher_prompt: &[TokenId],
    max_len: usize,
) -> Result<GradientVector> {
    let mut acc = GradientVector::zeros(student.n_params());
    for y in enumerate_responses(&student.vocab, max_len, DEFAULT_ENUMERATION_BUDGET)? {
        let terms = DistillTerms::new(student, teacher, student_prompt, teacher_prompt, &y)?;
        let lp: f64 = y.iter().enumerate().map(|(t, &v)| terms.student_logp[t][v as usize]).sum();
        let lq: f64 = y.iter().enumerate().map(|(t, &v)| terms.teacher_logp[t][v as usize]).sum();
        let cots: Vec<Vec<f64>> =
            (0..y.len()).map(|t| score_cotangent(&terms.student_logp[t], y[t])).collect();
        acc.add_scaled(&terms.backward(&cots), lp.exp() * (lp - lq));
    }
    Ok(acc)
}

/// Exact expectation of a single-trajectory estimator over on-policy samples
/// at temperature 1.
pub fn expected_estimate_exact(
    id: EstimatorId,
    student: &PolicyParams,
    teacher: &PolicyParams,
    student_prompt: &[TokenId],
    teacher_prompt: &[TokenId],
    max_len: usize,
) -> Result<GradientVector> {
    let mut acc = GradientVector::zeros(student.n_params());
    for y in enumerate_responses(&student.vocab, max_len, DEFAULT_ENUMERATION_BUDGET)? {
        let traj = on_policy_trajectory(student, student_prompt, &y)?;
        let w: f64 = traj.student_logprobs.iter().sum::<f64>().exp();
        acc.add_scaled(&estimate(id, &traj, student, teacher, teacher_prompt)?, w);
    }
    Ok(acc)
}

/// Empirical mean and covariance trace of an estimator over independent
/// single-trajectory samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorId,
    pub mean: GradientVector,
    /// per-coordinate unbiased sample variance
    pub variance: Vec<f64>,
    pub variance_trace: f64,
    pub n_samples: usize,
}

impl EstimatorStats {
    /// Standard error of the mean, per coordinate.
    pub fn std_errors(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.n_samples as f64).sqrt()).collect()
    }

    /// Largest componentwise |mean − oracle|.
    pub fn max_bias(&self, oracle: &GradientVector) -> f64 {
        self.mean.max_abs_diff(oracle)
    }

    /// Largest componentwise |mean − oracle| in units of its standard error.
    pub fn max_bias_z(&self, oracle: &GradientVector) -> f64 {
        self.mean
            .0
            .iter()
            .zip(&oracle.0)
            .zip(self.std_errors())
            .map(|((m, o), se)| {
                let d = (m - o).abs();
                if se > 0.0 {
                    d / se
                } else if d < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Which pair of policies and prompts an estimator is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct DistillFixture<'a> {
    pub student: &'a PolicyParams,
    pub teacher: &'a PolicyParams,
    pub student_prompt: &'a [TokenId],
    pub teacher_prompt: &'a [TokenId],
    pub max_len: usize,
}

const STATS_CHUNK: usize = 4096;

/// Draws `n_samples` on-policy trajectories (sample `i` uses stream `i` of
/// `seed`) and accumulates the estimator's mean and variance in sample order,
/// so the result does not depend on `exec`.
pub fn estimator_stats(
    id: EstimatorId,
    fx: DistillFixture<'_>,
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<EstimatorStats> {
    if n_samples < 2 {
        return Err(Error::Input("estimator_stats needs at least 2 samples".into()));
    }
    let dim = fx.student.n_params();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut count = 0usize;
    let mut start = 0;
    while start < n_samples {
        let len = STATS_CHUNK.min(n_samples - start);
        let grads: Vec<Result<GradientVector>> = map_indexed(len, exec, |j| {
            let mut rng = stream_rng(seed, 0, (start + j) as u64);
            let traj = sample_response(fx.student, fx.student_prompt, fx.max_len, 1.0, &mut rng)?;
            estimate(id, &traj, fx.student, fx.teacher, fx.teacher_prompt)
        });
        for g in grads {
            let g = g?;
            count += 1;
            for k in 0..dim {
                let delta = g.0[k] - mean[k];
                mean[k] += delta / count as f64;
                m2[k] += delta * (g.0[k] - mean[k]);
            }
        }
        start += len;
    }
    let variance: Vec<f64> = m2.iter().map(|s| s / (count - 1) as f64).collect();
    let variance_trace = variance.iter().sum();
    Ok(EstimatorStats { estimator: id, mean: GradientVector(mean), variance, variance_trace, n_samples: count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, step_distribution, Shape, Vocab};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn dist(p: &[f64]) -> StepDistribution {
        StepDistribution::from_logits(&p.iter().map(|x| x.ln()).collect::<Vec<_>>())
    }

    fn fixture(seed: u64, v: usize) -> (PolicyParams, PolicyParams) {
        let vocab = Vocab::standard(v).unwrap();
        let mut s = init_policy(vocab, Shape::Tabular { window: 1 }, seed).unwrap();
        let mut t = init_policy(vocab, Shape::Tabular { window: 1 }, seed + 100).unwrap();
        let mut rng = rng_from_seed(seed);
        s.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.5..1.5));
        t.theta.iter_mut().for_each(|x| *x += rng.gen_range(-1.5..1.5));
        (s, t)
    }

    #[test]
    fn stepwise_kl_closed_form() {
        let k = stepwise_kl(&dist(&[0.5, 0.5]), &dist(&[0.75, 0.25])).unwrap();
        let want = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((k - want).abs() < 1e-12);
        assert!((k - 0.143841).abs() < 1e-6);
        assert_eq!(stepwise_kl(&dist(&[0.2, 0.8]), &dist(&[0.2, 0.8])).unwrap(), 0.0);
        assert!(stepwise_kl(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn stepwise_kl_gibbs_inequality() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (p, q) = (StepDistribution::from_logits(&a), StepDistribution::from_logits(&b));
            assert!(stepwise_kl(&p, &q).unwrap() > 0.0);
            assert!(stepwise_kl(&p, &p).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn zero_probability_entries_contribute_nothing() {
        let p = StepDistribution { probs: vec![1.0, 0.0], log_probs: vec![0.0, f64::NEG_INFINITY] };
        let q = dist(&[0.5, 0.5]);
        assert!((stepwise_kl(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn estimator_ids_parse() {
        for id in EstimatorId::ALL {
            assert_eq!(id.as_str().parse::<EstimatorId>().unwrap(), id);
        }
        assert!(matches!("bogus".parse::<EstimatorId>(), Err(Error::Config(_))));
    }

    #[test]
    fn identical_teacher_gives_zero_everything() {
        let (s, _) = fixture(3, 5);
        let prompt = [1u32, 4];
        assert!(sequence_kl_exact(&s, &s, &prompt, &prompt, 3).unwrap().abs() < 1e-12);
        assert!(sequence_kl_grad_exact(&s, &s, &prompt, &prompt, 3).unwrap().max_abs() < 1e-10);
        let mut rng = rng_from_seed(2);
        for _ in 0..20 {
            let tr = sample_response(&s, &prompt, 3, 1.0, &mut rng).unwrap();
            for id in EstimatorId::ALL {
                assert_eq!(estimate(id, &tr, &s, &s, &prompt).unwrap().max_abs(), 0.0, "{id}");
            }
            let r = implicit_reward(&tr, &s, &s, &prompt).unwrap();
            assert_eq!(r.total, 0.0);
            assert!(r.per_token.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn one_step_sequence_kl_is_stepwise_kl() {
        let (s, t) = fixture(4, 5);
        let (sp, tp) = ([1u32, 4], [1u32, 3]);
        let k = sequence_kl_exact(&s, &t, &sp, &tp, 1).unwrap();
        let want = stepwise_kl(&step_distribution(&s, &sp).unwrap(), &step_distribution(&t, &tp).unwrap()).unwrap();
        assert!((k - want).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_of_exact_gradient() {
        let (s, t) = fixture(6, 5);
        let (sp, tp) = ([1u32, 4], [1u32, 3]);
        let g = sequence_kl_grad_exact(&s, &t, &sp, &tp, 3).unwrap();
        let mut t2 = t.clone();
        for (r, row) in t2.theta.chunks_mut(5).enumerate() {
            row.iter_mut().for_each(|x| *x += 0.37 * r as f64 - 1.0);
        }
        let g2 = sequence_kl_grad_exact(&s, &t2, &sp, &tp, 3).unwrap();
        assert!(g.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn single_step_analytic_matches_difference_quotient_on_row() {
        let (s, t) = fixture(8, 5);
        let (sp, tp) = ([1u32, 4], [1u32, 3]);
        let tr = on_policy_trajectory(&s, &sp, &[2]).unwrap();
        let g = grad_analytic(&tr, &s, &t, &tp).unwrap();
        let row = s.tabular_context_row(&sp).unwrap();
        let q = step_distribution(&t, &tp).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let k = |d: f64| {
                let mut s2 = s.clone();
                s2.theta[row * 5 + j] += d;
                stepwise_kl(&step_distribution(&s2, &sp).unwrap(), &q).unwrap()
            };
            let fd = (k(h) - k(-h)) / (2.0 * h);
            assert!((fd - g.0[row * 5 + j]).abs() < 1e-8);
        }
    }

    #[test]
    fn rb_is_analytic_plus_correction_and_equals_analytic_at_one_step() {
        let (s, t) = fixture(9, 5);
        let (sp, tp) = ([1u32, 4], [1u32, 3, 4, 3]);
        let mut rng = rng_from_seed(10);
        for _ in 0..30 {
            let tr = sample_response(&s, &sp, 3, 1.0, &mut rng).unwrap();
            let rb = grad_rb(&tr, &s, &t, &tp).unwrap();
            let mut sum = grad_analytic(&tr, &s, &t, &tp).unwrap();
            sum.add_scaled(&rb_correction(&tr, &s, &t, &tp).unwrap(), 1.0);
            assert!(rb.max_abs_diff(&sum) < 1e-13);
        }
        let tr = sample_response(&s, &sp, 1, 1.0, &mut rng).unwrap();
        assert_eq!(grad_rb(&tr, &s, &t, &tp).unwrap(), grad_analytic(&tr, &s, &t, &tp).unwrap());
    }

    #[test]
    fn reward_decomposes_and_mirrors_kl_ratio() {
        let (s, t) = fixture(11, 5);
        let (sp, tp) = ([1u32, 4], [1u32, 3]);
        let mut rng = rng_from_seed(12);
        for _ in 0..100 {
            let tr = sample_response(&s, &sp, 4, 1.0, &mut rng).unwrap();
            let r = implicit_reward(&tr, &s, &t, &tp).unwrap();
            let lq = logprob_response(&t, &tp, &tr.response).unwrap().total;
            let lp = logprob_response(&s, &sp, &tr.response).unwrap().total;
            assert!((r.per_token.iter().sum::<f64>() - r.total).abs() < 1e-10);
            assert!((r.total - (lq - lp)).abs() < 1e-10);
            // irl multiplies the score by −reward
            let irl = grad_irl_trajectory(&tr, &s, &t, &tp).unwrap();
            let mut score = crate::policy::grad_logprob(&s, &sp, &tr.response).unwrap();
            score.scale(-r.total);
            assert!(irl.max_abs_diff(&score) < 1e-12);
            let mut pg = policy_gradient_irl(&tr, &s, &t, &tp).unwrap();
            pg.add_scaled(&irl, 1.0);
            assert!(pg.max_abs() == 0.0);
        }
    }

    #[test]
    fn hand_built_two_step_reward() {
        let vocab = Vocab::standard(4).unwrap();
        let mut s = init_policy(vocab, Shape::Tabular { window: 1 }, 0).unwrap();
        let mut t = s.clone();
        s.theta.fill(0.0);
        t.theta.fill(0.0);
        // teacher after sep (3): logits (ln 3, 0, 0, 0) -> p(0) = 1/2; after pad (0): p(2) = 1/2
        t.theta[3 * 4] = 3f64.ln();
        t.theta[2] = 3f64.ln();
        let tr = on_policy_trajectory(&s, &[1, 3], &[0, 2]).unwrap();
        let r = implicit_reward(&tr, &s, &t, &[1, 3]).unwrap();
        // teacher: ln(1/2) + ln(1/2); snapshot uniform: 2 ln(1/4)
        assert!((r.total - (2.0 * 0.5f64.ln() - 2.0 * 0.25f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn stats_need_two_samples_and_are_exec_independent() {
        let (s, t) = fixture(13, 5);
        let (sp, tp) = (vec![1u32, 4], vec![1u32, 3]);
        let fx = DistillFixture { student: &s, teacher: &t, student_prompt: &sp, teacher_prompt: &tp, max_len: 3 };
        assert!(estimator_stats(EstimatorId::Rb, fx, 1, 0, Exec::Sequential).is_err());
        let a = estimator_stats(EstimatorId::Rb, fx, 500, 7, Exec::Sequential).unwrap();
        let b = estimator_stats(EstimatorId::Rb, fx, 500, 7, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.variance_trace >= 0.0);
        let same = DistillFixture { teacher: &s, teacher_prompt: &sp, ..fx };
        let z = estimator_stats(EstimatorId::Analytic, same, 100, 7, Exec::Sequential).unwrap();
        assert_eq!(z.variance_trace, 0.0);
        assert_eq!(z.mean.max_abs(), 0.0);
    }
}
