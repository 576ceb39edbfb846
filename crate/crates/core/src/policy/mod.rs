//! Autoregressive categorical policies.
//!
//! Two families share one interface: a tabular softmax model that conditions
//! on the last `window` tokens (small enough to enumerate exactly), and a tiny
//! transformer. Both expose exact next-token distributions, sampling, and
//! exact parameter gradients through [`Forward::backward`].

mod checkpoint;
pub mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use transformer::TransformerShape;

use crate::error::{Error, Result};
use crate::grad::GradientVector;
use crate::rng::rng_from_seed;

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

/// Default cap on the number of sequences an exact oracle may enumerate.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub sep: TokenId,
}

impl Vocab {
    pub fn new(size: usize, bos: TokenId, eos: TokenId, pad: TokenId, sep: TokenId) -> Result<Self> {
        let v = Vocab { size, bos, eos, pad, sep };
        v.validate()?;
        Ok(v)
    }

    /// `pad = 0, bos = 1, eos = 2, sep = 3`; content tokens are `4..size`.
    pub fn standard(size: usize) -> Result<Self> {
        Vocab::new(size, 1, 2, 0, 3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("vocabulary size {} < 4", self.size)));
        }
        let sp = [self.bos, self.eos, self.pad, self.sep];
        for (i, a) in sp.iter().enumerate() {
            if *a as usize >= self.size {
                return Err(Error::Config(format!("special token {a} out of range")));
            }
            if sp[i + 1..].contains(a) {
                return Err(Error::Config(format!("special token {a} used twice")));
            }
        }
        Ok(())
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        t == self.bos || t == self.eos || t == self.pad || t == self.sep
    }

    /// Non-special token ids in increasing order.
    pub fn content_tokens(&self) -> Vec<TokenId> {
        (0..self.size as TokenId).filter(|t| !self.is_special(*t)).collect()
    }

    pub fn check_tokens(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= self.size) {
            Some(t) => Err(Error::Input(format!("token id {t} out of range for vocabulary of size {}", self.size))),
            None => Ok(()),
        }
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Input("empty prefix".into()));
        }
        if prefix[0] != self.bos {
            return Err(Error::Input("prefix must begin with bos".into()));
        }
        self.check_tokens(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Tabular,
    Transformer,
}

/// Per-family layout descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Logit table with one row per left-padded context of the last `window` tokens.
    Tabular { window: usize },
    Transformer(TransformerShape),
}

impl Shape {
    pub fn family(&self) -> Family {
        match self {
            Shape::Tabular { .. } => Family::Tabular,
            Shape::Transformer(_) => Family::Transformer,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        match self {
            Shape::Tabular { window } => {
                if *window == 0 {
                    return Err(Error::Config("tabular window must be ≥ 1".into()));
                }
                let rows = (vocab.size as u128).checked_pow(*window as u32);
                match rows {
                    Some(r) if r * vocab.size as u128 <= 50_000_000 => Ok(()),
                    _ => Err(Error::Config(format!(
                        "tabular table for V={} window={window} is too large",
                        vocab.size
                    ))),
                }
            }
            Shape::Transformer(t) => t.validate(),
        }
    }

    pub fn param_count(&self, vocab: &Vocab) -> usize {
        match self {
            Shape::Tabular { window } => vocab.size.pow(*window as u32) * vocab.size,
            Shape::Transformer(t) => t.param_count(vocab.size),
        }
    }
}

/// Flat parameter vector plus the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab: Vocab,
    pub shape: Shape,
    pub theta: Vec<f64>,
}

/// Normalized next-token distribution, kept in both probability and log space.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl StepDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let log_probs = log_softmax(logits);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        StepDistribution { probs, log_probs }
    }

    pub fn from_logits_with_temperature(logits: &[f64], temperature: f64) -> Self {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        Self::from_logits(&scaled)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
    }

    /// Lowest index among the maxima.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, p) in self.log_probs.iter().enumerate() {
            if *p > self.log_probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Sampled response together with the log-probabilities recorded while sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    /// log π_θ(y_t | y_<t) at temperature 1
    pub student_logprobs: Vec<f64>,
    /// log-probability under the distribution actually sampled from
    pub sampler_logprobs: Vec<f64>,
    pub temperature: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// Result of a forward pass over a whole sequence.
///
/// Holds the logits after every prefix, and whatever the family needs to
/// backpropagate cotangents on those logits into `theta`.
pub struct Forward<'a> {
    params: &'a PolicyParams,
    tokens: TokenSeq,
    inner: ForwardInner,
}

enum ForwardInner {
    /// row index of the context after each prefix length `1..=n`
    Tabular { rows: Vec<usize> },
    Transformer(Box<transformer::Cache>),
}

impl<'a> Forward<'a> {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Logits of the next token after the prefix `tokens[..prefix_len]`.
    pub fn logits_after(&self, prefix_len: usize) -> &[f64] {
        assert!(prefix_len >= 1 && prefix_len <= self.tokens.len(), "prefix length out of range");
        let v = self.params.vocab.size;
        match &self.inner {
            ForwardInner::Tabular { rows } => {
                let r = rows[prefix_len - 1];
                &self.params.theta[r * v..(r + 1) * v]
            }
            ForwardInner::Transformer(c) => &c.logits[(prefix_len - 1) * v..prefix_len * v],
        }
    }

    pub fn dist_after(&self, prefix_len: usize) -> StepDistribution {
        StepDistribution::from_logits(self.logits_after(prefix_len))
    }

    /// Gradient of `Σ_i ⟨cotangents[i], logits_after(start + i)⟩` w.r.t. theta.
    pub fn backward(&self, start: usize, cotangents: &[Vec<f64>]) -> GradientVector {
        let v = self.params.vocab.size;
        assert!(start >= 1 && start + cotangents.len() <= self.tokens.len() + 1);
        match &self.inner {
            ForwardInner::Tabular { rows } => {
                let mut g = vec![0.0; self.params.theta.len()];
                for (i, cot) in cotangents.iter().enumerate() {
                    let r = rows[start + i - 1];
                    for (a, b) in g[r * v..(r + 1) * v].iter_mut().zip(cot) {
                        *a += b;
                    }
                }
                GradientVector(g)
            }
            ForwardInner::Transformer(cache) => {
                let Shape::Transformer(ts) = self.params.shape else { unreachable!() };
                let n = self.tokens.len();
                let mut dl = vec![0.0; n * v];
                for (i, cot) in cotangents.iter().enumerate() {
                    let p = start + i - 1;
                    dl[p * v..(p + 1) * v].copy_from_slice(cot);
                }
                GradientVector(transformer::backward(&ts, v, &self.params.theta, cache, &dl))
            }
        }
    }
}

impl PolicyParams {
    pub fn family(&self) -> Family {
        self.shape.family()
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Longest token sequence the model accepts.
    pub fn max_seq_len(&self) -> usize {
        match self.shape {
            Shape::Tabular { .. } => usize::MAX,
            Shape::Transformer(t) => t.ctx_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.shape.validate(&self.vocab)?;
        let want = self.shape.param_count(&self.vocab);
        if self.theta.len() != want {
            return Err(Error::Config(format!("theta has {} entries, layout needs {want}", self.theta.len())));
        }
        if let Some(i) = self.theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("theta[{i}]")));
        }
        Ok(())
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> PolicyParams {
        PolicyParams { vocab: self.vocab, shape: self.shape, theta }
    }

    fn tabular_row(&self, window: usize, prefix: &[TokenId]) -> usize {
        let v = self.vocab.size;
        let mut row = 0;
        for k in 0..window {
            // context slot k holds the token `window - k` positions back, pad if absent
            let back = window - k;
            let t = if prefix.len() >= back { prefix[prefix.len() - back] } else { self.vocab.pad };
            row = row * v + t as usize;
        }
        row
    }

    /// Row of the tabular logit table used after `prefix`.
    pub fn tabular_context_row(&self, prefix: &[TokenId]) -> Option<usize> {
        match self.shape {
            Shape::Tabular { window } => Some(self.tabular_row(window, prefix)),
            Shape::Transformer(_) => None,
        }
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<Forward<'_>> {
        self.vocab.check_prefix(tokens)?;
        let inner = match self.shape {
            Shape::Tabular { window } => {
                let rows = (1..=tokens.len()).map(|l| self.tabular_row(window, &tokens[..l])).collect();
                ForwardInner::Tabular { rows }
            }
            Shape::Transformer(ts) => {
                ForwardInner::Transformer(Box::new(transformer::forward(&ts, self.vocab.size, &self.theta, tokens)?))
            }
        };
        Ok(Forward { params: self, tokens: tokens.to_vec(), inner })
    }
}

// ---------------------------------------------------------------------------
// operations

pub fn init_policy(vocab: Vocab, shape: Shape, seed: u64) -> Result<PolicyParams> {
    vocab.validate()?;
    shape.validate(&vocab)?;
    let mut rng = rng_from_seed(seed);
    let theta = match shape {
        Shape::Tabular { .. } => {
            let n = shape.param_count(&vocab);
            (0..n).map(|_| rng.gen_range(-0.05..=0.05)).collect()
        }
        Shape::Transformer(ts) => transformer::init_theta(&ts, vocab.size, &mut rng),
    };
    Ok(PolicyParams { vocab, shape, theta })
}

pub fn step_distribution(params: &PolicyParams, prefix: &[TokenId]) -> Result<StepDistribution> {
    if let Shape::Tabular { window } = params.shape {
        params.vocab.check_prefix(prefix)?;
        let v = params.vocab.size;
        let r = params.tabular_row(window, prefix);
        return Ok(StepDistribution::from_logits(&params.theta[r * v..(r + 1) * v]));
    }
    let fwd = params.forward(prefix)?;
    Ok(fwd.dist_after(prefix.len()))
}

/// Total and per-token log-probabilities of a response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

fn concat(prompt: &[TokenId], response: &[TokenId]) -> TokenSeq {
    let mut s = Vec::with_capacity(prompt.len() + response.len());
    s.extend_from_slice(prompt);
    s.extend_from_slice(response);
    s
}

/// Forward pass over `prompt ⧺ response`; the step distribution for response
/// token `t` is `logits_after(prompt.len() + t)`.
pub fn forward_response<'a>(params: &'a PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Forward<'a>> {
    if response.is_empty() {
        return Err(Error::Input("empty response".into()));
    }
    params.vocab.check_tokens(response)?;
    // the last response token is never fed back in
    let seq = concat(prompt, &response[..response.len() - 1]);
    params.forward(&seq)
}

/// Per-step log-distributions of every response position.
pub fn response_log_dists(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let fwd = forward_response(params, prompt, response)?;
    Ok((0..response.len()).map(|t| log_softmax(fwd.logits_after(prompt.len() + t))).collect())
}

pub fn logprob_response(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<ResponseLogProb> {
    let dists = response_log_dists(params, prompt, response)?;
    let per_token: Vec<f64> = dists.iter().zip(response).map(|(lp, &y)| lp[y as usize]).collect();
    Ok(ResponseLogProb { total: per_token.iter().sum(), per_token })
}

pub fn sample_response<R: Rng>(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be ≥ 1".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
    }
    params.vocab.check_prefix(prompt)?;
    if prompt.len() + max_len - 1 > params.max_seq_len() {
        return Err(Error::Input(format!(
            "prompt length {} plus max_len {max_len} exceeds context {}",
            prompt.len(),
            params.max_seq_len()
        )));
    }
    let mut seq = prompt.to_vec();
    let mut response = Vec::with_capacity(max_len);
    let mut student_logprobs = Vec::with_capacity(max_len);
    let mut sampler_logprobs = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let logits = next_logits(params, &seq)?;
        let base = StepDistribution::from_logits(&logits);
        let (y, sampler_lp) = if temperature == 1.0 {
            let y = base.sample(rng);
            (y, base.log_probs[y as usize])
        } else {
            let tempered = StepDistribution::from_logits_with_temperature(&logits, temperature);
            let y = tempered.sample(rng);
            (y, tempered.log_probs[y as usize])
        };
        student_logprobs.push(base.log_probs[y as usize]);
        sampler_logprobs.push(sampler_lp);
        response.push(y);
        seq.push(y);
        if y == params.vocab.eos {
            break;
        }
    }
    Ok(Trajectory { prompt: prompt.to_vec(), response, student_logprobs, sampler_logprobs, temperature })
}

fn next_logits(params: &PolicyParams, seq: &[TokenId]) -> Result<Vec<f64>> {
    match params.shape {
        Shape::Tabular { window } => {
            let v = params.vocab.size;
            let r = params.tabular_row(window, seq);
            Ok(params.theta[r * v..(r + 1) * v].to_vec())
        }
        Shape::Transformer(_) => Ok(params.forward(seq)?.logits_after(seq.len()).to_vec()),
    }
}

/// Argmax decoding until eos or `max_len` tokens.
pub fn greedy_decode(params: &PolicyParams, prompt: &[TokenId], max_len: usize) -> Result<TokenSeq> {
    params.vocab.check_prefix(prompt)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let y = StepDistribution::from_logits(&next_logits(params, &seq)?).argmax();
        out.push(y);
        seq.push(y);
        if y == params.vocab.eos {
            break;
        }
    }
    Ok(out)
}

/// Cotangent of `log p(y)` with respect to the logits: `e_y − p`.
pub fn score_cotangent(log_dist: &[f64], y: TokenId) -> Vec<f64> {
    let mut c: Vec<f64> = log_dist.iter().map(|l| -l.exp()).collect();
    c[y as usize] += 1.0;
    c
}

/// Exact gradient of `log π_θ(response | prompt)`.
pub fn grad_logprob(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId]) -> Result<GradientVector> {
    let fwd = forward_response(params, prompt, response)?;
    let cots: Vec<Vec<f64>> = response
        .iter()
        .enumerate()
        .map(|(t, &y)| score_cotangent(&log_softmax(fwd.logits_after(prompt.len() + t)), y))
        .collect();
    Ok(fwd.backward(prompt.len(), &cots))
}

/// All sequences over `alphabet` that end in `eos` within `max_len` tokens or
/// reach exactly `max_len` tokens without it, in depth-first lexical order.
pub fn enumerate_sequences(alphabet: &[TokenId], eos: TokenId, max_len: usize) -> Vec<TokenSeq> {
    fn go(alphabet: &[TokenId], eos: TokenId, max_len: usize, cur: &mut TokenSeq, out: &mut Vec<TokenSeq>) {
        for &t in alphabet {
            cur.push(t);
            if t == eos || cur.len() == max_len {
                out.push(cur.clone());
            } else {
                go(alphabet, eos, max_len, cur, out);
            }
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if max_len > 0 {
        go(alphabet, eos, max_len, &mut Vec::new(), &mut out);
    }
    out
}

/// Every terminated response up to `max_len` over the full vocabulary.
///
/// Sequences that reach `max_len` without eos count as terminated, so the
/// enumerated set carries total probability one under any policy.
pub fn enumerate_responses(vocab: &Vocab, max_len: usize, budget: u128) -> Result<Vec<TokenSeq>> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be ≥ 1".into()));
    }
    let needed = (vocab.size as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let alphabet: Vec<TokenId> = (0..vocab.size as TokenId).collect();
    Ok(enumerate_sequences(&alphabet, vocab.eos, max_len))
}
