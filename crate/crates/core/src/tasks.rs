//! Synthetic tasks, the meta-learning corpus, and base-model pretraining.
//!
//! A [`MappingTask`] is a permutation `f` of a small subset of content tokens.
//! Its instances ask for `f(x_1) … f(x_L)` given the query `x`; the
//! demonstration is a longer query `q = x ⧺ distractors` rendered as
//! interleaved pairs `q_1 f(q_1) q_2 f(q_2) …`. The
//! meta corpus draws a fresh mapping for every document, so the only way to
//! answer is to look the query up in the demonstration.
//!
//! A [`FactTable`] stores `(entity, attribute, value)` triples. Questions are
//! `x = [entity, attribute]`; out-of-distribution questions compose two facts
//! of the same entity.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_slice, Exec};
use crate::grad::GradientVector;
use crate::optim::{optimizer_step, AdamState, AdamWConfig, Schedule};
use crate::policy::{
    forward_response, greedy_decode, init_policy, log_softmax, score_cotangent, PolicyParams, Shape, TokenId,
    TokenSeq, TransformerShape, Vocab,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::trainer::{build_student_prompt, build_teacher_prompt};

/// One unit of supervision: query, demonstration and reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub x: TokenSeq,
    pub c: TokenSeq,
    pub answer: TokenSeq,
}

impl TaskInstance {
    /// `answer ⧺ [eos]`, the sequence a correct policy emits.
    pub fn target(&self, vocab: &Vocab) -> TokenSeq {
        let mut t = self.answer.clone();
        t.push(vocab.eos);
        t
    }

    pub fn student_prompt(&self, vocab: &Vocab) -> Result<TokenSeq> {
        build_student_prompt(&self.x, vocab)
    }

    pub fn teacher_prompt(&self, vocab: &Vocab) -> Result<TokenSeq> {
        build_teacher_prompt(&self.x, &self.c, vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTask {
    pub seed: u64,
    pub subset: Vec<TokenId>,
    /// `image[i] = f(subset[i])`
    pub image: Vec<TokenId>,
    pub query_len: usize,
    /// length of the demonstration's query
    pub demo_len: usize,
}

impl MappingTask {
    /// Random subset of `subset_size` content tokens with a random permutation.
    pub fn random(seed: u64, vocab: &Vocab, subset_size: usize, query_len: usize, demo_len: usize) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut content = vocab.content_tokens();
        if subset_size > content.len() {
            return Err(Error::Config(format!(
                "subset size {subset_size} exceeds {} content tokens",
                content.len()
            )));
        }
        content.shuffle(&mut rng);
        content.truncate(subset_size);
        content.sort_unstable();
        Self::on_subset(derive_seed(seed, &[1]), content, query_len, demo_len)
    }

    /// Random permutation of a given subset.
    pub fn on_subset(seed: u64, subset: Vec<TokenId>, query_len: usize, demo_len: usize) -> Result<Self> {
        if query_len == 0 || demo_len <= query_len || demo_len > subset.len() {
            return Err(Error::Config(format!(
                "need 1 ≤ query_len < demo_len ≤ subset size, got {query_len}, {demo_len}, {}",
                subset.len()
            )));
        }
        let mut sorted = subset.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != subset.len() {
            return Err(Error::Config("mapping subset has repeated tokens".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut image = subset.clone();
        image.shuffle(&mut rng);
        Ok(MappingTask { seed, subset, image, query_len, demo_len })
    }

    pub fn apply(&self, t: TokenId) -> Option<TokenId> {
        self.subset.iter().position(|&s| s == t).map(|i| self.image[i])
    }

    pub fn answer(&self, x: &[TokenId]) -> Result<TokenSeq> {
        x.iter()
            .map(|&t| self.apply(t).ok_or_else(|| Error::Input(format!("token {t} is outside the task's subset"))))
            .collect()
    }

    /// Number of distinct queries (ordered, without repeated tokens).
    pub fn capacity(&self) -> usize {
        let k = self.subset.len();
        (0..self.query_len).map(|i| k - i).product()
    }

    fn all_queries(&self) -> Vec<TokenSeq> {
        fn rec(subset: &[TokenId], len: usize, cur: &mut TokenSeq, out: &mut Vec<TokenSeq>) {
            if cur.len() == len {
                out.push(cur.clone());
                return;
            }
            for &t in subset {
                if !cur.contains(&t) {
                    cur.push(t);
                    rec(subset, len, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::with_capacity(self.capacity());
        rec(&self.subset, self.query_len, &mut Vec::new(), &mut out);
        out
    }

    /// Demonstration for `x`: the query `x ⧺ distractors`, rendered as
    /// `q_1 f(q_1) q_2 f(q_2) …`.
    pub fn demonstration(&self, x: &[TokenId], rng: &mut Rng) -> Result<TokenSeq> {
        let mut q: TokenSeq = x.to_vec();
        let mut rest: Vec<TokenId> = self.subset.iter().copied().filter(|t| !x.contains(t)).collect();
        rest.shuffle(rng);
        q.extend(rest.into_iter().take(self.demo_len - x.len()));
        let mut c = Vec::with_capacity(2 * q.len());
        for t in q {
            c.push(t);
            c.push(self.apply(t).ok_or_else(|| Error::Input(format!("token {t} is outside the task's subset")))?);
        }
        Ok(c)
    }

    fn random_query(&self, rng: &mut Rng) -> TokenSeq {
        let mut s = self.subset.clone();
        s.shuffle(rng);
        s.truncate(self.query_len);
        s
    }

    pub fn instance(&self, task_id: &str, x: TokenSeq, rng: &mut Rng) -> Result<TaskInstance> {
        let c = self.demonstration(&x, rng)?;
        let answer = self.answer(&x)?;
        Ok(TaskInstance { task_id: task_id.to_string(), x, c, answer })
    }
}

/// Which part of a stored fact the teacher sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactContext {
    TextOnly,
    AnswerOnly,
    #[default]
    TextPlusAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTable {
    pub seed: u64,
    /// `(entity, attribute, value)`
    pub triples: Vec<(TokenId, TokenId, TokenId)>,
}

impl FactTable {
    pub fn new(seed: u64, triples: Vec<(TokenId, TokenId, TokenId)>) -> Result<Self> {
        let mut keys: Vec<(TokenId, TokenId)> = triples.iter().map(|&(e, a, _)| (e, a)).collect();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() != triples.len() {
            return Err(Error::Config("fact table has a repeated (entity, attribute) pair".into()));
        }
        Ok(FactTable { seed, triples })
    }

    /// Every entity gets a value for every attribute; entities, attributes
    /// and values use disjoint content tokens.
    pub fn random(seed: u64, vocab: &Vocab, n_entities: usize, n_attributes: usize, n_values: usize) -> Result<Self> {
        let mut content = vocab.content_tokens();
        if n_entities + n_attributes + n_values > content.len() || n_values == 0 {
            return Err(Error::Config("fact table does not fit in the content vocabulary".into()));
        }
        let mut rng = rng_from_seed(seed);
        content.shuffle(&mut rng);
        let ents = &content[..n_entities];
        let attrs = &content[n_entities..n_entities + n_attributes];
        let vals = &content[n_entities + n_attributes..n_entities + n_attributes + n_values];
        let mut triples = Vec::new();
        for &e in ents {
            for &a in attrs {
                triples.push((e, a, vals[rng.gen_range(0..vals.len())]));
            }
        }
        FactTable::new(seed, triples)
    }

    pub fn lookup(&self, e: TokenId, a: TokenId) -> Option<TokenId> {
        self.triples.iter().find(|t| t.0 == e && t.1 == a).map(|t| t.2)
    }

    pub fn context(&self, e: TokenId, a: TokenId, mode: FactContext) -> Option<TokenSeq> {
        let v = self.lookup(e, a)?;
        Some(match mode {
            FactContext::TextOnly => vec![e, a, v],
            FactContext::AnswerOnly => vec![v],
            FactContext::TextPlusAnswer => vec![e, a, v, v],
        })
    }
}

/// A task definition from which instances are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSpec {
    Mapping(MappingTask),
    Facts(FactTable, FactContext),
}

/// `n` distinct instances of a task.
pub fn gen_task_instances(task: &TaskSpec, task_id: &str, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::Input("n must be ≥ 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    match task {
        TaskSpec::Mapping(m) => {
            if n > m.capacity() {
                return Err(Error::Input(format!("requested {n} instances, task has {} distinct queries", m.capacity())));
            }
            let mut qs = m.all_queries();
            qs.shuffle(&mut rng);
            qs.into_iter().take(n).map(|x| m.instance(task_id, x, &mut rng)).collect()
        }
        TaskSpec::Facts(t, mode) => {
            if n > t.triples.len() {
                return Err(Error::Input(format!("requested {n} instances, table has {} facts", t.triples.len())));
            }
            let mut idx: Vec<usize> = (0..t.triples.len()).collect();
            idx.shuffle(&mut rng);
            Ok(idx
                .into_iter()
                .take(n)
                .map(|i| {
                    let (e, a, v) = t.triples[i];
                    TaskInstance {
                        task_id: task_id.to_string(),
                        x: vec![e, a],
                        c: t.context(e, a, *mode).expect("fact exists"),
                        answer: vec![v],
                    }
                })
                .collect())
        }
    }
}

/// Two-hop questions `[v1, a1, a2]`: the entity whose `a1` is `v1` (unique),
/// asked for its `a2`. The demonstration holds both facts as statements.
pub fn gen_ood_instances(table: &FactTable, task_id: &str, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut cands = Vec::new();
    for &(e, a1, v1) in &table.triples {
        let unique = table.triples.iter().filter(|t| t.1 == a1 && t.2 == v1).count() == 1;
        if !unique {
            continue;
        }
        for &(e2, a2, v2) in &table.triples {
            if e2 == e && a2 != a1 {
                cands.push(TaskInstance {
                    task_id: task_id.to_string(),
                    x: vec![v1, a1, a2],
                    c: vec![e, a1, v1, e, a2, v2],
                    answer: vec![v2],
                });
            }
        }
    }
    if cands.is_empty() {
        return Err(Error::Input("fact table has no entity with a uniquely identifying value and a second attribute".into()));
    }
    if n > cands.len() {
        return Err(Error::Input(format!("requested {n} out-of-distribution questions, only {} exist", cands.len())));
    }
    let mut rng = rng_from_seed(seed);
    cands.shuffle(&mut rng);
    cands.truncate(n);
    Ok(cands)
}

// ---------------------------------------------------------------------------
// meta corpus and pretraining

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaCorpusConfig {
    pub subset_size: usize,
    pub query_len: usize,
    pub demo_len: usize,
    /// fraction of documents rendered without a demonstration
    pub unconditioned_fraction: f64,
    /// seed of the fixed background map answered by documents without a
    /// demonstration; `None` answers them with the fresh mapping instead
    pub background_seed: Option<u64>,
    /// share of bare documents answered by the background map
    pub background_fraction: f64,
}

impl Default for MetaCorpusConfig {
    fn default() -> Self {
        MetaCorpusConfig { subset_size: 8, query_len: 2, demo_len: 3, unconditioned_fraction: 0.25, background_seed: Some(0), background_fraction: 0.5 }
    }
}

/// The fixed permutation of all content tokens that bare documents follow,
/// i.e. the knowledge a base model stores in its weights.
pub fn background_mapping(vocab: &Vocab, cfg: &MetaCorpusConfig) -> Result<Option<MappingTask>> {
    cfg.background_seed
        .map(|seed| MappingTask::on_subset(seed, vocab.content_tokens(), cfg.query_len, cfg.demo_len))
        .transpose()
}

/// Pretraining documents. Each task draws a fresh mapping; each of its
/// instances becomes `teacher_prompt ⧺ answer ⧺ eos`. With probability
/// `unconditioned_fraction` a document is instead the bare
/// `bos x answer eos`, answered by the background map when one is set.
pub fn gen_meta_corpus(
    seed: u64,
    n_tasks: usize,
    instances_per_task: usize,
    vocab: &Vocab,
    cfg: &MetaCorpusConfig,
) -> Result<Vec<TokenSeq>> {
    let background = background_mapping(vocab, cfg)?;
    let mut docs = Vec::with_capacity(n_tasks * instances_per_task);
    for k in 0..n_tasks {
        let task = MappingTask::random(derive_seed(seed, &[0, k as u64]), vocab, cfg.subset_size, cfg.query_len, cfg.demo_len)?;
        let mut rng = rng_from_seed(derive_seed(seed, &[1, k as u64]));
        for _ in 0..instances_per_task {
            let x = task.random_query(&mut rng);
            let inst = task.instance("meta", x, &mut rng)?;
            let mut doc = if rng.gen::<f64>() < cfg.unconditioned_fraction {
                match background.as_ref().filter(|_| rng.gen::<f64>() < cfg.background_fraction) {
                    Some(bg) => {
                        let x = bg.random_query(&mut rng);
                        let mut d = build_student_prompt(&x, vocab)?;
                        d.extend(bg.answer(&x)?);
                        d.push(vocab.eos);
                        docs.push(d);
                        continue;
                    }
                    None => inst.student_prompt(vocab)?,
                }
            } else {
                inst.teacher_prompt(vocab)?
            };
            doc.extend(inst.target(vocab));
            docs.push(doc);
        }
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub shape: TransformerShape,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
    /// train only on each document's last `loss_tail` tokens; `None` trains on all
    pub loss_tail: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            shape: TransformerShape { ctx_len: 16, ..TransformerShape::default() },
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 100,
            adam: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            seed: 0,
            log_every: 100,
            loss_tail: Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, mean per-token NLL of the batch)`
    pub losses: Vec<(usize, f64)>,
}

/// Summed NLL gradient (descent direction), summed NLL and token count of
/// `doc[1..]` given `doc[0]`, restricted to the last `tail` tokens if set.
pub fn doc_nll_grad(params: &PolicyParams, doc: &[TokenId], tail: Option<usize>) -> Result<(GradientVector, f64, usize)> {
    if doc.len() < 2 {
        return Err(Error::Input("document needs at least two tokens".into()));
    }
    let (prompt, target) = doc.split_at(1);
    let first = tail.map_or(0, |k| target.len().saturating_sub(k));
    let fwd = forward_response(params, prompt, target)?;
    let mut nll = 0.0;
    let cots: Vec<Vec<f64>> = target
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let lp = log_softmax(fwd.logits_after(1 + t));
            if t < first {
                return vec![0.0; lp.len()];
            }
            nll -= lp[y as usize];
            let mut c = score_cotangent(&lp, y);
            c.iter_mut().for_each(|v| *v = -*v);
            c
        })
        .collect();
    Ok((fwd.backward(1, &cots), nll, target.len() - first))
}

/// Next-token NLL training of a fresh transformer on `corpus`.
pub fn pretrain_base(corpus: &[TokenSeq], vocab: Vocab, cfg: &PretrainConfig, exec: Exec) -> Result<(PolicyParams, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("empty pretraining corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("pretraining needs steps ≥ 1 and batch_size ≥ 1".into()));
    }
    cfg.adam.validate()?;
    let mut params = init_policy(vocab, Shape::Transformer(cfg.shape), cfg.seed)?;
    let mut state = AdamState::new(params.n_params());
    let sched = Schedule::for_updates(cfg.learning_rate, cfg.warmup_steps, cfg.steps);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[7]));
    let mut losses = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<&TokenSeq> = (0..cfg.batch_size).map(|_| &corpus[rng.gen_range(0..corpus.len())]).collect();
        let parts = map_slice(&batch, exec, |_, d| doc_nll_grad(&params, d, cfg.loss_tail));
        let mut grad = GradientVector::zeros(params.n_params());
        let (mut nll, mut count) = (0.0, 0usize);
        for p in parts {
            let (g, l, n) = p?;
            grad.add_scaled(&g, 1.0);
            nll += l;
            count += n;
        }
        grad.scale(1.0 / count as f64);
        let loss = nll / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        if step == 0 {
            initial_loss = loss;
        }
        last = loss;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            losses.push((step, loss));
            debug!("pretrain step {step} loss {loss:.4}");
        }
        optimizer_step(&mut params.theta, &grad, &mut state, sched.lr_for_update(step), &cfg.adam)?;
    }
    info!("pretraining done: loss {initial_loss:.4} -> {last:.4}");
    Ok((params, PretrainReport { initial_loss, final_loss: last, losses }))
}

/// In-context-learning check on fresh mappings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IclGateReport {
    pub conditioned_accuracy: f64,
    pub unconditioned_accuracy: f64,
    /// `1 / subset_size`
    pub chance: f64,
    pub n: usize,
}

impl IclGateReport {
    pub const MIN_CONDITIONED: f64 = 0.90;
    pub const MAX_ABOVE_CHANCE: f64 = 0.05;

    pub fn passed(&self) -> bool {
        self.conditioned_accuracy >= Self::MIN_CONDITIONED && self.unconditioned_accuracy <= self.chance + Self::MAX_ABOVE_CHANCE
    }
}

/// Greedy exact-match accuracy of `base` with and without demonstrations, on
/// `n_tasks × per_task` queries from mappings drawn with `seed`.
pub fn evaluate_icl_gate(
    base: &PolicyParams,
    cfg: &MetaCorpusConfig,
    seed: u64,
    n_tasks: usize,
    per_task: usize,
    exec: Exec,
) -> Result<IclGateReport> {
    let vocab = base.vocab;
    let mut instances = Vec::new();
    for k in 0..n_tasks {
        let task = MappingTask::random(derive_seed(seed, &[0, k as u64]), &vocab, cfg.subset_size, cfg.query_len, cfg.demo_len)?;
        instances.extend(gen_task_instances(&TaskSpec::Mapping(task), "probe", per_task, derive_seed(seed, &[1, k as u64]))?);
    }
    let hits = map_slice(&instances, exec, |_, inst| -> Result<(bool, bool)> {
        let target = inst.target(&vocab);
        let with = greedy_decode(base, &inst.teacher_prompt(&vocab)?, target.len())? == target;
        let without = greedy_decode(base, &inst.student_prompt(&vocab)?, target.len())? == target;
        Ok((with, without))
    });
    let (mut a, mut b) = (0usize, 0usize);
    for h in hits {
        let (w, wo) = h?;
        a += w as usize;
        b += wo as usize;
    }
    let n = instances.len();
    Ok(IclGateReport {
        conditioned_accuracy: a as f64 / n as f64,
        unconditioned_accuracy: b as f64 / n as f64,
        chance: 1.0 / cfg.subset_size as f64,
        n,
    })
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    task_id: String,
    x: TokenSeq,
    c: TokenSeq,
    answer: TokenSeq,
}

/// One JSON object per line: `{"task_id":..,"x":[..],"c":[..],"answer":[..]}`.
pub fn save_dataset(instances: &[TaskInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(create(path.as_ref())?);
    for i in instances {
        let rec = InstanceRecord { task_id: i.task_id.clone(), x: i.x.clone(), c: i.c.clone(), answer: i.answer.clone() };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if rec.answer.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty answer".into() });
        }
        out.push(TaskInstance { task_id: rec.task_id, x: rec.x, c: rec.c, answer: rec.answer });
    }
    Ok(out)
}

/// Whitespace-separated token ids, one document per line.
pub fn save_corpus(docs: &[TokenSeq], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(create(path.as_ref())?);
    for d in docs {
        let line: Vec<String> = d.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenSeq>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = line
            .split_whitespace()
            .map(|t| t.parse::<TokenId>().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad token id `{t}`") }))
            .collect::<Result<TokenSeq>>()?;
        out.push(doc);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::standard(28).unwrap()
    }

    #[test]
    fn mapping_is_a_permutation_of_its_subset() {
        let m = MappingTask::random(3, &vocab(), 8, 2, 3).unwrap();
        let mut a = m.subset.clone();
        let mut b = m.image.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert!(m.subset.iter().all(|t| *t >= 4));
        assert_eq!(m.capacity(), 56);
        assert_eq!(m.all_queries().len(), 56);
    }

    #[test]
    fn instances_follow_construction() {
        let m = MappingTask::random(5, &vocab(), 8, 2, 3).unwrap();
        let inst = gen_task_instances(&TaskSpec::Mapping(m.clone()), "t", 56, 1).unwrap();
        let mut xs: Vec<_> = inst.iter().map(|i| i.x.clone()).collect();
        xs.sort();
        xs.dedup();
        assert_eq!(xs.len(), 56);
        for i in &inst {
            assert_eq!(i.answer, i.x.iter().map(|&t| m.apply(t).unwrap()).collect::<Vec<_>>());
            let q: Vec<TokenId> = i.c.iter().step_by(2).copied().collect();
            assert_ne!(q, i.x);
            assert!(i.x.iter().all(|t| q.contains(t)));
            for pair in i.c.chunks(2) {
                assert_eq!(m.apply(pair[0]), Some(pair[1]));
            }
        }
        assert!(gen_task_instances(&TaskSpec::Mapping(m), "t", 57, 1).is_err());
    }

    #[test]
    fn fact_instances_and_contexts() {
        let t = FactTable::new(0, vec![(4, 10, 20), (5, 10, 21), (4, 11, 22)]).unwrap();
        let inst = gen_task_instances(&TaskSpec::Facts(t.clone(), FactContext::TextPlusAnswer), "f", 3, 9).unwrap();
        let mut got: Vec<_> = inst.iter().map(|i| (i.x.clone(), i.answer.clone())).collect();
        got.sort();
        assert_eq!(got, vec![(vec![4, 10], vec![20]), (vec![4, 11], vec![22]), (vec![5, 10], vec![21])]);
        assert_eq!(t.context(4, 10, FactContext::AnswerOnly), Some(vec![20]));
        assert_eq!(t.context(4, 10, FactContext::TextOnly), Some(vec![4, 10, 20]));
        assert!(FactTable::new(0, vec![(4, 10, 20), (4, 10, 21)]).is_err());
    }

    #[test]
    fn ood_questions_compose_two_facts() {
        let t = FactTable::new(0, vec![(4, 10, 20), (5, 10, 21), (4, 11, 22)]).unwrap();
        let ood = gen_ood_instances(&t, "ood", 2, 0).unwrap();
        assert_eq!(ood.len(), 2);
        for q in &ood {
            assert_eq!(q.x.len(), 3);
            // v1 identifies entity 4, the only one with two attributes
            let e = t.triples.iter().find(|f| f.1 == q.x[1] && f.2 == q.x[0]).unwrap().0;
            assert_eq!(q.answer, vec![t.lookup(e, q.x[2]).unwrap()]);
        }
        let flat = FactTable::new(0, vec![(4, 10, 20), (5, 10, 21)]).unwrap();
        assert!(gen_ood_instances(&flat, "ood", 1, 0).is_err());
    }

    #[test]
    fn meta_corpus_is_seeded_and_formats_differ_only_in_mapping() {
        let cfg = MetaCorpusConfig::default();
        let a = gen_meta_corpus(1, 20, 4, &vocab(), &cfg).unwrap();
        let b = gen_meta_corpus(1, 20, 4, &vocab(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 80);
        let lens: Vec<usize> = a.iter().map(|d| d.len()).collect();
        assert!(lens.iter().all(|&l| l == 14 || l == 6));
        assert!(lens.contains(&14) && lens.contains(&6));
        let c = gen_meta_corpus(2, 20, 4, &vocab(), &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = MappingTask::random(5, &vocab(), 8, 2, 3).unwrap();
        let inst = gen_task_instances(&TaskSpec::Mapping(m), "t", 10, 1).unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&inst, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), inst);
        let empty = dir.path().join("e.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(load_dataset(&empty).unwrap().is_empty());
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[6] = "{\"task_id\": \"t\", \"x\": [1,";
        fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = gen_meta_corpus(4, 5, 3, &vocab(), &MetaCorpusConfig::default()).unwrap();
        let p = dir.path().join("c.txt");
        save_corpus(&docs, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), docs);
    }

    #[test]
    fn nll_gradient_is_negated_score() {
        let p = init_policy(vocab(), Shape::Tabular { window: 1 }, 0).unwrap();
        let doc = vec![1, 5, 6, 2];
        let (g, nll, n) = doc_nll_grad(&p, &doc, None).unwrap();
        let mut s = crate::policy::grad_logprob(&p, &doc[..1], &doc[1..]).unwrap();
        s.scale(-1.0);
        assert_eq!(g, s);
        assert_eq!(n, 3);
        let lp = crate::policy::logprob_response(&p, &doc[..1], &doc[1..]).unwrap().total;
        assert!((nll + lp).abs() < 1e-12);
    }
}
