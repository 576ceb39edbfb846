//! Tiny pre-LayerNorm decoder-only transformer with hand-written backprop.
//!
//! Parameter layout inside the flat `theta` vector, in order:
//!
//! ```text
//! tok_emb   [V, d]
//! pos_emb   [ctx, d]
//! per layer:
//!   ln1_g [d], ln1_b [d]
//!   wq [d, d], wk [d, d], wv [d, d], wo [d, d]      (no attention biases)
//!   ln2_g [d], ln2_b [d]
//!   w1 [d, h], b1 [h], w2 [h, d], b2 [d]
//! lnf_g [d], lnf_b [d]
//! w_out [d, V]                                      (untied, no bias)
//! ```
//!
//! so the parameter count is `V·d + ctx·d + L·(4d + 4d² + 2dh + h + d) + 2d + d·V`.
//! Matrices are row-major `[in, out]`; activations are row-major `[pos, dim]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub mlp_hidden: usize,
}

impl Default for TransformerShape {
    fn default() -> Self {
        TransformerShape { d_model: 32, n_layers: 2, n_heads: 2, ctx_len: 64, mlp_hidden: 128 }
    }
}

impl TransformerShape {
    pub fn validate(&self) -> Result<()> {
        let s = self;
        if s.d_model == 0 || s.n_layers == 0 || s.n_heads == 0 || s.ctx_len == 0 || s.mlp_hidden == 0 {
            return Err(Error::Config(format!("transformer dimensions must be positive: {s:?}")));
        }
        if s.d_model % s.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                s.d_model, s.n_heads
            )));
        }
        Ok(())
    }

    fn layer_params(&self) -> usize {
        let (d, h) = (self.d_model, self.mlp_hidden);
        4 * d + 4 * d * d + 2 * d * h + h + d
    }

    pub fn param_count(&self, vocab_size: usize) -> usize {
        let d = self.d_model;
        vocab_size * d + self.ctx_len * d + self.n_layers * self.layer_params() + 2 * d + d * vocab_size
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    total: usize,
}

impl Layout {
    fn new(s: &TransformerShape, v: usize) -> Layout {
        let (d, h) = (s.d_model, s.mlp_hidden);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let tok = take(v * d);
        let pos = take(s.ctx_len * d);
        let layers = (0..s.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * h),
                b1: take(h),
                w2: take(h * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        Layout { tok, pos, layers, lnf_g, lnf_b, w_out, total: off }
    }
}

/// Weights ~ N(0, 1)/√fan_in, LayerNorm gains 1 and biases 0.
pub(crate) fn init_theta<R: Rng>(s: &TransformerShape, v: usize, rng: &mut R) -> Vec<f64> {
    let lay = Layout::new(s, v);
    let (d, h) = (s.d_model, s.mlp_hidden);
    let mut theta = vec![0.0; lay.total];
    let mut fill = |theta: &mut [f64], at: usize, n: usize, scale: f64| {
        for x in &mut theta[at..at + n] {
            let z: f64 = rng.sample(StandardNormal);
            *x = z * scale;
        }
    };
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    fill(&mut theta, lay.tok, v * d, inv_sqrt_d);
    fill(&mut theta, lay.pos, s.ctx_len * d, inv_sqrt_d);
    for l in &lay.layers {
        for w in [l.wq, l.wk, l.wv, l.wo] {
            fill(&mut theta, w, d * d, inv_sqrt_d);
        }
        fill(&mut theta, l.w1, d * h, inv_sqrt_d);
        fill(&mut theta, l.w2, h * d, 1.0 / (h as f64).sqrt());
        theta[l.ln1_g..l.ln1_g + d].fill(1.0);
        theta[l.ln2_g..l.ln2_g + d].fill(1.0);
    }
    theta[lay.lnf_g..lay.lnf_g + d].fill(1.0);
    fill(&mut theta, lay.w_out, d * v, inv_sqrt_d);
    theta
}

// ---------------------------------------------------------------------------
// dense kernels

/// out[n, o] = x[n, i] · w[i, o]
fn matmul(x: &[f64], w: &[f64], n: usize, i: usize, o: usize, out: &mut [f64]) {
    out[..n * o].fill(0.0);
    for r in 0..n {
        let xr = &x[r * i..(r + 1) * i];
        let orow = &mut out[r * o..(r + 1) * o];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * o..(k + 1) * o];
            for (a, &b) in orow.iter_mut().zip(wrow) {
                *a += xv * b;
            }
        }
    }
}

/// dw[i, o] += x[n, i]ᵀ · dy[n, o]
fn matmul_tn_acc(x: &[f64], dy: &[f64], n: usize, i: usize, o: usize, dw: &mut [f64]) {
    for r in 0..n {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            let xv = x[r * i + k];
            if xv == 0.0 {
                continue;
            }
            let dwrow = &mut dw[k * o..(k + 1) * o];
            for (a, &b) in dwrow.iter_mut().zip(dyr) {
                *a += xv * b;
            }
        }
    }
}

/// dx[n, i] (+)= dy[n, o] · w[i, o]ᵀ
fn matmul_nt(dy: &[f64], w: &[f64], n: usize, i: usize, o: usize, dx: &mut [f64], accumulate: bool) {
    if !accumulate {
        dx[..n * i].fill(0.0);
    }
    for r in 0..n {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            let wrow = &w[k * o..(k + 1) * o];
            let s: f64 = dyr.iter().zip(wrow).map(|(a, b)| a * b).sum();
            dx[r * i + k] += s;
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, d: usize, out: &mut [f64]) -> LnCache {
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Backprop through LayerNorm; accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    n: usize,
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

// ---------------------------------------------------------------------------
// forward / backward

struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// attention probabilities, [head][p][s] with s ≤ p
    att: Vec<f64>,
    a: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations retained for the backward pass.
pub(crate) struct Cache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Vec<f64>,
    /// logits, [pos, V]; row `p` predicts token `p + 1`
    pub(crate) logits: Vec<f64>,
}

pub(crate) fn forward(s: &TransformerShape, v: usize, theta: &[f64], tokens: &[u32]) -> Result<Cache> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if n > s.ctx_len {
        return Err(Error::Input(format!("sequence length {n} exceeds context length {}", s.ctx_len)));
    }
    let lay = Layout::new(s, v);
    let (d, hdim, nh) = (s.d_model, s.mlp_hidden, s.n_heads);
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; n * d];
    for (p, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        let e = &theta[lay.tok + t * d..lay.tok + (t + 1) * d];
        let pe = &theta[lay.pos + p * d..lay.pos + (p + 1) * d];
        for j in 0..d {
            x[p * d + j] = e[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(s.n_layers);
    for l in &lay.layers {
        let mut h1 = vec![0.0; n * d];
        let ln1 = layer_norm(&x, &theta[l.ln1_g..l.ln1_g + d], &theta[l.ln1_b..l.ln1_b + d], n, d, &mut h1);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut vv = vec![0.0; n * d];
        matmul(&h1, &theta[l.wq..l.wq + d * d], n, d, d, &mut q);
        matmul(&h1, &theta[l.wk..l.wk + d * d], n, d, d, &mut k);
        matmul(&h1, &theta[l.wv..l.wv + d * d], n, d, d, &mut vv);

        let mut att = vec![0.0; nh * n * n];
        let mut a = vec![0.0; n * d];
        for hd in 0..nh {
            let c0 = hd * dh;
            for p in 0..n {
                let qp = &q[p * d + c0..p * d + c0 + dh];
                let row = &mut att[(hd * n + p) * n..(hd * n + p) * n + n];
                let mut mx = f64::NEG_INFINITY;
                for sidx in 0..=p {
                    let ks = &k[sidx * d + c0..sidx * d + c0 + dh];
                    let sc = qp.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[sidx] = sc;
                    mx = mx.max(sc);
                }
                let mut z = 0.0;
                for r in row.iter_mut().take(p + 1) {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                for r in row.iter_mut().take(p + 1) {
                    *r /= z;
                }
                let ap = &mut a[p * d + c0..p * d + c0 + dh];
                for sidx in 0..=p {
                    let w = row[sidx];
                    let vs = &vv[sidx * d + c0..sidx * d + c0 + dh];
                    for (o, &val) in ap.iter_mut().zip(vs) {
                        *o += w * val;
                    }
                }
            }
        }
        let mut o = vec![0.0; n * d];
        matmul(&a, &theta[l.wo..l.wo + d * d], n, d, d, &mut o);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }

        let mut h2 = vec![0.0; n * d];
        let ln2 = layer_norm(&x, &theta[l.ln2_g..l.ln2_g + d], &theta[l.ln2_b..l.ln2_b + d], n, d, &mut h2);
        let mut u = vec![0.0; n * hdim];
        matmul(&h2, &theta[l.w1..l.w1 + d * hdim], n, d, hdim, &mut u);
        let b1 = &theta[l.b1..l.b1 + hdim];
        for r in 0..n {
            for j in 0..hdim {
                u[r * hdim + j] += b1[j];
            }
        }
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut m = vec![0.0; n * d];
        matmul(&g, &theta[l.w2..l.w2 + hdim * d], n, hdim, d, &mut m);
        let b2 = &theta[l.b2..l.b2 + d];
        for r in 0..n {
            for j in 0..d {
                x[r * d + j] += m[r * d + j] + b2[j];
            }
        }
        layers.push(LayerCache { ln1, h1, q, k, v: vv, att, a, ln2, h2, u, g });
    }

    let mut hf = vec![0.0; n * d];
    let lnf = layer_norm(&x, &theta[lay.lnf_g..lay.lnf_g + d], &theta[lay.lnf_b..lay.lnf_b + d], n, d, &mut hf);
    let mut logits = vec![0.0; n * v];
    matmul(&hf, &theta[lay.w_out..lay.w_out + d * v], n, d, v, &mut logits);
    Ok(Cache { tokens: tokens.to_vec(), layers, lnf, hf, logits })
}

/// Gradient of `Σ_p ⟨dlogits[p], logits[p]⟩` with respect to `theta`.
///
/// `dlogits` is `[n, V]` row-major; rows of zeros are allowed and cheap.
pub(crate) fn backward(s: &TransformerShape, v: usize, theta: &[f64], cache: &Cache, dlogits: &[f64]) -> Vec<f64> {
    let lay = Layout::new(s, v);
    let n = cache.tokens.len();
    let (d, hdim, nh) = (s.d_model, s.mlp_hidden, s.n_heads);
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = vec![0.0; lay.total];

    // unembedding
    matmul_tn_acc(&cache.hf, dlogits, n, d, v, &mut grad[lay.w_out..lay.w_out + d * v]);
    let mut dhf = vec![0.0; n * d];
    matmul_nt(dlogits, &theta[lay.w_out..lay.w_out + d * v], n, d, v, &mut dhf, false);
    let mut dx = vec![0.0; n * d];
    {
        let (dg, db) = two_slices(&mut grad, lay.lnf_g, lay.lnf_b, d);
        layer_norm_back(&dhf, &cache.lnf, &theta[lay.lnf_g..lay.lnf_g + d], n, d, &mut dx, dg, db);
    }

    for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // MLP block: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
        let dm = &dx;
        for r in 0..n {
            for j in 0..d {
                grad[l.b2 + j] += dm[r * d + j];
            }
        }
        matmul_tn_acc(&lc.g, dm, n, hdim, d, &mut grad[l.w2..l.w2 + hdim * d]);
        let mut du = vec![0.0; n * hdim];
        matmul_nt(dm, &theta[l.w2..l.w2 + hdim * d], n, hdim, d, &mut du, false);
        for (dz, &z) in du.iter_mut().zip(&lc.u) {
            *dz *= gelu_grad(z);
        }
        for r in 0..n {
            for j in 0..hdim {
                grad[l.b1 + j] += du[r * hdim + j];
            }
        }
        matmul_tn_acc(&lc.h2, &du, n, d, hdim, &mut grad[l.w1..l.w1 + d * hdim]);
        let mut dh2 = vec![0.0; n * d];
        matmul_nt(&du, &theta[l.w1..l.w1 + d * hdim], n, d, hdim, &mut dh2, false);
        let mut dx_mid = dx.clone();
        {
            let (dg, db) = two_slices(&mut grad, l.ln2_g, l.ln2_b, d);
            layer_norm_back(&dh2, &lc.ln2, &theta[l.ln2_g..l.ln2_g + d], n, d, &mut dx_mid, dg, db);
        }

        // attention block: x_mid = x_in + attn(h1) Wo
        let dout = &dx_mid;
        matmul_tn_acc(&lc.a, dout, n, d, d, &mut grad[l.wo..l.wo + d * d]);
        let mut da = vec![0.0; n * d];
        matmul_nt(dout, &theta[l.wo..l.wo + d * d], n, d, d, &mut da, false);

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut datt = vec![0.0; n];
        for hd in 0..nh {
            let c0 = hd * dh;
            for p in 0..n {
                let row = &lc.att[(hd * n + p) * n..(hd * n + p) * n + n];
                let dap = &da[p * d + c0..p * d + c0 + dh];
                let mut dot = 0.0;
                for sidx in 0..=p {
                    let vs = &lc.v[sidx * d + c0..sidx * d + c0 + dh];
                    let g = dap.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>();
                    datt[sidx] = g;
                    dot += row[sidx] * g;
                    let w = row[sidx];
                    let dvs = &mut dv[sidx * d + c0..sidx * d + c0 + dh];
                    for (o, &gval) in dvs.iter_mut().zip(dap) {
                        *o += w * gval;
                    }
                }
                for sidx in 0..=p {
                    let ds = row[sidx] * (datt[sidx] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[p * d + c0 + j] += ds * lc.k[sidx * d + c0 + j];
                        dk[sidx * d + c0 + j] += ds * lc.q[p * d + c0 + j];
                    }
                }
            }
        }
        matmul_tn_acc(&lc.h1, &dq, n, d, d, &mut grad[l.wq..l.wq + d * d]);
        matmul_tn_acc(&lc.h1, &dk, n, d, d, &mut grad[l.wk..l.wk + d * d]);
        matmul_tn_acc(&lc.h1, &dv, n, d, d, &mut grad[l.wv..l.wv + d * d]);
        let mut dh1 = vec![0.0; n * d];
        matmul_nt(&dq, &theta[l.wq..l.wq + d * d], n, d, d, &mut dh1, false);
        matmul_nt(&dk, &theta[l.wk..l.wk + d * d], n, d, d, &mut dh1, true);
        matmul_nt(&dv, &theta[l.wv..l.wv + d * d], n, d, d, &mut dh1, true);
        let mut dx_in = dx_mid;
        {
            let (dg, db) = two_slices(&mut grad, l.ln1_g, l.ln1_b, d);
            layer_norm_back(&dh1, &lc.ln1, &theta[l.ln1_g..l.ln1_g + d], n, d, &mut dx_in, dg, db);
        }
        dx = dx_in;
    }

    for (p, &t) in cache.tokens.iter().enumerate() {
        let t = t as usize;
        for j in 0..d {
            grad[lay.tok + t * d + j] += dx[p * d + j];
            grad[lay.pos + p * d + j] += dx[p * d + j];
        }
    }
    grad
}

/// Disjoint mutable views of two length-`len` ranges starting at `a < b`.
fn two_slices(buf: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
