//! Plain-text checkpoint format.
//!
//! ```text
//! sdft-policy 1
//! family transformer
//! vocab size=28 bos=1 eos=2 pad=0 sep=3
//! shape d_model=32 n_layers=2 n_heads=2 ctx_len=64 mlp_hidden=128
//! theta 30016
//! -1.2345678901234567e-2
//! ...
//! ```
//!
//! Each parameter is written with 17 significant digits, which round-trips
//! every `f64` exactly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PolicyParams, Shape, TransformerShape, Vocab};
use crate::error::{Error, Result};

const MAGIC: &str = "sdft-policy 1";

pub fn write_checkpoint<W: Write>(params: &PolicyParams, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let v = &params.vocab;
    writeln!(w, "{MAGIC}")?;
    match params.shape {
        Shape::Tabular { window } => {
            writeln!(w, "family tabular")?;
            writeln!(w, "vocab size={} bos={} eos={} pad={} sep={}", v.size, v.bos, v.eos, v.pad, v.sep)?;
            writeln!(w, "shape window={window}")?;
        }
        Shape::Transformer(t) => {
            writeln!(w, "family transformer")?;
            writeln!(w, "vocab size={} bos={} eos={} pad={} sep={}", v.size, v.bos, v.eos, v.pad, v.sep)?;
            writeln!(
                w,
                "shape d_model={} n_layers={} n_heads={} ctx_len={} mlp_hidden={}",
                t.d_model, t.n_layers, t.n_heads, t.ctx_len, t.mlp_hidden
            )?;
        }
    }
    writeln!(w, "theta {}", params.theta.len())?;
    for x in &params.theta {
        writeln!(w, "{x:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

fn kv_line(line: &str, head: &str, lineno: usize) -> Result<HashMap<String, usize>> {
    let rest = line
        .strip_prefix(head)
        .ok_or_else(|| Error::Parse { line: lineno, msg: format!("expected `{head} ...`") })?;
    let mut out = HashMap::new();
    for item in rest.split_whitespace() {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: lineno, msg: format!("expected key=value, got `{item}`") })?;
        let v: usize =
            v.parse().map_err(|_| Error::Parse { line: lineno, msg: format!("`{k}` is not an integer") })?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

fn field(map: &HashMap<String, usize>, key: &str, lineno: usize) -> Result<usize> {
    map.get(key)
        .copied()
        .ok_or_else(|| Error::Parse { line: lineno, msg: format!("missing `{key}`") })
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<PolicyParams> {
    let mut lines = BufReader::new(r).lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(Error::Parse { line: 0, msg: format!("unexpected end of file, wanted {what}") }),
        }
    };
    let (n, magic) = next("header")?;
    if magic.trim() != MAGIC {
        return Err(Error::Parse { line: n, msg: format!("not a policy checkpoint (`{magic}`)") });
    }
    let (n, fam) = next("family")?;
    let family = fam
        .strip_prefix("family ")
        .ok_or_else(|| Error::Parse { line: n, msg: "expected `family ...`".into() })?
        .trim()
        .to_string();
    let (n, vl) = next("vocab")?;
    let vm = kv_line(&vl, "vocab", n)?;
    let vocab = Vocab::new(
        field(&vm, "size", n)?,
        field(&vm, "bos", n)? as u32,
        field(&vm, "eos", n)? as u32,
        field(&vm, "pad", n)? as u32,
        field(&vm, "sep", n)? as u32,
    )?;
    let (n, sl) = next("shape")?;
    let sm = kv_line(&sl, "shape", n)?;
    let shape = match family.as_str() {
        "tabular" => Shape::Tabular { window: field(&sm, "window", n)? },
        "transformer" => Shape::Transformer(TransformerShape {
            d_model: field(&sm, "d_model", n)?,
            n_layers: field(&sm, "n_layers", n)?,
            n_heads: field(&sm, "n_heads", n)?,
            ctx_len: field(&sm, "ctx_len", n)?,
            mlp_hidden: field(&sm, "mlp_hidden", n)?,
        }),
        other => return Err(Error::Parse { line: n - 2, msg: format!("unknown family `{other}`") }),
    };
    let (n, tl) = next("theta")?;
    let count: usize = tl
        .strip_prefix("theta ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| Error::Parse { line: n, msg: "expected `theta <count>`".into() })?;
    let mut theta = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, l) = next("parameter value")?;
        let x: f64 = l
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: n, msg: format!("bad number `{l}`") })?;
        theta.push(x);
    }
    let params = PolicyParams { vocab, shape, theta };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_checkpoint(params, fs::File::create(path)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams> {
    read_checkpoint(fs::File::open(path)?)
}
