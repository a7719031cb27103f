//! The micro autoregressive policy.
//!
//! A decoder-only transformer small enough to train on one CPU core:
//! token and learned absolute position embeddings, `n_layers` pre-norm
//! blocks of multi-head causal self-attention and a SiLU feed-forward
//! network, a final normalisation and a linear read-out over the vocabulary.
//! All weights live in one flat `f64` vector so that checkpoints, optimizer
//! state and gradients share a single layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tape::{log_softmax_in_place, Tape, Var};
use crate::task::Token;

const MAGIC: &[u8; 8] = b"ICPOCKPT";
const FORMAT_VERSION: u32 = 1;

/// Architecture hyper-parameters; the parameter count is a pure function of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub vocab: usize,
    pub d_model: usize,
    pub max_context: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.max_context == 0 || self.d_ff == 0 {
            return Err(IcpoError::Config(
                "architecture sizes must be positive".into(),
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(IcpoError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

/// Offsets of every weight tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
struct ParamLayout {
    tok_emb: Slot,
    pos_emb: Slot,
    layers: Vec<LayerSlots>,
    w_out: Slot,
    b_out: Slot,
    /// Bias slots are initialised to zero.
    biases: Vec<Slot>,
    total: usize,
}

impl ParamLayout {
    fn new(arch: &Arch) -> Self {
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let d = arch.d_model;
        let tok_emb = slot(arch.vocab, d);
        let pos_emb = slot(arch.max_context, d);
        let mut biases = Vec::new();
        let layers = (0..arch.n_layers)
            .map(|_| {
                let l = LayerSlots {
                    wq: slot(d, d),
                    wk: slot(d, d),
                    wv: slot(d, d),
                    wo: slot(d, d),
                    w1: slot(d, arch.d_ff),
                    b1: slot(1, arch.d_ff),
                    w2: slot(arch.d_ff, d),
                    b2: slot(1, d),
                };
                biases.push(l.b1);
                biases.push(l.b2);
                l
            })
            .collect();
        let w_out = slot(d, arch.vocab);
        let b_out = slot(1, arch.vocab);
        biases.push(b_out);
        Self {
            tok_emb,
            pos_emb,
            layers,
            w_out,
            b_out,
            biases,
            total: offset,
        }
    }
}

/// Flat parameters plus a version counter that only optimizer updates bump.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub arch: Arch,
    pub version: u64,
    pub params: Vec<f64>,
}

impl PolicyCheckpoint {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            version: 0,
            params: vec![0.0; arch.param_count()],
        })
    }

    /// Uniform init in `[-1/sqrt(d_model), 1/sqrt(d_model)]`, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        let mut ckpt = Self::zeros(arch)?;
        let layout = ParamLayout::new(&arch);
        let scale = 1.0 / (arch.d_model as f64).sqrt();
        let mut rng = rng_from(derive_seed(seed, &[stream::INIT]));
        for p in ckpt.params.iter_mut() {
            *p = rng.gen_range(-scale..scale);
        }
        for b in &layout.biases {
            ckpt.params[b.offset..b.offset + b.rows * b.cols].fill(0.0);
        }
        Ok(ckpt)
    }

    pub fn from_params(arch: Arch, version: u64, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(IcpoError::Size(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self {
            arch,
            version,
            params,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Versioned flat-array file: magic, format version, arch tuple,
    /// version counter, parameter count, then little-endian `f64`s.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| IcpoError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| IcpoError::io(path, e));
        write(MAGIC)?;
        write(&FORMAT_VERSION.to_le_bytes())?;
        let a = &self.arch;
        for v in [
            a.vocab,
            a.d_model,
            a.max_context,
            a.n_layers,
            a.n_heads,
            a.d_ff,
        ] {
            write(&(v as u64).to_le_bytes())?;
        }
        write(&self.version.to_le_bytes())?;
        write(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            write(&p.to_le_bytes())?;
        }
        w.flush().map_err(|e| IcpoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| IcpoError::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt_err = |reason: &str| IcpoError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| fmt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| fmt_err("truncated header"))?;
        if u32::from_le_bytes(b4) != FORMAT_VERSION {
            return Err(fmt_err("unsupported format version"));
        }
        let mut read_u64 = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| fmt_err("truncated header"))?;
            Ok(u64::from_le_bytes(b))
        };
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = read_u64()? as usize;
        }
        let arch = Arch {
            vocab: dims[0],
            d_model: dims[1],
            max_context: dims[2],
            n_layers: dims[3],
            n_heads: dims[4],
            d_ff: dims[5],
        };
        arch.validate().map_err(|e| fmt_err(&e.to_string()))?;
        let version = read_u64()?;
        let count = read_u64()? as usize;
        if count != arch.param_count() {
            return Err(fmt_err("parameter count does not match architecture"));
        }
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| fmt_err("truncated parameter block"))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| IcpoError::io(path, e))? != 0 {
            return Err(fmt_err("trailing bytes after parameter block"));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            arch,
            version,
            params,
        })
    }
}

/// Frozen copy for `pi_old` / `pi_ref`: same parameters, same version.
pub fn clone_frozen(ckpt: &PolicyCheckpoint) -> PolicyCheckpoint {
    ckpt.clone()
}

/// Parameter leaves of one model registered on a tape.
pub struct Weights {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerWeights>,
    w_out: Var,
    b_out: Var,
    arch: Arch,
}

struct LayerWeights {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Weights {
    /// Registers every weight tensor of `arch` as a parameter leaf. The tape
    /// must have been created over a parameter slice of this architecture.
    pub fn register(tape: &mut Tape<'_>, arch: &Arch) -> Self {
        let layout = ParamLayout::new(arch);
        let mut p = |s: Slot| tape.param(s.offset, s.rows, s.cols);
        let tok_emb = p(layout.tok_emb);
        let pos_emb = p(layout.pos_emb);
        let layers = layout
            .layers
            .iter()
            .map(|l| LayerWeights {
                wq: p(l.wq),
                wk: p(l.wk),
                wv: p(l.wv),
                wo: p(l.wo),
                w1: p(l.w1),
                b1: p(l.b1),
                w2: p(l.w2),
                b2: p(l.b2),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            w_out: p(layout.w_out),
            b_out: p(layout.b_out),
            layers,
            arch: *arch,
        }
    }

    /// All parameter leaves, in layout order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.b1, l.w2, l.b2]);
        }
        v.extend([self.w_out, self.b_out]);
        v
    }

    /// Temperature-scaled logits (`T x V`) for every position of `tokens`.
    pub fn logits(&self, tape: &mut Tape<'_>, tokens: &[Token], temperature: f64) -> Var {
        let arch = &self.arch;
        let t_len = tokens.len();
        let positions: Vec<usize> = (0..t_len).collect();
        let te = tape.gather_rows(self.tok_emb, tokens);
        let pe = tape.gather_rows(self.pos_emb, &positions);
        let mut x = tape.add(te, pe);
        let dh = arch.d_model / arch.n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for l in &self.layers {
            let h = tape.layer_norm(x);
            let q = tape.matmul(h, l.wq);
            let k = tape.matmul(h, l.wk);
            let v = tape.matmul(h, l.wv);
            let heads: Vec<Var> = (0..arch.n_heads)
                .map(|hd| {
                    let qh = tape.slice_cols(q, hd * dh, dh);
                    let kh = tape.slice_cols(k, hd * dh, dh);
                    let vh = tape.slice_cols(v, hd * dh, dh);
                    let s = tape.matmul_bt(qh, kh);
                    let s = tape.scale(s, att_scale);
                    let a = tape.causal_softmax(s);
                    tape.matmul(a, vh)
                })
                .collect();
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let o = tape.matmul(cat, l.wo);
            x = tape.add(x, o);

            let h2 = tape.layer_norm(x);
            let f = tape.matmul(h2, l.w1);
            let f = tape.add_row(f, l.b1);
            let f = tape.silu(f);
            let f = tape.matmul(f, l.w2);
            let f = tape.add_row(f, l.b2);
            x = tape.add(x, f);
        }
        let hf = tape.layer_norm(x);
        let logits = tape.matmul(hf, self.w_out);
        let logits = tape.add_row(logits, self.b_out);
        if temperature == 1.0 {
            logits
        } else {
            tape.scale(logits, 1.0 / temperature)
        }
    }

    /// Log-probabilities (`n x 1`) of `generated` continuing `context`.
    pub fn sequence_logprobs(
        &self,
        tape: &mut Tape<'_>,
        context: &[Token],
        generated: &[Token],
        temperature: f64,
    ) -> Result<Var> {
        let lp = self.sequence_log_softmax(tape, context, generated, temperature)?;
        Ok(tape.pick_cols(lp, generated))
    }

    /// Full next-token log-distributions (`n x V`) at every generated position.
    pub fn sequence_log_softmax(
        &self,
        tape: &mut Tape<'_>,
        context: &[Token],
        generated: &[Token],
        temperature: f64,
    ) -> Result<Var> {
        check_fits(&self.arch, context.len() + generated.len())?;
        if context.is_empty() || generated.is_empty() {
            return Err(IcpoError::Precondition(
                "context and generated tokens must be non-empty".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(context.len() + generated.len());
        tokens.extend_from_slice(context);
        tokens.extend_from_slice(&generated[..generated.len() - 1]);
        let logits = self.logits(tape, &tokens, temperature);
        let rows: Vec<usize> = (context.len() - 1..tokens.len()).collect();
        let logits = tape.gather_rows(logits, &rows);
        Ok(tape.log_softmax(logits))
    }
}

fn check_fits(arch: &Arch, len: usize) -> Result<()> {
    if len > arch.max_context {
        return Err(IcpoError::ContextOverflow {
            len,
            max: arch.max_context,
        });
    }
    Ok(())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(IcpoError::Precondition(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// A categorical distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logprobs(logprobs: &[f64]) -> Self {
        Self {
            probs: logprobs.iter().map(|l| l.exp()).collect(),
        }
    }
}

/// Next-token log-probabilities after `context`.
pub fn next_token_logprobs(
    ckpt: &PolicyCheckpoint,
    context: &[Token],
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_fits(&ckpt.arch, context.len())?;
    if context.is_empty() {
        return Err(IcpoError::Precondition("empty context".into()));
    }
    let mut tape = Tape::new(&ckpt.params);
    let w = Weights::register(&mut tape, &ckpt.arch);
    let logits = w.logits(&mut tape, context, temperature);
    let v = ckpt.arch.vocab;
    let mut last = tape.value(logits)[(context.len() - 1) * v..].to_vec();
    log_softmax_in_place(&mut last);
    Ok(last)
}

pub fn next_token_distribution(
    ckpt: &PolicyCheckpoint,
    context: &[Token],
    temperature: f64,
) -> Result<TokenDistribution> {
    Ok(TokenDistribution::from_logprobs(&next_token_logprobs(
        ckpt,
        context,
        temperature,
    )?))
}

/// Entry `t` is `log pi(generated[t] | context ++ generated[..t])`.
pub fn sequence_logprobs(
    ckpt: &PolicyCheckpoint,
    context: &[Token],
    generated: &[Token],
    temperature: f64,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let mut tape = Tape::new(&ckpt.params);
    let w = Weights::register(&mut tape, &ckpt.arch);
    let lp = w.sequence_logprobs(&mut tape, context, generated, temperature)?;
    Ok(tape.value(lp).to_vec())
}

/// Evaluates a scalar loss built on a fresh tape over `ckpt`'s parameters
/// and returns `(loss, d loss / d params)`.
pub fn loss_gradient<F>(ckpt: &PolicyCheckpoint, build: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&mut Tape<'t>, &Weights) -> Result<Var>,
{
    let mut tape = Tape::new(&ckpt.params);
    let w = Weights::register(&mut tape, &ckpt.arch);
    let out = build(&mut tape, &w)?;
    if tape.shape(out) != (1, 1) {
        return Err(IcpoError::Size("loss must be a scalar".into()));
    }
    let loss = tape.scalar(out);
    if !loss.is_finite() {
        return Err(IcpoError::Numerical(format!(
            "non-finite loss {loss} over a tape of {} nodes",
            tape.len()
        )));
    }
    let grad = tape.backward(out);
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(IcpoError::Numerical(format!(
            "non-finite gradient at parameter {i}"
        )));
    }
    Ok((loss, grad))
}

/// Shannon entropy in nats; `0 ln 0` counts as zero.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    -dist
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
