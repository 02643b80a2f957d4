//! Multi-head attention and linear layers on the tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gaussian, Mat};
use crate::optim::ParamSet;

/// Adds `{name}.weight` (`out × in`) and `{name}.bias` (`1 × out`).
pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    ps.insert(&format!("{name}.weight"), gaussian(d_out, d_in, std, rng))?;
    ps.insert(&format!("{name}.bias"), Mat::zeros(1, d_out))
}

/// `x Wᵀ + b`
pub fn linear(tape: &mut Tape, ps: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = ps.leaf(tape, &format!("{name}.weight"));
    let b = ps.leaf(tape, &format!("{name}.bias"));
    let y = tape.matmul_t(x, w)?;
    tape.add_row(y, b)
}

/// Adds `{name}.gamma` = 1 and `{name}.beta` = 0.
pub fn init_layer_norm(ps: &mut ParamSet, name: &str, width: usize) -> Result<()> {
    ps.insert(&format!("{name}.gamma"), Mat::from_element(1, width, 1.0))?;
    ps.insert(&format!("{name}.beta"), Mat::zeros(1, width))
}

pub fn layer_norm(tape: &mut Tape, ps: &ParamSet, name: &str, x: Var, eps: f64) -> Result<Var> {
    let g = ps.leaf(tape, &format!("{name}.gamma"));
    let b = ps.leaf(tape, &format!("{name}.beta"));
    tape.layer_norm(x, g, b, eps)
}

pub fn init_attention<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    width: usize,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{name}.{proj}"), width, width, rng)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionMask<'a> {
    None,
    /// Key `j` is visible iff `valid[j]`.
    KeyPadding(&'a [bool]),
    /// Query `i` sees keys `0..=i` (self-attention over one sequence).
    Causal,
}

impl AttentionMask<'_> {
    fn allowed(&self, n_q: usize, n_k: usize) -> Result<Option<Vec<bool>>> {
        match self {
            AttentionMask::None => Ok(None),
            AttentionMask::KeyPadding(valid) => {
                if valid.len() != n_k {
                    return Err(Error::Shape(format!("key mask {} for {n_k} keys", valid.len())));
                }
                Ok(Some((0..n_q).flat_map(|_| valid.iter().copied()).collect()))
            }
            AttentionMask::Causal => {
                if n_q != n_k {
                    return Err(Error::Shape("causal attention needs a square score matrix".into()));
                }
                Ok(Some((0..n_q).flat_map(|i| (0..n_k).map(move |j| j <= i)).collect()))
            }
        }
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights averaged over heads, `queries × keys`.
    pub weights: Mat,
}

/// Standard scaled dot-product attention with `heads` heads of width `width / heads`.
pub fn multi_head_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    name: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    mask: AttentionMask<'_>,
) -> Result<AttentionOutput> {
    let width = tape.value(query).ncols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    let head_dim = width / heads;
    let q = linear(tape, ps, &format!("{name}.q"), query)?;
    let k = linear(tape, ps, &format!("{name}.k"), key)?;
    let v = linear(tape, ps, &format!("{name}.v"), value)?;
    let (n_q, n_k) = (tape.value(q).nrows(), tape.value(k).nrows());
    let allowed = mask.allowed(n_q, n_k)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Mat::zeros(n_q, n_k);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores, allowed.clone())?;
        weights += tape.value(attn);
        outs.push(tape.matmul(attn, vh)?);
    }
    weights /= heads as f64;
    let joined = tape.concat_cols(&outs)?;
    let out = linear(tape, ps, &format!("{name}.o"), joined)?;
    Ok(AttentionOutput { out, weights })
}
