//! S-Trans and T-Trans: position encoding, post-norm self-attention block,
//! post-norm feed-forward block.
//!
//! ```text
//! X'  = PE + X
//! X'' = LN(X' + MHSA(X'))
//! X̂   = LN(X'' + FFN(X''))
//! ```

use rand::Rng;

use super::attention::{
    mhsa_forward, register_attention, register_linear, AttentionTrace, AttentionVars, Linear,
    UnitDims, UnitKind,
};
use super::encoding::{spe_encode, tpe_encode, EncodingConfig};
use crate::autodiff::{Bindings, ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn register_unit<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    dims: &UnitDims,
    rng: &mut R,
) -> Result<()> {
    dims.validate()?;
    register_attention(params, &format!("{prefix}.attn"), dims, rng)?;
    register_linear(params, &format!("{prefix}.ffn1"), dims.model, dims.hidden, rng)?;
    register_linear(params, &format!("{prefix}.ffn2"), dims.hidden, dims.model, rng)?;
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{prefix}.{ln}.g"), Tensor::full(&[dims.model], 1.0))?;
        params.insert(format!("{prefix}.{ln}.b"), Tensor::zeros(&[dims.model]))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct UnitVars {
    pub attn: AttentionVars,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
}

impl UnitVars {
    pub fn bind(b: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(UnitVars {
            attn: AttentionVars::bind(b, &format!("{prefix}.attn"), heads)?,
            ffn1: Linear::bind(b, &format!("{prefix}.ffn1"))?,
            ffn2: Linear::bind(b, &format!("{prefix}.ffn2"))?,
            ln1: (b.get(&format!("{prefix}.ln1.g"))?, b.get(&format!("{prefix}.ln1.b"))?),
            ln2: (b.get(&format!("{prefix}.ln2.g"))?, b.get(&format!("{prefix}.ln2.b"))?),
        })
    }
}

/// Whether the unit adds its position encoding. `Zeroed` is a test hook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PositionEncoding {
    #[default]
    Enabled,
    Zeroed,
}

fn block(tape: &mut Tape, x: Var, vars: &UnitVars) -> Result<(Var, Var)> {
    let (attended, weights) = mhsa_forward(tape, x, &vars.attn)?;
    let r1 = tape.add(x, attended)?;
    let x2 = tape.layer_norm(r1, vars.ln1.0, vars.ln1.1, LAYER_NORM_EPS)?;
    let h = vars.ffn1.forward(tape, x2)?;
    let h = tape.relu(h);
    let h = vars.ffn2.forward(tape, h)?;
    let r2 = tape.add(x2, h)?;
    let out = tape.layer_norm(r2, vars.ln2.0, vars.ln2.1, LAYER_NORM_EPS)?;
    Ok((out, weights))
}

fn check_tokens(tape: &Tape, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [g, t, c] => Ok((g, t, c)),
        ref s => Err(Error::Invalid(format!("{what} expects [G, T, C] tokens, got {s:?}"))),
    }
}

/// Spatial actor transformer over `G` frames of `N` actors.
///
/// `tokens` is `[G, N, C]`; `centers` holds the `G·N` box centers in the
/// same order.
pub fn s_trans_forward(
    tape: &mut Tape,
    tokens: Var,
    centers: &[[f64; 2]],
    vars: &UnitVars,
    encoding: PositionEncoding,
) -> Result<(Var, AttentionTrace)> {
    let (g, n, c) = check_tokens(tape, tokens, "s_trans")?;
    if centers.len() != g * n {
        return Err(Error::Invalid(format!(
            "s_trans got {} centers for {g}×{n} actors",
            centers.len()
        )));
    }
    let x = match encoding {
        PositionEncoding::Enabled => {
            let pe = spe_encode(centers, &EncodingConfig::new(c)?)?.reshaped(&[g, n, c])?;
            let pe = tape.constant(pe);
            tape.add(tokens, pe)?
        }
        PositionEncoding::Zeroed => tokens,
    };
    let (out, w) = block(tape, x, vars)?;
    let trace = AttentionTrace::capture(tape, w, "", UnitKind::Spatial, 0, 1, vars.attn.heads);
    Ok((out, trace))
}

/// Temporal actor transformer over `G` actors observed for `K` frames.
/// Frames are encoded with indices `1..=K`.
pub fn t_trans_forward(
    tape: &mut Tape,
    tokens: Var,
    vars: &UnitVars,
    encoding: PositionEncoding,
) -> Result<(Var, AttentionTrace)> {
    let (g, k, c) = check_tokens(tape, tokens, "t_trans")?;
    let x = match encoding {
        PositionEncoding::Enabled => {
            let frames: Vec<usize> = (1..=k).collect();
            let one = tpe_encode(&frames, &EncodingConfig::new(c)?)?;
            let data = one.data().repeat(g);
            let pe = tape.constant(Tensor::new(&[g, k, c], data)?);
            tape.add(tokens, pe)?
        }
        PositionEncoding::Zeroed => tokens,
    };
    let (out, w) = block(tape, x, vars)?;
    let trace = AttentionTrace::capture(tape, w, "", UnitKind::Temporal, 0, 1, vars.attn.heads);
    Ok((out, trace))
}
