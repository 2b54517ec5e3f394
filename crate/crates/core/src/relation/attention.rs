use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Widths of one relation unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitDims {
    /// Actor feature width `C`.
    pub model: usize,
    /// Attention embedding width `E`.
    pub embed: usize,
    pub heads: usize,
    /// Feed-forward hidden width.
    pub hidden: usize,
}

impl UnitDims {
    pub fn validate(&self) -> Result<()> {
        if self.model == 0 || self.embed == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("all unit dims must be positive: {self:?}")));
        }
        if self.embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed width {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }
}

/// Uniform Glorot initialization.
pub(crate) fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

/// Registers an affine map `x · W + b` under `{prefix}.w` / `{prefix}.b`.
pub(crate) fn register_linear<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn bind(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: b.get(&format!("{prefix}.w"))?,
            b: b.get(&format!("{prefix}.b"))?,
        })
    }

    /// Applies the map to the last axis of `x`, any leading shape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let fan_in = *shape.last().unwrap();
        let rows = tape.value(x).numel() / fan_in;
        let flat = tape.reshape(x, &[rows, fan_in])?;
        let y = tape.matmul(flat, self.w)?;
        let y = tape.add_bias(y, self.b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = tape.shape(y)[1];
        tape.reshape(y, &out_shape)
    }
}

pub(crate) fn register_attention<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    dims: &UnitDims,
    rng: &mut R,
) -> Result<()> {
    for proj in ["q", "k", "v"] {
        register_linear(params, &format!("{prefix}.{proj}"), dims.model, dims.embed, rng)?;
    }
    register_linear(params, &format!("{prefix}.o"), dims.embed, dims.model, rng)
}

/// Bound projections of one multi-head self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionVars {
    pub fn bind(b: &Bindings, prefix: &str, heads: usize) -> Result<Self> {
        Ok(AttentionVars {
            q: Linear::bind(b, &format!("{prefix}.q"))?,
            k: Linear::bind(b, &format!("{prefix}.k"))?,
            v: Linear::bind(b, &format!("{prefix}.v"))?,
            o: Linear::bind(b, &format!("{prefix}.o"))?,
            heads,
        })
    }
}

/// `[G, T, E]` → `[G·H, T, E/H]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (g, t, e) = (s[0], s[1], s[2]);
    let d = e / heads;
    let x = tape.reshape(x, &[g, t, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[g * heads, t, d])
}

/// `[G·H, T, d]` → `[G, T, H·d]`
fn merge_heads(tape: &mut Tape, x: Var, groups: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (heads, t, d) = (s[0] / groups, s[1], s[2]);
    let x = tape.reshape(x, &[groups, heads, t, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[groups, t, heads * d])
}

/// Multi-head self-attention over each of `G` independent token sets.
///
/// `tokens` is `[G, T, C]`. Returns the `[G, T, C]` output and the
/// `[G·H, T, T]` attention weights (row `i` of head `h` in group `g` is the
/// distribution of token `i` over the `T` tokens).
pub fn mhsa_forward(tape: &mut Tape, tokens: Var, attn: &AttentionVars) -> Result<(Var, Var)> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("mhsa expects [G, T, C] tokens, got {s:?}")));
    }
    let groups = s[0];
    let q = attn.q.forward(tape, tokens)?;
    let k = attn.k.forward(tape, tokens)?;
    let v = attn.v.forward(tape, tokens)?;
    let embed = tape.shape(q)[2];
    let head_dim = embed / attn.heads;

    let q = split_heads(tape, q, attn.heads)?;
    let k = split_heads(tape, k, attn.heads)?;
    let v = split_heads(tape, v, attn.heads)?;
    let scores = tape.matmul_ext(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = merge_heads(tape, ctx, groups)?;
    let out = attn.o.forward(tape, ctx)?;
    Ok((out, weights))
}

/// Spatial or temporal relation unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    #[serde(rename = "S")]
    Spatial,
    #[serde(rename = "T")]
    Temporal,
}

/// Attention weights of one unit application over a batch.
///
/// Groups are laid out `[sample, index]`: for a spatial unit `index` is the
/// frame, for a temporal unit it is the actor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub path: String,
    pub unit: UnitKind,
    /// Position of the unit inside its path (0 inner, 1 outer).
    pub layer: usize,
    pub samples: usize,
    pub per_sample: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `[samples, per_sample, heads, tokens, tokens]`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    pub(crate) fn capture(
        tape: &Tape,
        weights: Var,
        path: &str,
        unit: UnitKind,
        layer: usize,
        samples: usize,
        heads: usize,
    ) -> Self {
        let s = tape.shape(weights);
        let groups = s[0] / heads;
        AttentionTrace {
            path: path.to_string(),
            unit,
            layer,
            samples,
            per_sample: groups / samples,
            heads,
            tokens: s[1],
            weights: tape.value(weights).data().to_vec(),
        }
    }

    /// The `tokens × tokens` matrix for one (sample, index, head).
    pub fn matrix(&self, sample: usize, index: usize, head: usize) -> &[f64] {
        let t2 = self.tokens * self.tokens;
        let start = ((sample * self.per_sample + index) * self.heads + head) * t2;
        &self.weights[start..start + t2]
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .chunks(self.tokens)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
