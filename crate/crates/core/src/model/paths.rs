use super::config::PathKind;
use crate::autodiff::{Bindings, Tape, Var};
use crate::error::{Error, Result};
use crate::relation::{
    s_trans_forward, t_trans_forward, AttentionTrace, Linear, PositionEncoding, UnitKind, UnitVars,
};

/// Embedded actor features of a batch: `features` is `[B, K, N, C]` and
/// `centers` holds the `B·K·N` normalized box centers in the same order.
#[derive(Clone, Debug)]
pub struct ActorTensor {
    pub features: Var,
    pub centers: Vec<[f64; 2]>,
    pub batch: usize,
    pub frames: usize,
    pub actors: usize,
}

impl ActorTensor {
    pub fn new(tape: &Tape, features: Var, centers: Vec<[f64; 2]>) -> Result<Self> {
        let [batch, frames, actors, _] = *tape.shape(features) else {
            return Err(Error::Invalid(format!(
                "actor tensor must be [B, K, N, C], got {:?}",
                tape.shape(features)
            )));
        };
        if centers.len() != batch * frames * actors {
            return Err(Error::Invalid(format!(
                "{} centers for {batch}×{frames}×{actors} actors",
                centers.len()
            )));
        }
        if let Some(c) = centers
            .iter()
            .find(|c| !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]))
        {
            return Err(Error::Invalid(format!("box center {c:?} outside the unit square")));
        }
        Ok(ActorTensor {
            features,
            centers,
            batch,
            frames,
            actors,
        })
    }
}

/// Result of one path over a batch.
#[derive(Clone, Debug)]
pub struct PathOutputs {
    pub path: PathKind,
    /// `[B, K, N, C]`
    pub enhanced: Var,
    /// Mean over frames of `enhanced`, `[B, N, C]`.
    pub video: Var,
    pub traces: Vec<AttentionTrace>,
}

/// Bound parameters of one path.
#[derive(Clone, Copy, Debug)]
pub struct PathVars {
    pub inner: UnitVars,
    pub bridge: Linear,
    pub outer: UnitVars,
    pub scene_proj: Option<Linear>,
}

impl PathVars {
    pub fn bind(b: &Bindings, path: PathKind, heads: usize, middle_scene: bool) -> Result<Self> {
        let p = path.name();
        Ok(PathVars {
            inner: UnitVars::bind(b, &format!("{p}.inner"), heads)?,
            bridge: Linear::bind(b, &format!("{p}.bridge"))?,
            outer: UnitVars::bind(b, &format!("{p}.outer"), heads)?,
            scene_proj: if middle_scene {
                Some(Linear::bind(b, &format!("{p}.scene_proj"))?)
            } else {
                None
            },
        })
    }
}

/// Applies one unit to `[B, K, N, C]` features, folding frames (spatial) or
/// actors (temporal) into the batch.
pub fn apply_unit(
    tape: &mut Tape,
    x: &ActorTensor,
    features: Var,
    kind: UnitKind,
    vars: &UnitVars,
    encoding: PositionEncoding,
) -> Result<(Var, AttentionTrace)> {
    let (b, k, n) = (x.batch, x.frames, x.actors);
    let c = tape.shape(features)[3];
    match kind {
        UnitKind::Spatial => {
            let tokens = tape.reshape(features, &[b * k, n, c])?;
            let (y, mut trace) = s_trans_forward(tape, tokens, &x.centers, vars, encoding)?;
            trace.samples = b;
            trace.per_sample = k;
            Ok((tape.reshape(y, &[b, k, n, c])?, trace))
        }
        UnitKind::Temporal => {
            let t = tape.permute(features, &[0, 2, 1, 3])?;
            let tokens = tape.reshape(t, &[b * n, k, c])?;
            let (y, mut trace) = t_trans_forward(tape, tokens, vars, encoding)?;
            trace.samples = b;
            trace.per_sample = n;
            let y = tape.reshape(y, &[b, n, k, c])?;
            Ok((tape.permute(y, &[0, 2, 1, 3])?, trace))
        }
    }
}

/// `outer(X + ReLU(bridge(inner(X))) [+ scene])`, then mean over frames.
///
/// `middle_scene`, when given, is `[B, K, 1, C]` and is added to every actor
/// between the two units.
pub fn compose_path(
    tape: &mut Tape,
    x: &ActorTensor,
    path: PathKind,
    vars: &PathVars,
    middle_scene: Option<Var>,
    encoding: PositionEncoding,
) -> Result<PathOutputs> {
    let [inner_kind, outer_kind] = path.units();
    let (h, mut t0) = apply_unit(tape, x, x.features, inner_kind, &vars.inner, encoding)?;
    let h = vars.bridge.forward(tape, h)?;
    let h = tape.relu(h);
    let mut mid = tape.add(x.features, h)?;
    if let Some(s) = middle_scene {
        mid = tape.add_broadcast(mid, s)?;
    }
    let (out, mut t1) = apply_unit(tape, x, mid, outer_kind, &vars.outer, encoding)?;
    let video = tape.mean_axis(out, 1)?;
    for (t, layer) in [(&mut t0, 0), (&mut t1, 1)] {
        t.path = path.name().to_string();
        t.layer = layer;
    }
    Ok(PathOutputs {
        path,
        enhanced: out,
        video,
        traces: vec![t0, t1],
    })
}

/// Spatial-then-temporal path.
pub fn compose_st(tape: &mut Tape, x: &ActorTensor, vars: &PathVars) -> Result<PathOutputs> {
    compose_path(tape, x, PathKind::ST, vars, None, PositionEncoding::Enabled)
}

/// Temporal-then-spatial path.
pub fn compose_ts(tape: &mut Tape, x: &ActorTensor, vars: &PathVars) -> Result<PathOutputs> {
    compose_path(tape, x, PathKind::TS, vars, None, PositionEncoding::Enabled)
}

/// Single-order ablation paths (two spatial or two temporal units).
pub fn compose_variant(
    tape: &mut Tape,
    x: &ActorTensor,
    vars: &PathVars,
    variant: PathKind,
) -> Result<PathOutputs> {
    if !matches!(variant, PathKind::SS | PathKind::TT) {
        return Err(Error::Invalid(format!(
            "compose_variant handles SS and TT, got {variant:?}"
        )));
    }
    compose_path(tape, x, variant, vars, None, PositionEncoding::Enabled)
}
