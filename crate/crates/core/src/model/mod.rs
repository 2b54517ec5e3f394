//! Two-path model: embedding, ST/TS (and SS/TT) paths, classification
//! heads, scene context and prediction fusion.

mod config;
mod paths;

pub use config::{ModelConfig, PathKind, PathVariant, SceneFusion};
pub use paths::{
    apply_unit, compose_path, compose_st, compose_ts, compose_variant, ActorTensor, PathOutputs,
    PathVars,
};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bindings, ModelParams, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::relation::{register_linear, register_unit, Linear};

/// Raw model input for `B` episodes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    pub frames: usize,
    pub actors: usize,
    /// `[B, K, N, D]`
    pub features: Tensor,
    /// `B·K·N` centers.
    pub centers: Vec<[f64; 2]>,
    /// `[B, K, S]`
    pub scene: Tensor,
    pub group_labels: Vec<usize>,
    /// `B·N` labels, sample-major.
    pub action_labels: Vec<usize>,
}

/// Creates every parameter the configuration needs, seeded.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let d = cfg.dims;
    register_linear(&mut p, "embed", cfg.raw_dim, d.model, &mut rng)?;
    for path in cfg.variant.paths() {
        let n = path.name();
        register_unit(&mut p, &format!("{n}.inner"), &d, &mut rng)?;
        register_linear(&mut p, &format!("{n}.bridge"), d.model, d.model, &mut rng)?;
        register_unit(&mut p, &format!("{n}.outer"), &d, &mut rng)?;
        register_linear(&mut p, &format!("{n}.head.ind"), d.model, cfg.action_classes, &mut rng)?;
        register_linear(&mut p, &format!("{n}.head.grp"), d.model, cfg.group_classes, &mut rng)?;
        if cfg.scene_fusion == SceneFusion::Middle {
            register_linear(&mut p, &format!("{n}.scene_proj"), cfg.scene_dim, d.model, &mut rng)?;
        }
    }
    match cfg.scene_fusion {
        SceneFusion::Late => {
            register_linear(&mut p, "scene.head", cfg.scene_dim, cfg.group_classes, &mut rng)?
        }
        SceneFusion::Early => {
            register_linear(&mut p, "scene.proj", cfg.scene_dim, d.model, &mut rng)?
        }
        SceneFusion::None | SceneFusion::Middle => {}
    }
    if cfg.variant == PathVariant::Dual {
        let st = path_param_names(&p, PathKind::ST);
        let ts = path_param_names(&p, PathKind::TS);
        assert!(
            !st.is_empty() && st.is_disjoint(&ts),
            "dual paths must not share parameters"
        );
    }
    Ok(p)
}

/// Names of the parameters owned by one path.
pub fn path_param_names(p: &ModelParams, path: PathKind) -> BTreeSet<String> {
    let prefix = format!("{}.", path.name());
    p.names()
        .filter(|n| n.starts_with(&prefix))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub individual: Linear,
    pub group: Linear,
}

impl HeadVars {
    pub fn bind(b: &Bindings, path: PathKind) -> Result<Self> {
        let n = path.name();
        Ok(HeadVars {
            individual: Linear::bind(b, &format!("{n}.head.ind"))?,
            group: Linear::bind(b, &format!("{n}.head.grp"))?,
        })
    }
}

/// Group logits `[B, G]` from the max over actors of the video
/// representations, and individual logits `[B·N, A]` per actor.
pub fn classify_heads(tape: &mut Tape, out: &PathOutputs, heads: &HeadVars) -> Result<(Var, Var)> {
    let [b, n, c] = *tape.shape(out.video) else {
        return Err(Error::Invalid("video representations must be [B, N, C]".into()));
    };
    let pooled = tape.max_axis(out.video, 1)?;
    let group = heads.group.forward(tape, pooled)?;
    let flat = tape.reshape(out.video, &[b * n, c])?;
    let individual = heads.individual.forward(tape, flat)?;
    Ok((group, individual))
}

/// Group logits `[B, G]` from frame-averaged scene features `[B, K, S]`.
pub fn scene_head(tape: &mut Tape, scene: Var, head: &Linear) -> Result<Var> {
    let pooled = tape.mean_axis(scene, 1)?;
    head.forward(tape, pooled)
}

/// Logits of every source plus their fusion.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub group: Vec<(&'static str, Var)>,
    pub individual: Vec<(&'static str, Var)>,
    /// `[B, G]`, mean of `group`.
    pub fused_group: Var,
    /// `[B·N, A]`, mean of `individual`.
    pub fused_individual: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub predictions: Predictions,
    pub paths: Vec<PathOutputs>,
}

impl ModelOutput {
    pub fn path(&self, kind: PathKind) -> Option<&PathOutputs> {
        self.paths.iter().find(|p| p.path == kind)
    }
}

/// Elementwise arithmetic mean of same-shaped logits.
pub fn fuse_mean(tape: &mut Tape, sources: &[Var]) -> Result<Var> {
    let (&first, rest) = sources
        .split_first()
        .ok_or_else(|| Error::Invalid("nothing to fuse".into()))?;
    let mut acc = first;
    for &s in rest {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / sources.len() as f64))
}

/// Full forward pass over a batch.
pub fn forward_model(
    tape: &mut Tape,
    batch: &Batch,
    cfg: &ModelConfig,
    b: &Bindings,
) -> Result<ModelOutput> {
    let (bs, k, n) = (batch.batch, batch.frames, batch.actors);
    if batch.features.shape() != [bs, k, n, cfg.raw_dim] {
        return Err(Error::shape(
            "forward_model features",
            batch.features.shape(),
            &[bs, k, n, cfg.raw_dim],
        ));
    }
    if batch.scene.shape() != [bs, k, cfg.scene_dim] {
        return Err(Error::shape(
            "forward_model scene",
            batch.scene.shape(),
            &[bs, k, cfg.scene_dim],
        ));
    }
    let raw = tape.constant(batch.features.clone());
    let mut feats = Linear::bind(b, "embed")?.forward(tape, raw)?;
    let scene = tape.constant(batch.scene.clone());
    let c = cfg.dims.model;

    if cfg.scene_fusion == SceneFusion::Early {
        let proj = Linear::bind(b, "scene.proj")?.forward(tape, scene)?;
        let proj = tape.reshape(proj, &[bs, k, 1, c])?;
        feats = tape.add_broadcast(feats, proj)?;
    }
    let x = ActorTensor::new(tape, feats, batch.centers.clone())?;

    let middle = cfg.scene_fusion == SceneFusion::Middle;
    let mut paths = Vec::new();
    let mut group = Vec::new();
    let mut individual = Vec::new();
    for &kind in cfg.variant.paths() {
        let vars = PathVars::bind(b, kind, cfg.dims.heads, middle)?;
        let mid = match vars.scene_proj {
            Some(proj) => {
                let s = proj.forward(tape, scene)?;
                Some(tape.reshape(s, &[bs, k, 1, c])?)
            }
            None => None,
        };
        let out = compose_path(tape, &x, kind, &vars, mid, cfg.position_encoding)?;
        let (g, i) = classify_heads(tape, &out, &HeadVars::bind(b, kind)?)?;
        group.push((kind.name(), g));
        individual.push((kind.name(), i));
        paths.push(out);
    }
    if cfg.scene_fusion == SceneFusion::Late {
        let g = scene_head(tape, scene, &Linear::bind(b, "scene.head")?)?;
        group.push(("scene", g));
    }

    let gv: Vec<Var> = group.iter().map(|(_, v)| *v).collect();
    let iv: Vec<Var> = individual.iter().map(|(_, v)| *v).collect();
    let fused_group = fuse_mean(tape, &gv)?;
    let fused_individual = fuse_mean(tape, &iv)?;
    Ok(ModelOutput {
        predictions: Predictions {
            group,
            individual,
            fused_group,
            fused_individual,
        },
        paths,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Group class per sample and action class per actor from fused logits.
pub fn predict(tape: &Tape, preds: &Predictions) -> (Vec<usize>, Vec<usize>) {
    let rows = |v: Var| -> Vec<usize> {
        let t = tape.value(v);
        let w = *t.shape().last().unwrap();
        t.data().chunks(w).map(argmax).collect()
    };
    (rows(preds.fused_group), rows(preds.fused_individual))
}
