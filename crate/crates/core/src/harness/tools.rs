use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{check_compatible, check_dataset, objective, train, MetricsRecord};
use crate::arena::{to_batch, Dataset};
use crate::autodiff::{
    finite_difference_check, BackwardFault, GradCheckOptions, GradCheckReport, ModelParams, Tape,
    Tensor,
};
use crate::error::{Error, Result};
use crate::mac::MacConfig;
use crate::model::{forward_model, init_params, Batch, ModelConfig, PathVariant, SceneFusion};
use crate::relation::{AttentionTrace, UnitDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Variant,
    Mac,
    Scene,
    Ratio,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "variant" | "path" => Ok(AblationAxis::Variant),
            "mac" => Ok(AblationAxis::Mac),
            "scene" => Ok(AblationAxis::Scene),
            "ratio" | "data-ratio" => Ok(AblationAxis::Ratio),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// The labeled configurations an axis expands to, all sharing the base
/// seed and schedule.
pub fn ablation_cells(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::Variant => PathVariant::ALL
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.model.variant = v)))
            .collect(),
        AblationAxis::Mac => {
            let off = MacConfig::OFF;
            [
                ("none", off),
                ("FF", MacConfig { lambda_ff: 1.0, ..off }),
                ("FV", MacConfig { lambda_fv: 1.0, ..off }),
                ("VV", MacConfig { lambda_vv: 1.0, ..off }),
                ("all", MacConfig::default()),
            ]
            .into_iter()
            .map(|(label, mac)| {
                let cfg = with(&|c| {
                    c.model.variant = PathVariant::Dual;
                    c.mac = mac;
                });
                (label.to_string(), cfg)
            })
            .collect()
        }
        AblationAxis::Scene => SceneFusion::ALL
            .iter()
            .map(|&f| (f.to_string(), with(&|c| c.model.scene_fusion = f)))
            .collect(),
        AblationAxis::Ratio => [0.05, 0.1, 0.25, 0.5, 1.0]
            .into_iter()
            .map(|r| (format!("{}%", r * 100.0), with(&|c| c.data_ratio = r)))
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub test: MetricsRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed-width text rendering with per-class accuracies.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let classes = self.rows.first().map_or(0, |r| r.test.per_class.len());
        let _ = write!(s, "{:<8} {:>7} {:>7} {:>7}", format!("{:?}", self.axis), "acc", "mpca", "ind");
        for c in 0..classes {
            let _ = write!(s, " {:>6}", format!("c{c}"));
        }
        s.push('\n');
        for r in &self.rows {
            let t = &r.test;
            let _ = write!(
                s,
                "{:<8} {:>7.2} {:>7.2} {:>7.2}",
                r.label,
                100.0 * t.group_accuracy,
                100.0 * t.mpca,
                100.0 * t.individual_accuracy
            );
            for a in &t.per_class {
                let _ = write!(s, " {:>6.1}", 100.0 * a);
            }
            s.push('\n');
        }
        s
    }

    /// Per-class accuracy as CSV, one row per cell.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("label");
        let classes = self.rows.first().map_or(0, |r| r.test.per_class.len());
        for c in 0..classes {
            let _ = write!(s, ",class{c}");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.label);
            for a in &r.test.per_class {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates every cell of `axis`.
pub fn ablate(base: &RunConfig, axis: AblationAxis, train_ds: &Dataset, test_ds: &Dataset) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_cells(base, axis) {
        let outcome = train(&cfg, train_ds, Some(test_ds), None)?;
        let test = outcome.final_eval().expect("test split given").record.clone();
        rows.push(AblationRow { label, test });
    }
    Ok(AblationTable { axis, rows })
}

/// Small model and random batch for gradient checking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub frames: usize,
    pub actors: usize,
    pub batch: usize,
    pub model: ModelConfig,
    pub mac: MacConfig,
    pub action_weight: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            frames: 3,
            actors: 4,
            batch: 2,
            model: ModelConfig {
                variant: PathVariant::Dual,
                scene_fusion: SceneFusion::Late,
                raw_dim: 6,
                scene_dim: 5,
                group_classes: 4,
                action_classes: 3,
                dims: UnitDims {
                    model: 16,
                    embed: 8,
                    heads: 2,
                    hidden: 16,
                },
                ..ModelConfig::default()
            },
            mac: MacConfig::default(),
            action_weight: 1.0,
            seed: 0,
        }
    }
}

/// Uniform random features, centers and labels.
pub fn random_batch(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (b, k, n) = (cfg.batch, cfg.frames, cfg.actors);
    let m = &cfg.model;
    let mut uniform = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let features = Tensor::new(&[b, k, n, m.raw_dim], uniform(b * k * n * m.raw_dim))?;
    let scene = Tensor::new(&[b, k, m.scene_dim], uniform(b * k * m.scene_dim))?;
    let centers = (0..b * k * n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let group_labels = (0..b).map(|_| rng.random_range(0..m.group_classes)).collect();
    let action_labels = (0..b * n).map(|_| rng.random_range(0..m.action_classes)).collect();
    Ok(Batch {
        batch: b,
        frames: k,
        actors: n,
        features,
        centers,
        scene,
        group_labels,
        action_labels,
    })
}

pub const GRADCHECK_MAX_ELEMENTS: usize = 4096;

/// Central-difference check of the full training loss over every
/// parameter tensor of a freshly initialized small model.
pub fn gradcheck_cmd(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let size = cfg.frames * cfg.actors * cfg.model.dims.model;
    if size > GRADCHECK_MAX_ELEMENTS {
        return Err(Error::Config(format!(
            "gradcheck needs K·N·C <= {GRADCHECK_MAX_ELEMENTS}, got {size}"
        )));
    }
    cfg.mac.validate()?;
    let params = init_params(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch = random_batch(cfg, &mut rng)?;
    let opts = GradCheckOptions {
        seed: cfg.seed,
        fault,
        ..GradCheckOptions::default()
    };
    finite_difference_check(
        |tape, b| Ok(objective(tape, &batch, &cfg.model, &cfg.mac, cfg.action_weight, b)?.total),
        &params,
        &opts,
    )
}

/// Attention weights of every unit of every path for one episode.
pub fn export_attention(params: &ModelParams, cfg: &RunConfig, ds: &Dataset, index: usize) -> Result<Vec<AttentionTrace>> {
    check_dataset(&cfg.model, &ds.header)?;
    check_compatible(&cfg.model, params)?;
    let episode = ds.episodes.get(index).ok_or_else(|| {
        Error::Invalid(format!("episode {index} out of range ({} episodes)", ds.episodes.len()))
    })?;
    let batch = to_batch(&ds.header, &[episode])?;
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let out = forward_model(&mut tape, &batch, &cfg.model, &b)?;
    Ok(out.paths.into_iter().flat_map(|p| p.traces).collect())
}
