use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::{PositionEncoding, UnitDims, UnitKind};

/// Arrangement of relation units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PathVariant {
    /// Two stacked spatial units.
    SS,
    /// Two stacked temporal units.
    TT,
    /// Spatial then temporal.
    ST,
    /// Temporal then spatial.
    TS,
    /// ST and TS side by side, predictions averaged.
    Dual,
}

impl PathVariant {
    pub const ALL: [PathVariant; 5] = [
        PathVariant::SS,
        PathVariant::TT,
        PathVariant::ST,
        PathVariant::TS,
        PathVariant::Dual,
    ];

    pub fn paths(self) -> &'static [PathKind] {
        match self {
            PathVariant::SS => &[PathKind::SS],
            PathVariant::TT => &[PathKind::TT],
            PathVariant::ST => &[PathKind::ST],
            PathVariant::TS => &[PathKind::TS],
            PathVariant::Dual => &[PathKind::ST, PathKind::TS],
        }
    }
}

impl fmt::Display for PathVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PathVariant::SS => "SS",
            PathVariant::TT => "TT",
            PathVariant::ST => "ST",
            PathVariant::TS => "TS",
            PathVariant::Dual => "DUAL",
        };
        f.write_str(s)
    }
}

impl FromStr for PathVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SS" | "S-S" => Ok(PathVariant::SS),
            "TT" | "T-T" => Ok(PathVariant::TT),
            "ST" | "S-T" => Ok(PathVariant::ST),
            "TS" | "T-S" => Ok(PathVariant::TS),
            "DUAL" | "ST-TS" => Ok(PathVariant::Dual),
            _ => Err(Error::Config(format!("unknown path variant `{s}`"))),
        }
    }
}

/// One composed path: inner unit, MLP bridge with residual, outer unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PathKind {
    ST,
    TS,
    SS,
    TT,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            PathKind::ST => "st",
            PathKind::TS => "ts",
            PathKind::SS => "ss",
            PathKind::TT => "tt",
        }
    }

    /// Inner and outer unit kinds.
    pub fn units(self) -> [UnitKind; 2] {
        use UnitKind::{Spatial as S, Temporal as T};
        match self {
            PathKind::ST => [S, T],
            PathKind::TS => [T, S],
            PathKind::SS => [S, S],
            PathKind::TT => [T, T],
        }
    }
}

/// Where frame-level scene context enters the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFusion {
    None,
    /// Projected scene feature added to every actor before the paths.
    Early,
    /// Projected scene feature added between the two units of each path.
    Middle,
    /// Separate scene classifier averaged into the group logits.
    Late,
}

impl SceneFusion {
    pub const ALL: [SceneFusion; 4] = [
        SceneFusion::None,
        SceneFusion::Early,
        SceneFusion::Middle,
        SceneFusion::Late,
    ];
}

impl fmt::Display for SceneFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SceneFusion::None => "none",
            SceneFusion::Early => "early",
            SceneFusion::Middle => "middle",
            SceneFusion::Late => "late",
        };
        f.write_str(s)
    }
}

impl FromStr for SceneFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "w/o" => Ok(SceneFusion::None),
            "early" => Ok(SceneFusion::Early),
            "middle" => Ok(SceneFusion::Middle),
            "late" => Ok(SceneFusion::Late),
            _ => Err(Error::Config(format!("unknown scene fusion `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: PathVariant,
    pub scene_fusion: SceneFusion,
    /// Raw actor feature width, embedded to `dims.model`.
    pub raw_dim: usize,
    pub scene_dim: usize,
    pub group_classes: usize,
    pub action_classes: usize,
    pub dims: UnitDims,
    #[serde(skip)]
    pub position_encoding: PositionEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: PathVariant::Dual,
            scene_fusion: SceneFusion::Late,
            raw_dim: 12,
            scene_dim: 12,
            group_classes: 6,
            action_classes: 4,
            dims: UnitDims {
                model: 64,
                embed: 32,
                heads: 4,
                hidden: 64,
            },
            position_encoding: PositionEncoding::Enabled,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.dims.model % 4 != 0 {
            return Err(Error::Config(format!(
                "model width {} must be divisible by 4 for the spatial encoding",
                self.dims.model
            )));
        }
        for (what, v) in [
            ("raw_dim", self.raw_dim),
            ("scene_dim", self.scene_dim),
            ("group_classes", self.group_classes),
            ("action_classes", self.action_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be positive")));
            }
        }
        Ok(())
    }
}
