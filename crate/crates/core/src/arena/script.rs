use serde::{Deserialize, Serialize};

/// Hop height in normalized image units.
pub const HOP_HEIGHT: f64 = 0.08;
/// Per-frame step of steady motions.
pub const STRIDE: f64 = 0.04;

/// Per-actor motion over time steps `0..=K`; step 0 precedes the first
/// observed frame and only feeds the first velocity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Still,
    /// Raised at time step `onset`, at rest otherwise.
    Hop { onset: usize },
    Sidestep,
    Advance,
}

impl Motion {
    /// Displacement from the template position at time step `t`.
    pub fn displacement(self, t: usize) -> [f64; 2] {
        match self {
            Motion::Still => [0.0, 0.0],
            Motion::Hop { onset } => {
                if t == onset {
                    [0.0, -HOP_HEIGHT]
                } else {
                    [0.0, 0.0]
                }
            }
            Motion::Sidestep => [STRIDE * t as f64, 0.0],
            Motion::Advance => [0.0, STRIDE * t as f64],
        }
    }

    /// Individual action label.
    pub fn action(self) -> u16 {
        match self {
            Motion::Still => 0,
            Motion::Hop { .. } => 1,
            Motion::Sidestep => 2,
            Motion::Advance => 3,
        }
    }
}

pub const ACTION_NAMES: [&str; 4] = ["still", "hop", "sidestep", "advance"];

/// Which single cue separates a class from its partner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Same motions, different formation.
    Spatial,
    /// Same formation, different timing.
    Temporal,
    /// Same formation and the same multiset of motions; only who moves
    /// where differs.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub position: [f64; 2],
    pub motion: Motion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityScript {
    pub class_id: u16,
    pub name: String,
    pub pair: PairKind,
    pub partner: u16,
    pub slots: Vec<Slot>,
}

impl ActivityScript {
    pub fn actions(&self) -> Vec<u16> {
        self.slots.iter().map(|s| s.motion.action()).collect()
    }
}

fn slots(positions: &[[f64; 2]], motions: &[Motion]) -> Vec<Slot> {
    positions
        .iter()
        .zip(motions)
        .map(|(&position, &motion)| Slot { position, motion })
        .collect()
}

/// The six default classes for six actors, as three partner pairs.
pub fn default_scripts() -> Vec<ActivityScript> {
    use Motion::*;
    let xs = [0.25, 0.35, 0.45, 0.55, 0.65, 0.75];
    let line: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 0.5]).collect();
    let arc: Vec<[f64; 2]> = xs
        .iter()
        .map(|&x: &f64| {
            let u = (x - 0.5) / 0.25;
            [x, 0.58 - 0.16 * (1.0 - u * u)]
        })
        .collect();
    let clusters = vec![
        [0.28, 0.45],
        [0.36, 0.55],
        [0.24, 0.58],
        [0.72, 0.45],
        [0.64, 0.55],
        [0.76, 0.58],
    ];
    let rows = vec![
        [0.3, 0.6],
        [0.5, 0.6],
        [0.7, 0.6],
        [0.3, 0.4],
        [0.5, 0.4],
        [0.7, 0.4],
    ];
    let mixed = [Advance, Sidestep, Advance, Sidestep, Advance, Sidestep];
    let early = [Hop { onset: 1 }; 6];
    let late = [Hop { onset: 2 }; 6];
    let h = Hop { onset: 2 };
    let front = [h, h, h, Still, Still, Still];
    let back = [Still, Still, Still, h, h, h];

    let mk = |id: u16, name: &str, pair, partner, s| ActivityScript {
        class_id: id,
        name: name.to_string(),
        pair,
        partner,
        slots: s,
    };
    vec![
        mk(0, "line-march", PairKind::Spatial, 1, slots(&line, &mixed)),
        mk(1, "arc-march", PairKind::Spatial, 0, slots(&arc, &mixed)),
        mk(2, "clusters-early-hop", PairKind::Temporal, 3, slots(&clusters, &early)),
        mk(3, "clusters-late-hop", PairKind::Temporal, 2, slots(&clusters, &late)),
        mk(4, "rows-front-hop", PairKind::Joint, 5, slots(&rows, &front)),
        mk(5, "rows-back-hop", PairKind::Joint, 4, slots(&rows, &back)),
    ]
}
