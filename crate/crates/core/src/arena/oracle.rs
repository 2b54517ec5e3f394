//! Nearest-template oracles over box centers. Actor order is unknown, so
//! every cost is minimized over all actor-to-slot assignments.

use serde::Serialize;

use super::{ActivityScript, Dataset, Episode, PairKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Final-frame formation with the centroid removed.
    Spatial,
    /// Per-actor displacement relative to the first frame.
    Temporal,
    /// Both, under one shared assignment.
    Joint,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleScores {
    pub oracle: OracleKind,
    /// Accuracy over all classes.
    pub accuracy: f64,
    /// Accuracy on each partner pair, choosing only between the two.
    pub pairs: Vec<(PairKind, f64)>,
}

impl OracleScores {
    pub fn pair(&self, kind: PairKind) -> Option<f64> {
        self.pairs.iter().find(|(k, _)| *k == kind).map(|(_, a)| *a)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub episodes: usize,
    pub spatial: OracleScores,
    pub temporal: OracleScores,
    pub joint: OracleScores,
}

/// Per-actor descriptors: final-frame offset from the centroid, and the
/// displacement trajectory over frames `1..K`.
struct Descriptors {
    spatial: Vec<[f64; 2]>,
    temporal: Vec<Vec<f64>>,
}

fn describe(tracks: &[Vec<[f64; 2]>]) -> Descriptors {
    let n = tracks.len();
    let last: Vec<[f64; 2]> = tracks.iter().map(|t| *t.last().unwrap()).collect();
    let cx = last.iter().map(|c| c[0]).sum::<f64>() / n as f64;
    let cy = last.iter().map(|c| c[1]).sum::<f64>() / n as f64;
    Descriptors {
        spatial: last.iter().map(|c| [c[0] - cx, c[1] - cy]).collect(),
        temporal: tracks
            .iter()
            .map(|t| t[1..].iter().flat_map(|c| [c[0] - t[0][0], c[1] - t[0][1]]).collect())
            .collect(),
    }
}

fn episode_tracks(e: &Episode, frames: usize, actors: usize) -> Vec<Vec<[f64; 2]>> {
    (0..actors)
        .map(|i| {
            (0..frames)
                .map(|k| {
                    let o = (k * actors + i) * 2;
                    [f64::from(e.centers[o]), f64::from(e.centers[o + 1])]
                })
                .collect()
        })
        .collect()
}

fn template_tracks(s: &ActivityScript, frames: usize) -> Vec<Vec<[f64; 2]>> {
    s.slots
        .iter()
        .map(|slot| {
            (1..=frames)
                .map(|t| {
                    let d = slot.motion.displacement(t);
                    [slot.position[0] + d[0], slot.position[1] + d[1]]
                })
                .collect()
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum over permutations `p` of `Σ_i cost[i][p(i)]`, by enumeration.
fn min_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if row == cost.len() {
            *best = acc;
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

fn cost(kind: OracleKind, x: &Descriptors, t: &Descriptors) -> f64 {
    let n = x.spatial.len();
    let table: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s = sq(&x.spatial[i], &t.spatial[j]);
                    let m = sq(&x.temporal[i], &t.temporal[j]);
                    match kind {
                        OracleKind::Spatial => s,
                        OracleKind::Temporal => m,
                        OracleKind::Joint => s + m,
                    }
                })
                .collect()
        })
        .collect();
    min_assignment(&table)
}

fn argmin(costs: &[f64], among: &[usize]) -> usize {
    let mut best = among[0];
    for &c in among {
        if costs[c] < costs[best] {
            best = c;
        }
    }
    best
}

/// Runs the three oracles over a dataset generated from `scripts`.
pub fn oracle_probe(ds: &Dataset, scripts: &[ActivityScript]) -> Result<OracleReport> {
    let (k, n) = (ds.header.frames as usize, ds.header.actors as usize);
    if n > 8 {
        return Err(Error::Invalid(format!("oracle enumerates assignments, {n} actors is too many")));
    }
    if scripts.len() != ds.header.group_classes as usize || scripts.iter().any(|s| s.slots.len() != n) {
        return Err(Error::Invalid("scripts do not match the dataset header".into()));
    }
    let templates: Vec<Descriptors> = scripts.iter().map(|s| describe(&template_tracks(s, k))).collect();
    let all: Vec<usize> = (0..scripts.len()).collect();
    let kinds = [OracleKind::Spatial, OracleKind::Temporal, OracleKind::Joint];
    // [oracle][episode] → cost per class
    let costs: Vec<Vec<Vec<f64>>> = kinds
        .iter()
        .map(|&kind| {
            ds.episodes
                .iter()
                .map(|e| {
                    let d = describe(&episode_tracks(e, k, n));
                    templates.iter().map(|t| cost(kind, &d, t)).collect()
                })
                .collect()
        })
        .collect();

    let score = |oi: usize| -> OracleScores {
        let c = &costs[oi];
        let correct = ds
            .episodes
            .iter()
            .zip(c)
            .filter(|(e, cc)| argmin(cc, &all) == e.group_label as usize)
            .count();
        let mut pairs = Vec::new();
        for kind in [PairKind::Spatial, PairKind::Temporal, PairKind::Joint] {
            let members: Vec<usize> = scripts
                .iter()
                .filter(|s| s.pair == kind)
                .map(|s| s.class_id as usize)
                .collect();
            let mut hits = 0;
            let mut total = 0;
            for (e, cc) in ds.episodes.iter().zip(c) {
                let y = e.group_label as usize;
                if let Some(s) = members.contains(&y).then(|| &scripts[y]) {
                    let among = [y.min(s.partner as usize), y.max(s.partner as usize)];
                    hits += usize::from(argmin(cc, &among) == y);
                    total += 1;
                }
            }
            if total > 0 {
                pairs.push((kind, hits as f64 / total as f64));
            }
        }
        OracleScores {
            oracle: kinds[oi],
            accuracy: correct as f64 / ds.episodes.len().max(1) as f64,
            pairs,
        }
    };
    Ok(OracleReport {
        episodes: ds.episodes.len(),
        spatial: score(0),
        temporal: score(1),
        joint: score(2),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{default_scripts, generate_dataset, ArenaConfig};
    use super::*;

    #[test]
    fn assignment_brute_force() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        // best: (0→1)=1, (1→0)=2, (2→2)=2
        assert_eq!(min_assignment(&c), 5.0);
    }

    #[test]
    fn noiseless_joint_oracle_is_perfect() {
        let cfg = ArenaConfig {
            noise: 0.0,
            episodes_per_class: 6,
            test_fraction: 0.0,
            ..ArenaConfig::default()
        };
        let scripts = default_scripts();
        let (ds, _) = generate_dataset(&cfg, &scripts).unwrap();
        let r = oracle_probe(&ds, &scripts).unwrap();
        assert_eq!(r.joint.accuracy, 1.0);
        assert!(r.temporal.pair(PairKind::Spatial).unwrap() <= 0.6);
        assert!(r.spatial.pair(PairKind::Temporal).unwrap() <= 0.6);
    }
}
