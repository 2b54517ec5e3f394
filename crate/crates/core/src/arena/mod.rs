//! Synthetic group-activity episodes.
//!
//! Each class is a formation of actor slots with a motion per slot. Class
//! pairs are built so that one pair differs only in formation, one only in
//! timing and one only in which actors move where. Per-actor raw features
//! are `[x, y, vx, vy, action one-hot (4), appearance (4)]`.

mod format;
mod oracle;
mod script;

pub use format::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, write_metadata, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use oracle::{oracle_probe, OracleKind, OracleReport, OracleScores};
pub use script::{
    default_scripts, ActivityScript, Motion, PairKind, Slot, ACTION_NAMES, HOP_HEIGHT, STRIDE,
};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Batch;

/// Width of the raw actor feature vector.
pub const RAW_FEATURE_DIM: usize = 12;
/// Center jitter per unit of noise.
const CENTER_JITTER: f64 = 0.75;
/// Half-width of the per-episode uniform translation.
const TRANSLATION: f64 = 0.12;
const VELOCITY_SCALE: f64 = 5.0;
const POSITION_SCALE: f64 = 2.0;
const APPEARANCE_STD: f64 = 0.5;
/// Scene clutter per unit of noise.
const CLUTTER: f64 = 7.5;
/// Feature noise per unit of noise.
const FEATURE_NOISE: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub frames: u32,
    pub actors: u32,
    pub feature_dim: u32,
    pub scene_dim: u32,
    pub group_classes: u32,
    pub action_classes: u32,
    pub episodes: u64,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frames,
            self.actors,
            self.feature_dim,
            self.scene_dim,
            self.group_classes,
            self.action_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("dataset header has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    pub fn features_len(&self) -> usize {
        (self.frames * self.actors * self.feature_dim) as usize
    }

    pub fn centers_len(&self) -> usize {
        (self.frames * self.actors * 2) as usize
    }

    pub fn scene_len(&self) -> usize {
        (self.frames * self.scene_dim) as usize
    }
}

/// One labeled clip. Values are stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[K, N, D]`
    pub features: Vec<f32>,
    /// `[K, N, 2]`, inside the unit square.
    pub centers: Vec<f32>,
    /// `[K, S]`
    pub scene: Vec<f32>,
    pub group_label: u16,
    pub action_labels: Vec<u16>,
}

impl Episode {
    pub fn check(&self, h: &DatasetHeader) -> Result<()> {
        if self.features.len() != h.features_len()
            || self.centers.len() != h.centers_len()
            || self.scene.len() != h.scene_len()
            || self.action_labels.len() != h.actors as usize
        {
            return Err(Error::Invalid("episode sizes disagree with the header".into()));
        }
        if u32::from(self.group_label) >= h.group_classes
            || self.action_labels.iter().any(|&a| u32::from(a) >= h.action_classes)
        {
            return Err(Error::Invalid("episode label out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArenaConfig {
    pub frames: usize,
    pub scene_dim: usize,
    pub noise: f64,
    pub episodes_per_class: usize,
    /// Share of each class held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        ArenaConfig {
            frames: 3,
            scene_dim: 12,
            noise: 0.1,
            episodes_per_class: 200,
            test_fraction: 0.25,
            seed: 7,
        }
    }
}

impl ArenaConfig {
    pub fn validate(&self, scripts: &[ActivityScript]) -> Result<()> {
        if self.frames == 0 || self.scene_dim == 0 || self.episodes_per_class == 0 {
            return Err(Error::Config("frames, scene_dim and episodes_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        let n = scripts.first().map_or(0, |s| s.slots.len());
        if n == 0 || scripts.iter().any(|s| s.slots.len() != n) {
            return Err(Error::Config("scripts must share a positive actor count".into()));
        }
        for (i, s) in scripts.iter().enumerate() {
            if s.class_id as usize != i {
                return Err(Error::Config(format!("script {i} has class id {}", s.class_id)));
            }
        }
        Ok(())
    }

    pub fn header(&self, scripts: &[ActivityScript], episodes: usize) -> DatasetHeader {
        DatasetHeader {
            frames: self.frames as u32,
            actors: scripts[0].slots.len() as u32,
            feature_dim: RAW_FEATURE_DIM as u32,
            scene_dim: self.scene_dim as u32,
            group_classes: scripts.len() as u32,
            action_classes: ACTION_NAMES.len() as u32,
            episodes: episodes as u64,
            seed: self.seed,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

/// Renders one episode. Fully determined by `(script, frames, scene_dim,
/// noise, seed)`.
pub fn generate_episode(
    script: &ActivityScript,
    frames: usize,
    scene_dim: usize,
    noise: f64,
    seed: u64,
) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = script.slots.len();
    let d = RAW_FEATURE_DIM;
    let shift = [
        rng.random_range(-TRANSLATION..=TRANSLATION),
        rng.random_range(-TRANSLATION..=TRANSLATION),
    ];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let appearance: Vec<[f64; 4]> = (0..n)
        .map(|_| std::array::from_fn(|_| gaussian(&mut rng, APPEARANCE_STD)))
        .collect();
    let jitter = noise * CENTER_JITTER;

    let place = |rng: &mut ChaCha8Rng, slot: &Slot, t: usize| -> [f64; 2] {
        let disp = slot.motion.displacement(t);
        std::array::from_fn(|a| {
            (slot.position[a] + shift[a] + disp[a] + gaussian(rng, jitter)).clamp(0.0, 1.0)
        })
    };
    let mut prev: Vec<[f64; 2]> = order.iter().map(|&s| place(&mut rng, &script.slots[s], 0)).collect();

    let mut features = Vec::with_capacity(frames * n * d);
    let mut centers = Vec::with_capacity(frames * n * 2);
    let mut scene = Vec::with_capacity(frames * scene_dim);
    for k in 0..frames {
        let mut mean = [0.0; RAW_FEATURE_DIM];
        for (i, &s) in order.iter().enumerate() {
            let slot = &script.slots[s];
            let c = place(&mut rng, slot, k + 1);
            let mut f = [0.0; RAW_FEATURE_DIM];
            f[0] = (c[0] - 0.5) * POSITION_SCALE;
            f[1] = (c[1] - 0.5) * POSITION_SCALE;
            f[2] = (c[0] - prev[i][0]) * VELOCITY_SCALE;
            f[3] = (c[1] - prev[i][1]) * VELOCITY_SCALE;
            f[4 + slot.motion.action() as usize] = 1.0;
            f[8..12].copy_from_slice(&appearance[i]);
            for v in f.iter_mut() {
                *v += gaussian(&mut rng, noise * FEATURE_NOISE);
            }
            for (m, v) in mean.iter_mut().zip(&f) {
                *m += v / n as f64;
            }
            features.extend(f.iter().map(|&v| v as f32));
            centers.extend(c.iter().map(|&v| v as f32));
            prev[i] = c;
        }
        for j in 0..scene_dim {
            let base = if j < d { mean[j] } else { 0.0 };
            scene.push((base + gaussian(&mut rng, noise * CLUTTER)) as f32);
        }
    }
    Episode {
        features,
        centers,
        scene,
        group_label: script.class_id,
        action_labels: order.iter().map(|&s| script.slots[s].motion.action()).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn group_labels(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.group_label as usize).collect()
    }

    /// Episodes at the given indices, header count updated.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: DatasetHeader {
                episodes: indices.len() as u64,
                ..self.header
            },
            episodes: indices.iter().map(|&i| self.episodes[i].clone()).collect(),
        }
    }
}

/// Class-balanced train and test sets. Every episode gets its own seed drawn
/// from the master seed; the two splits never share one.
pub fn generate_dataset(
    cfg: &ArenaConfig,
    scripts: &[ActivityScript],
) -> Result<(Dataset, Dataset)> {
    cfg.validate(scripts)?;
    let per_class = cfg.episodes_per_class;
    let test_per_class = (per_class as f64 * cfg.test_fraction).round() as usize;
    let train_per_class = per_class - test_per_class;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seeds = |count: usize| -> Vec<u64> { (0..count).map(|_| master.random()).collect() };
    let train_seeds = seeds(train_per_class * scripts.len());
    let test_seeds = seeds(test_per_class * scripts.len());
    let train_set: HashSet<u64> = train_seeds.iter().copied().collect();
    assert!(
        train_set.len() == train_seeds.len() && test_seeds.iter().all(|s| !train_set.contains(s)),
        "episode seeds collide"
    );

    let build = |seeds: &[u64], count: usize| -> Dataset {
        // class-interleaved order: episode i belongs to class i % G
        let episodes: Vec<Episode> = (0..count * scripts.len())
            .map(|i| {
                let script = &scripts[i % scripts.len()];
                generate_episode(script, cfg.frames, cfg.scene_dim, cfg.noise, seeds[i])
            })
            .collect();
        Dataset {
            header: cfg.header(scripts, episodes.len()),
            episodes,
        }
    };
    Ok((build(&train_seeds, train_per_class), build(&test_seeds, test_per_class)))
}

/// Stratified subset for data ratio `r`: per class, a prefix of a fixed
/// seeded permutation of that class's episodes, `max(1, round(r · n_c))`
/// long. Subsets for smaller ratios are contained in larger ones.
pub fn subsample(labels: &[usize], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("data ratio must lie in (0, 1], got {ratio}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut picked = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        members.shuffle(&mut rng);
        let keep = ((ratio * members.len() as f64).round() as usize).clamp(1, members.len());
        picked.extend_from_slice(&members[..keep]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Stacks episodes into a model batch, promoting to double precision.
pub fn to_batch(header: &DatasetHeader, episodes: &[&Episode]) -> Result<Batch> {
    if episodes.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (k, n, d, s) = (
        header.frames as usize,
        header.actors as usize,
        header.feature_dim as usize,
        header.scene_dim as usize,
    );
    let b = episodes.len();
    let mut features = Vec::with_capacity(b * k * n * d);
    let mut centers = Vec::with_capacity(b * k * n);
    let mut scene = Vec::with_capacity(b * k * s);
    let mut group_labels = Vec::with_capacity(b);
    let mut action_labels = Vec::with_capacity(b * n);
    for e in episodes {
        e.check(header)?;
        features.extend(e.features.iter().map(|&v| f64::from(v)));
        centers.extend(e.centers.chunks(2).map(|c| [f64::from(c[0]), f64::from(c[1])]));
        scene.extend(e.scene.iter().map(|&v| f64::from(v)));
        group_labels.push(e.group_label as usize);
        action_labels.extend(e.action_labels.iter().map(|&a| a as usize));
    }
    Ok(Batch {
        batch: b,
        frames: k,
        actors: n,
        features: Tensor::new(&[b, k, n, d], features)?,
        centers,
        scene: Tensor::new(&[b, k, s], scene)?,
        group_labels,
        action_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArenaConfig {
        ArenaConfig {
            episodes_per_class: 10,
            test_fraction: 0.2,
            ..ArenaConfig::default()
        }
    }

    #[test]
    fn deterministic_episode() {
        let s = &default_scripts()[3];
        for noise in [0.0, 0.1] {
            assert_eq!(generate_episode(s, 3, 12, noise, 5), generate_episode(s, 3, 12, noise, 5));
        }
        assert_ne!(generate_episode(s, 3, 12, 0.1, 5), generate_episode(s, 3, 12, 0.1, 6));
    }

    #[test]
    fn centers_in_unit_square_even_with_heavy_noise() {
        for s in default_scripts() {
            let e = generate_episode(&s, 3, 12, 3.0, 1);
            assert!(e.centers.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn balanced_and_disjoint_splits() {
        let scripts = default_scripts();
        let (train, test) = generate_dataset(&small(), &scripts).unwrap();
        assert_eq!(train.episodes.len(), 48);
        assert_eq!(test.episodes.len(), 12);
        for c in 0..6 {
            assert_eq!(train.group_labels().iter().filter(|&&l| l == c).count(), 8);
        }
        for e in train.episodes.iter().chain(&test.episodes) {
            e.check(&train.header).unwrap();
        }
    }

    #[test]
    fn four_classes_ten_each() {
        let scripts: Vec<_> = default_scripts().into_iter().take(4).collect();
        let cfg = ArenaConfig {
            episodes_per_class: 10,
            test_fraction: 0.0,
            ..ArenaConfig::default()
        };
        let (train, test) = generate_dataset(&cfg, &scripts).unwrap();
        assert_eq!(train.episodes.len(), 40);
        assert!(test.episodes.is_empty());
        let labels = train.group_labels();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 10);
        }
        let half = subsample(&labels, 0.5, 3).unwrap();
        assert_eq!(half.len(), 20);
        for c in 0..4 {
            let k = half.iter().filter(|&&i| labels[i] == c).count();
            assert!((4..=6).contains(&k));
        }
    }

    #[test]
    fn subsets_nest() {
        let labels: Vec<usize> = (0..120).map(|i| i % 6).collect();
        let mut prev: Option<Vec<usize>> = None;
        for r in [0.05, 0.1, 0.25, 0.5, 1.0] {
            let s = subsample(&labels, r, 11).unwrap();
            if let Some(p) = prev {
                assert!(p.iter().all(|i| s.contains(i)));
            }
            prev = Some(s);
        }
        assert!(subsample(&labels, 0.0, 1).is_err());
        assert_eq!(subsample(&labels, 1.0, 1).unwrap().len(), 120);
    }

    #[test]
    fn batch_shapes() {
        let (train, _) = generate_dataset(&small(), &default_scripts()).unwrap();
        let refs: Vec<&Episode> = train.episodes.iter().take(3).collect();
        let b = to_batch(&train.header, &refs).unwrap();
        assert_eq!(b.features.shape(), &[3, 3, 6, 12]);
        assert_eq!(b.scene.shape(), &[3, 3, 12]);
        assert_eq!(b.centers.len(), 54);
        assert_eq!(b.action_labels.len(), 18);
    }
}
