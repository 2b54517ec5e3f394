//! Little-endian binary dataset files.
//!
//! ```text
//! magic "DAID" | version u32 | K N D S G A u32 | episodes u64 | seed u64
//! per episode: features f32[K·N·D] | centers f32[K·N·2] | scene f32[K·S]
//!              | group u16 | actions u16[N]
//! ```

use std::fs;
use std::path::Path;

use serde_json::json;

use super::{ActivityScript, Dataset, DatasetHeader, Episode};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"DAID";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let h = &ds.header;
    h.validate()?;
    if h.episodes != ds.episodes.len() as u64 {
        return Err(Error::Invalid(format!(
            "header announces {} episodes, dataset holds {}",
            h.episodes,
            ds.episodes.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [h.frames, h.actors, h.feature_dim, h.scene_dim, h.group_classes, h.action_classes] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.episodes.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    for e in &ds.episodes {
        e.check(h)?;
        for v in e.features.iter().chain(&e.centers).chain(&e.scene) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&e.group_label.to_le_bytes());
        for a in &e.action_labels {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a dataset file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported dataset version {version}"),
        });
    }
    let mut dims = [0u32; 6];
    for (d, name) in dims.iter_mut().zip(["K", "N", "D", "S", "G", "A"]) {
        *d = r.u32(name)?;
    }
    let [frames, actors, feature_dim, scene_dim, group_classes, action_classes] = dims;
    let header = DatasetHeader {
        frames,
        actors,
        feature_dim,
        scene_dim,
        group_classes,
        action_classes,
        episodes: r.u64("episode count")?,
        seed: r.u64("seed")?,
    };
    header.validate().map_err(|e| Error::Format {
        offset: 8,
        msg: e.to_string(),
    })?;
    let per_episode = 4 * (header.features_len() + header.centers_len() + header.scene_len())
        + 2 * (1 + actors as usize);
    let payload = (bytes.len() - r.pos) as u64;
    if payload / per_episode as u64 > header.episodes {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!(
                "payload of {payload} bytes is longer than {} episodes of {per_episode} bytes",
                header.episodes
            ),
        });
    }
    let mut episodes = Vec::with_capacity(header.episodes as usize);
    for i in 0..header.episodes {
        let start = r.pos as u64;
        let features = r.f32s(header.features_len(), &format!("features of episode {i}"))?;
        let centers = r.f32s(header.centers_len(), &format!("centers of episode {i}"))?;
        let scene = r.f32s(header.scene_len(), &format!("scene of episode {i}"))?;
        let group_label = r.u16("group label")?;
        let action_labels = (0..actors)
            .map(|_| r.u16("action label"))
            .collect::<Result<Vec<_>>>()?;
        let e = Episode {
            features,
            centers,
            scene,
            group_label,
            action_labels,
        };
        e.check(&header).map_err(|err| Error::Format {
            offset: start,
            msg: format!("episode {i}: {err}"),
        })?;
        episodes.push(e);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after the last episode", bytes.len() - r.pos),
        });
    }
    Ok(Dataset { header, episodes })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Human-readable companion: header echo plus the class scripts.
pub fn write_metadata(
    header: &DatasetHeader,
    scripts: &[ActivityScript],
    noise: f64,
    path: &Path,
) -> Result<()> {
    let doc = json!({
        "header": header,
        "noise": noise,
        "actions": super::ACTION_NAMES,
        "feature_layout": ["x", "y", "vx", "vy", "still", "hop", "sidestep", "advance",
                           "app0", "app1", "app2", "app3"],
        "scripts": scripts,
    });
    let text = serde_json::to_string_pretty(&doc).expect("metadata serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
