use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{FramePair, Raster};
use super::render::{generate_scene, Annotation, SceneConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::mix;

pub const DATASET_VERSION: u32 = 1;

const ANNOTATIONS: &str = "annotations.jsonl";
const VOCAB: &str = "vocab.json";
const SPLITS: &str = "splits.json";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl Splits {
    /// Shuffles scene groups (`frame_id / group_size`) and assigns the first
    /// `round(fraction * groups)` to train.
    pub fn by_scene_group(frame_ids: &[u32], group_size: usize, train_fraction: f64, seed: u64) -> Splits {
        let group_size = group_size.max(1) as u32;
        let mut groups: Vec<u32> = frame_ids.iter().map(|id| id / group_size).collect();
        groups.sort_unstable();
        groups.dedup();
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5b1175)));
        let n_train = (train_fraction.clamp(0.0, 1.0) * groups.len() as f64).round() as usize;
        let train_groups: std::collections::HashSet<u32> = groups[..n_train].iter().copied().collect();
        let mut s = Splits::default();
        for &id in frame_ids {
            if train_groups.contains(&(id / group_size)) {
                s.train.push(id);
            } else {
                s.test.push(id);
            }
        }
        s.train.sort_unstable();
        s.test.sort_unstable();
        s
    }

    pub fn split_of(&self, frame_id: u32) -> Option<Split> {
        if self.train.contains(&frame_id) {
            Some(Split::Train)
        } else if self.test.contains(&frame_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u32,
    pub highres: Raster,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub num_frames: usize,
    pub config: SceneConfig,
    /// Relative path to CRC32 of the file bytes.
    pub files: BTreeMap<String, u32>,
}

/// In-memory dataset. Frames are sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub vocab: Vec<String>,
    pub frames: Vec<Frame>,
    pub splits: Splits,
}

impl Dataset {
    pub fn generate(config: &SceneConfig, num_frames: usize, train_fraction: f64, group_size: usize) -> Result<Dataset> {
        config.validate()?;
        let mut frames = Vec::with_capacity(num_frames);
        for id in 0..num_frames as u32 {
            let (pair, annotations) = generate_scene(config, id)?;
            frames.push(Frame { frame_id: id, highres: pair.highres, annotations });
        }
        let ids: Vec<u32> = (0..num_frames as u32).collect();
        let splits = Splits::by_scene_group(&ids, group_size, train_fraction, config.seed);
        Ok(Dataset { config: config.clone(), vocab: config.vocabulary(), frames, splits })
    }

    pub fn frame(&self, frame_id: u32) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&frame_id, |f| f.frame_id)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn lowres(&self, frame: &Frame) -> Raster {
        frame.highres.downscale_area(self.config.lowres, self.config.lowres)
    }

    pub fn frame_pair(&self, frame: &Frame) -> FramePair {
        FramePair::new(frame.highres.clone(), self.config.lowres)
    }

    pub fn split(&self, split: Split) -> Vec<&Frame> {
        self.splits.ids(split).iter().filter_map(|&id| self.frame(id)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir.join("frames"))?;
        let mut files = BTreeMap::new();
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            write_atomic(&dir.join(&rel), &bytes)?;
            files.insert(rel, crc32fast::hash(&bytes));
            Ok(())
        };
        let mut jsonl = Vec::new();
        for f in &self.frames {
            put(format!("frames/{}.png", f.frame_id), f.highres.encode_png()?)?;
            for a in &f.annotations {
                serde_json::to_writer(&mut jsonl, a)?;
                jsonl.push(b'\n');
            }
        }
        put(ANNOTATIONS.into(), jsonl)?;
        put(VOCAB.into(), serde_json::to_vec_pretty(&self.vocab)?)?;
        put(SPLITS.into(), serde_json::to_vec_pretty(&self.splits)?)?;
        let manifest = Manifest {
            version: DATASET_VERSION,
            seed: self.config.seed,
            num_frames: self.frames.len(),
            config: self.config.clone(),
            files,
        };
        write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(
            &fs::read(&manifest_path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?,
        )?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                manifest.version
            )));
        }
        let read = |rel: &str| -> Result<Vec<u8>> {
            let expected = *manifest
                .files
                .get(rel)
                .ok_or_else(|| Error::Dataset(format!("manifest does not list {rel}")))?;
            let path = dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let found = crc32fast::hash(&bytes);
            if found != expected {
                return Err(Error::Crc { path, expected, found });
            }
            Ok(bytes)
        };

        let mut by_frame: BTreeMap<u32, Vec<Annotation>> = BTreeMap::new();
        let text = String::from_utf8(read(ANNOTATIONS)?)
            .map_err(|_| Error::Dataset(format!("{ANNOTATIONS} is not UTF-8")))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let a: Annotation = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("{ANNOTATIONS} line {}: {e}", i + 1)))?;
            by_frame.entry(a.frame_id).or_default().push(a);
        }
        let vocab: Vec<String> = serde_json::from_slice(&read(VOCAB)?)?;
        let splits: Splits = serde_json::from_slice(&read(SPLITS)?)?;

        let mut ids: Vec<u32> = manifest
            .files
            .keys()
            .filter_map(|k| k.strip_prefix("frames/")?.strip_suffix(".png")?.parse().ok())
            .collect();
        ids.sort_unstable();
        if ids.len() != manifest.num_frames {
            return Err(Error::Dataset(format!(
                "manifest lists {} frames but declares {}",
                ids.len(),
                manifest.num_frames
            )));
        }
        let mut frames = Vec::with_capacity(ids.len());
        for id in ids {
            let highres = Raster::decode_png(&read(&format!("frames/{id}.png"))?)?;
            let annotations = by_frame.remove(&id).unwrap_or_default();
            for a in &annotations {
                if let Some(w) = a.actions.iter().find(|w| !vocab.contains(w)) {
                    return Err(Error::Dataset(format!("frame {id}: action {w:?} not in vocabulary")));
                }
            }
            frames.push(Frame { frame_id: id, highres, annotations });
        }
        if let Some(id) = by_frame.keys().next() {
            return Err(Error::Dataset(format!("annotations reference unknown frame {id}")));
        }
        Ok(Dataset { config: manifest.config, vocab, frames, splits })
    }
}
