//! On-disk dataset format and label hierarchy.
//!
//! A dataset directory holds a `manifest.json` plus one binary feature
//! file per video (`HAANFEAT` magic, little-endian u32 clip count and
//! feature dimension, then row-major f32 clip features). Temporal
//! segment annotations are optional and only needed for evaluation;
//! training consumes video-level labels alone.

mod split;
mod synth;

pub use split::{greedy_split, SplitResult};
pub use synth::{generate_synthetic, SynthConfig, SynthOutput};

use crate::error::{Error, Result};
use crate::Tensor32;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 8] = b"HAANFEAT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATOMIC_TRUTH_FILE: &str = "atomic_truth.json";
pub const BACKGROUND_ID: i64 = -1;

/// Fine class set, coarse class set, and the coarse→fine grouping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelHierarchy {
    pub fine: Vec<String>,
    pub coarse: Vec<String>,
    /// `grouping[u]` lists the fine class indices in coarse class `u`.
    pub grouping: Vec<Vec<usize>>,
}

impl LabelHierarchy {
    pub fn num_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse.len()
    }

    /// Checks that the grouping is a partition of the fine classes with
    /// no empty coarse class.
    pub fn validate(&self) -> Result<()> {
        if self.grouping.len() != self.coarse.len() {
            return Err(Error::Config(format!(
                "{} coarse classes but {} grouping entries",
                self.coarse.len(),
                self.grouping.len()
            )));
        }
        let mut owner = vec![None; self.fine.len()];
        for (u, group) in self.grouping.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!(
                    "coarse class '{}' groups no fine classes",
                    self.coarse[u]
                )));
            }
            for &j in group {
                if j >= self.fine.len() {
                    return Err(Error::Config(format!(
                        "grouping for '{}' references fine index {} out of {}",
                        self.coarse[u],
                        j,
                        self.fine.len()
                    )));
                }
                if let Some(prev) = owner[j] {
                    let prev: usize = prev;
                    return Err(Error::Config(format!(
                        "fine class '{}' grouped under both '{}' and '{}'",
                        self.fine[j], self.coarse[prev], self.coarse[u]
                    )));
                }
                owner[j] = Some(u);
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::Config(format!(
                "fine class '{}' belongs to no coarse class",
                self.fine[j]
            )));
        }
        Ok(())
    }

    /// Coarse class owning the given fine class.
    pub fn coarse_of(&self, fine: usize) -> usize {
        self.grouping
            .iter()
            .position(|g| g.contains(&fine))
            .expect("validated hierarchy covers every fine class")
    }
}

/// Maps a multi-hot fine label vector to the multi-hot coarse vector:
/// a coarse class is positive iff any of its fine classes is.
pub fn coarse_labels_from_fine(fine: &[bool], hierarchy: &LabelHierarchy) -> Vec<bool> {
    hierarchy
        .grouping
        .iter()
        .map(|group| group.iter().any(|&j| fine[j]))
        .collect()
}

/// A temporally annotated action instance, in half-open clip indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SegmentAnnotation {
    pub fine_class: usize,
    pub start_clip: usize,
    pub end_clip: usize,
    /// Generator-known atomic id sequence; synthetic data only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atomic_sequence: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub num_clips: usize,
    /// Indices of the positive fine classes.
    pub fine_labels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentAnnotation>>,
    pub feature_file: String,
}

impl VideoRecord {
    pub fn multi_hot(&self, num_fine: usize) -> Vec<bool> {
        let mut y = vec![false; num_fine];
        for &j in &self.fine_labels {
            y[j] = true;
        }
        y
    }

    fn validate(&self, num_fine: usize) -> Result<()> {
        let fail = |details: String| Error::Data {
            video: self.id.clone(),
            details,
        };
        if self.num_clips == 0 {
            return Err(fail("zero clips".to_string()));
        }
        if self.fine_labels.is_empty() {
            return Err(fail("no positive fine label".to_string()));
        }
        if let Some(&bad) = self.fine_labels.iter().find(|&&j| j >= num_fine) {
            return Err(fail(format!("fine label {} out of {}", bad, num_fine)));
        }
        if let Some(segments) = &self.segments {
            for s in segments {
                if s.start_clip >= s.end_clip || s.end_clip > self.num_clips {
                    return Err(fail(format!(
                        "segment [{}, {}) outside [0, {})",
                        s.start_clip, s.end_clip, self.num_clips
                    )));
                }
                if s.fine_class >= num_fine {
                    return Err(fail(format!(
                        "segment class {} out of {}",
                        s.fine_class, num_fine
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub feature_dim: usize,
    pub hierarchy: LabelHierarchy,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            v.validate(self.hierarchy.num_fine())?;
            if !seen.insert(&v.id) {
                return Err(Error::Config(format!("duplicate video id '{}'", v.id)));
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }
}

/// A validated dataset rooted at a directory; features load on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    /// Loads and validates `manifest.json` and every feature file header.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", manifest_path.display(), e)))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        for v in &manifest.videos {
            let path = root.join(&v.feature_file);
            let (t, d) = read_feature_header(&path).map_err(|e| Error::Data {
                video: v.id.clone(),
                details: format!("{}: {}", path.display(), e),
            })?;
            if t as usize != v.num_clips || d as usize != manifest.feature_dim {
                return Err(Error::Data {
                    video: v.id.clone(),
                    details: format!(
                        "feature header {}x{} but manifest says {}x{}",
                        t, d, v.num_clips, manifest.feature_dim
                    ),
                });
            }
        }
        Ok(Dataset { manifest, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Reads one video's T×d feature matrix, checking finiteness.
    pub fn features(&self, video: &VideoRecord) -> Result<Tensor32> {
        let path = self.root.join(&video.feature_file);
        let t = read_features(&path).map_err(|e| Error::Data {
            video: video.id.clone(),
            details: e.to_string(),
        })?;
        if !t.all_finite() {
            return Err(Error::Data {
                video: video.id.clone(),
                details: "non-finite feature values".to_string(),
            });
        }
        Ok(t)
    }

    pub fn video(&self, id: &str) -> Result<&VideoRecord> {
        self.manifest.video(id).ok_or_else(|| Error::Data {
            video: id.to_string(),
            details: "not in manifest".to_string(),
        })
    }
}

/// Writes a dataset directory. Refuses to overwrite an existing
/// manifest unless `force` is set.
pub fn save_dataset(
    manifest: &DatasetManifest,
    features: &BTreeMap<String, Tensor32>,
    root: impl AsRef<Path>,
    force: bool,
) -> Result<()> {
    manifest.validate()?;
    let root = root.as_ref();
    if root.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::Config(format!(
            "dataset already exists at {}; pass force to overwrite",
            root.display()
        )));
    }
    fs::create_dir_all(root)?;
    for v in &manifest.videos {
        let t = features.get(&v.id).ok_or_else(|| Error::Data {
            video: v.id.clone(),
            details: "no features provided".to_string(),
        })?;
        let (rows, cols) = t.dims2()?;
        if rows != v.num_clips || cols != manifest.feature_dim {
            return Err(Error::Data {
                video: v.id.clone(),
                details: format!(
                    "features {}x{} but manifest says {}x{}",
                    rows, cols, v.num_clips, manifest.feature_dim
                ),
            });
        }
        let path = root.join(&v.feature_file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_features(&path, t)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(root.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn write_features(path: impl AsRef<Path>, features: &Tensor32) -> Result<()> {
    let (t, d) = features.dims2()?;
    let mut buf = Vec::with_capacity(16 + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_header(path: impl AsRef<Path>) -> Result<(u32, u32)> {
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Numeric("feature file shorter than its header".to_string()))?;
    if &head[0..8] != FEATURE_MAGIC {
        return Err(Error::Numeric("bad feature file magic".to_string()));
    }
    let t = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let d = u32::from_le_bytes(head[12..16].try_into().unwrap());
    Ok((t, d))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor32> {
    let path = path.as_ref();
    let (t, d) = read_feature_header(path)?;
    let bytes = fs::read(path)?;
    let expected = 16 + (t as usize) * (d as usize) * 4;
    if bytes.len() != expected {
        return Err(Error::Numeric(format!(
            "feature file holds {} bytes, header implies {}",
            bytes.len(),
            expected
        )));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor32::from_values(&[t as usize, d as usize], values)
}

/// Per-video, per-clip generator atomic ids; background clips are -1.
pub type AtomicTruth = BTreeMap<String, Vec<i64>>;

pub fn save_atomic_truth(truth: &AtomicTruth, root: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(truth)?;
    fs::write(root.as_ref().join(ATOMIC_TRUTH_FILE), json)?;
    Ok(())
}

pub fn load_atomic_truth(root: impl AsRef<Path>) -> Result<AtomicTruth> {
    let text = fs::read_to_string(root.as_ref().join(ATOMIC_TRUTH_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_hierarchy() -> LabelHierarchy {
        LabelHierarchy {
            fine: vec!["a".into(), "b".into(), "c".into()],
            coarse: vec!["ab".into(), "c".into()],
            grouping: vec![vec![0, 1], vec![2]],
        }
    }

    fn tiny_manifest() -> (DatasetManifest, BTreeMap<String, Tensor32>) {
        let hierarchy = tiny_hierarchy();
        let videos = vec![
            VideoRecord {
                id: "v0".into(),
                num_clips: 2,
                fine_labels: vec![0],
                segments: None,
                feature_file: "features/v0.feat".into(),
            },
            VideoRecord {
                id: "v1".into(),
                num_clips: 3,
                fine_labels: vec![1, 2],
                segments: Some(vec![SegmentAnnotation {
                    fine_class: 1,
                    start_clip: 0,
                    end_clip: 2,
                    atomic_sequence: None,
                }]),
                feature_file: "features/v1.feat".into(),
            },
        ];
        let mut features = BTreeMap::new();
        features.insert(
            "v0".into(),
            Tensor32::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        features.insert(
            "v1".into(),
            Tensor32::from_values(&[3, 2], vec![0.5, -0.5, 0.0, 1.5, -2.0, 0.25]).unwrap(),
        );
        (
            DatasetManifest {
                feature_dim: 2,
                hierarchy,
                videos,
            },
            features,
        )
    }

    #[test]
    fn round_trip_is_identity() {
        let (manifest, features) = tiny_manifest();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&manifest, &features, dir.path(), false).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        assert_eq!(ds.manifest.videos.len(), 2);
        for v in &ds.manifest.videos {
            assert_eq!(&ds.features(v).unwrap(), features.get(&v.id).unwrap());
        }
    }

    #[test]
    fn header_mismatch_names_video() {
        let (mut manifest, features) = tiny_manifest();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&manifest, &features, dir.path(), false).unwrap();
        manifest.videos[1].num_clips = 12;
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), json).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("v1"), "{}", err);
    }

    #[test]
    fn overwrite_requires_force() {
        let (manifest, features) = tiny_manifest();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&manifest, &features, dir.path(), false).unwrap();
        assert!(save_dataset(&manifest, &features, dir.path(), false).is_err());
        save_dataset(&manifest, &features, dir.path(), true).unwrap();
    }

    #[test]
    fn empty_video_list_is_valid() {
        let manifest = DatasetManifest {
            feature_dim: 4,
            hierarchy: tiny_hierarchy(),
            videos: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&manifest, &BTreeMap::new(), dir.path(), false).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert!(ds.manifest.videos.is_empty());
    }

    #[test]
    fn non_finite_features_rejected_on_read() {
        let (manifest, mut features) = tiny_manifest();
        features.get_mut("v0").unwrap().values_mut()[1] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&manifest, &features, dir.path(), false).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let err = ds.features(&ds.manifest.videos[0]).unwrap_err();
        assert!(err.to_string().contains("v0"));
    }

    #[test]
    fn coarse_from_fine_cases() {
        let h = tiny_hierarchy();
        assert_eq!(coarse_labels_from_fine(&[false, false, false], &h), vec![false, false]);
        assert_eq!(coarse_labels_from_fine(&[false, true, false], &h), vec![true, false]);
        // Two positives in the same group give one coarse positive.
        assert_eq!(coarse_labels_from_fine(&[true, true, false], &h), vec![true, false]);
    }

    #[test]
    fn coarse_from_fine_distributes_over_union() {
        let h = tiny_hierarchy();
        let y1 = [true, false, false];
        let y2 = [false, false, true];
        let union: Vec<bool> = y1.iter().zip(&y2).map(|(a, b)| *a || *b).collect();
        let lhs = coarse_labels_from_fine(&union, &h);
        let rhs: Vec<bool> = coarse_labels_from_fine(&y1, &h)
            .iter()
            .zip(coarse_labels_from_fine(&y2, &h))
            .map(|(a, b)| *a || b)
            .collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn hierarchy_partition_enforced() {
        let mut h = tiny_hierarchy();
        h.grouping = vec![vec![0, 1], vec![1, 2]];
        assert!(h.validate().is_err());
        h.grouping = vec![vec![0, 1], vec![]];
        assert!(h.validate().is_err());
        h.grouping = vec![vec![0], vec![2]];
        assert!(h.validate().is_err());
    }
}
