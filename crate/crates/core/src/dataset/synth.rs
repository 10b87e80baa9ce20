//! Synthetic fine-grained corpus generator.
//!
//! Inverts the model's generative assumption: every fine class is a
//! fixed sequence of atomic actions, every atomic action has a
//! feature-space prototype, and a video is a left-to-right layout of
//! action segments separated by background clips. Because the per-clip
//! atomic ids are recorded in a sidecar, concept discovery is checkable
//! against ground truth.

use super::{
    AtomicTruth, DatasetManifest, LabelHierarchy, SegmentAnnotation, VideoRecord, BACKGROUND_ID,
};
use crate::error::{Error, Result};
use crate::Tensor32;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_atomic: usize,
    pub atomic_dim: usize,
    /// One atomic-id sequence per fine class.
    pub fine_class_compositions: Vec<Vec<usize>>,
    /// Coarse→fine grouping, a partition of the fine classes.
    pub coarse_grouping: Vec<Vec<usize>>,
    pub train_videos: usize,
    pub val_videos: usize,
    /// Inclusive range of action segments per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive range of clips per atomic instance.
    pub clips_per_atomic_instance: (usize, usize),
    /// Inclusive range of background clips before/between/after actions.
    pub inter_action_gap: (usize, usize),
    /// Standard deviation of the additive Gaussian feature noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Eight classes over six atomics, sharing prefixes within each
        // coarse family; one deliberately single-atomic class.
        SynthConfig {
            num_atomic: 6,
            atomic_dim: 12,
            fine_class_compositions: vec![
                vec![0],
                vec![0, 1],
                vec![0, 1, 1],
                vec![2, 3],
                vec![2, 3, 3],
                vec![3, 2],
                vec![4, 5],
                vec![5, 4],
            ],
            coarse_grouping: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7]],
            train_videos: 200,
            val_videos: 60,
            actions_per_video: (1, 3),
            clips_per_atomic_instance: (2, 4),
            inter_action_gap: (2, 5),
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn num_fine(&self) -> usize {
        self.fine_class_compositions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_atomic == 0 || self.atomic_dim == 0 {
            return Err(Error::Config("need at least one atomic and one dimension".into()));
        }
        if self.fine_class_compositions.is_empty() {
            return Err(Error::Config("no fine class compositions".into()));
        }
        for (j, comp) in self.fine_class_compositions.iter().enumerate() {
            if comp.is_empty() {
                return Err(Error::Config(format!("composition of class {} is empty", j)));
            }
            if let Some(&bad) = comp.iter().find(|&&a| a >= self.num_atomic) {
                return Err(Error::Config(format!(
                    "composition of class {} references unknown atomic id {}",
                    j, bad
                )));
            }
        }
        for a in 0..self.fine_class_compositions.len() {
            for b in a + 1..self.fine_class_compositions.len() {
                if self.fine_class_compositions[a] == self.fine_class_compositions[b] {
                    return Err(Error::Config(format!(
                        "classes {} and {} share the composition {:?}",
                        a, b, self.fine_class_compositions[a]
                    )));
                }
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        let ranges = [
            ("actions_per_video", self.actions_per_video, 1),
            ("clips_per_atomic_instance", self.clips_per_atomic_instance, 1),
            ("inter_action_gap", self.inter_action_gap, 0),
        ];
        for (name, (lo, hi), min_lo) in ranges {
            if lo < min_lo || lo > hi {
                return Err(Error::Config(format!("invalid {} range ({}, {})", name, lo, hi)));
            }
        }
        if self.train_videos == 0 || self.val_videos == 0 {
            return Err(Error::Config("need at least one video per split".into()));
        }
        self.hierarchy().validate()
    }

    pub fn hierarchy(&self) -> LabelHierarchy {
        LabelHierarchy {
            fine: (0..self.num_fine()).map(|j| format!("fine_{}", j)).collect(),
            coarse: (0..self.coarse_grouping.len())
                .map(|u| format!("coarse_{}", u))
                .collect(),
            grouping: self.coarse_grouping.clone(),
        }
    }
}

pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub features: BTreeMap<String, Tensor32>,
    pub atomic_truth: AtomicTruth,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Generates the corpus. Deterministic: the same config (including
/// seed) produces byte-identical manifests, features, and sidecars.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let d = config.atomic_dim;

    // One unit-norm Gaussian prototype per atomic, plus a background
    // prototype at index num_atomic.
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.num_atomic + 1);
    for _ in 0..=config.num_atomic {
        let mut p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in p.iter_mut() {
            *v /= norm;
        }
        prototypes.push(p);
    }

    let mut features = BTreeMap::new();
    let mut atomic_truth = BTreeMap::new();
    let mut videos = Vec::new();
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();

    for (split, count) in [("train", config.train_videos), ("val", config.val_videos)] {
        for v in 0..count {
            let id = format!("{}_{:04}", split, v);
            let video = generate_video(&id, config, &prototypes, &mut rng)?;
            features.insert(id.clone(), video.features);
            atomic_truth.insert(id.clone(), video.clip_atomics);
            videos.push(video.record);
            if split == "train" {
                train_ids.push(id);
            } else {
                val_ids.push(id);
            }
        }
    }

    let manifest = DatasetManifest {
        feature_dim: d,
        hierarchy: config.hierarchy(),
        videos,
    };
    manifest.validate()?;
    Ok(SynthOutput {
        manifest,
        features,
        atomic_truth,
        train_ids,
        val_ids,
    })
}

struct GeneratedVideo {
    record: VideoRecord,
    features: Tensor32,
    clip_atomics: Vec<i64>,
}

fn generate_video(
    id: &str,
    config: &SynthConfig,
    prototypes: &[Vec<f64>],
    rng: &mut ChaCha20Rng,
) -> Result<GeneratedVideo> {
    let c = config.num_fine();
    let action_range = Uniform::new_inclusive(config.actions_per_video.0, config.actions_per_video.1);
    let clip_range =
        Uniform::new_inclusive(config.clips_per_atomic_instance.0, config.clips_per_atomic_instance.1);
    let gap_range = Uniform::new_inclusive(config.inter_action_gap.0, config.inter_action_gap.1);

    let n_actions = action_range.sample(rng).min(c);
    // Distinct classes per video, drawn by partial Fisher-Yates.
    let mut pool: Vec<usize> = (0..c).collect();
    let mut classes = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        let pick = rng.gen_range(0..pool.len());
        classes.push(pool.swap_remove(pick));
    }

    // Per-clip atomic id, -1 for background; segments record true spans.
    let mut clip_atomics: Vec<i64> = Vec::new();
    let mut segments = Vec::new();
    for &class in &classes {
        for _ in 0..gap_range.sample(rng) {
            clip_atomics.push(BACKGROUND_ID);
        }
        let start = clip_atomics.len();
        let composition = &config.fine_class_compositions[class];
        for &atomic in composition {
            for _ in 0..clip_range.sample(rng) {
                clip_atomics.push(atomic as i64);
            }
        }
        segments.push(SegmentAnnotation {
            fine_class: class,
            start_clip: start,
            end_clip: clip_atomics.len(),
            atomic_sequence: Some(composition.clone()),
        });
    }
    for _ in 0..gap_range.sample(rng) {
        clip_atomics.push(BACKGROUND_ID);
    }
    // Gap ranges may include zero everywhere; a video must hold a clip.
    if clip_atomics.is_empty() {
        return Err(Error::Config("generated a zero-clip video".into()));
    }

    let d = config.atomic_dim;
    let mut values = Vec::with_capacity(clip_atomics.len() * d);
    for &a in &clip_atomics {
        let proto = if a == BACKGROUND_ID {
            &prototypes[config.num_atomic]
        } else {
            &prototypes[a as usize]
        };
        for k in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            values.push((proto[k] + config.noise_sigma * noise) as f32);
        }
    }

    let mut labels: Vec<usize> = classes.clone();
    labels.sort_unstable();

    Ok(GeneratedVideo {
        record: VideoRecord {
            id: id.to_string(),
            num_clips: clip_atomics.len(),
            fine_labels: labels,
            segments: Some(segments),
            feature_file: format!("features/{}.feat", id),
        },
        features: Tensor32::from_values(&[clip_atomics.len(), d], values)?,
        clip_atomics,
    })
}
