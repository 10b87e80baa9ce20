//! Machine-readable concept inspection: which visual concepts each
//! fine class selects, and which clips belong to each concept.

use crate::clustering::{self, ClusterModel};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::{concept_distances, encode_plain, topk_concepts, DistanceKind, HaanParams, MIL_W};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize)]
pub struct ClassConcept {
    pub concept: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptExample {
    pub video: String,
    pub start_clip: usize,
    pub end_clip: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptInfo {
    pub member_clips: usize,
    pub examples: Vec<ConceptExample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptReport {
    pub num_concepts: usize,
    pub topk: usize,
    pub distance: DistanceKind,
    /// class name → its top-k concepts, nearest first.
    pub classes: BTreeMap<String, Vec<ClassConcept>>,
    /// concept id → membership summary with (video, clip range) runs.
    pub concepts: BTreeMap<String, ConceptInfo>,
}

impl ConceptReport {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Ranks concepts per class by distance between the corpus-level
/// concept representation (mean encoded feature of the concept's
/// clips) and the class prototype row, and records every maximal run
/// of clips per concept.
pub fn inspect_concepts<S: Scalar>(
    params: &HaanParams<S>,
    dataset: &Dataset,
    video_ids: &[String],
    cluster: &ClusterModel,
    topk: usize,
) -> Result<ConceptReport> {
    let n = cluster.num_clusters();
    let dim = params.config.encoded_dim;
    let mut sums = vec![vec![0.0f64; dim]; n];
    let mut counts = vec![0usize; n];
    let mut concepts: BTreeMap<String, ConceptInfo> = (0..n)
        .map(|c| {
            (
                c.to_string(),
                ConceptInfo {
                    member_clips: 0,
                    examples: Vec::new(),
                },
            )
        })
        .collect();

    for id in video_ids {
        let video = dataset.video(id)?;
        let clips = dataset.features(video)?.cast::<S>();
        let x = encode_plain(params, &clips)?;
        let labels = clustering::assign(cluster, &x)?;
        for (i, &label) in labels.iter().enumerate() {
            counts[label] += 1;
            for k in 0..dim {
                sums[label][k] += x.values()[i * dim + k].as_f64();
            }
        }
        // Maximal runs of equal labels become the concept's examples.
        let mut run_start = 0usize;
        for i in 1..=labels.len() {
            if i == labels.len() || labels[i] != labels[run_start] {
                let info = concepts.get_mut(&labels[run_start].to_string()).unwrap();
                info.member_clips += i - run_start;
                info.examples.push(ConceptExample {
                    video: id.clone(),
                    start_clip: run_start,
                    end_clip: i,
                });
                run_start = i;
            }
        }
    }

    let mut rep_values = Vec::with_capacity(n * dim);
    for c in 0..n {
        for k in 0..dim {
            let v = if counts[c] > 0 {
                sums[c][k] / counts[c] as f64
            } else {
                0.0
            };
            rep_values.push(S::of(v));
        }
    }
    let reps = Tensor::from_values(&[n, dim], rep_values)?;
    let distances = concept_distances(&reps, &counts, params.value(MIL_W), params.config.distance)?;

    let mut classes = BTreeMap::new();
    for (j, name) in dataset.manifest.hierarchy.fine.iter().enumerate() {
        let ranked: Vec<ClassConcept> = topk_concepts(&distances, j, topk)
            .into_iter()
            .map(|c| ClassConcept {
                concept: c,
                distance: distances[c][j],
            })
            .collect();
        classes.insert(name.clone(), ranked);
    }

    Ok(ConceptReport {
        num_concepts: n,
        topk,
        distance: params.config.distance,
        classes,
        concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, save_dataset, SynthConfig};
    use crate::trainer::{load_videos, refresh_pseudo_labels, TrainConfig};

    #[test]
    fn report_lists_topk_per_class_and_covers_all_clips() {
        let synth = SynthConfig {
            num_atomic: 3,
            atomic_dim: 6,
            fine_class_compositions: vec![vec![0], vec![0, 1], vec![2]],
            coarse_grouping: vec![vec![0, 1], vec![2]],
            train_videos: 8,
            val_videos: 2,
            actions_per_video: (1, 2),
            clips_per_atomic_instance: (2, 3),
            inter_action_gap: (1, 2),
            noise_sigma: 0.05,
            seed: 21,
        };
        let dir = tempfile::tempdir().unwrap();
        let out = generate_synthetic(&synth).unwrap();
        save_dataset(&out.manifest, &out.features, dir.path(), false).unwrap();
        let dataset = Dataset::load(dir.path()).unwrap();

        let config = TrainConfig {
            num_concepts: 4,
            topk_concepts: 2,
            encoded_dim: 5,
            ..TrainConfig::default()
        };
        let model_config = config.model_config(6, 3, 2);
        let params = HaanParams::<f32>::init(model_config, 9).unwrap();
        let videos = load_videos::<f32>(&dataset, &out.train_ids).unwrap();
        let (_, cluster) = refresh_pseudo_labels(
            &params,
            &videos,
            crate::clustering::ClusterMethod::KMeans,
            4,
            config.seed,
            0,
            20,
            1e-6,
        )
        .unwrap();

        let report = inspect_concepts(&params, &dataset, &out.train_ids, &cluster, 2).unwrap();
        assert_eq!(report.classes.len(), 3);
        for ranked in report.classes.values() {
            assert_eq!(ranked.len(), 2);
            assert!(ranked[0].distance <= ranked[1].distance);
        }
        let total_clips: usize = out.train_ids
            .iter()
            .map(|id| dataset.video(id).unwrap().num_clips)
            .sum();
        let covered: usize = report.concepts.values().map(|c| c.member_clips).sum();
        assert_eq!(covered, total_clips);
        // Example runs never overlap within a video and stay in range.
        for info in report.concepts.values() {
            for e in &info.examples {
                assert!(e.start_clip < e.end_clip);
                assert!(e.end_clip <= dataset.video(&e.video).unwrap().num_clips);
            }
        }
    }
}
