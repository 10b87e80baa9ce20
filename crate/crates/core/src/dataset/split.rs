//! Greedy iterative train/val split with per-class ratio control.
//!
//! Multi-label videos make naive stratification impossible, so the
//! split is grown greedily: seed both sides so every class appears in
//! each, then repeatedly find the class with the lowest train ratio and
//! move one unassigned video containing it into train, until every
//! class reaches the target ratio. The search runs for several seeded
//! attempts and keeps the split whose per-class ratios deviate least
//! from the target.

use super::DatasetManifest;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub per_class_ratios: BTreeMap<String, f64>,
}

impl SplitResult {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn greedy_split(
    manifest: &DatasetManifest,
    target_ratio: f64,
    attempts: usize,
    seed: u64,
) -> Result<SplitResult> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::Config(format!(
            "target ratio {} outside (0, 1)",
            target_ratio
        )));
    }
    if attempts == 0 {
        return Err(Error::Config("need at least one split attempt".into()));
    }
    let num_fine = manifest.hierarchy.num_fine();
    let labels: Vec<&[usize]> = manifest.videos.iter().map(|v| v.fine_labels.as_slice()).collect();

    let mut class_total = vec![0usize; num_fine];
    for video_labels in &labels {
        for &j in *video_labels {
            class_total[j] += 1;
        }
    }
    if let Some(j) = class_total.iter().position(|&n| n < 2) {
        return Err(Error::Infeasible(format!(
            "class '{}' occurs in {} video(s); both splits need one",
            manifest.hierarchy.fine[j], class_total[j]
        )));
    }

    let mut best: Option<(f64, Assignment)> = None;
    for attempt in 0..attempts {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let assignment = run_attempt(&labels, &class_total, target_ratio, &mut rng);
        let objective = assignment.objective(&class_total, target_ratio);
        let better = match &best {
            None => true,
            Some((obj, _)) => objective < *obj,
        };
        if better {
            best = Some((objective, assignment));
        }
    }
    let (_, assignment) = best.expect("at least one attempt ran");

    let mut per_class_ratios = BTreeMap::new();
    for j in 0..num_fine {
        per_class_ratios.insert(
            manifest.hierarchy.fine[j].clone(),
            assignment.train_count[j] as f64 / class_total[j] as f64,
        );
    }
    let id_of = |i: usize| manifest.videos[i].id.clone();
    Ok(SplitResult {
        train: assignment.train.iter().map(|&i| id_of(i)).collect(),
        val: assignment.val.iter().map(|&i| id_of(i)).collect(),
        per_class_ratios,
    })
}

struct Assignment {
    train: Vec<usize>,
    val: Vec<usize>,
    train_count: Vec<usize>,
}

impl Assignment {
    fn objective(&self, class_total: &[usize], target: f64) -> f64 {
        let mut sum = 0.0;
        for j in 0..class_total.len() {
            let ratio = self.train_count[j] as f64 / class_total[j] as f64;
            sum += (ratio - target) * (ratio - target);
        }
        sum
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Unassigned,
    Train,
    Val,
}

fn run_attempt(
    labels: &[&[usize]],
    class_total: &[usize],
    target: f64,
    rng: &mut ChaCha20Rng,
) -> Assignment {
    let num_fine = class_total.len();
    let mut side = vec![Side::Unassigned; labels.len()];
    let mut train_count = vec![0usize; num_fine];

    // Seed each side with a greedy set cover so every class appears in
    // both before ratios are balanced.
    for dst in [Side::Train, Side::Val] {
        let mut covered = vec![false; num_fine];
        while covered.iter().any(|c| !c) {
            let mut best_gain = 0usize;
            let mut candidates: Vec<usize> = Vec::new();
            for (i, video_labels) in labels.iter().enumerate() {
                if side[i] != Side::Unassigned {
                    continue;
                }
                let gain = video_labels.iter().filter(|&&j| !covered[j]).count();
                if gain > best_gain {
                    best_gain = gain;
                    candidates.clear();
                }
                if gain == best_gain && gain > 0 {
                    candidates.push(i);
                }
            }
            let pick = candidates[rng.gen_range(0..candidates.len())];
            side[pick] = dst;
            for &j in labels[pick] {
                covered[j] = true;
                if dst == Side::Train {
                    train_count[j] += 1;
                }
            }
        }
    }

    // Raise the lowest per-class train ratio one video at a time. A
    // class whose remaining videos are all assigned cannot improve and
    // is set aside so the loop stays total.
    let mut saturated = vec![false; num_fine];
    loop {
        let mut lowest: Option<(f64, usize)> = None;
        for j in 0..num_fine {
            if saturated[j] {
                continue;
            }
            let ratio = train_count[j] as f64 / class_total[j] as f64;
            if ratio >= target {
                continue;
            }
            if lowest.map_or(true, |(r, _)| ratio < r) {
                lowest = Some((ratio, j));
            }
        }
        let Some((_, class)) = lowest else { break };

        let candidates: Vec<usize> = (0..labels.len())
            .filter(|&i| side[i] == Side::Unassigned && labels[i].contains(&class))
            .collect();
        if candidates.is_empty() {
            saturated[class] = true;
            continue;
        }

        // Least harm: prefer the video whose other labels already sit at
        // high train ratios; a single-label video harms nothing.
        let mut best_score = f64::NEG_INFINITY;
        let mut tied: Vec<usize> = Vec::new();
        for &i in &candidates {
            let others: Vec<usize> = labels[i].iter().copied().filter(|&j| j != class).collect();
            let score = if others.is_empty() {
                2.0
            } else {
                others
                    .iter()
                    .map(|&j| train_count[j] as f64 / class_total[j] as f64)
                    .sum::<f64>()
                    / others.len() as f64
            };
            if score > best_score + 1e-12 {
                best_score = score;
                tied.clear();
            }
            if (score - best_score).abs() <= 1e-12 {
                tied.push(i);
            }
        }
        let pick = tied[rng.gen_range(0..tied.len())];
        side[pick] = Side::Train;
        for &j in labels[pick] {
            train_count[j] += 1;
        }
    }

    // Everything still unassigned goes to validation.
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in side.iter().enumerate() {
        match s {
            Side::Train => train.push(i),
            Side::Val | Side::Unassigned => val.push(i),
        }
    }
    Assignment {
        train,
        val,
        train_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelHierarchy, VideoRecord};

    fn manifest_of(labels: Vec<Vec<usize>>, num_fine: usize) -> DatasetManifest {
        let hierarchy = LabelHierarchy {
            fine: (0..num_fine).map(|j| format!("fine_{}", j)).collect(),
            coarse: vec!["all".into()],
            grouping: vec![(0..num_fine).collect()],
        };
        let videos = labels
            .into_iter()
            .enumerate()
            .map(|(i, fine_labels)| VideoRecord {
                id: format!("v{:03}", i),
                num_clips: 4,
                fine_labels,
                segments: None,
                feature_file: format!("features/v{:03}.feat", i),
            })
            .collect();
        DatasetManifest {
            feature_dim: 2,
            hierarchy,
            videos,
        }
    }

    #[test]
    fn exact_divisibility_splits_three_one() {
        // Single-label corpus, 4 videos per class, r = 0.75.
        let mut labels = Vec::new();
        for class in 0..5 {
            for _ in 0..4 {
                labels.push(vec![class]);
            }
        }
        let manifest = manifest_of(labels, 5);
        let split = greedy_split(&manifest, 0.75, 20, 3).unwrap();
        for ratio in split.per_class_ratios.values() {
            assert!((ratio - 0.75).abs() < 1e-12, "ratio {}", ratio);
        }
        assert_eq!(split.train.len(), 15);
        assert_eq!(split.val.len(), 5);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let labels: Vec<Vec<usize>> = (0..60)
            .map(|_| {
                let n = rng.gen_range(1..=3usize);
                let mut l: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6usize)).collect();
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        let manifest = manifest_of(labels, 6);
        let split = greedy_split(&manifest, 0.75, 10, 9).unwrap();
        let train: std::collections::BTreeSet<_> = split.train.iter().collect();
        let val: std::collections::BTreeSet<_> = split.val.iter().collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.len() + val.len(), manifest.videos.len());
        // Every class present on both sides.
        for ids in [&split.train, &split.val] {
            let mut seen = vec![false; 6];
            for id in ids.iter() {
                for &j in &manifest.video(id).unwrap().fine_labels {
                    seen[j] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "missing class on one side");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let labels: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 4]).collect();
        let manifest = manifest_of(labels, 4);
        let a = greedy_split(&manifest, 0.7, 7, 42).unwrap();
        let b = greedy_split(&manifest, 0.7, 7, 42).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn single_video_class_is_infeasible() {
        let labels = vec![vec![0], vec![0], vec![1]];
        let manifest = manifest_of(labels, 2);
        let err = greedy_split(&manifest, 0.75, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(err.to_string().contains("fine_1"));
    }

    #[test]
    fn invalid_ratio_rejected() {
        let manifest = manifest_of(vec![vec![0], vec![0]], 1);
        assert!(greedy_split(&manifest, 0.0, 1, 0).is_err());
        assert!(greedy_split(&manifest, 1.0, 1, 0).is_err());
    }
}
