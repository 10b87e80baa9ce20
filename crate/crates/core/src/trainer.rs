//! The epoch loop: per-epoch clustering refresh, shuffled mini-batch
//! optimization of the total loss, per-epoch validation mAP, and
//! checkpoint selection.

use crate::checkpoint::save_checkpoint;
use crate::clustering::{self, ClusterMethod, ClusterModel};
use crate::dataset::{Dataset, SplitResult};
use crate::detect::{map_report, EvalProtocol, InferenceConfig, ProtocolKind};
use crate::error::{Error, Result};
use crate::model::{
    encode_plain, total_loss, ComposeMode, DistanceKind, HaanParams, LossBreakdown, LossSet,
    LossWeights, ModelConfig, TapedParams, VideoSample,
};
use crate::optim::{adam_step, AdamState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Tensor32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per mini-batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_mil: f64,
    pub lambda_pseudo: f64,
    pub lambda_concept: f64,
    pub lambda_coarse: f64,
    /// Visual concept count N.
    pub num_concepts: usize,
    /// Concepts retained per class.
    pub topk_concepts: usize,
    pub clustering: ClusterMethod,
    pub cluster_iters: usize,
    pub cluster_tol: f64,
    pub distance: DistanceKind,
    pub compose: ComposeMode,
    pub losses: LossSet,
    pub seed: u64,
    /// Encoder hidden width; 0 inherits `encoded_dim`.
    pub encoder_hidden: usize,
    /// Shared representation dimension d'.
    pub encoded_dim: usize,
    /// Concept classifier hidden width; 0 inherits `encoded_dim`.
    pub concept_hidden: usize,
    pub protocol: ProtocolKind,
    /// Detection threshold coefficient; defaults to the protocol's.
    pub alpha: Option<f64>,
    pub classify_topk: usize,
    pub classify_threshold: f64,
    pub merge_gap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 3e-5,
            lambda_mil: 1.0,
            lambda_pseudo: 0.001,
            lambda_concept: 0.01,
            lambda_coarse: 1.0,
            num_concepts: 500,
            topk_concepts: 5,
            clustering: ClusterMethod::KMeans,
            cluster_iters: 50,
            cluster_tol: 1e-6,
            distance: DistanceKind::Cosine,
            compose: ComposeMode::Mean,
            losses: LossSet::full(),
            seed: 0,
            encoder_hidden: 0,
            encoded_dim: 64,
            concept_hidden: 0,
            protocol: ProtocolKind::FineGym,
            alpha: None,
            classify_topk: 5,
            classify_threshold: 0.5,
            merge_gap: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.topk_concepts == 0 {
            return Err(Error::Config("topk_concepts must be at least 1".into()));
        }
        if self.num_concepts < 2 {
            return Err(Error::Config("num_concepts must be at least 2".into()));
        }
        if self.encoded_dim == 0 {
            return Err(Error::Config("encoded_dim must be positive".into()));
        }
        self.losses.validate()?;
        self.inference_config().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mil: self.lambda_mil,
            pseudo: self.lambda_pseudo,
            concept: self.lambda_concept,
            coarse: self.lambda_coarse,
        }
    }

    pub fn model_config(&self, feature_dim: usize, num_fine: usize, num_coarse: usize) -> ModelConfig {
        let hidden = |w: usize| if w == 0 { self.encoded_dim } else { w };
        ModelConfig {
            feature_dim,
            encoder_hidden: hidden(self.encoder_hidden),
            encoded_dim: self.encoded_dim,
            concept_hidden: hidden(self.concept_hidden),
            num_fine,
            num_coarse,
            num_concepts: self.num_concepts,
            topk_concepts: self.topk_concepts,
            distance: self.distance,
            compose: self.compose,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.alpha.unwrap_or_else(|| self.protocol.default_alpha()),
            classify_topk: self.classify_topk,
            classify_threshold: self.classify_threshold,
            merge_gap: self.merge_gap,
        }
    }

    /// Applies one `key = value` override; keys match field names.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Config(format!("bad value '{}' for {}: {}", value, key, e)))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lambda_mil" => self.lambda_mil = parse(key, value)?,
            "lambda_pseudo" => self.lambda_pseudo = parse(key, value)?,
            "lambda_concept" => self.lambda_concept = parse(key, value)?,
            "lambda_coarse" => self.lambda_coarse = parse(key, value)?,
            "num_concepts" => self.num_concepts = parse(key, value)?,
            "topk_concepts" => self.topk_concepts = parse(key, value)?,
            "clustering" => self.clustering = value.parse()?,
            "cluster_iters" => self.cluster_iters = parse(key, value)?,
            "cluster_tol" => self.cluster_tol = parse(key, value)?,
            "distance" => self.distance = value.parse()?,
            "compose" => self.compose = value.parse()?,
            "losses" => self.losses = LossSet::parse(value)?,
            "seed" => self.seed = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "encoded_dim" => self.encoded_dim = parse(key, value)?,
            "concept_hidden" => self.concept_hidden = parse(key, value)?,
            "protocol" => self.protocol = value.parse()?,
            "alpha" => self.alpha = Some(parse(key, value)?),
            "classify_topk" => self.classify_topk = parse(key, value)?,
            "classify_threshold" => self.classify_threshold = parse(key, value)?,
            "merge_gap" => self.merge_gap = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file; '#' starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.as_ref().display(), e)))?;
        Self::from_kv_text(&text)
    }
}

/// Per-video, per-clip cluster labels in [0, N).
#[derive(Debug, Clone, Default)]
pub struct PseudoLabeling {
    labels: BTreeMap<String, Vec<usize>>,
}

impl PseudoLabeling {
    pub fn get(&self, video: &str) -> Option<&[usize]> {
        self.labels.get(video).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A video held in memory for the training loop.
pub struct LoadedVideo<S> {
    pub id: String,
    pub fine_labels: Vec<bool>,
    pub clips: Tensor<S>,
}

pub fn load_videos<S: Scalar>(dataset: &Dataset, ids: &[String]) -> Result<Vec<LoadedVideo<S>>> {
    let num_fine = dataset.manifest.hierarchy.num_fine();
    ids.iter()
        .map(|id| {
            let record = dataset.video(id)?;
            Ok(LoadedVideo {
                id: id.clone(),
                fine_labels: record.multi_hot(num_fine),
                clips: dataset.features(record)?.cast::<S>(),
            })
        })
        .collect()
}

/// Encodes every training clip with the current encoder, fits the
/// clustering on the pooled features (seeded by base seed + epoch), and
/// assigns a pseudo label to every clip. Never touches gradients or
/// parameters.
pub fn refresh_pseudo_labels<S: Scalar>(
    params: &HaanParams<S>,
    videos: &[LoadedVideo<S>],
    method: ClusterMethod,
    num_concepts: usize,
    seed: u64,
    epoch: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(PseudoLabeling, ClusterModel)> {
    let mut encoded = Vec::with_capacity(videos.len());
    let mut pool_values = Vec::new();
    for v in videos {
        let x = encode_plain(params, &v.clips)?;
        pool_values.extend_from_slice(x.values());
        encoded.push(x);
    }
    let dim = params.config.encoded_dim;
    let pool = Tensor::from_values(&[pool_values.len() / dim, dim], pool_values)?;
    let cluster_seed = seed.wrapping_add(epoch as u64);
    let (model, _) = match method {
        ClusterMethod::KMeans => clustering::kmeans_fit(&pool, num_concepts, cluster_seed, max_iters, tol)?,
        ClusterMethod::Gmm => clustering::gmm_fit(&pool, num_concepts, cluster_seed, max_iters, tol)?,
    };
    let mut labeling = PseudoLabeling::default();
    for (v, x) in videos.iter().zip(&encoded) {
        labeling.labels.insert(v.id.clone(), clustering::assign(&model, x)?);
    }
    Ok((labeling, model))
}

/// One metrics-log line; batch lines carry losses, epoch lines carry
/// the epoch's mean losses plus the validation score.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub batch: Option<usize>,
    pub l_mil: f64,
    pub l_pseudo: f64,
    pub l_concept: f64,
    pub l_coarse: f64,
    pub total: f64,
    pub val_avg_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_map: Option<f64>,
    pub final_breakdown: Option<LossBreakdown>,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub cluster_model: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CLUSTER_MODEL: &str = "cluster_model.bin";

/// Trains on the split's train side, validating on its val side each
/// epoch. Writes the best-by-validation and final checkpoints, the
/// cluster model backing the best checkpoint, and a JSONL metrics log.
pub fn train(
    dataset: &Dataset,
    split: &SplitResult,
    config: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let hierarchy = &dataset.manifest.hierarchy;
    let model_config = config.model_config(
        dataset.manifest.feature_dim,
        hierarchy.num_fine(),
        hierarchy.num_coarse(),
    );
    let mut params = HaanParams::<f32>::init(model_config.clone(), config.seed)?;
    let mut state = AdamState::new(&params);
    let weights = config.loss_weights();
    let train_videos = load_videos::<f32>(dataset, &split.train)?;
    if train_videos.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }

    let val_has_segments = split
        .val
        .iter()
        .all(|id| dataset.video(id).map_or(false, |v| v.segments.is_some()));
    let protocol = EvalProtocol::of(config.protocol);
    let inference = config.inference_config();

    let log_path = out_dir.join(METRICS_LOG);
    let mut log = fs::File::create(&log_path)?;
    let mut write_line = |line: &MetricsLine, log: &mut fs::File| -> Result<()> {
        serde_json::to_writer(&mut *log, line)?;
        log.write_all(b"\n")?;
        Ok(())
    };

    let mut best: Option<(usize, f64, HaanParams<f32>, Option<ClusterModel>)> = None;
    let mut last_good = params.clone();
    let mut last_good_cluster: Option<ClusterModel> = None;
    let mut final_breakdown: Option<LossBreakdown> = None;

    for epoch in 0..config.epochs {
        let (pseudo, cluster_model) = if config.losses.needs_clustering() {
            let (labeling, model) = refresh_pseudo_labels(
                &params,
                &train_videos,
                config.clustering,
                config.num_concepts,
                config.seed,
                epoch,
                config.cluster_iters,
                config.cluster_tol,
            )?;
            (Some(labeling), Some(model))
        } else {
            (None, None)
        };

        let mut order: Vec<usize> = (0..train_videos.len()).collect();
        let mut rng =
            ChaCha20Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_0000_0000u64.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<VideoSample<'_, f32>> = chunk
                .iter()
                .map(|&i| {
                    let v = &train_videos[i];
                    VideoSample {
                        clips: &v.clips,
                        fine_labels: &v.fine_labels,
                        pseudo_labels: pseudo.as_ref().and_then(|p| p.get(&v.id)),
                    }
                })
                .collect();
            let mut tape = Tape::new();
            let tp = TapedParams::register(&mut tape, &params);
            let (loss, breakdown) = total_loss(
                &mut tape,
                &tp,
                &model_config,
                hierarchy,
                &samples,
                &weights,
                &config.losses,
            )?;
            if !breakdown.total.is_finite() {
                save_checkpoint(&last_good, epoch, config.seed, out_dir.join(FINAL_CHECKPOINT))?;
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {} batch {}; last good checkpoint kept",
                    epoch, batch_idx
                )));
            }
            let grads = tape.backward(loss)?;
            adam_step(&mut params, &grads, &mut state, config.learning_rate)?;

            write_line(
                &MetricsLine {
                    epoch,
                    batch: Some(batch_idx),
                    l_mil: breakdown.l_mil,
                    l_pseudo: breakdown.l_pseudo,
                    l_concept: breakdown.l_concept,
                    l_coarse: breakdown.l_coarse,
                    total: breakdown.total,
                    val_avg_map: None,
                },
                &mut log,
            )?;
            epoch_sums[0] += breakdown.l_mil;
            epoch_sums[1] += breakdown.l_pseudo;
            epoch_sums[2] += breakdown.l_concept;
            epoch_sums[3] += breakdown.l_coarse;
            epoch_sums[4] += breakdown.total;
            batches += 1;
            final_breakdown = Some(breakdown);
        }

        let val_avg_map = if val_has_segments && !split.val.is_empty() {
            let report = map_report(&params, dataset, &split.val, &protocol, &inference)?;
            Some(report.avg_map)
        } else {
            None
        };
        let inv = 1.0 / batches.max(1) as f64;
        write_line(
            &MetricsLine {
                epoch,
                batch: None,
                l_mil: epoch_sums[0] * inv,
                l_pseudo: epoch_sums[1] * inv,
                l_concept: epoch_sums[2] * inv,
                l_coarse: epoch_sums[3] * inv,
                total: epoch_sums[4] * inv,
                val_avg_map,
            },
            &mut log,
        )?;

        if let Some(v) = val_avg_map {
            let improved = best.as_ref().map_or(true, |(_, b, _, _)| v > *b);
            if improved {
                best = Some((epoch, v, params.clone(), cluster_model.clone()));
            }
        }
        last_good = params.clone();
        last_good_cluster = cluster_model;
    }

    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&params, config.epochs, config.seed, &final_path)?;

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let (best_epoch, best_val, best_params, best_cluster) = match best {
        Some((e, v, p, c)) => (Some(e), Some(v), p, c),
        None => (None, None, params, last_good_cluster),
    };
    save_checkpoint(
        &best_params,
        best_epoch.unwrap_or(config.epochs),
        config.seed,
        &best_path,
    )?;
    let cluster_path = match &best_cluster {
        Some(model) => {
            let path = out_dir.join(CLUSTER_MODEL);
            clustering::save_cluster_model(model, &path)?;
            Some(path)
        }
        None => None,
    };
    drop(last_good);

    Ok(TrainReport {
        epochs_run: config.epochs,
        best_epoch,
        best_val_map: best_val,
        final_breakdown,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        metrics_log: log_path,
        cluster_model: cluster_path,
    })
}
