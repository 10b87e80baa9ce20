//! Two-step inference and the detection evaluation stack.
//!
//! Step one classifies the video from its top-scoring clips per class;
//! step two thresholds each positive class's activation sequence at
//! mean + α·(max − min) and connects adjacent positive clips into
//! segments. Evaluation matches detections to ground truth greedily in
//! confidence order under a temporal-IoU threshold grid and reports
//! per-class AP, per-threshold mAP, and their average.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{clip_scores_plain, encode_plain, HaanParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    FineAction,
    FineGym,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fineaction" => Ok(ProtocolKind::FineAction),
            "finegym" => Ok(ProtocolKind::FineGym),
            other => Err(Error::Config(format!("unknown protocol '{}'", other))),
        }
    }
}

impl ProtocolKind {
    /// Dataset-specific default for the detection threshold coefficient.
    pub fn default_alpha(self) -> f64 {
        match self {
            ProtocolKind::FineAction => -0.8,
            ProtocolKind::FineGym => 0.1,
        }
    }
}

/// Temporal-IoU threshold grid and its name.
#[derive(Debug, Clone, Serialize)]
pub struct EvalProtocol {
    pub name: String,
    pub thresholds: Vec<f64>,
}

impl EvalProtocol {
    /// tIoU 0.5 to 0.95 with an interval of 0.05.
    pub fn fine_action() -> Self {
        EvalProtocol {
            name: "fineaction".into(),
            thresholds: (10..=19).map(|i| i as f64 * 0.05).collect(),
        }
    }

    /// tIoU 0.1 to 0.5 with an interval of 0.05.
    pub fn fine_gym() -> Self {
        EvalProtocol {
            name: "finegym".into(),
            thresholds: (2..=10).map(|i| i as f64 * 0.05).collect(),
        }
    }

    pub fn of(kind: ProtocolKind) -> Self {
        match kind {
            ProtocolKind::FineAction => Self::fine_action(),
            ProtocolKind::FineGym => Self::fine_gym(),
        }
    }

    pub fn custom(name: impl Into<String>, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Config("empty threshold grid".into()));
        }
        for w in thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("thresholds must strictly increase".into()));
            }
        }
        if thresholds[0] <= 0.0 || *thresholds.last().unwrap() > 1.0 {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        Ok(EvalProtocol {
            name: name.into(),
            thresholds,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Detection threshold coefficient α.
    pub alpha: f64,
    /// Clips averaged per class in the classification step.
    pub classify_topk: usize,
    /// Sigmoid-probability cutoff for predicting a class.
    pub classify_threshold: f64,
    /// Positive-clip gaps up to this many clips are bridged.
    pub merge_gap: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 0.1,
            classify_topk: 5,
            classify_threshold: 0.5,
            merge_gap: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classify_topk == 0 {
            return Err(Error::Config("classify_topk must be at least 1".into()));
        }
        if !(self.classify_threshold > 0.0 && self.classify_threshold < 1.0) {
            return Err(Error::Config("classify_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSegment {
    pub fine_class: usize,
    pub start_clip: usize,
    pub end_clip: usize,
    pub confidence: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Step one: classes whose top-k mean clip logit maps through the
/// sigmoid to a probability strictly above the cutoff.
pub fn classify_video<S: Scalar>(scores: &Tensor<S>, cfg: &InferenceConfig) -> Vec<usize> {
    let (t, c) = scores.dims2().expect("score matrix");
    let mut predicted = Vec::new();
    for j in 0..c {
        let mut column: Vec<f64> = (0..t).map(|i| scores.values()[i * c + j].as_f64()).collect();
        column.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = cfg.classify_topk.min(t);
        let mean = column[..k].iter().sum::<f64>() / k as f64;
        if sigmoid(mean) > cfg.classify_threshold {
            predicted.push(j);
        }
    }
    predicted
}

/// Step two: clips strictly above mean + α·(max − min) become positive
/// and maximal runs of positives (bridging gaps up to `merge_gap`)
/// become segments scored by their mean clip score.
pub fn detect_segments(class_scores: &[f64], class: usize, cfg: &InferenceConfig) -> Vec<DetectionSegment> {
    let t = class_scores.len();
    if t == 0 {
        return Vec::new();
    }
    let mean = class_scores.iter().sum::<f64>() / t as f64;
    let max = class_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = class_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let thresh = mean + cfg.alpha * (max - min);

    let positives: Vec<usize> = (0..t).filter(|&i| class_scores[i] > thresh).collect();
    let mut segments = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    for &i in &positives {
        run = match run {
            None => Some((i, i)),
            Some((start, last)) if i - last - 1 <= cfg.merge_gap => Some((start, i)),
            Some((start, last)) => {
                segments.push((start, last + 1));
                Some((i, i))
            }
        };
    }
    if let Some((start, last)) = run {
        segments.push((start, last + 1));
    }
    segments
        .into_iter()
        .map(|(start, end)| {
            let confidence = class_scores[start..end].iter().sum::<f64>() / (end - start) as f64;
            DetectionSegment {
                fine_class: class,
                start_clip: start,
                end_clip: end,
                confidence,
            }
        })
        .collect()
}

/// Intersection over union of two half-open clip ranges.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_start = a.0.max(b.0);
    let inter_end = a.1.min(b.1);
    let inter = inter_end.saturating_sub(inter_start);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

/// One detection attributed to a video, ready for matching.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video: String,
    pub segment: DetectionSegment,
}

/// A ground-truth instance of one class in one video.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub video: String,
    pub start_clip: usize,
    pub end_clip: usize,
}

/// Average precision for one class at one tIoU threshold: detections
/// sorted by descending confidence (ties by video id, then start) each
/// match the unmatched ground truth in their video with the highest
/// tIoU at or above the threshold; precision is summed at every newly
/// matched detection and divided by the ground-truth count. Returns
/// None when there is no ground truth for the class.
pub fn average_precision(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    tiou_threshold: f64,
) -> Option<f64> {
    if ground_truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &detections[a];
        let db = &detections[b];
        db.segment
            .confidence
            .partial_cmp(&da.segment.confidence)
            .unwrap()
            .then_with(|| da.video.cmp(&db.video))
            .then_with(|| da.segment.start_clip.cmp(&db.segment.start_clip))
    });

    // Ground truths grouped per video, earliest start first so tied
    // overlaps resolve deterministically.
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, gt) in ground_truths.iter().enumerate() {
        by_video.entry(gt.video.as_str()).or_default().push(g);
    }
    for gts in by_video.values_mut() {
        gts.sort_by_key(|&g| (ground_truths[g].start_clip, ground_truths[g].end_clip));
    }

    let mut matched = vec![false; ground_truths.len()];
    let mut true_positives = 0usize;
    let mut precision_sum = 0.0;
    for (rank, &d) in order.iter().enumerate() {
        let det = &detections[d];
        let span = (det.segment.start_clip, det.segment.end_clip);
        let mut best: Option<(f64, usize)> = None;
        if let Some(gts) = by_video.get(det.video.as_str()) {
            for &g in gts {
                if matched[g] {
                    continue;
                }
                let gt = &ground_truths[g];
                let iou = temporal_iou(span, (gt.start_clip, gt.end_clip));
                if iou >= tiou_threshold && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
        }
        if let Some((_, g)) = best {
            matched[g] = true;
            true_positives += 1;
            precision_sum += true_positives as f64 / (rank + 1) as f64;
        }
    }
    Some(precision_sum / ground_truths.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    pub protocol: String,
    pub thresholds: Vec<f64>,
    /// class name → threshold (2-decimal string) → AP.
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub map_per_threshold: BTreeMap<String, f64>,
    pub avg_map: f64,
    pub inference_config: InferenceConfig,
}

impl MapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,threshold,ap\n");
        for (class, row) in &self.per_class_ap {
            for (thr, ap) in row {
                let _ = writeln!(out, "{},{},{}", class, thr, ap);
            }
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(format!("{}.json", stem)),
            serde_json::to_string_pretty(self)?,
        )?;
        std::fs::write(dir.join(format!("{}.csv", stem)), self.to_csv())?;
        Ok(())
    }
}

fn threshold_key(t: f64) -> String {
    format!("{:.2}", t)
}

/// Scores detections against ground truth over the protocol grid.
/// Classes without ground truth are excluded from the mean.
pub fn evaluate_detections(
    detections: &[Detection],
    ground_truths: &[(usize, GroundTruth)],
    class_names: &[String],
    protocol: &EvalProtocol,
    cfg: &InferenceConfig,
) -> MapReport {
    let mut per_class_ap: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut map_per_threshold: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_threshold_sums = vec![(0.0f64, 0usize); protocol.thresholds.len()];

    for (class, name) in class_names.iter().enumerate() {
        let class_gts: Vec<GroundTruth> = ground_truths
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, g)| g.clone())
            .collect();
        if class_gts.is_empty() {
            continue;
        }
        let class_dets: Vec<Detection> = detections
            .iter()
            .filter(|d| d.segment.fine_class == class)
            .cloned()
            .collect();
        let mut row = BTreeMap::new();
        for (ti, &thr) in protocol.thresholds.iter().enumerate() {
            let ap = average_precision(&class_dets, &class_gts, thr)
                .expect("class ground truth checked nonempty");
            row.insert(threshold_key(thr), ap);
            per_threshold_sums[ti].0 += ap;
            per_threshold_sums[ti].1 += 1;
        }
        per_class_ap.insert(name.clone(), row);
    }

    let mut avg = 0.0;
    for (ti, &thr) in protocol.thresholds.iter().enumerate() {
        let (sum, count) = per_threshold_sums[ti];
        let map = if count > 0 { sum / count as f64 } else { 0.0 };
        map_per_threshold.insert(threshold_key(thr), map);
        avg += map;
    }
    avg /= protocol.thresholds.len() as f64;

    MapReport {
        protocol: protocol.name.clone(),
        thresholds: protocol.thresholds.clone(),
        per_class_ap,
        map_per_threshold,
        avg_map: avg,
        inference_config: *cfg,
    }
}

/// Runs two-step inference on the listed videos.
pub fn infer_detections<S: Scalar>(
    params: &HaanParams<S>,
    dataset: &Dataset,
    video_ids: &[String],
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut detections = Vec::new();
    for id in video_ids {
        let video = dataset.video(id)?;
        let clips = dataset.features(video)?.cast::<S>();
        let x = encode_plain(params, &clips)?;
        let scores = clip_scores_plain(params, &x)?;
        let (t, c) = scores.dims2()?;
        for class in classify_video(&scores, cfg) {
            let column: Vec<f64> = (0..t)
                .map(|i| scores.values()[i * c + class].as_f64())
                .collect();
            for segment in detect_segments(&column, class, cfg) {
                detections.push(Detection {
                    video: id.clone(),
                    segment,
                });
            }
        }
    }
    Ok(detections)
}

/// Collects (class, ground truth) pairs from manifests; errors if any
/// listed video lacks temporal annotations.
pub fn collect_ground_truth(dataset: &Dataset, video_ids: &[String]) -> Result<Vec<(usize, GroundTruth)>> {
    let mut out = Vec::new();
    for id in video_ids {
        let video = dataset.video(id)?;
        let segments = video.segments.as_ref().ok_or_else(|| {
            Error::Eval(format!(
                "video '{}' has no segment annotations; evaluation needs them",
                id
            ))
        })?;
        for s in segments {
            out.push((
                s.fine_class,
                GroundTruth {
                    video: id.clone(),
                    start_clip: s.start_clip,
                    end_clip: s.end_clip,
                },
            ));
        }
    }
    Ok(out)
}

/// Full evaluation pipeline: inference on every listed video, then AP
/// over the protocol grid.
pub fn map_report<S: Scalar>(
    params: &HaanParams<S>,
    dataset: &Dataset,
    video_ids: &[String],
    protocol: &EvalProtocol,
    cfg: &InferenceConfig,
) -> Result<MapReport> {
    let ground_truths = collect_ground_truth(dataset, video_ids)?;
    let detections = infer_detections(params, dataset, video_ids, cfg)?;
    Ok(evaluate_detections(
        &detections,
        &ground_truths,
        &dataset.manifest.hierarchy.fine,
        protocol,
        cfg,
    ))
}

/// One JSON line per detection, for external inspection.
pub fn dump_detections(detections: &[Detection], mut writer: impl std::io::Write) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        video: &'a str,
        fine_class: usize,
        start_clip: usize,
        end_clip: usize,
        confidence: f64,
    }
    for d in detections {
        let line = Line {
            video: &d.video,
            fine_class: d.segment.fine_class,
            start_clip: d.segment.start_clip,
            end_clip: d.segment.end_clip,
            confidence: d.segment.confidence,
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    #[test]
    fn classify_saturated_logits() {
        // One class at +10 everywhere, others at -10.
        let mut values = Vec::new();
        for _ in 0..4 {
            values.extend_from_slice(&[-10.0, 10.0, -10.0]);
        }
        let scores = Tensor64::from_values(&[4, 3], values).unwrap();
        let cfg = InferenceConfig::default();
        assert_eq!(classify_video(&scores, &cfg), vec![1]);
    }

    #[test]
    fn classify_zero_logits_predicts_nothing() {
        let scores = Tensor64::zeros(&[5, 3]);
        let cfg = InferenceConfig::default();
        assert!(classify_video(&scores, &cfg).is_empty());
    }

    #[test]
    fn classify_short_video_truncates_topk() {
        let scores = Tensor64::from_values(&[2, 1], vec![4.0, -1.0]).unwrap();
        let cfg = InferenceConfig {
            classify_topk: 5,
            ..Default::default()
        };
        // Mean of both clips = 1.5, sigmoid > 0.5.
        assert_eq!(classify_video(&scores, &cfg), vec![0]);
    }

    #[test]
    fn detect_hand_cases() {
        let cfg = InferenceConfig {
            alpha: 0.1,
            ..Default::default()
        };
        // mean 0.5, range 1.0 → thresh 0.6 → only the last clip.
        let segs = detect_segments(&[0.0, 0.5, 1.0], 0, &cfg);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_clip, segs[0].end_clip), (2, 3));
        assert!((segs[0].confidence - 1.0).abs() < 1e-12);

        // Constant scores: nothing strictly above the mean.
        assert!(detect_segments(&[0.4, 0.4, 0.4], 0, &cfg).is_empty());

        // α = -0.8 lowers the threshold below every score.
        let cfg_neg = InferenceConfig {
            alpha: -0.8,
            ..Default::default()
        };
        let segs = detect_segments(&[0.0, 0.5, 1.0], 0, &cfg_neg);
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_clip, segs[0].end_clip), (0, 3));
    }

    #[test]
    fn detect_merges_gaps_when_configured() {
        let scores = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let strict = InferenceConfig {
            alpha: 0.1,
            merge_gap: 0,
            ..Default::default()
        };
        assert_eq!(detect_segments(&scores, 0, &strict).len(), 3);
        let bridged = InferenceConfig {
            alpha: 0.1,
            merge_gap: 1,
            ..Default::default()
        };
        let segs = detect_segments(&scores, 0, &bridged);
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start_clip, segs[0].end_clip), (0, 3));
    }

    #[test]
    fn tiou_cases() {
        assert!((temporal_iou((3, 9), (3, 9)) - 1.0).abs() < 1e-12);
        assert_eq!(temporal_iou((0, 5), (7, 9)), 0.0);
        assert!((temporal_iou((0, 10), (5, 15)) - 1.0 / 3.0).abs() < 1e-9);
        // Symmetry.
        assert_eq!(temporal_iou((0, 10), (5, 15)), temporal_iou((5, 15), (0, 10)));
    }

    fn det(video: &str, span: (usize, usize), conf: f64) -> Detection {
        Detection {
            video: video.into(),
            segment: DetectionSegment {
                fine_class: 0,
                start_clip: span.0,
                end_clip: span.1,
                confidence: conf,
            },
        }
    }

    fn gt(video: &str, span: (usize, usize)) -> GroundTruth {
        GroundTruth {
            video: video.into(),
            start_clip: span.0,
            end_clip: span.1,
        }
    }

    #[test]
    fn ap_single_match_is_one() {
        let ap = average_precision(&[det("v", (0, 10), 0.9)], &[gt("v", (0, 10))], 0.5);
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn ap_duplicate_detection_ranked_second_still_one() {
        // Both detections overlap the single ground truth; the correct
        // one ranks first, the duplicate becomes an unmatched FP.
        let dets = vec![det("v", (0, 10), 0.9), det("v", (1, 10), 0.8)];
        let ap = average_precision(&dets, &[gt("v", (0, 10))], 0.5);
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn ap_no_detections_is_zero() {
        assert_eq!(average_precision(&[], &[gt("v", (0, 4))], 0.5), Some(0.0));
    }

    #[test]
    fn ap_no_ground_truth_is_excluded() {
        assert_eq!(average_precision(&[det("v", (0, 4), 0.5)], &[], 0.5), None);
    }

    #[test]
    fn ap_cross_video_matching_respects_video_ids() {
        let dets = vec![det("a", (0, 10), 0.9), det("b", (0, 10), 0.8)];
        // The only GT lives in video "b"; the higher-confidence hit in
        // "a" must not claim it.
        let ap = average_precision(&dets, &[gt("b", (0, 10))], 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn protocol_grids() {
        let fg = EvalProtocol::fine_gym();
        assert_eq!(fg.thresholds.len(), 9);
        assert!((fg.thresholds[0] - 0.1).abs() < 1e-12);
        assert!((fg.thresholds[8] - 0.5).abs() < 1e-12);
        let fa = EvalProtocol::fine_action();
        assert_eq!(fa.thresholds.len(), 10);
        assert!((fa.thresholds[0] - 0.5).abs() < 1e-12);
        assert!((fa.thresholds[9] - 0.95).abs() < 1e-12);
        assert!(EvalProtocol::custom("x", vec![0.5, 0.4]).is_err());
        assert!(EvalProtocol::custom("x", vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let class_names = vec!["c0".to_string(), "c1".to_string()];
        let gts = vec![
            (0usize, gt("v0", (2, 6))),
            (0usize, gt("v1", (0, 3))),
            (1usize, gt("v0", (8, 12))),
        ];
        let perfect: Vec<Detection> = gts
            .iter()
            .map(|(c, g)| Detection {
                video: g.video.clone(),
                segment: DetectionSegment {
                    fine_class: *c,
                    start_clip: g.start_clip,
                    end_clip: g.end_clip,
                    confidence: 0.9,
                },
            })
            .collect();
        let protocol = EvalProtocol::fine_gym();
        let cfg = InferenceConfig::default();
        let report = evaluate_detections(&perfect, &gts, &class_names, &protocol, &cfg);
        assert!((report.avg_map - 1.0).abs() < 1e-9);
        let report = evaluate_detections(&[], &gts, &class_names, &protocol, &cfg);
        assert_eq!(report.avg_map, 0.0);
    }
}
