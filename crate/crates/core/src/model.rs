//! The detection network and its losses.
//!
//! Clip features pass through a two-layer encoder into a shared
//! representation consumed by three heads: a one-layer MIL classifier
//! whose weight rows double as class prototypes, a two-layer concept
//! classifier trained against clustering pseudo labels, and a one-layer
//! coarse classifier. Per-video visual concepts are pooled from clips
//! sharing a pseudo label, composed into fine-class representations by
//! nearest-prototype top-k selection, and further composed into coarse
//! representations along the label hierarchy.

use crate::dataset::{coarse_labels_from_fine, LabelHierarchy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, ParamId, Tape};
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Cosine,
    Euclidean,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceKind::Cosine),
            "euclidean" => Ok(DistanceKind::Euclidean),
            other => Err(Error::Config(format!("unknown distance '{}'", other))),
        }
    }
}

/// How fine-class representations combine into a coarse representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    Mean,
    Max,
}

impl std::str::FromStr for ComposeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ComposeMode::Mean),
            "max" => Ok(ComposeMode::Max),
            other => Err(Error::Config(format!("unknown compose mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input clip feature dimension d.
    pub feature_dim: usize,
    /// Encoder hidden width.
    pub encoder_hidden: usize,
    /// Shared representation dimension d'.
    pub encoded_dim: usize,
    /// Concept classifier hidden width.
    pub concept_hidden: usize,
    pub num_fine: usize,
    pub num_coarse: usize,
    /// Visual concept count N (clusters).
    pub num_concepts: usize,
    /// Concepts retained per class when composing.
    pub topk_concepts: usize,
    pub distance: DistanceKind,
    pub compose: ComposeMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("encoded_dim", self.encoded_dim),
            ("concept_hidden", self.concept_hidden),
            ("num_fine", self.num_fine),
            ("num_coarse", self.num_coarse),
            ("topk_concepts", self.topk_concepts),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.num_concepts < 2 {
            return Err(Error::Config("num_concepts must be at least 2".into()));
        }
        Ok(())
    }
}

// Fixed parameter order; ids double as indices into `HaanParams`.
pub const ENC1_W: ParamId = 0;
pub const ENC1_B: ParamId = 1;
pub const ENC2_W: ParamId = 2;
pub const ENC2_B: ParamId = 3;
pub const MIL_W: ParamId = 4;
pub const MIL_B: ParamId = 5;
pub const CON1_W: ParamId = 6;
pub const CON1_B: ParamId = 7;
pub const CON2_W: ParamId = 8;
pub const CON2_B: ParamId = 9;
pub const COARSE_W: ParamId = 10;
pub const COARSE_B: ParamId = 11;
pub const NUM_PARAMS: usize = 12;

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: &'static str,
    pub value: Tensor<S>,
}

/// All trainable weights, in a fixed order shared by the optimizer and
/// the checkpoint format.
#[derive(Debug, Clone)]
pub struct HaanParams<S> {
    params: Vec<Param<S>>,
    pub config: ModelConfig,
}

pub const PARAM_NAMES: [&str; NUM_PARAMS] = [
    "encoder1.weight",
    "encoder1.bias",
    "encoder2.weight",
    "encoder2.bias",
    "mil.weight",
    "mil.bias",
    "concept1.weight",
    "concept1.bias",
    "concept2.weight",
    "concept2.bias",
    "coarse.weight",
    "coarse.bias",
];

impl<S: Scalar> HaanParams<S> {
    pub fn param_shapes(config: &ModelConfig) -> [Vec<usize>; NUM_PARAMS] {
        let (d, h, dp) = (config.feature_dim, config.encoder_hidden, config.encoded_dim);
        let (hf, c, u, n) = (
            config.concept_hidden,
            config.num_fine,
            config.num_coarse,
            config.num_concepts,
        );
        [
            vec![h, d],
            vec![h],
            vec![dp, h],
            vec![dp],
            vec![c, dp],
            vec![c],
            vec![hf, dp],
            vec![hf],
            vec![n, hf],
            vec![n],
            vec![u, dp],
            vec![u],
        ]
    }

    /// Seeded uniform init in [−1/√fan_in, +1/√fan_in] per layer.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shapes = Self::param_shapes(&config);
        let mut params = Vec::with_capacity(NUM_PARAMS);
        for (i, shape) in shapes.iter().enumerate() {
            // Bias bounds follow the fan-in of their layer's weight.
            let fan_in = if shape.len() == 2 { shape[1] } else { shapes[i - 1][1] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let values: Vec<S> = (0..numel)
                .map(|_| S::of(rng.gen_range(-bound..=bound)))
                .collect();
            params.push(Param {
                name: PARAM_NAMES[i],
                value: Tensor::from_values(shape, values)?.with_grad(),
            });
        }
        Ok(HaanParams { params, config })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != NUM_PARAMS {
            return Err(Error::ArtifactMismatch(format!(
                "expected {} parameters, got {}",
                NUM_PARAMS,
                tensors.len()
            )));
        }
        let shapes = Self::param_shapes(&config);
        let mut params = Vec::with_capacity(NUM_PARAMS);
        for (i, t) in tensors.into_iter().enumerate() {
            if t.shape() != shapes[i].as_slice() {
                return Err(Error::ArtifactMismatch(format!(
                    "parameter '{}' has shape {:?}, config implies {:?}",
                    PARAM_NAMES[i],
                    t.shape(),
                    shapes[i]
                )));
            }
            params.push(Param {
                name: PARAM_NAMES[i],
                value: t.with_grad(),
            });
        }
        Ok(HaanParams { params, config })
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id].value
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> HaanParams<T> {
        HaanParams {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name,
                    value: p.value.cast::<T>(),
                })
                .collect(),
            config: self.config.clone(),
        }
    }
}

/// Node ids of all parameters registered on one tape.
pub struct TapedParams {
    ids: [NodeId; NUM_PARAMS],
}

impl TapedParams {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, params: &HaanParams<S>) -> Self {
        let mut ids = [0; NUM_PARAMS];
        for (i, p) in params.params().iter().enumerate() {
            ids[i] = tape.param(i, &p.value);
        }
        TapedParams { ids }
    }

    pub fn id(&self, p: ParamId) -> NodeId {
        self.ids[p]
    }
}

/// Shared per-clip representation x: two linear layers with a relu
/// between.
pub fn encode<S: Scalar>(tape: &mut Tape<S>, tp: &TapedParams, clips: NodeId) -> Result<NodeId> {
    let h = tape.linear(clips, tp.id(ENC1_W), tp.id(ENC1_B))?;
    let h = tape.relu(h);
    tape.linear(h, tp.id(ENC2_W), tp.id(ENC2_B))
}

/// No-grad encoder path for clustering and inference; same kernels as
/// the recorded path.
pub fn encode_plain<S: Scalar>(params: &HaanParams<S>, clips: &Tensor<S>) -> Result<Tensor<S>> {
    let h = tensor::linear_forward(clips, params.value(ENC1_W), params.value(ENC1_B))?;
    let h = tensor::relu_forward(&h);
    tensor::linear_forward(&h, params.value(ENC2_W), params.value(ENC2_B))
}

/// Per-clip class logits s = x·wᵀ + bias.
pub fn clip_scores<S: Scalar>(tape: &mut Tape<S>, tp: &TapedParams, x: NodeId) -> Result<NodeId> {
    tape.linear(x, tp.id(MIL_W), tp.id(MIL_B))
}

pub fn clip_scores_plain<S: Scalar>(params: &HaanParams<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    tensor::linear_forward(x, params.value(MIL_W), params.value(MIL_B))
}

/// Concept classifier logits over the N pseudo classes.
pub fn concept_logits<S: Scalar>(tape: &mut Tape<S>, tp: &TapedParams, x: NodeId) -> Result<NodeId> {
    let h = tape.linear(x, tp.id(CON1_W), tp.id(CON1_B))?;
    let h = tape.relu(h);
    tape.linear(h, tp.id(CON2_W), tp.id(CON2_B))
}

/// BCE between pooled video logits and the multi-hot fine label.
pub fn mil_loss<S: Scalar>(tape: &mut Tape<S>, pooled: NodeId, labels: &[bool]) -> Result<NodeId> {
    tape.bce_mean(pooled, labels)
}

/// Mean cross entropy of the concept classifier against pseudo labels.
pub fn pseudo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &TapedParams,
    x: NodeId,
    pseudo: &[usize],
) -> Result<NodeId> {
    let logits = concept_logits(tape, tp, x)?;
    tape.softmax_ce_mean(logits, pseudo)
}

/// Per-video visual concepts: the [N,d'] matrix of mean encoded clips
/// per pseudo label, plus the presence counts. Labels without clips
/// keep an exactly-zero row.
pub struct VisualConceptBank {
    pub node: NodeId,
    pub counts: Vec<usize>,
}

impl VisualConceptBank {
    pub fn present(&self, n: usize) -> bool {
        self.counts[n] > 0
    }

    pub fn num_present(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn extract_visual_concepts<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    pseudo: &[usize],
    num_concepts: usize,
) -> Result<VisualConceptBank> {
    let node = tape.segment_mean(x, pseudo, num_concepts)?;
    let mut counts = vec![0usize; num_concepts];
    for &p in pseudo {
        counts[p] += 1;
    }
    Ok(VisualConceptBank { node, counts })
}

/// Distance between two plain vectors under the configured metric.
pub fn distance_between(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        }
        DistanceKind::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// N×C matrix of concept-to-prototype distances. Absent or zero-norm
/// concepts carry +infinity so top-k selection can never pick them.
/// Purely a selection signal: gradients do not flow through it.
pub fn concept_distances<S: Scalar>(
    bank_values: &Tensor<S>,
    counts: &[usize],
    mil_weight: &Tensor<S>,
    kind: DistanceKind,
) -> Result<Vec<Vec<f64>>> {
    let (n, dp) = bank_values.dims2()?;
    let (c, wd) = mil_weight.dims2()?;
    if wd != dp || counts.len() != n {
        return Err(Error::shape(
            "concept_distances",
            format!("bank {:?} vs weight {:?}", bank_values.shape(), mil_weight.shape()),
        ));
    }
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|j| mil_weight.row(j).iter().map(|v| v.as_f64()).collect())
        .collect();
    for (j, w) in prototypes.iter().enumerate() {
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric(format!("class prototype {} has zero norm", j)));
        }
    }
    let mut out = vec![vec![f64::INFINITY; c]; n];
    for i in 0..n {
        if counts[i] == 0 {
            continue;
        }
        let v: Vec<f64> = bank_values.row(i).iter().map(|x| x.as_f64()).collect();
        if kind == DistanceKind::Cosine && v.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..c {
            out[i][j] = distance_between(&v, &prototypes[j], kind);
        }
    }
    Ok(out)
}

/// Indices of the up-to-k present concepts nearest to class `j`,
/// nearest first; ties resolve to the lower concept index.
pub fn topk_concepts(distances: &[Vec<f64>], class: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len())
        .filter(|&n| distances[n][class].is_finite())
        .collect();
    order.sort_by(|&a, &b| {
        distances[a][class]
            .partial_cmp(&distances[b][class])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Fine-class representation: mean of the selected concepts' rows. The
/// selection is constant for differentiation; gradients flow through
/// the selected rows only.
pub fn compose_fine<S: Scalar>(
    tape: &mut Tape<S>,
    bank: &VisualConceptBank,
    distances: &[Vec<f64>],
    k: usize,
    class: usize,
) -> Result<NodeId> {
    let selected = topk_concepts(distances, class, k);
    if selected.is_empty() {
        return Err(Error::Contract(format!(
            "no present visual concept to compose class {}",
            class
        )));
    }
    tape.rows_mean(bank.node, &selected)
}

/// Mean distance between each positive class representation and its
/// prototype row; gradients reach both sides.
pub fn concept_loss<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &TapedParams,
    fine_reps: &[(usize, NodeId)],
    kind: DistanceKind,
) -> Result<NodeId> {
    if fine_reps.is_empty() {
        return Err(Error::Contract("concept loss over zero positive classes".into()));
    }
    let mut terms = Vec::with_capacity(fine_reps.len());
    let weight = 1.0 / fine_reps.len() as f64;
    for &(class, rep) in fine_reps {
        let proto = tape.row(tp.id(MIL_W), class)?;
        let d = match kind {
            DistanceKind::Cosine => tape.cosine_distance(rep, proto)?,
            DistanceKind::Euclidean => tape.euclidean_distance(rep, proto)?,
        };
        terms.push((d, weight));
    }
    tape.weighted_sum(&terms)
}

/// Coarse representations: elementwise mean or max over each group's
/// fine-class representations, in fine-class order.
pub fn compose_coarse<S: Scalar>(
    tape: &mut Tape<S>,
    fine_reps: &[NodeId],
    hierarchy: &LabelHierarchy,
    mode: ComposeMode,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(hierarchy.num_coarse());
    for group in &hierarchy.grouping {
        let members: Vec<NodeId> = group.iter().map(|&j| fine_reps[j]).collect();
        let stacked = tape.stack_rows(&members)?;
        let all: Vec<usize> = (0..members.len()).collect();
        let rep = match mode {
            ComposeMode::Mean => tape.rows_mean(stacked, &all)?,
            ComposeMode::Max => tape.rows_max(stacked, &all)?,
        };
        out.push(rep);
    }
    Ok(out)
}

/// BCE between each coarse representation's own logit and the coarse
/// label: the classifier maps e'_u to U logits and the u-th one is
/// matched against y'_u.
pub fn coarse_loss<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &TapedParams,
    coarse_reps: &[NodeId],
    coarse_labels: &[bool],
) -> Result<NodeId> {
    let stacked = tape.stack_rows(coarse_reps)?;
    let logits = tape.linear(stacked, tp.id(COARSE_W), tp.id(COARSE_B))?;
    let own = tape.diag(logits)?;
    tape.bce_mean(own, coarse_labels)
}

/// Which loss terms are computed at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub mil: bool,
    pub pseudo: bool,
    pub concept: bool,
    pub coarse: bool,
}

impl LossSet {
    pub fn full() -> Self {
        LossSet {
            mil: true,
            pseudo: true,
            concept: true,
            coarse: true,
        }
    }

    pub fn mil_only() -> Self {
        LossSet {
            mil: true,
            pseudo: false,
            concept: false,
            coarse: false,
        }
    }

    /// The nested ablation ladder, MIL-only through the full model.
    pub fn ladder() -> [LossSet; 4] {
        [
            LossSet::mil_only(),
            LossSet { pseudo: true, ..LossSet::mil_only() },
            LossSet { pseudo: true, concept: true, ..LossSet::mil_only() },
            LossSet::full(),
        ]
    }

    pub fn needs_clustering(&self) -> bool {
        self.pseudo || self.concept || self.coarse
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mil {
            return Err(Error::Config("the MIL loss cannot be disabled".into()));
        }
        Ok(())
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let mut set = LossSet {
            mil: false,
            pseudo: false,
            concept: false,
            coarse: false,
        };
        for part in spec.split(',') {
            match part.trim() {
                "mil" => set.mil = true,
                "pseudo" => set.pseudo = true,
                "concept" => set.concept = true,
                "coarse" => set.coarse = true,
                other => return Err(Error::Config(format!("unknown loss '{}'", other))),
            }
        }
        Ok(set)
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.mil {
            parts.push("mil");
        }
        if self.pseudo {
            parts.push("pseudo");
        }
        if self.concept {
            parts.push("concept");
        }
        if self.coarse {
            parts.push("coarse");
        }
        parts.join(",")
    }
}

/// λ₁..λ₄ term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mil: f64,
    pub pseudo: f64,
    pub concept: f64,
    pub coarse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mil: 1.0,
            pseudo: 0.001,
            concept: 0.01,
            coarse: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub l_mil: f64,
    pub l_pseudo: f64,
    pub l_concept: f64,
    pub l_coarse: f64,
    pub total: f64,
}

/// One video's inputs to the batch loss.
pub struct VideoSample<'a, S> {
    pub clips: &'a Tensor<S>,
    /// Multi-hot fine label, length C.
    pub fine_labels: &'a [bool],
    /// Per-clip pseudo labels; required when any clustering-dependent
    /// loss is enabled.
    pub pseudo_labels: Option<&'a [usize]>,
}

/// Batch loss: each enabled term is averaged over the videos, then the
/// terms combine with their λ weights. Disabled terms are skipped
/// entirely and reported as zero.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    tp: &TapedParams,
    config: &ModelConfig,
    hierarchy: &LabelHierarchy,
    batch: &[VideoSample<'_, S>],
    weights: &LossWeights,
    enabled: &LossSet,
) -> Result<(NodeId, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut mil_terms = Vec::new();
    let mut pseudo_terms = Vec::new();
    let mut concept_terms = Vec::new();
    let mut coarse_terms = Vec::new();

    for sample in batch {
        if sample.fine_labels.len() != config.num_fine {
            return Err(Error::shape(
                "total_loss",
                format!(
                    "label vector of length {} for {} classes",
                    sample.fine_labels.len(),
                    config.num_fine
                ),
            ));
        }
        let clips = tape.leaf(sample.clips.clone());
        let x = encode(tape, tp, clips)?;

        if enabled.mil {
            let scores = clip_scores(tape, tp, x)?;
            let pooled = tape.mil_pool(scores)?;
            mil_terms.push(mil_loss(tape, pooled, sample.fine_labels)?);
        }

        if enabled.needs_clustering() {
            let pseudo = sample.pseudo_labels.ok_or_else(|| {
                Error::Contract("pseudo labels required for the enabled losses".into())
            })?;
            if enabled.pseudo {
                pseudo_terms.push(pseudo_loss(tape, tp, x, pseudo)?);
            }
            if enabled.concept || enabled.coarse {
                let bank = extract_visual_concepts(tape, x, pseudo, config.num_concepts)?;
                let distances = concept_distances(
                    tape.value(bank.node),
                    &bank.counts,
                    tape.value(tp.id(MIL_W)),
                    config.distance,
                )?;
                let positives: Vec<usize> = (0..config.num_fine)
                    .filter(|&j| sample.fine_labels[j])
                    .collect();
                if enabled.coarse {
                    // Coarse composition consumes a representation for
                    // every fine class so negatives also receive BCE
                    // pressure downstream.
                    let mut fine_reps = Vec::with_capacity(config.num_fine);
                    for j in 0..config.num_fine {
                        fine_reps.push(compose_fine(tape, &bank, &distances, config.topk_concepts, j)?);
                    }
                    if enabled.concept {
                        let pos_reps: Vec<(usize, NodeId)> =
                            positives.iter().map(|&j| (j, fine_reps[j])).collect();
                        concept_terms.push(concept_loss(tape, tp, &pos_reps, config.distance)?);
                    }
                    let coarse_reps = compose_coarse(tape, &fine_reps, hierarchy, config.compose)?;
                    let y_coarse = coarse_labels_from_fine(sample.fine_labels, hierarchy);
                    coarse_terms.push(coarse_loss(tape, tp, &coarse_reps, &y_coarse)?);
                } else if enabled.concept {
                    let mut pos_reps = Vec::with_capacity(positives.len());
                    for &j in &positives {
                        let rep = compose_fine(tape, &bank, &distances, config.topk_concepts, j)?;
                        pos_reps.push((j, rep));
                    }
                    concept_terms.push(concept_loss(tape, tp, &pos_reps, config.distance)?);
                }
            }
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let average = |tape: &mut Tape<S>, terms: &[NodeId]| -> Result<Option<NodeId>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let weighted: Vec<(NodeId, f64)> = terms.iter().map(|&t| (t, inv_b)).collect();
        Ok(Some(tape.weighted_sum(&weighted)?))
    };
    let mil_avg = average(tape, &mil_terms)?;
    let pseudo_avg = average(tape, &pseudo_terms)?;
    let concept_avg = average(tape, &concept_terms)?;
    let coarse_avg = average(tape, &coarse_terms)?;

    let mut combined = Vec::new();
    for (node, lambda) in [
        (mil_avg, weights.mil),
        (pseudo_avg, weights.pseudo),
        (concept_avg, weights.concept),
        (coarse_avg, weights.coarse),
    ] {
        if let Some(n) = node {
            combined.push((n, lambda));
        }
    }
    let total = tape.weighted_sum(&combined)?;

    let read = |node: Option<NodeId>| node.map_or(0.0, |n| tape.value(n).item().as_f64());
    let breakdown = LossBreakdown {
        l_mil: read(mil_avg),
        l_pseudo: read(pseudo_avg),
        l_concept: read(concept_avg),
        l_coarse: read(coarse_avg),
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    fn test_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            encoder_hidden: 5,
            encoded_dim: 3,
            concept_hidden: 5,
            num_fine: 3,
            num_coarse: 2,
            num_concepts: 4,
            topk_concepts: 2,
            distance: DistanceKind::Cosine,
            compose: ComposeMode::Mean,
        }
    }

    fn test_hierarchy() -> LabelHierarchy {
        LabelHierarchy {
            fine: vec!["f0".into(), "f1".into(), "f2".into()],
            coarse: vec!["c0".into(), "c1".into()],
            grouping: vec![vec![0, 1], vec![2]],
        }
    }

    fn random_clips(t: usize, d: usize, seed: u64) -> Tensor64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor64::from_values(&[t, d], values).unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let params = HaanParams::<f64>::init(test_config(), 3).unwrap();
        let clips = random_clips(1, 4, 0);
        let out = encode_plain(&params, &clips).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert!(out.all_finite());

        // Identical clips encode to identical rows.
        let mut two = clips.values().to_vec();
        two.extend_from_slice(clips.values());
        let two = Tensor64::from_values(&[2, 4], two).unwrap();
        let out2 = encode_plain(&params, &two).unwrap();
        assert_eq!(out2.row(0), out2.row(1));
        assert_eq!(out2.row(0), out.row(0));
    }

    #[test]
    fn taped_and_plain_forward_agree_bitwise() {
        let params = HaanParams::<f64>::init(test_config(), 5).unwrap();
        let clips = random_clips(7, 4, 1);
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &params);
        let c = tape.leaf(clips.clone());
        let x = encode(&mut tape, &tp, c).unwrap();
        let s = clip_scores(&mut tape, &tp, x).unwrap();

        let x_plain = encode_plain(&params, &clips).unwrap();
        let s_plain = clip_scores_plain(&params, &x_plain).unwrap();
        assert_eq!(tape.value(x).values(), x_plain.values());
        assert_eq!(tape.value(s).values(), s_plain.values());
    }

    #[test]
    fn zero_weight_scores_are_zero() {
        let config = test_config();
        let mut params = HaanParams::<f64>::init(config, 2).unwrap();
        *params.value_mut(MIL_W) = Tensor64::zeros(&[3, 3]).with_grad();
        *params.value_mut(MIL_B) = Tensor64::zeros(&[3]).with_grad();
        let x = random_clips(4, 3, 2);
        let s = clip_scores_plain(&params, &x).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aligned_clip_wins_its_class() {
        let config = test_config();
        let mut params = HaanParams::<f64>::init(config, 2).unwrap();
        *params.value_mut(MIL_W) = Tensor64::from_values(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap()
        .with_grad();
        *params.value_mut(MIL_B) = Tensor64::zeros(&[3]).with_grad();
        let x = Tensor64::from_values(&[1, 3], vec![0.0, 2.0, 0.0]).unwrap();
        let s = clip_scores_plain(&params, &x).unwrap();
        let row = s.row(0);
        assert!(row[1] > row[0] && row[1] > row[2]);
    }

    #[test]
    fn concept_extraction_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor64::from_values(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap());
        let bank = extract_visual_concepts(&mut tape, x, &[0, 1, 0], 3).unwrap();
        let v = tape.value(bank.node);
        assert_eq!(v.row(0), &[2.0, 0.0]);
        assert_eq!(v.row(1), &[0.0, 1.0]);
        assert_eq!(v.row(2), &[0.0, 0.0]);
        assert!(bank.present(0) && bank.present(1) && !bank.present(2));
    }

    #[test]
    fn concept_distance_sentinels_and_values() {
        let bank = Tensor64::from_values(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let weight = Tensor64::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = concept_distances(&bank, &[2, 1, 0], &weight, DistanceKind::Cosine).unwrap();
        assert!(d[0][0].abs() < 1e-12); // v == w
        assert!((d[0][1] - 1.0).abs() < 1e-12); // orthogonal
        assert!(d[2][0].is_infinite()); // absent row
        assert_eq!(topk_concepts(&d, 0, 5), vec![0, 1]);
    }

    #[test]
    fn zero_norm_prototype_is_numeric_error() {
        let bank = Tensor64::from_values(&[1, 2], vec![1.0, 0.0]).unwrap();
        let weight = Tensor64::zeros(&[2, 2]);
        assert!(matches!(
            concept_distances(&bank, &[1], &weight, DistanceKind::Cosine),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn compose_fine_hand_case() {
        // Three present concepts with distances 0.1, 0.5, 0.3 to class
        // 0: top-2 selects concepts 0 and 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor64::from_values(&[3, 2], vec![1.0, 0.0, 5.0, 5.0, 0.0, 1.0]).unwrap());
        let bank = extract_visual_concepts(&mut tape, x, &[0, 1, 2], 3).unwrap();
        let distances = vec![vec![0.1], vec![0.5], vec![0.3]];
        let e = compose_fine(&mut tape, &bank, &distances, 2, 0).unwrap();
        assert_eq!(tape.value(e).values(), &[0.5, 0.5]);

        // k = 1 picks the single nearest concept.
        let e1 = compose_fine(&mut tape, &bank, &distances, 1, 0).unwrap();
        assert_eq!(tape.value(e1).values(), &[1.0, 0.0]);

        // Fewer present concepts than k uses all of them.
        let eall = compose_fine(&mut tape, &bank, &distances, 10, 0).unwrap();
        assert_eq!(tape.value(eall).values(), &[2.0, 2.0]);
    }

    #[test]
    fn concept_loss_zero_when_reps_equal_prototypes() {
        let config = test_config();
        let params = HaanParams::<f64>::init(config, 11).unwrap();
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &params);
        // Use the prototype rows themselves (scaled) as representations.
        let w = params.value(MIL_W).clone();
        let mut reps = Vec::new();
        for j in 0..2 {
            let scaled: Vec<f64> = w.row(j).iter().map(|v| v * 3.0).collect();
            let node = tape.leaf(Tensor64::from_values(&[3], scaled).unwrap());
            reps.push((j, node));
        }
        let loss = concept_loss(&mut tape, &tp, &reps, DistanceKind::Cosine).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn compose_coarse_modes() {
        let hierarchy = test_hierarchy();
        let mut tape = Tape::<f64>::new();
        let e0 = tape.leaf(Tensor64::from_values(&[2], vec![1.0, -2.0]).unwrap());
        let e1 = tape.leaf(Tensor64::from_values(&[2], vec![0.0, 5.0]).unwrap());
        let e2 = tape.leaf(Tensor64::from_values(&[2], vec![7.0, 7.0]).unwrap());
        let mean = compose_coarse(&mut tape, &[e0, e1, e2], &hierarchy, ComposeMode::Mean).unwrap();
        assert_eq!(tape.value(mean[0]).values(), &[0.5, 1.5]);
        // Singleton group passes through.
        assert_eq!(tape.value(mean[1]).values(), &[7.0, 7.0]);
        let max = compose_coarse(&mut tape, &[e0, e1, e2], &hierarchy, ComposeMode::Max).unwrap();
        assert_eq!(tape.value(max[0]).values(), &[1.0, 5.0]);
    }

    #[test]
    fn coarse_loss_ln2_at_zero_init() {
        let config = test_config();
        let mut params = HaanParams::<f64>::init(config, 4).unwrap();
        *params.value_mut(COARSE_W) = Tensor64::zeros(&[2, 3]).with_grad();
        *params.value_mut(COARSE_B) = Tensor64::zeros(&[2]).with_grad();
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &params);
        let e0 = tape.leaf(Tensor64::from_values(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let e1 = tape.leaf(Tensor64::from_values(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
        let loss = coarse_loss(&mut tape, &tp, &[e0, e1], &[true, false]).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    fn batch_loss(
        enabled: LossSet,
        weights: LossWeights,
        seed: u64,
    ) -> (LossBreakdown, Vec<Tensor<f64>>) {
        let config = test_config();
        let hierarchy = test_hierarchy();
        let params = HaanParams::<f64>::init(config.clone(), seed).unwrap();
        let clips_a = random_clips(6, 4, seed + 10);
        let clips_b = random_clips(4, 4, seed + 20);
        let pseudo_a = vec![0, 1, 2, 3, 0, 1];
        let pseudo_b = vec![2, 2, 1, 0];
        let batch = vec![
            VideoSample {
                clips: &clips_a,
                fine_labels: &[true, false, true],
                pseudo_labels: Some(&pseudo_a),
            },
            VideoSample {
                clips: &clips_b,
                fine_labels: &[false, true, false],
                pseudo_labels: Some(&pseudo_b),
            },
        ];
        let mut tape = Tape::new();
        let tp = TapedParams::register(&mut tape, &params);
        let (loss, breakdown) =
            total_loss(&mut tape, &tp, &config, &hierarchy, &batch, &weights, &enabled).unwrap();
        let grads = tape.backward(loss).unwrap();
        let grad_tensors: Vec<Tensor<f64>> =
            (0..NUM_PARAMS).map(|i| grads.get(i).unwrap().clone()).collect();
        (breakdown, grad_tensors)
    }

    #[test]
    fn total_is_weighted_sum_of_breakdown() {
        let weights = LossWeights {
            mil: 1.0,
            pseudo: 0.3,
            concept: 0.7,
            coarse: 2.0,
        };
        let (b, _) = batch_loss(LossSet::full(), weights, 3);
        let expected =
            1.0 * b.l_mil + 0.3 * b.l_pseudo + 0.7 * b.l_concept + 2.0 * b.l_coarse;
        assert!((b.total - expected).abs() < 1e-6, "{} vs {}", b.total, expected);
        assert!(b.l_mil > 0.0 && b.l_pseudo > 0.0 && b.l_concept > 0.0 && b.l_coarse > 0.0);
    }

    #[test]
    fn zero_lambdas_give_zero_total_and_gradients() {
        let weights = LossWeights {
            mil: 0.0,
            pseudo: 0.0,
            concept: 0.0,
            coarse: 0.0,
        };
        let (b, grads) = batch_loss(LossSet::full(), weights, 4);
        assert_eq!(b.total, 0.0);
        for g in grads {
            assert!(g.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn disabled_terms_match_isolated_computation_bitwise() {
        let weights = LossWeights::default();
        let (full, _) = batch_loss(LossSet::full(), weights, 5);
        let (mil_alone, _) = batch_loss(LossSet::mil_only(), weights, 5);
        assert_eq!(full.l_mil.to_bits(), mil_alone.l_mil.to_bits());
        assert_eq!(mil_alone.l_pseudo, 0.0);
        assert_eq!(mil_alone.l_concept, 0.0);
        assert_eq!(mil_alone.l_coarse, 0.0);
        // λ₂=λ₃=λ₄=0 with only MIL enabled: total equals the MIL term.
        let (b, _) = batch_loss(
            LossSet::mil_only(),
            LossWeights {
                mil: 1.0,
                pseudo: 0.0,
                concept: 0.0,
                coarse: 0.0,
            },
            5,
        );
        assert_eq!(b.total.to_bits(), b.l_mil.to_bits());
    }

    #[test]
    fn prototype_scaling_leaves_selection_and_concept_loss_unchanged() {
        let config = test_config();
        let hierarchy = test_hierarchy();
        let params = HaanParams::<f64>::init(config.clone(), 9).unwrap();
        let clips = random_clips(6, 4, 33);
        let pseudo = vec![0, 1, 2, 3, 1, 0];
        let labels = [true, true, false];

        let run = |params: &HaanParams<f64>| -> (Vec<Vec<f64>>, Vec<usize>, f64) {
            let mut tape = Tape::new();
            let tp = TapedParams::register(&mut tape, params);
            let c = tape.leaf(clips.clone());
            let x = encode(&mut tape, &tp, c).unwrap();
            let bank = extract_visual_concepts(&mut tape, x, &pseudo, config.num_concepts).unwrap();
            let d = concept_distances(
                tape.value(bank.node),
                &bank.counts,
                tape.value(tp.id(MIL_W)),
                DistanceKind::Cosine,
            )
            .unwrap();
            let sel = topk_concepts(&d, 0, 2);
            let rep = compose_fine(&mut tape, &bank, &d, 2, 0).unwrap();
            let loss = concept_loss(&mut tape, &tp, &[(0, rep)], DistanceKind::Cosine).unwrap();
            (d, sel, tape.value(loss).item())
        };
        let (d1, sel1, l1) = run(&params);
        let mut scaled = params.clone();
        let mut w = scaled.value(MIL_W).clone();
        for v in w.values_mut() {
            *v *= 4.0;
        }
        *scaled.value_mut(MIL_W) = w.with_grad();
        let (d2, sel2, l2) = run(&scaled);
        assert_eq!(sel1, sel2);
        assert!((l1 - l2).abs() < 1e-5);
        for (r1, r2) in d1.iter().zip(&d2) {
            for (a, b) in r1.iter().zip(r2) {
                if a.is_finite() {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
        let _ = hierarchy;
    }
}
