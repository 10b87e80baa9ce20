//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records the primitive operations of one forward pass in
//! topological order, keeping the activations each backward rule needs.
//! [`Tape::backward`] replays the record in reverse and returns a
//! [`GradientSet`] keyed by parameter id. One backward per forward:
//! reusing a consumed tape is a contract error.
//!
//! Only the primitives the model's fully-connected stacks and losses
//! require are implemented; there is no broadcasting, no convolution,
//! no graph rewriting.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use std::collections::BTreeMap;

pub type NodeId = usize;
pub type ParamId = usize;

/// Gradients produced by one backward pass, keyed by parameter id.
///
/// Every parameter registered on the tape has an entry; parameters not
/// reachable from the loss get a zero gradient of matching shape.
#[derive(Debug, Clone)]
pub struct GradientSet<S> {
    grads: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> GradientSet<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

enum Op<S> {
    Leaf,
    /// y = x · weightᵀ + bias
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Elementwise max(0, x); subgradient 0 at exactly 0.
    Relu { x: NodeId, mask: Vec<bool> },
    /// Mean over rows of (logsumexp(row) − row[target]); saves softmax rows.
    SoftmaxCeMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    /// Mean over entries of the stable binary cross entropy with logits.
    BceMean { logits: NodeId, targets: Vec<bool> },
    /// 1 − a·b / (‖a‖‖b‖)
    CosineDistance { a: NodeId, b: NodeId },
    /// ‖a − b‖₂, subgradient 0 when the vectors coincide.
    EuclideanDistance { a: NodeId, b: NodeId },
    /// Per class: mean of the scores at or above that class's mean score.
    /// The selection mask is treated as constant for differentiation.
    MilPool { scores: NodeId, mask: Vec<bool>, counts: Vec<usize> },
    /// Row means grouped by label; labels without rows yield zero rows.
    SegmentMean {
        x: NodeId,
        labels: Vec<usize>,
        counts: Vec<usize>,
    },
    /// Mean of a fixed subset of rows (selection constant).
    RowsMean { x: NodeId, rows: Vec<usize> },
    /// Elementwise max over a fixed subset of rows; saves per-column argmax.
    RowsMax { x: NodeId, argmax: Vec<usize> },
    /// One row of a matrix.
    Row { x: NodeId, index: usize },
    /// Stacks rank-1 nodes of equal length into a matrix.
    StackRows { rows: Vec<NodeId> },
    /// Main diagonal of a square matrix.
    Diag { x: NodeId },
    /// Sum of all entries.
    SumAll { x: NodeId },
    /// Σ wᵢ·termᵢ over scalar nodes.
    WeightedSum { terms: Vec<NodeId>, weights: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
    /// Smallest distance to a non-differentiable boundary seen during the
    /// forward pass (relu inputs, coincident points in the euclidean
    /// distance). Used by the gradient checker to skip kink neighborhoods.
    kink_margin: f64,
    /// FNV-1a hash over every discrete selection made during the forward
    /// pass (relu masks, pooling masks, row subsets, argmaxes). Two
    /// evaluations with equal signatures made identical selections.
    selection_sig: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            kink_margin: f64::INFINITY,
            selection_sig: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Tensor<S> {
        &self.nodes[n].value
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn selection_sig(&self) -> u64 {
        self.selection_sig
    }

    fn sig_byte(&mut self, b: u8) {
        self.selection_sig ^= b as u64;
        self.selection_sig = self.selection_sig.wrapping_mul(FNV_PRIME);
    }

    fn sig_usize(&mut self, v: usize) {
        for b in (v as u64).to_le_bytes() {
            self.sig_byte(b);
        }
    }

    fn sig_bits(&mut self, bits: &[bool]) {
        let mut acc = 0u8;
        for (i, &b) in bits.iter().enumerate() {
            acc = (acc << 1) | b as u8;
            if i % 8 == 7 {
                self.sig_byte(acc);
                acc = 0;
            }
        }
        self.sig_byte(acc);
    }

    fn note_margin(&mut self, m: f64) {
        if m < self.kink_margin {
            self.kink_margin = m;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, param: Option<ParamId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Registers a constant input (no gradient unless the tensor was
    /// marked `with_grad`).
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, None)
    }

    /// Registers a trainable parameter leaf; its gradient appears in the
    /// [`GradientSet`] under `id`.
    pub fn param(&mut self, id: ParamId, t: &Tensor<S>) -> NodeId {
        self.push(t.clone(), Op::Leaf, true, Some(id))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tensor::linear_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, needs, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let input = &self.nodes[x].value;
        let mask: Vec<bool> = input.values().iter().map(|v| *v > S::zero()).collect();
        let closest = input
            .values()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        self.note_margin(closest);
        let y = tensor::relu_forward(&self.nodes[x].value);
        self.sig_bits(&mask);
        let needs = self.needs(&[x]);
        self.push(y, Op::Relu { x, mask }, needs, None)
    }

    /// Cross entropy of one logit vector against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        if self.nodes[logits].value.shape().len() != 1 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected rank-1 logits, got {:?}", self.nodes[logits].value.shape()),
            ));
        }
        self.softmax_ce_mean(logits, &[target])
    }

    /// Mean cross entropy over the rows of a [T,N] logit matrix.
    pub fn softmax_ce_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.nodes[logits].value.dims2()?;
        if targets.len() != rows {
            return Err(Error::shape(
                "softmax_ce_mean",
                format!("{} logit rows but {} targets", rows, targets.len()),
            ));
        }
        let lv = self.nodes[logits].value.values();
        let mut probs = vec![S::zero(); rows * cols];
        let mut total = S::zero();
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(Error::Contract(format!(
                    "class index {} out of range for {} logits",
                    t, cols
                )));
            }
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                denom = denom + e;
            }
            for c in 0..cols {
                probs[r * cols + c] = probs[r * cols + c] / denom;
            }
            let lse = max + denom.ln();
            total = total + (lse - row[t]);
        }
        let loss = total / S::of(rows as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCeMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
            None,
        ))
    }

    /// Binary cross entropy with logits for a single scalar logit.
    pub fn bce_with_logits(&mut self, logit: NodeId, target: bool) -> Result<NodeId> {
        if !self.nodes[logit].value.is_scalar() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("expected scalar logit, got {:?}", self.nodes[logit].value.shape()),
            ));
        }
        self.bce_mean(logit, &[target])
    }

    /// Mean binary cross entropy with logits over all entries.
    pub fn bce_mean(&mut self, logits: NodeId, targets: &[bool]) -> Result<NodeId> {
        let lv = self.nodes[logits].value.values();
        if lv.len() != targets.len() {
            return Err(Error::shape(
                "bce_mean",
                format!("{} logits but {} targets", lv.len(), targets.len()),
            ));
        }
        // max(z,0) − z·t + ln(1 + e^{−|z|})
        let mut total = S::zero();
        for (z, &t) in lv.iter().zip(targets) {
            let z = *z;
            let tv = if t { S::one() } else { S::zero() };
            total = total + z.max(S::zero()) - z * tv + (-z.abs()).exp().ln_1p();
        }
        let loss = total / S::of(targets.len() as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                logits,
                targets: targets.to_vec(),
            },
            needs,
            None,
        ))
    }

    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.nodes[a].value.values(), self.nodes[b].value.values());
        if av.len() != bv.len() {
            return Err(Error::shape(
                "cosine_distance",
                format!("{} vs {} components", av.len(), bv.len()),
            ));
        }
        let na = tensor::norm2(av);
        let nb = tensor::norm2(bv);
        if na == S::zero() || nb == S::zero() {
            return Err(Error::Numeric(
                "cosine_distance on zero-norm vector".to_string(),
            ));
        }
        let d = S::one() - tensor::dot(av, bv) / (na * nb);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::CosineDistance { a, b }, needs, None))
    }

    pub fn euclidean_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.nodes[a].value.values(), self.nodes[b].value.values());
        if av.len() != bv.len() {
            return Err(Error::shape(
                "euclidean_distance",
                format!("{} vs {} components", av.len(), bv.len()),
            ));
        }
        let mut acc = S::zero();
        for i in 0..av.len() {
            let diff = av[i] - bv[i];
            acc = acc + diff * diff;
        }
        let d = acc.sqrt();
        self.note_margin(d.as_f64());
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::EuclideanDistance { a, b }, needs, None))
    }

    /// Mean-above-mean pooling of a [T,C] score matrix down to C logits.
    pub fn mil_pool(&mut self, scores: NodeId) -> Result<NodeId> {
        let (t, c) = self.nodes[scores].value.dims2()?;
        if t == 0 {
            return Err(Error::Contract("mil_pool on empty score matrix".to_string()));
        }
        let sv = self.nodes[scores].value.values();
        let mut mask = vec![false; t * c];
        let mut counts = vec![0usize; c];
        let mut pooled = vec![S::zero(); c];
        for j in 0..c {
            let mut sum = S::zero();
            for i in 0..t {
                sum = sum + sv[i * c + j];
            }
            let mean = sum / S::of(t as f64);
            let mut sel_sum = S::zero();
            for i in 0..t {
                if sv[i * c + j] >= mean {
                    mask[i * c + j] = true;
                    counts[j] += 1;
                    sel_sum = sel_sum + sv[i * c + j];
                }
            }
            pooled[j] = sel_sum / S::of(counts[j] as f64);
        }
        self.sig_bits(&mask);
        let needs = self.needs(&[scores]);
        let value = Tensor::from_values(&[c], pooled)?;
        Ok(self.push(value, Op::MilPool { scores, mask, counts }, needs, None))
    }

    /// Per-label row means of a [T,d] matrix into an [n,d] matrix.
    pub fn segment_mean(&mut self, x: NodeId, labels: &[usize], n: usize) -> Result<NodeId> {
        let (t, d) = self.nodes[x].value.dims2()?;
        if labels.len() != t {
            return Err(Error::shape(
                "segment_mean",
                format!("{} rows but {} labels", t, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Contract(format!(
                "segment label {} out of range for {} segments",
                bad, n
            )));
        }
        let xv = self.nodes[x].value.values();
        let mut out = vec![S::zero(); n * d];
        let mut counts = vec![0usize; n];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for k in 0..d {
                out[l * d + k] = out[l * d + k] + xv[i * d + k];
            }
        }
        for l in 0..n {
            if counts[l] > 0 {
                let inv = S::one() / S::of(counts[l] as f64);
                for k in 0..d {
                    out[l * d + k] = out[l * d + k] * inv;
                }
            }
        }
        let needs = self.needs(&[x]);
        let value = Tensor::from_values(&[n, d], out)?;
        Ok(self.push(
            value,
            Op::SegmentMean {
                x,
                labels: labels.to_vec(),
                counts,
            },
            needs,
            None,
        ))
    }

    /// Mean of the given rows of a matrix. The row choice is a constant
    /// of the forward pass.
    pub fn rows_mean(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, d) = self.nodes[x].value.dims2()?;
        if rows.is_empty() {
            return Err(Error::Contract("rows_mean over empty row set".to_string()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("rows_mean", format!("row {} out of {}", bad, r)));
        }
        let xv = self.nodes[x].value.values();
        let mut out = vec![S::zero(); d];
        for &i in rows {
            for k in 0..d {
                out[k] = out[k] + xv[i * d + k];
            }
        }
        let inv = S::one() / S::of(rows.len() as f64);
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        for &i in rows {
            self.sig_usize(i);
        }
        let needs = self.needs(&[x]);
        let value = Tensor::from_values(&[d], out)?;
        Ok(self.push(value, Op::RowsMean { x, rows: rows.to_vec() }, needs, None))
    }

    /// Elementwise max over the given rows of a matrix.
    pub fn rows_max(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, d) = self.nodes[x].value.dims2()?;
        if rows.is_empty() {
            return Err(Error::Contract("rows_max over empty row set".to_string()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("rows_max", format!("row {} out of {}", bad, r)));
        }
        let xv = self.nodes[x].value.values();
        let mut out = vec![S::neg_infinity(); d];
        let mut argmax = vec![rows[0]; d];
        for &i in rows {
            for k in 0..d {
                if xv[i * d + k] > out[k] {
                    out[k] = xv[i * d + k];
                    argmax[k] = i;
                }
            }
        }
        for &i in rows {
            self.sig_usize(i);
        }
        for &a in &argmax {
            self.sig_usize(a);
        }
        let needs = self.needs(&[x]);
        let value = Tensor::from_values(&[d], out)?;
        Ok(self.push(value, Op::RowsMax { x, argmax }, needs, None))
    }

    /// One row of a matrix as a rank-1 node.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let (r, d) = self.nodes[x].value.dims2()?;
        if index >= r {
            return Err(Error::shape("row", format!("row {} out of {}", index, r)));
        }
        let values = self.nodes[x].value.row(index).to_vec();
        let needs = self.needs(&[x]);
        let value = Tensor::from_values(&[d], values)?;
        Ok(self.push(value, Op::Row { x, index }, needs, None))
    }

    /// Stacks rank-1 nodes of equal length into an [R,d] matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of zero rows".to_string()));
        }
        let d = self.nodes[rows[0]].value.len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for &n in rows {
            let v = self.nodes[n].value.values();
            if v.len() != d {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row lengths differ: {} vs {}", d, v.len()),
                ));
            }
            values.extend_from_slice(v);
        }
        let needs = self.needs(rows);
        let value = Tensor::from_values(&[rows.len(), d], values)?;
        Ok(self.push(value, Op::StackRows { rows: rows.to_vec() }, needs, None))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if r != c {
            return Err(Error::shape("diag", format!("matrix {:?} not square", [r, c])));
        }
        let xv = self.nodes[x].value.values();
        let values: Vec<S> = (0..r).map(|i| xv[i * c + i]).collect();
        let needs = self.needs(&[x]);
        let value = Tensor::from_values(&[r], values)?;
        Ok(self.push(value, Op::Diag { x }, needs, None))
    }

    /// Sum of every entry.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: S = self.nodes[x].value.values().iter().cloned().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll { x }, needs, None)
    }

    /// Weighted sum of scalar nodes; the workhorse for loss combination
    /// and batch averaging.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = S::zero();
        for &(n, w) in terms {
            if !self.nodes[n].value.is_scalar() {
                return Err(Error::Contract(
                    "weighted_sum over non-scalar term".to_string(),
                ));
            }
            total = total + S::of(w) * self.nodes[n].value.item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<S> = terms.iter().map(|t| S::of(t.1)).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum { terms: ids, weights },
            needs,
            None,
        ))
    }

    /// Propagates gradients from a scalar loss node back to every
    /// registered parameter. Consumes the tape's single backward budget.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientSet<S>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".to_string(),
            ));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![S::one()]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let go = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &go, &mut grads);
            grads[id] = Some(go);
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                let g = match &grads[id] {
                    Some(g) => Tensor::from_values(node.value.shape(), g.clone())?,
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(pid, g);
            }
        }
        Ok(GradientSet { grads: out })
    }

    fn backward_op(&self, id: NodeId, go: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let mut add = |target: NodeId, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[target].needs_grad {
                return;
            }
            let slot = &mut grads[target];
            if slot.is_none() {
                *slot = Some(vec![S::zero(); nodes[target].value.len()]);
            }
            f(slot.as_mut().unwrap());
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, n_in) = nodes[*x].value.dims2().unwrap();
                let (n_out, _) = nodes[*w].value.dims2().unwrap();
                let xv = nodes[*x].value.values();
                let wv = nodes[*w].value.values();
                add(*x, &mut |gx| {
                    for r in 0..m {
                        for i in 0..n_in {
                            let mut acc = S::zero();
                            for o in 0..n_out {
                                acc = acc + go[r * n_out + o] * wv[o * n_in + i];
                            }
                            gx[r * n_in + i] = gx[r * n_in + i] + acc;
                        }
                    }
                });
                add(*w, &mut |gw| {
                    for o in 0..n_out {
                        for i in 0..n_in {
                            let mut acc = S::zero();
                            for r in 0..m {
                                acc = acc + go[r * n_out + o] * xv[r * n_in + i];
                            }
                            gw[o * n_in + i] = gw[o * n_in + i] + acc;
                        }
                    }
                });
                add(*b, &mut |gb| {
                    for o in 0..n_out {
                        let mut acc = S::zero();
                        for r in 0..m {
                            acc = acc + go[r * n_out + o];
                        }
                        gb[o] = gb[o] + acc;
                    }
                });
            }
            Op::Relu { x, mask } => {
                add(*x, &mut |gx| {
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            gx[i] = gx[i] + go[i];
                        }
                    }
                });
            }
            Op::SoftmaxCeMean { logits, targets, probs } => {
                let cols = probs.len() / targets.len();
                let scale = go[0] / S::of(targets.len() as f64);
                add(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { S::one() } else { S::zero() };
                            gl[r * cols + c] =
                                gl[r * cols + c] + scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::BceMean { logits, targets } => {
                let lv = nodes[*logits].value.values();
                let scale = go[0] / S::of(targets.len() as f64);
                add(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let tv = if t { S::one() } else { S::zero() };
                        gl[i] = gl[i] + scale * (sigmoid(lv[i]) - tv);
                    }
                });
            }
            Op::CosineDistance { a, b } => {
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                let na = tensor::norm2(av);
                let nb = tensor::norm2(bv);
                let d = tensor::dot(av, bv);
                let g = go[0];
                add(*a, &mut |ga| {
                    for i in 0..av.len() {
                        ga[i] = ga[i] + g * (d * av[i] / (na * na * na * nb) - bv[i] / (na * nb));
                    }
                });
                add(*b, &mut |gb| {
                    for i in 0..bv.len() {
                        gb[i] = gb[i] + g * (d * bv[i] / (nb * nb * nb * na) - av[i] / (na * nb));
                    }
                });
            }
            Op::EuclideanDistance { a, b } => {
                let av = nodes[*a].value.values();
                let bv = nodes[*b].value.values();
                let dist = nodes[id].value.item();
                if dist.as_f64() < 1e-12 {
                    return;
                }
                let g = go[0];
                add(*a, &mut |ga| {
                    for i in 0..av.len() {
                        ga[i] = ga[i] + g * (av[i] - bv[i]) / dist;
                    }
                });
                add(*b, &mut |gb| {
                    for i in 0..bv.len() {
                        gb[i] = gb[i] - g * (av[i] - bv[i]) / dist;
                    }
                });
            }
            Op::MilPool { scores, mask, counts } => {
                let c = counts.len();
                add(*scores, &mut |gs| {
                    for (flat, &keep) in mask.iter().enumerate() {
                        if keep {
                            let j = flat % c;
                            gs[flat] = gs[flat] + go[j] / S::of(counts[j] as f64);
                        }
                    }
                });
            }
            Op::SegmentMean { x, labels, counts } => {
                let d = nodes[id].value.dims2().unwrap().1;
                add(*x, &mut |gx| {
                    for (i, &l) in labels.iter().enumerate() {
                        let inv = S::one() / S::of(counts[l] as f64);
                        for k in 0..d {
                            gx[i * d + k] = gx[i * d + k] + go[l * d + k] * inv;
                        }
                    }
                });
            }
            Op::RowsMean { x, rows } => {
                let d = nodes[id].value.len();
                let inv = S::one() / S::of(rows.len() as f64);
                add(*x, &mut |gx| {
                    for &r in rows {
                        for k in 0..d {
                            gx[r * d + k] = gx[r * d + k] + go[k] * inv;
                        }
                    }
                });
            }
            Op::RowsMax { x, argmax } => {
                let d = nodes[id].value.len();
                add(*x, &mut |gx| {
                    for k in 0..d {
                        gx[argmax[k] * d + k] = gx[argmax[k] * d + k] + go[k];
                    }
                });
            }
            Op::Row { x, index } => {
                let d = nodes[id].value.len();
                add(*x, &mut |gx| {
                    for k in 0..d {
                        gx[index * d + k] = gx[index * d + k] + go[k];
                    }
                });
            }
            Op::StackRows { rows } => {
                let d = nodes[id].value.dims2().unwrap().1;
                for (r, &n) in rows.iter().enumerate() {
                    add(n, &mut |gn| {
                        for k in 0..d {
                            gn[k] = gn[k] + go[r * d + k];
                        }
                    });
                }
            }
            Op::Diag { x } => {
                let u = nodes[id].value.len();
                add(*x, &mut |gx| {
                    for i in 0..u {
                        gx[i * u + i] = gx[i * u + i] + go[i];
                    }
                });
            }
            Op::SumAll { x } => {
                add(*x, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + go[0];
                    }
                });
            }
            Op::WeightedSum { terms, weights } => {
                for (&t, &w) in terms.iter().zip(weights) {
                    add(t, &mut |gt| {
                        gt[0] = gt[0] + w * go[0];
                    });
                }
            }
        }
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_values(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 2], &[1.0, 0.0]));
        let w = tape.leaf(t64(&[1, 2], &[2.0, 3.0]));
        let b = tape.leaf(t64(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[3.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, -1.0]));
        let w = tape.leaf(t64(
            &[3, 3],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());
    }

    #[test]
    fn linear_shape_mismatch_reports_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let err = tape.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 4]"), "{}", msg);
    }

    #[test]
    fn bias_gradient_of_summed_linear_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2], &[0.3, -0.7, 1.5, 0.2]));
        let w = tape.param(0, &t64(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]));
        let b = tape.param(1, &Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(1).unwrap().values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn relu_definition_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let _ = s;

        let mut tape = Tape::new();
        let x = tape.param(0, &t64(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // Subgradient at exactly 0 is 0.
        assert_eq!(grads.get(0).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[4], &[-3.0, -0.5, -1e-9, -100.0]));
        let y = tape.relu(x);
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        for n in [2usize, 5, 17] {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::from_values(&[n], vec![0.25f64; n]).unwrap());
            let loss = tape.softmax_cross_entropy(l, n - 1).unwrap();
            assert!((tape.value(loss).item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(t64(&[2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(l, 0).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-9, "loss {}", v);
    }

    #[test]
    fn cross_entropy_hand_case() {
        let mut tape = Tape::new();
        let l = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let loss = tape.softmax_cross_entropy(l, 1).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.leaf(t64(&[2], &[1.0, 2.0]));
        assert!(tape.softmax_cross_entropy(l, 2).is_err());
    }

    #[test]
    fn bce_symmetry_point_and_saturation() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0f64));
        let loss = tape.bce_with_logits(z, true).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(1000.0f64));
        let loss = tape.bce_with_logits(z, true).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-9);

        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(1.0f64));
        let loss = tape.bce_with_logits(z, false).unwrap();
        let expected = (1.0 + 1.0f64.exp()).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[0.3, -0.4]));
        let d = tape.cosine_distance(a, a).unwrap();
        assert!(tape.value(d).item().abs() < 1e-12);

        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[1.0, 0.0]));
        let b = tape.leaf(t64(&[2], &[0.0, 1.0]));
        let d = tape.cosine_distance(a, b).unwrap();
        assert!((tape.value(d).item() - 1.0).abs() < 1e-12);

        for c in [0.1, 1.0, 7.5] {
            let mut tape = Tape::new();
            let a = tape.leaf(t64(&[2], &[1.0, 0.0]));
            let b = tape.leaf(t64(&[2], &[c, 0.0]));
            let d = tape.cosine_distance(a, b).unwrap();
            assert!(tape.value(d).item().abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_distance_zero_norm_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[0.0, 0.0]));
        let b = tape.leaf(t64(&[2], &[1.0, 0.0]));
        assert!(tape.cosine_distance(a, b).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.param(0, &t64(&[2], &[1.0, 2.0]));
        let _ = p;
        let c = tape.leaf(Tensor::scalar(5.0f64));
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(0).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_2p() {
        // loss = Σ pᵢ² via euclidean distance to the origin, squared by hand:
        // instead use sum(p·p) through linear with p as both x and w is
        // awkward; weighted squares via euclidean: ‖p − 0‖², d(dist²) = 2p.
        // Simpler: loss = Σᵢ pᵢ·pᵢ built from mil-free primitives:
        // stack p as a row and run linear(x=p_row, w=p_row, b=0) → p·pᵀ.
        let mut tape = Tape::new();
        let p = tape.param(0, &t64(&[1, 3], &[1.0, -2.0, 0.5]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.linear(p, p, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(0).unwrap().values(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut tape = Tape::new();
        let p = tape.param(0, &Tensor::scalar(2.0f64));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_from_non_scalar_is_contract_error() {
        let mut tape = Tape::new();
        let p = tape.param(0, &t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn mil_pool_hand_case() {
        let mut tape = Tape::new();
        let s = tape.leaf(t64(&[4, 1], &[0.2, 0.4, 0.6, 0.8]));
        let y = tape.mil_pool(s).unwrap();
        assert!((tape.value(y).values()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mil_pool_constant_and_single_clip() {
        let mut tape = Tape::new();
        let s = tape.leaf(t64(&[3, 1], &[0.3, 0.3, 0.3]));
        let y = tape.mil_pool(s).unwrap();
        assert!((tape.value(y).values()[0] - 0.3).abs() < 1e-12);

        let mut tape = Tape::new();
        let s = tape.leaf(t64(&[1, 2], &[0.9, -0.4]));
        let y = tape.mil_pool(s).unwrap();
        assert_eq!(tape.value(y).values(), &[0.9, -0.4]);
    }

    #[test]
    fn segment_mean_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 3.0, 0.0]));
        let v = tape.segment_mean(x, &[0, 1, 0], 2).unwrap();
        assert_eq!(tape.value(v).values(), &[2.0, 0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 3.0, 0.0]));
        let v = tape.segment_mean(x, &[0, 1, 0], 3).unwrap();
        assert_eq!(tape.value(v).row(2), &[0.0, 0.0]);
    }

    #[test]
    fn rows_max_elementwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2], &[1.0, -2.0, 0.0, 5.0]));
        let m = tape.rows_max(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(m).values(), &[1.0, 5.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(0, &Tensor::scalar(3.0f64));
        let unused = tape.param(1, &t64(&[2], &[1.0, 1.0]));
        let _ = unused;
        let s = tape.sum(used);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(0).unwrap().values(), &[1.0]);
        assert_eq!(grads.get(1).unwrap().values(), &[0.0, 0.0]);
    }
}
