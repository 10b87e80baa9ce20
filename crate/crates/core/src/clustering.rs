//! Clustering of the pooled clip-feature set into pseudo labels.
//!
//! K-means (k-means++ seeding, Lloyd iterations, empty-cluster repair)
//! is the primary method; a diagonal-covariance Gaussian mixture fitted
//! by EM is the alternative. Both accumulate in f64 regardless of the
//! feature scalar type so the monotonicity guarantees hold.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    KMeans,
    Gmm,
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMethod::KMeans),
            "gmm" => Ok(ClusterMethod::Gmm),
            other => Err(Error::Config(format!("unknown clustering method '{}'", other))),
        }
    }
}

/// A fitted clustering model: centroids for k-means, plus diagonal
/// covariances and mixing weights for the Gaussian mixture.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub method: ClusterMethod,
    /// N×d cluster centers (component means for the mixture).
    pub centroids: Vec<Vec<f64>>,
    pub variances: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

const COVARIANCE_FLOOR: f64 = 1e-6;

fn rows_f64<S: Scalar>(features: &Tensor<S>) -> Result<(Vec<f64>, usize, usize)> {
    let (m, d) = features.dims2()?;
    let data: Vec<f64> = features.values().iter().map(|v| v.as_f64()).collect();
    Ok((data, m, d))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        acc += diff * diff;
    }
    acc
}

/// Nearest centroid per row; ties resolve to the lowest index.
fn assign_rows(data: &[f64], m: usize, d: usize, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..m)
        .map(|i| {
            let row = &data[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_d = sq_dist(row, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let dist = sq_dist(row, centroid);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn kmeans_pp_init(data: &[f64], m: usize, d: usize, n: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n);
    let first = rng.gen_range(0..m);
    centroids.push(data[first * d..(first + 1) * d].to_vec());
    let mut d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centroids[0]))
        .collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        let candidate = data[pick * d..(pick + 1) * d].to_vec();
        for i in 0..m {
            let dist = sq_dist(&data[i * d..(i + 1) * d], &candidate);
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        centroids.push(candidate);
    }
    centroids
}

/// Moves the point farthest from its assigned centroid into each empty
/// cluster, never draining a cluster below one member.
fn repair_empty(
    data: &[f64],
    m: usize,
    d: usize,
    centroids: &[Vec<f64>],
    assignment: &mut [usize],
) -> bool {
    let n = centroids.len();
    let mut counts = vec![0usize; n];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let mut repaired = false;
    for empty in 0..n {
        if counts[empty] > 0 {
            continue;
        }
        let mut farthest: Option<(f64, usize)> = None;
        for i in 0..m {
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let dist = sq_dist(&data[i * d..(i + 1) * d], &centroids[assignment[i]]);
            if farthest.map_or(true, |(best, _)| dist > best) {
                farthest = Some((dist, i));
            }
        }
        if let Some((_, i)) = farthest {
            counts[assignment[i]] -= 1;
            assignment[i] = empty;
            counts[empty] += 1;
            repaired = true;
        }
    }
    repaired
}

fn update_centroids(data: &[f64], m: usize, d: usize, n: usize, assignment: &[usize]) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; d]; n];
    let mut counts = vec![0usize; n];
    for i in 0..m {
        let c = assignment[i];
        counts[c] += 1;
        let row = &data[i * d..(i + 1) * d];
        for k in 0..d {
            sums[c][k] += row[k];
        }
    }
    for c in 0..n {
        if counts[c] > 0 {
            for k in 0..d {
                sums[c][k] /= counts[c] as f64;
            }
        }
    }
    sums
}

fn inertia(data: &[f64], m: usize, d: usize, centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    (0..m)
        .map(|i| sq_dist(&data[i * d..(i + 1) * d], &centroids[assignment[i]]))
        .sum()
}

/// Fits k-means. Returns the model and the inertia after each
/// assignment pass, a non-increasing sequence.
pub fn kmeans_fit<S: Scalar>(
    features: &Tensor<S>,
    n: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterModel, Vec<f64>)> {
    let (data, m, d) = rows_f64(features)?;
    if n == 0 {
        return Err(Error::Config("cluster count must be positive".into()));
    }
    if m < n {
        return Err(Error::Config(format!("{} points cannot fill {} clusters", m, n)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&data, m, d, n, &mut rng);
    let mut assignment = assign_rows(&data, m, d, &centroids);
    let mut trace = vec![inertia(&data, m, d, &centroids, &assignment)];

    for _ in 0..max_iters {
        let repaired = repair_empty(&data, m, d, &centroids, &mut assignment);
        let next = update_centroids(&data, m, d, n, &assignment);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = next;
        assignment = assign_rows(&data, m, d, &centroids);
        trace.push(inertia(&data, m, d, &centroids, &assignment));
        if !repaired && shift < tol {
            break;
        }
    }
    // The last assignment pass may have drained a cluster; settle it.
    for _ in 0..8 {
        if !repair_empty(&data, m, d, &centroids, &mut assignment) {
            break;
        }
        centroids = update_centroids(&data, m, d, n, &assignment);
        assignment = assign_rows(&data, m, d, &centroids);
        trace.push(inertia(&data, m, d, &centroids, &assignment));
    }

    Ok((
        ClusterModel {
            method: ClusterMethod::KMeans,
            centroids,
            variances: None,
            weights: None,
        },
        trace,
    ))
}

/// Per-point responsibilities and the total log-likelihood under a
/// Gaussian mixture model.
fn e_step(
    data: &[f64],
    m: usize,
    d: usize,
    means: &[Vec<f64>],
    vars: &[Vec<f64>],
    weights: &[f64],
) -> (Vec<f64>, f64) {
    let n = means.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut resp = vec![0.0f64; m * n];
    let mut total_ll = 0.0;
    for i in 0..m {
        let row = &data[i * d..(i + 1) * d];
        let mut logs = vec![0.0f64; n];
        for c in 0..n {
            let mut lp = weights[c].ln();
            for k in 0..d {
                let diff = row[k] - means[c][k];
                lp -= 0.5 * (diff * diff / vars[c][k] + vars[c][k].ln() + ln_2pi);
            }
            logs[c] = lp;
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total_ll += lse;
        for c in 0..n {
            resp[i * n + c] = (logs[c] - lse).exp();
        }
    }
    (resp, total_ll)
}

/// Fits a diagonal-covariance Gaussian mixture by EM, initialized from
/// a k-means fit. Returns the model and the log-likelihood after each
/// E-step, non-decreasing up to the covariance floor.
pub fn gmm_fit<S: Scalar>(
    features: &Tensor<S>,
    n: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterModel, Vec<f64>)> {
    let (data, m, d) = rows_f64(features)?;
    if n == 0 {
        return Err(Error::Config("component count must be positive".into()));
    }
    if m < n {
        return Err(Error::Config(format!("{} points cannot fill {} components", m, n)));
    }
    let (km, _) = kmeans_fit(features, n, seed, max_iters, tol)?;
    let assignment = assign_rows(&data, m, d, &km.centroids);
    let mut means = km.centroids;
    let mut weights = vec![0.0f64; n];
    let mut vars = vec![vec![0.0f64; d]; n];
    let mut counts = vec![0usize; n];
    for i in 0..m {
        counts[assignment[i]] += 1;
    }
    for c in 0..n {
        weights[c] = (counts[c] as f64).max(1.0) / m as f64;
    }
    let wsum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= wsum;
    }
    for i in 0..m {
        let c = assignment[i];
        let row = &data[i * d..(i + 1) * d];
        for k in 0..d {
            let diff = row[k] - means[c][k];
            vars[c][k] += diff * diff;
        }
    }
    for c in 0..n {
        for k in 0..d {
            vars[c][k] = (vars[c][k] / (counts[c].max(1) as f64)).max(COVARIANCE_FLOOR);
        }
    }

    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..max_iters.max(1) {
        let (resp, ll) = e_step(&data, m, d, &means, &vars, &weights);
        trace.push(ll);

        // M-step.
        let mut nc = vec![0.0f64; n];
        for i in 0..m {
            for c in 0..n {
                nc[c] += resp[i * n + c];
            }
        }
        for c in 0..n {
            weights[c] = (nc[c] / m as f64).max(1e-10);
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
        let mut new_means = vec![vec![0.0f64; d]; n];
        for i in 0..m {
            let row = &data[i * d..(i + 1) * d];
            for c in 0..n {
                let r = resp[i * n + c];
                for k in 0..d {
                    new_means[c][k] += r * row[k];
                }
            }
        }
        for c in 0..n {
            for k in 0..d {
                new_means[c][k] /= nc[c].max(1e-300);
            }
        }
        let mut new_vars = vec![vec![0.0f64; d]; n];
        for i in 0..m {
            let row = &data[i * d..(i + 1) * d];
            for c in 0..n {
                let r = resp[i * n + c];
                for k in 0..d {
                    let diff = row[k] - new_means[c][k];
                    new_vars[c][k] += r * diff * diff;
                }
            }
        }
        for c in 0..n {
            for k in 0..d {
                new_vars[c][k] = (new_vars[c][k] / nc[c].max(1e-300)).max(COVARIANCE_FLOOR);
            }
        }
        means = new_means;
        vars = new_vars;

        if (ll - prev_ll).abs() < tol {
            break;
        }
        prev_ll = ll;
    }

    Ok((
        ClusterModel {
            method: ClusterMethod::Gmm,
            centroids: means,
            variances: Some(vars),
            weights: Some(weights),
        },
        trace,
    ))
}

/// Responsibilities of each mixture component for each row.
pub fn gmm_responsibilities<S: Scalar>(
    model: &ClusterModel,
    features: &Tensor<S>,
) -> Result<Vec<Vec<f64>>> {
    let (vars, weights) = match (&model.variances, &model.weights) {
        (Some(v), Some(w)) => (v, w),
        _ => return Err(Error::Contract("not a mixture model".into())),
    };
    let (data, m, d) = rows_f64(features)?;
    if d != model.dim() {
        return Err(Error::shape(
            "gmm_responsibilities",
            format!("features dim {} vs model dim {}", d, model.dim()),
        ));
    }
    let n = model.num_clusters();
    let (resp, _) = e_step(&data, m, d, &model.centroids, vars, weights);
    Ok((0..m).map(|i| resp[i * n..(i + 1) * n].to_vec()).collect())
}

/// Per-row cluster labels: nearest centroid for k-means, highest
/// responsibility for the mixture. Ties resolve to the lowest index.
pub fn assign<S: Scalar>(model: &ClusterModel, features: &Tensor<S>) -> Result<Vec<usize>> {
    let (data, m, d) = rows_f64(features)?;
    if d != model.dim() {
        return Err(Error::shape(
            "assign",
            format!("features dim {} vs model dim {}", d, model.dim()),
        ));
    }
    match model.method {
        ClusterMethod::KMeans => Ok(assign_rows(&data, m, d, &model.centroids)),
        ClusterMethod::Gmm => {
            let resp = gmm_responsibilities(model, features)?;
            Ok(resp
                .iter()
                .map(|r| {
                    let mut best = 0;
                    for (c, &v) in r.iter().enumerate().skip(1) {
                        if v > r[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect())
        }
    }
}

/// Adjusted Rand index between two labelings of the same points.
/// Returns 1.0 for identical partitions, ~0 for independent ones.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let mut a_ids: Vec<i64> = a.to_vec();
    a_ids.sort_unstable();
    a_ids.dedup();
    let mut b_ids: Vec<i64> = b.to_vec();
    b_ids.sort_unstable();
    b_ids.dedup();
    let aidx = |v: i64| a_ids.binary_search(&v).unwrap();
    let bidx = |v: i64| b_ids.binary_search(&v).unwrap();

    let mut table = vec![0u64; a_ids.len() * b_ids.len()];
    let mut a_counts = vec![0u64; a_ids.len()];
    let mut b_counts = vec![0u64; b_ids.len()];
    for i in 0..n {
        let (r, c) = (aidx(a[i]), bidx(b[i]));
        table[r * b_ids.len() + c] += 1;
        a_counts[r] += 1;
        b_counts[c] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().map(|&x| choose2(x)).sum();
    let sum_a: f64 = a_counts.iter().map(|&x| choose2(x)).sum();
    let sum_b: f64 = b_counts.iter().map(|&x| choose2(x)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-300 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

const CLUSTER_MAGIC: &[u8; 8] = b"HAANCLST";

#[derive(Serialize, Deserialize)]
struct ClusterHeader {
    method: ClusterMethod,
    clusters: usize,
    dim: usize,
    has_mixture: bool,
}

/// Writes a cluster model: JSON header, then f64 little-endian blobs
/// (centroids, then variances and weights for mixtures).
pub fn save_cluster_model(model: &ClusterModel, path: impl AsRef<Path>) -> Result<()> {
    let header = ClusterHeader {
        method: model.method,
        clusters: model.num_clusters(),
        dim: model.dim(),
        has_mixture: model.variances.is_some(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CLUSTER_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let mut write_rows = |rows: &Vec<Vec<f64>>| {
        for row in rows {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    write_rows(&model.centroids);
    if let (Some(vars), Some(weights)) = (&model.variances, &model.weights) {
        write_rows(vars);
        for w in weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_cluster_model(path: impl AsRef<Path>) -> Result<ClusterModel> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..8] != CLUSTER_MAGIC {
        return Err(Error::ArtifactMismatch("not a cluster model file".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: ClusterHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    let mut offset = 12 + header_len;
    let read_f64 = |offset: &mut usize| -> Result<f64> {
        if *offset + 8 > bytes.len() {
            return Err(Error::ArtifactMismatch("cluster model blob truncated".into()));
        }
        let v = f64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
        *offset += 8;
        Ok(v)
    };
    let read_rows = |offset: &mut usize, rows: usize, cols: usize| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut row = Vec::with_capacity(cols);
            for _ in 0..cols {
                row.push(read_f64(offset)?);
            }
            out.push(row);
        }
        Ok(out)
    };
    let centroids = read_rows(&mut offset, header.clusters, header.dim)?;
    let (variances, weights) = if header.has_mixture {
        let vars = read_rows(&mut offset, header.clusters, header.dim)?;
        let mut w = Vec::with_capacity(header.clusters);
        for _ in 0..header.clusters {
            w.push(read_f64(&mut offset)?);
        }
        (Some(vars), Some(w))
    } else {
        (None, None)
    };
    Ok(ClusterModel {
        method: header.method,
        centroids,
        variances,
        weights,
    })
}
