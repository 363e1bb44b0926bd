//! Segmentation, correspondence and visualization on feature fields.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::mat::dot;

/// Largest cluster or part count accepted by [`match_miou`].
pub const MAX_MATCH_CLUSTERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Merge until this many clusters remain.
    TargetK(usize),
    /// Merge while the closest pair is at most this cosine distance apart.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Lowest point index of each merged cluster.
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Cluster of each point, numbered by first occurrence.
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    pub merges: Vec<Merge>,
}

/// Average-linkage agglomerative clustering on cosine distance `1 − f·g`.
///
/// Cluster distances follow the Lance–Williams update for average linkage;
/// each active cluster caches its nearest neighbor. Equal distances are
/// resolved toward the lowest `(min, max)` index pair.
pub fn agglomerative_cluster(field: &FeatureField, stop: StopRule) -> Result<Segmentation> {
    let n = field.len();
    match stop {
        StopRule::TargetK(k) if k == 0 || k > n => {
            return Err(Error::invalid(format!("target_k must be in 1..={n}, got {k}")));
        }
        StopRule::Threshold(h) if !(0.0..=2.0).contains(&h) => {
            return Err(Error::invalid(format!("threshold must be in [0, 2], got {h}")));
        }
        _ => {}
    }
    if n == 0 {
        return Err(Error::invalid("cannot cluster an empty field"));
    }

    let f = &field.values;
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 1.0 - dot(f.row(i), f.row(j));
        }
    });
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];
    let refresh = |a: usize, d: &[f64], active: &[bool], nn: &mut [usize], nn_dist: &mut [f64]| {
        let (mut best, mut bd) = (usize::MAX, f64::INFINITY);
        for b in 0..n {
            if b != a && active[b] && d[a * n + b] < bd {
                best = b;
                bd = d[a * n + b];
            }
        }
        nn[a] = best;
        nn_dist[a] = bd;
    };
    for a in 0..n {
        refresh(a, &d, &active, &mut nn, &mut nn_dist);
    }

    let mut parent: Vec<usize> = (0..n).collect();
    let mut merges = Vec::new();
    let mut remaining = n;
    let mut last_height = 0.0f64;
    while remaining > 1 {
        if let StopRule::TargetK(k) = stop {
            if remaining <= k {
                break;
            }
        }
        let mut pick: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            let cand = (nn_dist[a], a.min(nn[a]), a.max(nn[a]));
            let better = match pick {
                None => true,
                Some(p) => cand.0 < p.0 || (cand.0 == p.0 && (cand.1, cand.2) < (p.1, p.2)),
            };
            if better {
                pick = Some(cand);
            }
        }
        let (height, i, j) = pick.expect("at least two active clusters");
        if let StopRule::Threshold(h) = stop {
            if height > h {
                break;
            }
        }
        let height = height.max(last_height);
        last_height = height;
        merges.push(Merge { a: i, b: j, height });

        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let v = (ni * d[i * n + k] + nj * d[j * n + k]) / (ni + nj);
                d[i * n + k] = v;
                d[k * n + i] = v;
            }
        }
        size[i] += size[j];
        active[j] = false;
        parent[j] = i;
        remaining -= 1;
        for k in 0..n {
            if !active[k] || k == i {
                continue;
            }
            if nn[k] == i || nn[k] == j {
                refresh(k, &d, &active, &mut nn, &mut nn_dist);
            } else {
                let v = d[k * n + i];
                if v < nn_dist[k] || (v == nn_dist[k] && i < nn[k]) {
                    nn[k] = i;
                    nn_dist[k] = v;
                }
            }
        }
        refresh(i, &d, &active, &mut nn, &mut nn_dist);
    }

    let root = |mut p: usize| {
        while parent[p] != p {
            p = parent[p];
        }
        p
    };
    let mut ids = vec![usize::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut next = 0;
    for p in 0..n {
        let r = root(p);
        if ids[r] == usize::MAX {
            ids[r] = next;
            next += 1;
        }
        labels.push(ids[r]);
    }
    Ok(Segmentation {
        labels,
        num_clusters: next,
        merges,
    })
}

/// Intersection-over-union table `iou[c][g]`.
fn iou_table(pred: &[usize], gt: &[usize], k_pred: usize, k_gt: usize) -> Vec<Vec<f64>> {
    let mut inter = vec![vec![0usize; k_gt]; k_pred];
    let mut pc = vec![0usize; k_pred];
    let mut gc = vec![0usize; k_gt];
    for (&p, &g) in pred.iter().zip(gt) {
        inter[p][g] += 1;
        pc[p] += 1;
        gc[g] += 1;
    }
    (0..k_pred)
        .map(|c| {
            (0..k_gt)
                .map(|g| {
                    let union = pc[c] + gc[g] - inter[c][g];
                    if union == 0 {
                        0.0
                    } else {
                        inter[c][g] as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Best mean IoU over ground-truth parts when each part is matched to a
/// distinct cluster; parts left without a cluster score 0. Exhaustive over
/// injective assignments.
pub fn match_miou(pred: &[usize], gt: &[usize], k_pred: usize, k_gt: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if k_pred == 0 || k_gt == 0 || k_pred > MAX_MATCH_CLUSTERS || k_gt > MAX_MATCH_CLUSTERS {
        return Err(Error::invalid(format!(
            "cluster counts must be in 1..={MAX_MATCH_CLUSTERS}, got {k_pred} and {k_gt}"
        )));
    }
    if pred.iter().any(|&p| p >= k_pred) || gt.iter().any(|&g| g >= k_gt) {
        return Err(Error::invalid("label exceeds its declared count"));
    }
    let iou = iou_table(pred, gt, k_pred, k_gt);
    let mut used = vec![false; k_pred];
    let best = best_assignment(&iou, 0, &mut used);
    Ok(best / k_gt as f64)
}

/// Max total IoU assigning parts `g..` to unused clusters (or to none).
fn best_assignment(iou: &[Vec<f64>], g: usize, used: &mut [bool]) -> f64 {
    let k_gt = iou.first().map_or(0, Vec::len);
    if g == k_gt {
        return 0.0;
    }
    let free = used.iter().filter(|u| !**u).count();
    let mut best = if free < k_gt - g { best_assignment(iou, g + 1, used) } else { f64::NEG_INFINITY };
    for c in 0..used.len() {
        if !used[c] {
            used[c] = true;
            best = best.max(iou[c][g] + best_assignment(iou, g + 1, used));
            used[c] = false;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    /// For each row of A, an index into B.
    pub mapping: Vec<usize>,
}

/// Each A row maps to the B row of largest dot product; ties go to the
/// lowest index.
pub fn nn_correspondence(a: &FeatureField, b: &FeatureField) -> Result<Correspondence> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("correspondence needs non-empty fields"));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("field dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let mapping = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let fa = a.values.row(i);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, fb) in b.values.iter_rows().enumerate() {
                let s = dot(fa, fb);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect();
    Ok(Correspondence { mapping })
}

/// Fraction of A points whose image in B carries the same part label. Both
/// label vectors must index the same part-name list.
pub fn correspondence_part_accuracy(corr: &Correspondence, labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if corr.mapping.len() != labels_a.len() || labels_a.is_empty() {
        return Err(Error::invalid(format!(
            "{} mapped points for {} labels",
            corr.mapping.len(),
            labels_a.len()
        )));
    }
    if let Some(&bad) = corr.mapping.iter().find(|&&j| j >= labels_b.len()) {
        return Err(Error::invalid(format!("mapping index {bad} outside B ({} points)", labels_b.len())));
    }
    let hits = corr.mapping.iter().zip(labels_a).filter(|(&j, &la)| labels_b[j] == la).count();
    Ok(hits as f64 / labels_a.len() as f64)
}

/// Projects rows on the top three principal components and min-max scales
/// each channel to `[0, 1]`. Channels without spread are filled with 0.5.
/// Each component's sign is fixed so its largest-magnitude entry is
/// positive.
pub fn pca_colorize(field: &FeatureField) -> Vec<[f64; 3]> {
    let (n, dim) = (field.len(), field.dim());
    let mut out = vec![[0.5; 3]; n];
    if n == 0 || dim == 0 {
        return out;
    }
    let mut mean = vec![0.0; dim];
    for r in field.values.iter_rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| field.values.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (ch, &c) in order.iter().take(3).enumerate() {
        if eig.eigenvalues[c] <= 1e-12 * scale.max(1e-300) || eig.eigenvalues[c] <= 0.0 {
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let proj: Vec<f64> = (0..n).map(|i| centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
        if hi - lo > 0.0 {
            for (o, p) in out.iter_mut().zip(&proj) {
                o[ch] = ((p - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        }
    }
    out
}
