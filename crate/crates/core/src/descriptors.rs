//! Per-point geometric descriptors used as the frozen backbone.
//!
//! Column layout (`DESCRIPTOR_DIM = 10`):
//!
//! | col | meaning |
//! |-----|---------|
//! | 0 | linearity `(λ1 − λ2) / λ1` |
//! | 1 | planarity `(λ2 − λ3) / λ1` |
//! | 2 | sphericity `λ3 / λ1` |
//! | 3 | verticality `|n · ẑ|`, `n` the smallest-eigenvalue eigenvector |
//! | 4 | height above the cloud minimum |
//! | 5 | distance to the cloud centroid |
//! | 6 | density: inverse mean k-NN distance over its cloud mean |
//! | 7..10 | coordinates relative to the centroid |
//!
//! Eigenvalues come from the covariance of the point and its `k` nearest
//! neighbors. A zero covariance (all neighbors coincident) yields zero
//! eigen-features and zero verticality.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::PartLabeledCloud;
use crate::mat::Mat;

pub const DESCRIPTOR_DIM: usize = 10;

pub const COL_LINEARITY: usize = 0;
pub const COL_PLANARITY: usize = 1;
pub const COL_SPHERICITY: usize = 2;
pub const COL_VERTICALITY: usize = 3;
pub const COL_HEIGHT: usize = 4;
pub const COL_RADIAL: usize = 5;
pub const COL_DENSITY: usize = 6;
pub const COL_CENTERED: usize = 7;

pub const DEFAULT_K_NEIGHBORS: usize = 16;

/// N × 10 descriptor rows, index-aligned with the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix(pub Mat);

impl DescriptorMatrix {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }
}

/// Indices of the `k` nearest other points, ordered by (distance, index).
pub fn knn(points: &[[f64; 3]], i: usize, k: usize) -> Vec<(f64, usize)> {
    let p = points[i];
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, q)| {
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            (d2, j)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d
}

/// Eigenvalues in descending order (clamped at zero) and the eigenvector of
/// the smallest one.
pub fn local_eigen(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0));
    let v = eig.eigenvectors.column(order[2]);
    (vals, [v[0], v[1], v[2]])
}

/// `(linearity, planarity, sphericity)`; zero when `λ1 = 0`.
pub fn eigen_features(vals: [f64; 3]) -> [f64; 3] {
    let [l1, l2, l3] = vals;
    if l1 <= 0.0 {
        return [0.0; 3];
    }
    [(l1 - l2) / l1, (l2 - l3) / l1, l3 / l1]
}

pub fn extract_descriptors(cloud: &PartLabeledCloud, k_neighbors: usize) -> Result<DescriptorMatrix> {
    let pts = &cloud.points;
    let n = pts.len();
    if k_neighbors < 3 || k_neighbors >= n {
        return Err(Error::invalid(format!(
            "k_neighbors must satisfy 3 <= k < N = {n}, got {k_neighbors}"
        )));
    }
    let centroid = cloud.centroid();
    let z_min = pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);

    let local: Vec<([f64; 5], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nbrs = knn(pts, i, k_neighbors);
            let mean_dist = nbrs.iter().map(|(d2, _)| d2.sqrt()).sum::<f64>() / k_neighbors as f64;
            let mut hood = Vec::with_capacity(k_neighbors + 1);
            hood.push(pts[i]);
            hood.extend(nbrs.iter().map(|&(_, j)| pts[j]));
            let (vals, normal) = local_eigen(&hood);
            let [lin, pla, sph] = eigen_features(vals);
            let vert = if vals[0] > 0.0 { normal[2].abs() } else { 0.0 };
            ([lin, pla, sph, vert, 0.0], 1.0 / mean_dist.max(1e-12))
        })
        .collect();
    let mean_inv = local.iter().map(|(_, inv)| inv).sum::<f64>() / n as f64;

    let mut out = Mat::zeros(n, DESCRIPTOR_DIM);
    for (i, (feat, inv)) in local.iter().enumerate() {
        let p = pts[i];
        let c = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        let row = out.row_mut(i);
        row[..4].copy_from_slice(&feat[..4]);
        row[COL_HEIGHT] = p[2] - z_min;
        row[COL_RADIAL] = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        row[COL_DENSITY] = inv / mean_inv;
        row[COL_CENTERED..COL_CENTERED + 3].copy_from_slice(&c);
    }
    Ok(DescriptorMatrix(out))
}
