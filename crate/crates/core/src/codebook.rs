//! Deterministic part-name target vectors.
//!
//! Each name is hashed together with the seed into a Gaussian vector. When
//! there are no more names than dimensions the vectors are orthogonalized in
//! name-sorted order, so a name's vector does not depend on the order in
//! which names were supplied. Names carry no semantic relatedness.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::geometry::Category;
use crate::mat::{dot, norm, Mat};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartNameCodebook {
    pub names: Vec<String>,
    /// m × dim, row k is the unit target vector of `names[k]`.
    pub vectors: Mat,
    pub dim: usize,
    pub seed: u64,
}

fn raw_vector(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &format!("codebook/{name}"));
    (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    for x in v.iter_mut() {
        *x /= n;
    }
}

pub fn build_codebook(names: &[impl AsRef<str>], dim: usize, seed: u64) -> Result<PartNameCodebook> {
    if names.is_empty() {
        return Err(Error::invalid("codebook needs at least one name"));
    }
    if dim < 2 {
        return Err(Error::invalid(format!("codebook dim must be >= 2, got {dim}")));
    }
    let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
    let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    if unique.len() != names.len() {
        return Err(Error::invalid("duplicate part names"));
    }

    let mut sorted: Vec<(&str, Vec<f64>)> = unique
        .iter()
        .map(|&n| (n, raw_vector(n, dim, seed)))
        .collect();
    let orthogonalize = names.len() <= dim;
    for i in 0..sorted.len() {
        let (head, tail) = sorted.split_at_mut(i);
        let v = &mut tail[0].1;
        if orthogonalize {
            // Two passes of classical Gram–Schmidt.
            for _ in 0..2 {
                for (_, u) in head.iter() {
                    let c = dot(v, u);
                    for (x, y) in v.iter_mut().zip(u) {
                        *x -= c * y;
                    }
                }
            }
        }
        normalize(v);
    }

    let mut vectors = Mat::zeros(names.len(), dim);
    for (k, name) in names.iter().enumerate() {
        let (_, v) = sorted.iter().find(|(n, _)| n == name).expect("name present");
        vectors.row_mut(k).copy_from_slice(v);
    }
    Ok(PartNameCodebook {
        names,
        vectors,
        dim,
        seed,
    })
}

impl PartNameCodebook {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::NotFound(format!("part name `{name}` not in codebook")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        Ok(self.vectors.row(self.index_of(name)?))
    }

    /// Codebook restricted to `names`, in that order, sharing this
    /// codebook's vectors.
    pub fn subset(&self, names: &[impl AsRef<str>]) -> Result<PartNameCodebook> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let idx = names
            .iter()
            .map(|n| self.index_of(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(PartNameCodebook {
            names,
            vectors: self.vectors.select_rows(&idx),
            dim: self.dim,
            seed: self.seed,
        })
    }
}

/// One codebook over the union of all category vocabularies, restricted per
/// category. A name maps to the same vector in every category that uses it.
pub fn category_codebooks(dim: usize, seed: u64) -> Result<BTreeMap<String, PartNameCodebook>> {
    let global = build_codebook(&Category::vocabulary(), dim, seed)?;
    Category::ALL
        .iter()
        .map(|c| Ok((c.name().to_string(), global.subset(c.part_names())?)))
        .collect()
}

/// Cosine similarity of every field row to the target vector of `name`.
pub fn query_similarity(field: &FeatureField, codebook: &PartNameCodebook, name: &str) -> Result<Vec<f64>> {
    if field.dim() != codebook.dim {
        return Err(Error::invalid(format!(
            "field dim {} does not match codebook dim {}",
            field.dim(),
            codebook.dim
        )));
    }
    let x = codebook.vector(name)?;
    Ok(field.values.iter_rows().map(|f| dot(f, x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_names_orthonormal() {
        let cb = build_codebook(&["body", "lid"], 16, 1).unwrap();
        assert!(dot(cb.vectors.row(0), cb.vectors.row(1)).abs() < 1e-9);
        for r in cb.vectors.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(cb, build_codebook(&["body", "lid"], 16, 1).unwrap());
    }

    #[test]
    fn overcomplete_codebook_still_unit() {
        let names: Vec<String> = (0..20).map(|i| format!("part{i}")).collect();
        let cb = build_codebook(&names, 16, 1).unwrap();
        assert_eq!(cb.len(), 20);
        for r in cb.vectors.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn name_order_does_not_matter() {
        let a = build_codebook(&["lid", "body", "handle"], 8, 3).unwrap();
        let b = build_codebook(&["handle", "lid", "body"], 8, 3).unwrap();
        for n in ["lid", "body", "handle"] {
            assert_eq!(a.vector(n).unwrap(), b.vector(n).unwrap());
        }
    }

    #[test]
    fn full_rank_orthogonality() {
        let names: Vec<String> = (0..16).map(|i| format!("n{i:02}")).collect();
        let cb = build_codebook(&names, 16, 5).unwrap();
        for i in 0..16 {
            for j in 0..i {
                assert!(dot(cb.vectors.row(i), cb.vectors.row(j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_codebook(&["a", "a"], 4, 0).is_err());
        assert!(build_codebook(&["a"], 1, 0).is_err());
        let empty: [&str; 0] = [];
        assert!(build_codebook(&empty, 4, 0).is_err());
    }

    #[test]
    fn subset_shares_vectors() {
        let cb = build_codebook(&["body", "cap", "lid"], 8, 2).unwrap();
        let sub = cb.subset(&["lid", "body"]).unwrap();
        assert_eq!(sub.vectors.row(0), cb.vector("lid").unwrap());
        assert!(cb.subset(&["door"]).is_err());
    }

    #[test]
    fn similarity_extremes_and_unknown_name() {
        let cb = build_codebook(&["body", "lid"], 4, 0).unwrap();
        let lid = cb.vector("lid").unwrap().to_vec();
        let body = cb.vector("body").unwrap().to_vec();
        let field = FeatureField::from_unit_rows(Mat::from_rows(&[lid, body])).unwrap();
        let s = query_similarity(&field, &cb, "lid").unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-9);
        assert!(matches!(query_similarity(&field, &cb, "door"), Err(Error::NotFound(_))));
    }
}
