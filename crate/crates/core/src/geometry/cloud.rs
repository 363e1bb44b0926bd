use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points with per-point part labels indexing into `part_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartLabeledCloud {
    pub category: String,
    pub seed: u64,
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<usize>,
    pub part_names: Vec<String>,
}

impl PartLabeledCloud {
    pub fn new(
        category: impl Into<String>,
        seed: u64,
        points: Vec<[f64; 3]>,
        labels: Vec<usize>,
        part_names: Vec<String>,
    ) -> Result<Self> {
        let cloud = Self {
            category: category.into(),
            seed,
            points,
            labels,
            part_names,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("cloud has no points"));
        }
        if self.points.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} points but {} labels",
                self.points.len(),
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.part_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} part names",
                self.part_names.len()
            )));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(self.points.iter())
    }

    /// Centroid of the points carrying part `name`.
    pub fn part_centroid(&self, name: &str) -> Result<[f64; 3]> {
        let label = self
            .part_index(name)
            .ok_or_else(|| Error::NotFound(format!("part `{name}` in {}", self.category)))?;
        let pts: Vec<&[f64; 3]> = self
            .points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(p, _)| p)
            .collect();
        if pts.is_empty() {
            return Err(Error::invalid(format!("part `{name}` has no points")));
        }
        Ok(centroid(pts.into_iter()))
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.part_names.iter().position(|n| n == name)
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            category: self.category.clone(),
            seed: self.seed,
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            part_names: self.part_names.clone(),
        }
    }
}

pub(crate) fn centroid<'a>(pts: impl Iterator<Item = &'a [f64; 3]>) -> [f64; 3] {
    let mut c = [0.0; 3];
    let mut n = 0usize;
    for p in pts {
        for k in 0..3 {
            c[k] += p[k];
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut c {
            *v /= n as f64;
        }
    }
    c
}
