//! Instance preparation and seed partitions.
//!
//! An instance is generated at twice the working resolution, downsampled by
//! farthest-point sampling, then placed with a seeded pose. Instance seeds
//! for training and for held-out evaluation come from disjoint ranges.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{apply_pose, farthest_point_sample, generate_object, Category, PartLabeledCloud, PoseRanges, RigidPose};
use crate::rng;

pub const DEFAULT_POINTS: usize = 1024;
const OVERSAMPLE: usize = 2;

/// Seeds `[0, 2^32)` are training instances, `[2^32, 2^33)` held-out ones.
pub const HELDOUT_SEED_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSplit {
    Train,
    Heldout,
}

impl InstanceSplit {
    pub fn seed(self, index: u64) -> u64 {
        match self {
            InstanceSplit::Train => index,
            InstanceSplit::Heldout => HELDOUT_SEED_BASE + index,
        }
    }

    pub fn of_seed(seed: u64) -> Self {
        if seed < HELDOUT_SEED_BASE {
            InstanceSplit::Train
        } else {
            InstanceSplit::Heldout
        }
    }
}

/// Canonical-pose instance downsampled to `n_points` by FPS.
pub fn canonical_instance(category: Category, seed: u64, n_points: usize) -> Result<PartLabeledCloud> {
    let dense = generate_object(category, seed, n_points * OVERSAMPLE)?;
    let idx = farthest_point_sample(&dense, n_points, 0)?;
    Ok(dense.select(&idx))
}

/// Instance placed with the pose drawn from `(pose_seed, ranges)`.
pub fn posed_instance(
    category: Category,
    seed: u64,
    n_points: usize,
    ranges: &PoseRanges,
    pose_seed: u64,
) -> Result<(PartLabeledCloud, RigidPose)> {
    ranges.validate()?;
    let pose = ranges.sample(pose_seed);
    let cloud = apply_pose(&canonical_instance(category, seed, n_points)?, &pose)?;
    Ok((cloud, pose))
}

/// Seed of the `index`-th instance of `category` in `split`.
pub fn instance_seed(category: Category, split: InstanceSplit, index: u64, seed: u64) -> u64 {
    split.seed(rng::derive_index(rng::derive(seed, category.name()), index) >> 32)
}

/// `count` posed instances of each category from the given split.
pub fn make_dataset(
    categories: &[Category],
    count: usize,
    split: InstanceSplit,
    n_points: usize,
    ranges: &PoseRanges,
    seed: u64,
) -> Result<Vec<PartLabeledCloud>> {
    let mut out = Vec::with_capacity(categories.len() * count);
    for &c in categories {
        for i in 0..count {
            let inst = instance_seed(c, split, i as u64, seed);
            let pose_seed = rng::derive(inst, "dataset_pose");
            out.push(posed_instance(c, inst, n_points, ranges, pose_seed)?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint() {
        let train = make_dataset(&[Category::BoxWithLid], 30, InstanceSplit::Train, 16, &PoseRanges::default(), 1).unwrap();
        let held = make_dataset(&[Category::BoxWithLid], 30, InstanceSplit::Heldout, 16, &PoseRanges::default(), 1).unwrap();
        for t in &train {
            assert_eq!(InstanceSplit::of_seed(t.seed), InstanceSplit::Train);
            assert!(held.iter().all(|h| h.seed != t.seed));
        }
        assert!(held.iter().all(|h| InstanceSplit::of_seed(h.seed) == InstanceSplit::Heldout));
    }

    #[test]
    fn identity_ranges_give_canonical_pose() {
        let (posed, pose) = posed_instance(Category::BottleWithCap, 3, 64, &PoseRanges::identity(), 9).unwrap();
        assert_eq!(pose, RigidPose::identity());
        assert_eq!(posed, canonical_instance(Category::BottleWithCap, 3, 64).unwrap());
    }
}
