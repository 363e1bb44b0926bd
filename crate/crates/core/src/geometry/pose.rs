use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::PartLabeledCloud;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation followed by translation: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], yaw, translation)
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let r = Rotation3::from_axis_angle(&axis, angle);
        Self::from_matrix(*r.matrix(), translation)
    }

    fn from_matrix(m: Matrix3<f64>, translation: [f64; 3]) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Self {
            rotation,
            translation,
        }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.matrix();
        let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(gram_err <= ORTHONORMAL_TOL && (det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "rotation not orthonormal (|RᵀR - I| = {gram_err:e}, det = {det})"
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.matrix().transpose();
        let t = -(rt * Vector3::from(self.translation));
        Self::from_matrix(rt, [t.x, t.y, t.z])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        let r = self.matrix() * other.matrix();
        let t = self.apply_point(other.translation);
        Self::from_matrix(r, t)
    }

    #[inline]
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }
}

/// Uniform ranges for a random yaw (radians) and planar translation
/// (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseRanges {
    pub yaw: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Default for PoseRanges {
    fn default() -> Self {
        let a = 30f64.to_radians();
        Self {
            yaw: (-a, a),
            x: (-0.08, 0.08),
            y: (-0.08, 0.08),
        }
    }
}

impl PoseRanges {
    /// No randomization: the canonical pose.
    pub fn identity() -> Self {
        Self {
            yaw: (0.0, 0.0),
            x: (0.0, 0.0),
            y: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("yaw", self.yaw), ("x", self.x), ("y", self.y)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> RigidPose {
        use rand::Rng as _;
        let mut r = crate::rng::stream(seed, "pose");
        let mut u = |(lo, hi): (f64, f64)| lo + (hi - lo) * r.random::<f64>();
        let yaw = u(self.yaw);
        let x = u(self.x);
        let y = u(self.y);
        RigidPose::from_yaw(yaw, [x, y, 0.0])
    }
}

pub fn apply_pose(cloud: &PartLabeledCloud, pose: &RigidPose) -> Result<PartLabeledCloud> {
    pose.validate()?;
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = pose.apply_point(*p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_object, Category};
    use proptest::prelude::*;

    fn sample() -> PartLabeledCloud {
        generate_object(Category::BoxWithLid, 11, 64).unwrap()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let c = sample();
        assert_eq!(apply_pose(&c, &RigidPose::identity()).unwrap(), c);
    }

    #[test]
    fn inverse_round_trips() {
        let c = sample();
        let pose = RigidPose::from_axis_angle([0.3, -1.0, 0.5], 1.1, [0.2, -0.4, 1.5]);
        let back = apply_pose(&apply_pose(&c, &pose).unwrap(), &pose.inverse()).unwrap();
        for (a, b) in c.points.iter().zip(&back.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        assert_eq!(back.labels, c.labels);
    }

    #[test]
    fn translation_shifts_centroid() {
        let c = sample();
        let moved = apply_pose(&c, &RigidPose::translation([1.0, 0.0, 0.0])).unwrap();
        let (a, b) = (c.centroid(), moved.centroid());
        assert!((b[0] - a[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - a[1]).abs() < 1e-12 && (b[2] - a[2]).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut pose = RigidPose::identity();
        pose.rotation[0][0] = 1.1;
        assert!(apply_pose(&sample(), &pose).is_err());
        let mut reflect = RigidPose::identity();
        reflect.rotation[2][2] = -1.0;
        assert!(reflect.validate().is_err());
    }

    proptest! {
        #[test]
        fn preserves_pairwise_distances(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in 0.1f64..1.0,
            angle in -3.0f64..3.0, tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
        ) {
            let c = sample();
            let pose = RigidPose::from_axis_angle([ax, ay, az], angle, [tx, ty, tz]);
            let moved = apply_pose(&c, &pose).unwrap();
            for i in (0..c.len()).step_by(7) {
                for j in (0..c.len()).step_by(5) {
                    let d0 = crate::mat::dist2(&c.points[i], &c.points[j]).sqrt();
                    let d1 = crate::mat::dist2(&moved.points[i], &moved.points[j]).sqrt();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }
}
