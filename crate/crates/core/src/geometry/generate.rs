//! Parametric part-labeled shapes.
//!
//! Every object sits on the `z = 0` plane, centered on the z axis, front
//! facing `-y`. Dimensions are drawn from the seed within fixed per-category
//! ranges (meters). Points are drawn by stratified area-weighted sampling:
//! point `i` takes stratum `[i/n, (i+1)/n)` of the cumulative surface-area
//! distribution, with its own counter-addressed random stream.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::PartLabeledCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    BoxWithLid,
    PotWithHandle,
    DrawerCabinet,
    BottleWithCap,
    MicrowaveWithDoor,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::BoxWithLid,
        Category::PotWithHandle,
        Category::DrawerCabinet,
        Category::BottleWithCap,
        Category::MicrowaveWithDoor,
    ];

    /// Categories available for training; the rest are held out.
    pub const SEEN: [Category; 4] = [
        Category::BoxWithLid,
        Category::PotWithHandle,
        Category::DrawerCabinet,
        Category::BottleWithCap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::BoxWithLid => "box_with_lid",
            Category::PotWithHandle => "pot_with_handle",
            Category::DrawerCabinet => "drawer_cabinet",
            Category::BottleWithCap => "bottle_with_cap",
            Category::MicrowaveWithDoor => "microwave_with_door",
        }
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            Category::BoxWithLid => &["body", "lid"],
            Category::PotWithHandle => &["body", "handle", "lid"],
            Category::DrawerCabinet => &["frame", "drawer", "handle"],
            Category::BottleWithCap => &["body", "cap"],
            Category::MicrowaveWithDoor => &["body", "door", "handle"],
        }
    }

    pub fn is_seen(self) -> bool {
        self != Category::MicrowaveWithDoor
    }

    /// Union of all part names, sorted.
    pub fn vocabulary() -> Vec<String> {
        let mut names: Vec<String> = Category::ALL
            .iter()
            .flat_map(|c| c.part_names().iter().map(|s| s.to_string()))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn dims(self, seed: u64) -> CategoryDims {
        let mut r = rng::stream(seed, &format!("dims/{}", self.name()));
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * r.random::<f64>();
        match self {
            Category::BoxWithLid => CategoryDims::BoxWithLid {
                width: u(0.16, 0.30),
                depth: u(0.12, 0.24),
                height: u(0.08, 0.16),
            },
            Category::PotWithHandle => CategoryDims::PotWithHandle {
                radius: u(0.07, 0.11),
                height: u(0.08, 0.14),
                handle_length: u(0.06, 0.09),
                handle_offset: u(0.03, 0.045),
            },
            Category::DrawerCabinet => CategoryDims::DrawerCabinet {
                width: u(0.20, 0.32),
                depth: u(0.18, 0.26),
                height: u(0.14, 0.24),
                pull_out: u(0.05, 0.09),
            },
            Category::BottleWithCap => CategoryDims::BottleWithCap {
                radius: u(0.03, 0.045),
                body_height: u(0.12, 0.20),
                shoulder_height: u(0.03, 0.045),
                neck_radius_ratio: u(0.35, 0.5),
                cap_height: u(0.025, 0.04),
            },
            Category::MicrowaveWithDoor => CategoryDims::MicrowaveWithDoor {
                width: u(0.30, 0.42),
                depth: u(0.24, 0.32),
                height: u(0.18, 0.26),
                door_fraction: u(0.68, 0.78),
            },
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category `{s}`")))
    }
}

/// Seed-drawn dimensions, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CategoryDims {
    BoxWithLid {
        width: f64,
        depth: f64,
        height: f64,
    },
    PotWithHandle {
        radius: f64,
        height: f64,
        handle_length: f64,
        handle_offset: f64,
    },
    DrawerCabinet {
        width: f64,
        depth: f64,
        height: f64,
        pull_out: f64,
    },
    BottleWithCap {
        radius: f64,
        body_height: f64,
        shoulder_height: f64,
        neck_radius_ratio: f64,
        cap_height: f64,
    },
    MicrowaveWithDoor {
        width: f64,
        depth: f64,
        height: f64,
        door_fraction: f64,
    },
}

const BAR_RADIUS: f64 = 0.008;
const KNOB_RADIUS: f64 = 0.012;
const KNOB_HEIGHT: f64 = 0.02;
const NECK_HEIGHT: f64 = 0.025;

#[derive(Debug, Clone, Copy)]
enum Surface {
    /// `origin + u e1 + v e2`, u, v in [0, 1].
    Rect { origin: [f64; 3], e1: [f64; 3], e2: [f64; 3] },
    /// Disk of `radius` in the plane spanned by unit `a`, `b`.
    Disk { center: [f64; 3], a: [f64; 3], b: [f64; 3], radius: f64 },
    /// Lateral surface of a cone frustum along unit `axis`; radius goes
    /// linearly from `r0` at `base` to `r1` at `base + length * axis`.
    Frustum { base: [f64; 3], axis: [f64; 3], a: [f64; 3], b: [f64; 3], r0: f64, r1: f64, length: f64 },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Rect { e1, e2, .. } => norm3(cross(e1, e2)),
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Frustum { r0, r1, length, .. } => {
                PI * (r0 + r1) * (length * length + (r1 - r0).powi(2)).sqrt()
            }
        }
    }

    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        match *self {
            Surface::Rect { origin, e1, e2 } => add(origin, add(scale(e1, u), scale(e2, v))),
            Surface::Disk { center, a, b, radius } => {
                let r = radius * u.sqrt();
                let t = 2.0 * PI * v;
                add(center, add(scale(a, r * t.cos()), scale(b, r * t.sin())))
            }
            Surface::Frustum { base, axis, a, b, r0, r1, length } => {
                // Area element grows linearly with radius along the slant.
                let s = if (r1 - r0).abs() < 1e-15 {
                    u
                } else {
                    let r = (r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt();
                    (r - r0) / (r1 - r0)
                };
                let r = r0 + s * (r1 - r0);
                let t = 2.0 * PI * v;
                add(
                    add(base, scale(axis, s * length)),
                    add(scale(a, r * t.cos()), scale(b, r * t.sin())),
                )
            }
        }
    }
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn rect(origin: [f64; 3], e1: [f64; 3], e2: [f64; 3]) -> Surface {
    Surface::Rect { origin, e1, e2 }
}

/// Axis-aligned box faces between `lo` and `hi`; `skip` lists omitted faces
/// as (axis, is_upper).
fn box_faces(lo: [f64; 3], hi: [f64; 3], skip: &[(usize, bool)]) -> Vec<Surface> {
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = Vec::new();
    for axis in 0..3 {
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut e1 = [0.0; 3];
        e1[i] = ext[i];
        let mut e2 = [0.0; 3];
        e2[j] = ext[j];
        for upper in [false, true] {
            if skip.contains(&(axis, upper)) {
                continue;
            }
            let mut origin = lo;
            if upper {
                origin[axis] = hi[axis];
            }
            out.push(rect(origin, e1, e2));
        }
    }
    out
}

/// Closed-ended thin bar from `p0` to `p1`.
fn bar(p0: [f64; 3], p1: [f64; 3], radius: f64) -> Vec<Surface> {
    let d = add(p1, scale(p0, -1.0));
    let length = norm3(d);
    let axis = scale(d, 1.0 / length);
    let helper = if axis[2].abs() < 0.9 { Z } else { X };
    let a = {
        let c = cross(axis, helper);
        scale(c, 1.0 / norm3(c))
    };
    let b = cross(axis, a);
    vec![
        Surface::Frustum { base: p0, axis, a, b, r0: radius, r1: radius, length },
        Surface::Disk { center: p0, a, b, radius },
        Surface::Disk { center: p1, a, b, radius },
    ]
}

fn upright_cylinder(z0: f64, height: f64, radius: f64) -> Surface {
    Surface::Frustum { base: [0.0, 0.0, z0], axis: Z, a: X, b: Y, r0: radius, r1: radius, length: height }
}

fn horizontal_disk(z: f64, radius: f64) -> Surface {
    Surface::Disk { center: [0.0, 0.0, z], a: X, b: Y, radius }
}

/// (surface, part label) list for a category instance.
fn build(dims: CategoryDims) -> Vec<(Surface, usize)> {
    let tag = |surfaces: Vec<Surface>, label: usize| surfaces.into_iter().map(move |s| (s, label));
    match dims {
        CategoryDims::BoxWithLid { width, depth, height } => {
            let lo = [-width / 2.0, -depth / 2.0, 0.0];
            let hi = [width / 2.0, depth / 2.0, height];
            let body = box_faces(lo, hi, &[(2, true)]);
            let lid = rect([lo[0], lo[1], height], [width, 0.0, 0.0], [0.0, depth, 0.0]);
            tag(body, 0).chain(tag(vec![lid], 1)).collect()
        }
        CategoryDims::PotWithHandle { radius, height, handle_length, handle_offset } => {
            let body = vec![upright_cylinder(0.0, height, radius), horizontal_disk(0.0, radius)];
            let lid = vec![
                horizontal_disk(height, radius),
                upright_cylinder(height, KNOB_HEIGHT, KNOB_RADIUS),
                horizontal_disk(height + KNOB_HEIGHT, KNOB_RADIUS),
            ];
            let z = 0.75 * height;
            let x_out = radius + handle_offset;
            let half = handle_length / 2.0;
            let mut handle = bar([x_out, -half, z], [x_out, half, z], BAR_RADIUS);
            handle.extend(bar([radius, -half, z], [x_out, -half, z], BAR_RADIUS));
            handle.extend(bar([radius, half, z], [x_out, half, z], BAR_RADIUS));
            tag(body, 0).chain(tag(handle, 1)).chain(tag(lid, 2)).collect()
        }
        CategoryDims::DrawerCabinet { width, depth, height, pull_out } => {
            let lo = [-width / 2.0, -depth / 2.0, 0.0];
            let hi = [width / 2.0, depth / 2.0, height];
            let frame = box_faces(lo, hi, &[(1, false)]);
            // Drawer box pulled out of the front opening, inset from the frame.
            let inset = 0.01;
            let dlo = [lo[0] + inset, lo[1] - pull_out, inset];
            let dhi = [hi[0] - inset, lo[1], height - inset];
            let drawer = box_faces(dlo, dhi, &[(1, true), (2, true)]);
            let y_front = dlo[1];
            let y_bar = y_front - 0.03;
            let z = 0.5 * (dlo[2] + dhi[2]);
            let half = 0.2 * width;
            let mut handle = bar([-half, y_bar, z], [half, y_bar, z], BAR_RADIUS);
            handle.extend(bar([-half, y_front, z], [-half, y_bar, z], BAR_RADIUS));
            handle.extend(bar([half, y_front, z], [half, y_bar, z], BAR_RADIUS));
            tag(frame, 0).chain(tag(drawer, 1)).chain(tag(handle, 2)).collect()
        }
        CategoryDims::BottleWithCap { radius, body_height, shoulder_height, neck_radius_ratio, cap_height } => {
            let neck_r = radius * neck_radius_ratio;
            let neck_z = body_height + shoulder_height;
            let body = vec![
                horizontal_disk(0.0, radius),
                upright_cylinder(0.0, body_height, radius),
                Surface::Frustum {
                    base: [0.0, 0.0, body_height],
                    axis: Z,
                    a: X,
                    b: Y,
                    r0: radius,
                    r1: neck_r,
                    length: shoulder_height,
                },
                upright_cylinder(neck_z, NECK_HEIGHT, neck_r),
            ];
            let cap_r = neck_r + 0.004;
            let cap_z = neck_z + NECK_HEIGHT;
            let cap = vec![
                upright_cylinder(cap_z, cap_height, cap_r),
                horizontal_disk(cap_z + cap_height, cap_r),
            ];
            tag(body, 0).chain(tag(cap, 1)).collect()
        }
        CategoryDims::MicrowaveWithDoor { width, depth, height, door_fraction } => {
            let lo = [-width / 2.0, -depth / 2.0, 0.0];
            let hi = [width / 2.0, depth / 2.0, height];
            let mut body = box_faces(lo, hi, &[(1, false)]);
            let door_w = door_fraction * width;
            // Control panel to the right of the door.
            body.push(rect([lo[0] + door_w, lo[1], 0.0], [width - door_w, 0.0, 0.0], [0.0, 0.0, height]));
            let door = vec![rect([lo[0], lo[1], 0.0], [door_w, 0.0, 0.0], [0.0, 0.0, height])];
            let x = lo[0] + door_w - 0.03;
            let y_bar = lo[1] - 0.03;
            let (z0, z1) = (0.25 * height, 0.75 * height);
            let mut handle = bar([x, y_bar, z0], [x, y_bar, z1], BAR_RADIUS);
            handle.extend(bar([x, lo[1], z0], [x, y_bar, z0], BAR_RADIUS));
            handle.extend(bar([x, lo[1], z1], [x, y_bar, z1], BAR_RADIUS));
            tag(body, 0).chain(tag(door, 1)).chain(tag(handle, 2)).collect()
        }
    }
}

/// Sample a part-labeled cloud of `n_points` from the seeded instance of
/// `category`.
pub fn generate_object(category: Category, seed: u64, n_points: usize) -> Result<PartLabeledCloud> {
    if n_points < 8 {
        return Err(Error::invalid(format!("n_points must be at least 8, got {n_points}")));
    }
    let surfaces = build(category.dims(seed));
    let mut cumulative = Vec::with_capacity(surfaces.len());
    let mut total = 0.0;
    for (s, _) in &surfaces {
        total += s.area();
        cumulative.push(total);
    }

    let base = rng::derive(seed, &format!("surface/{}", category.name()));
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(i as u64);
        let target = total * (i as f64 + r.random::<f64>()) / n_points as f64;
        let k = cumulative
            .iter()
            .position(|&c| target < c)
            .unwrap_or(surfaces.len() - 1);
        let (surface, label) = surfaces[k];
        points.push(surface.sample(r.random(), r.random()));
        labels.push(label);
    }

    let part_names = category.part_names().iter().map(|s| s.to_string()).collect();
    PartLabeledCloud::new(category.name(), seed, points, labels, part_names)
}
