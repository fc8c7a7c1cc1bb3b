//! Procedural toy humanoid and its rigid-part skeleton.
//!
//! Zero pose stands upright with feet on z = 0, facing +y. The body's right
//! side is +x.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use super::JointRegressor;
use crate::math::{cos, sin, Mat3, Vec3};

pub const JOINT_NAMES: [&str; 14] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

const BACK: u8 = 0;
const GLUTEUS: u8 = 1;
const LEFT_HAND: u8 = 2;
const RIGHT_HAND: u8 = 3;
const LEFT_FOOT: u8 = 4;
const RIGHT_FOOT: u8 = 5;
const THIGHS: u8 = 6;

/// Rigid parts, listed parents first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Trunk = 0,
    RUpperArm,
    RLowerArm,
    RHand,
    LUpperArm,
    LLowerArm,
    LHand,
    RThigh,
    RShin,
    RFoot,
    LThigh,
    LShin,
    LFoot,
}

pub const N_PARTS: usize = 13;

const PARTS: [Part; N_PARTS] = [
    Part::Trunk,
    Part::RUpperArm,
    Part::RLowerArm,
    Part::RHand,
    Part::LUpperArm,
    Part::LLowerArm,
    Part::LHand,
    Part::RThigh,
    Part::RShin,
    Part::RFoot,
    Part::LThigh,
    Part::LShin,
    Part::LFoot,
];

impl Part {
    pub fn parent(self) -> Option<Part> {
        use Part::*;
        match self {
            Trunk => None,
            RUpperArm | LUpperArm | RThigh | LThigh => Some(Trunk),
            RLowerArm => Some(RUpperArm),
            RHand => Some(RLowerArm),
            LLowerArm => Some(LUpperArm),
            LHand => Some(LLowerArm),
            RShin => Some(RThigh),
            RFoot => Some(RShin),
            LShin => Some(LThigh),
            LFoot => Some(LShin),
        }
    }

    /// Joint the part rotates about.
    pub fn pivot_joint(self) -> usize {
        use Part::*;
        match self {
            Trunk => 0,
            RThigh => 1,
            RShin => 2,
            RFoot => 3,
            LThigh => 4,
            LShin => 5,
            LFoot => 6,
            RUpperArm => 8,
            RLowerArm => 9,
            RHand => 10,
            LUpperArm => 11,
            LLowerArm => 12,
            LHand => 13,
        }
    }

    /// Shading level used when rendering.
    pub fn shade(self) -> f64 {
        0.35 + 0.05 * self as usize as f64
    }
}

/// Template geometry plus the skeleton needed to pose it.
#[derive(Debug, Clone)]
pub struct ToyTemplate {
    pub vertices: Vec<Vec3>,
    pub regions: Vec<Option<u8>>,
    pub part_of_vertex: Vec<Part>,
    /// Vertex range averaged into each joint.
    pub joint_rings: Vec<Range<usize>>,
    /// Template joint positions.
    pub joints: Vec<Vec3>,
}

/// Pose: a local rotation per part about its pivot, then a similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub local: [Mat3; N_PARTS],
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            local: [Mat3::IDENTITY; N_PARTS],
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            scale: 1.0,
        }
    }
}

impl Pose {
    pub fn set(&mut self, part: Part, r: Mat3) -> &mut Self {
        self.local[part as usize] = r;
        self
    }
}

struct Builder {
    vertices: Vec<Vec3>,
    regions: Vec<Option<u8>>,
    parts: Vec<Part>,
}

impl Builder {
    /// Horizontal elliptic ring; `region` picks a label from the outward
    /// direction angle.
    fn ring(
        &mut self,
        center: Vec3,
        rx: f64,
        ry: f64,
        n: usize,
        part: Part,
        region: impl Fn(f64, f64) -> Option<u8>,
    ) -> Range<usize> {
        let start = self.vertices.len();
        for k in 0..n {
            let th = 2.0 * PI * k as f64 / n as f64;
            let (c, s) = (cos(th), sin(th));
            self.vertices.push(center + Vec3::new(rx * c, ry * s, 0.0));
            self.regions.push(region(c, s));
            self.parts.push(part);
        }
        start..self.vertices.len()
    }

    fn point(&mut self, p: Vec3, part: Part, region: Option<u8>) {
        self.vertices.push(p);
        self.regions.push(region);
        self.parts.push(part);
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

impl ToyTemplate {
    pub fn build() -> Self {
        let mut b = Builder {
            vertices: Vec::new(),
            regions: Vec::new(),
            parts: Vec::new(),
        };
        let none = |_: f64, _: f64| None;
        let mut rings: [Range<usize>; 14] = Default::default();

        // head: 5 rings of 8
        for (z, r) in [(1.56, 0.06), (1.62, 0.095), (1.68, 0.10), (1.74, 0.085), (1.79, 0.045)] {
            b.ring(Vec3::new(0.0, 0.0, z), r, r, 8, Part::Trunk, none);
        }
        // torso: 8 rings of 10, posterior side is the back region
        for i in 0..8 {
            let z = lerp(0.90, 1.50, i as f64 / 7.0);
            let r = b.ring(Vec3::new(0.0, 0.0, z), 0.15, 0.10, 10, Part::Trunk, |_, s| {
                (s < -0.5).then_some(BACK)
            });
            if i == 0 {
                rings[0] = r.clone();
            }
            if i == 7 {
                rings[7] = r;
            }
        }
        // gluteal patch: 4 rows of 6
        for row in 0..4 {
            let z = lerp(0.80, 0.89, row as f64 / 3.0);
            for col in 0..6 {
                let x = lerp(-0.125, 0.125, col as f64 / 5.0);
                b.point(Vec3::new(x, -0.11 + 0.5 * x * x, z), Part::Trunk, Some(GLUTEUS));
            }
        }
        // arms: right side is +x
        for (side, upper, lower, hand, hand_region, j0) in [
            (1.0, Part::RUpperArm, Part::RLowerArm, Part::RHand, RIGHT_HAND, 8),
            (-1.0, Part::LUpperArm, Part::LLowerArm, Part::LHand, LEFT_HAND, 11),
        ] {
            let x = 0.23 * side;
            for (i, (z, r)) in [(1.45, 0.045), (1.31, 0.042), (1.17, 0.038)].into_iter().enumerate() {
                let rg = b.ring(Vec3::new(x, 0.0, z), r, r, 8, upper, none);
                if i == 0 {
                    rings[j0] = rg.clone();
                }
                if i == 2 {
                    rings[j0 + 1] = rg;
                }
            }
            for (i, (z, r)) in [(1.12, 0.036), (1.02, 0.033), (0.92, 0.030)].into_iter().enumerate() {
                let rg = b.ring(Vec3::new(x, 0.0, z), r, r, 8, lower, none);
                if i == 2 {
                    rings[j0 + 2] = rg;
                }
            }
            for z in [0.88, 0.82, 0.76] {
                b.ring(Vec3::new(x, 0.0, z), 0.02, 0.045, 4, hand, |_, _| Some(hand_region));
            }
        }
        // legs
        for (side, thigh, shin, foot, foot_region, j0) in [
            (1.0, Part::RThigh, Part::RShin, Part::RFoot, RIGHT_FOOT, 1),
            (-1.0, Part::LThigh, Part::LShin, Part::LFoot, LEFT_FOOT, 4),
        ] {
            let x = 0.09 * side;
            for i in 0..5 {
                let t = i as f64 / 4.0;
                let r = lerp(0.075, 0.055, t);
                let rg = b.ring(Vec3::new(x, 0.0, lerp(0.90, 0.50, t)), r, r, 8, thigh, |_, s| {
                    (s < -0.3).then_some(THIGHS)
                });
                if i == 0 {
                    rings[j0] = rg.clone();
                }
                if i == 4 {
                    rings[j0 + 1] = rg;
                }
            }
            for (i, (z, r)) in [(0.45, 0.052), (0.32, 0.048), (0.20, 0.040), (0.09, 0.035)]
                .into_iter()
                .enumerate()
            {
                let rg = b.ring(Vec3::new(x, 0.0, z), r, r, 8, shin, none);
                if i == 3 {
                    rings[j0 + 2] = rg;
                }
            }
            // box-like foot: heel, mid, toe sections of 4 corners
            for (y, half, top) in [(-0.05, 0.045, 0.07), (0.07, 0.045, 0.06), (0.19, 0.04, 0.04)] {
                for (dx, z) in [(-half, 0.0), (half, 0.0), (half, top), (-half, top)] {
                    b.point(Vec3::new(x + dx, y, z), foot, Some(foot_region));
                }
            }
        }

        let joints = rings
            .iter()
            .map(|r| {
                let n = r.len() as f64;
                r.clone().fold(Vec3::ZERO, |a, i| a + b.vertices[i]) * (1.0 / n)
            })
            .collect();
        ToyTemplate {
            vertices: b.vertices,
            regions: b.regions,
            part_of_vertex: b.parts,
            joint_rings: rings.to_vec(),
            joints,
        }
    }

    pub fn regressor(&self) -> JointRegressor {
        JointRegressor {
            rows: self
                .joint_rings
                .iter()
                .map(|r| {
                    let w = 1.0 / r.len() as f64;
                    r.clone().map(|i| (i, w)).collect()
                })
                .collect(),
        }
    }

    /// World affine transform (A, b) of every part under `pose`.
    pub fn part_transforms(&self, pose: &Pose) -> [(Mat3, Vec3); N_PARTS] {
        let mut out = [(Mat3::IDENTITY, Vec3::ZERO); N_PARTS];
        for p in PARTS {
            let r = pose.local[p as usize];
            let pivot = self.joints[p.pivot_joint()];
            let (pa, pb) = match p.parent() {
                None => (pose.rotation * pose.scale_matrix(), pose.translation),
                Some(q) => out[q as usize],
            };
            let a = pa * r;
            let bv = pa * (pivot - r * pivot) + pb;
            out[p as usize] = (a, bv);
        }
        out
    }

    pub fn pose(&self, pose: &Pose) -> Vec<Vec3> {
        let tf = self.part_transforms(pose);
        self.vertices
            .iter()
            .zip(&self.part_of_vertex)
            .map(|(&v, &p)| {
                let (a, b) = tf[p as usize];
                a * v + b
            })
            .collect()
    }
}

impl Pose {
    fn scale_matrix(&self) -> Mat3 {
        let s = self.scale;
        Mat3::from_rows(Vec3::new(s, 0.0, 0.0), Vec3::new(0.0, s, 0.0), Vec3::new(0.0, 0.0, s))
    }
}
