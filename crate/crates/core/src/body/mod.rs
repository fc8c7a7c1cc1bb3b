//! Body model: template vertices, joint regression, and the per-vertex
//! contact-region partition.

mod template;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::SceneModel;

pub use template::{Part, Pose, ToyTemplate, JOINT_NAMES};

/// Number of contact regions.
pub const N_REGIONS: usize = 7;
/// Contact categories: `none` plus one per region.
pub const N_CATEGORIES: usize = N_REGIONS + 1;
/// Category id of "not in contact".
pub const NONE: u8 = 0;

pub const REGION_NAMES: [&str; N_REGIONS] = [
    "back",
    "gluteus",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
    "thighs",
];

/// Category id of region `r`.
#[inline]
pub fn category_of_region(r: u8) -> u8 {
    r + 1
}

/// Sparse row-stochastic joint regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl JointRegressor {
    pub fn n_joints(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self, n_vertices: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.rows.len() * n_vertices];
        for (j, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                m[j * n_vertices + v] += w;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct BodyModel {
    pub template: Vec<Vec3>,
    pub regressor: JointRegressor,
    /// Region id per vertex; `None` for vertices outside every region.
    pub region_of_vertex: Vec<Option<u8>>,
    /// Posing skeleton, present for the built-in toy body only.
    pub toy: Option<ToyTemplate>,
}

impl BodyModel {
    pub fn new(
        template: Vec<Vec3>,
        regressor: JointRegressor,
        region_of_vertex: Vec<Option<u8>>,
    ) -> Result<Self> {
        let model = BodyModel {
            template,
            regressor,
            region_of_vertex,
            toy: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// The procedural 432-vertex humanoid with 14 joints.
    pub fn toy() -> Self {
        let t = ToyTemplate::build();
        BodyModel {
            template: t.vertices.clone(),
            regressor: t.regressor(),
            region_of_vertex: t.regions.clone(),
            toy: Some(t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.template.len();
        if self.region_of_vertex.len() != nv {
            return Err(Error::InvalidBodyModel(format!(
                "{} region labels for {nv} vertices",
                self.region_of_vertex.len()
            )));
        }
        if self.regressor.rows.is_empty() {
            return Err(Error::InvalidBodyModel("no joints".into()));
        }
        for (j, row) in self.regressor.rows.iter().enumerate() {
            let mut s = 0.0;
            for &(v, w) in row {
                if v >= nv || !(w >= 0.0) {
                    return Err(Error::InvalidBodyModel(format!("bad entry in joint row {j}")));
                }
                s += w;
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidBodyModel(format!("joint row {j} sums to {s}")));
            }
        }
        for r in 0..N_REGIONS as u8 {
            if !self.region_of_vertex.contains(&Some(r)) {
                return Err(Error::EmptyRegion(r as usize));
            }
        }
        if self.region_of_vertex.iter().flatten().any(|&r| r as usize >= N_REGIONS) {
            return Err(Error::InvalidBodyModel("region id out of range".into()));
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.regressor.n_joints()
    }

    /// Category per vertex (0 = none).
    pub fn vertex_categories(&self) -> Vec<u8> {
        self.region_of_vertex
            .iter()
            .map(|r| r.map_or(NONE, category_of_region))
            .collect()
    }

    /// Vertex ids of each region.
    pub fn region_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); N_REGIONS];
        for (i, r) in self.region_of_vertex.iter().enumerate() {
            if let Some(r) = r {
                out[*r as usize].push(i);
            }
        }
        out
    }

    /// J = M·V.
    pub fn regress_joints(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        if vertices.len() != self.template.len() {
            return Err(Error::DimensionMismatch(format!(
                "mesh has {} vertices, model has {}",
                vertices.len(),
                self.template.len()
            )));
        }
        Ok(self
            .regressor
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .fold(Vec3::ZERO, |acc, &(v, w)| acc + vertices[v] * w)
            })
            .collect())
    }

    /// Root joint (row 0 of the regressor).
    pub fn root_joint(&self, vertices: &[Vec3]) -> Result<Vec3> {
        Ok(self.regress_joints(vertices)?[0])
    }
}

/// Coordinate frame a mesh is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Camera,
    Scene,
    RootCentered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    pub vertices: Vec<Vec3>,
    pub frame: Frame,
}

impl BodyMesh {
    pub fn new(vertices: Vec<Vec3>, frame: Frame) -> Result<Self> {
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("body mesh"));
        }
        Ok(BodyMesh { vertices, frame })
    }
}

/// Category per point of some point set (0 = none, 1..=7 regions).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContactLabels {
    pub categories: Vec<u8>,
}

impl ContactLabels {
    pub fn none(n: usize) -> Self {
        ContactLabels {
            categories: vec![NONE; n],
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn n_contacts(&self) -> usize {
        self.categories.iter().filter(|&&c| c != NONE).count()
    }

    /// Contact points paired with their categories.
    pub fn contact_points(&self, points: &[Vec3]) -> (Vec<Vec3>, Vec<u8>) {
        self.categories
            .iter()
            .zip(points)
            .filter(|(&c, _)| c != NONE)
            .map(|(&c, &p)| (p, c))
            .unzip()
    }
}

/// Label scene points by the region of their nearest body vertex, if that
/// vertex lies within `threshold`. Equidistant vertices resolve to the
/// smaller category id.
pub fn gt_contact_labels(
    vertices: &[Vec3],
    body: &BodyModel,
    points: &[Vec3],
    threshold: f64,
) -> ContactLabels {
    let cats = body.vertex_categories();
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for &v in vertices {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let pad = Vec3::new(threshold, threshold, threshold);
    let (lo, hi) = (lo - pad, hi + pad);
    let t2 = threshold * threshold;
    let categories = points
        .iter()
        .map(|&p| {
            if p.x < lo.x || p.y < lo.y || p.z < lo.z || p.x > hi.x || p.y > hi.y || p.z > hi.z {
                return NONE;
            }
            let mut best = f64::INFINITY;
            let mut cat = NONE;
            for (v, &c) in vertices.iter().zip(&cats) {
                let d = p.distance_squared(*v);
                if d < best - 1e-12 {
                    best = d;
                    cat = c;
                } else if (d - best).abs() <= 1e-12 {
                    best = best.min(d);
                    cat = cat.min(c);
                }
            }
            if best <= t2 {
                cat
            } else {
                NONE
            }
        })
        .collect();
    ContactLabels { categories }
}

/// Per-vertex contact flags: the vertex belongs to a region and lies within
/// `threshold` of the scene surface.
pub fn vertex_contact_flags(
    vertices: &[Vec3],
    body: &BodyModel,
    scene: &SceneModel,
    threshold: f64,
) -> Vec<bool> {
    vertices
        .iter()
        .zip(&body.region_of_vertex)
        .map(|(&v, r)| r.is_some() && scene.signed_distance(v).abs() <= threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> BodyModel {
        let template: Vec<Vec3> = (0..N_REGIONS + 2).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut regions: Vec<Option<u8>> = (0..N_REGIONS as u8).map(Some).collect();
        regions.push(None);
        regions.push(None);
        let regressor = JointRegressor {
            rows: vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)]],
        };
        BodyModel::new(template, regressor, regions).unwrap()
    }

    #[test]
    fn selector_rows_pick_vertices() {
        let m = tiny_model();
        let j = m.regress_joints(&m.template).unwrap();
        assert_eq!(j[0], m.template[0]);
        assert!((j[1].x - 1.5).abs() < 1e-15);
    }

    #[test]
    fn regress_rejects_wrong_count() {
        let m = tiny_model();
        assert!(matches!(
            m.regress_joints(&m.template[..3]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn row_sum_checked() {
        let mut m = tiny_model();
        m.regressor.rows[0][0].1 = 0.9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn empty_region_rejected() {
        let mut m = tiny_model();
        m.region_of_vertex[3] = None;
        assert_eq!(m.validate(), Err(Error::EmptyRegion(3)));
    }

    #[test]
    fn contact_within_threshold() {
        let m = tiny_model();
        // vertex 2 is region 2, category 3
        let p = [Vec3::new(2.0, 0.05, 0.0), Vec3::new(2.0, 0.10, 0.0)];
        let l = gt_contact_labels(&m.template, &m, &p, 0.07);
        assert_eq!(l.categories, vec![category_of_region(2), NONE]);
    }

    #[test]
    fn contact_tie_prefers_smaller_region() {
        let m = tiny_model();
        // midway between vertex 1 (region 1) and vertex 4 (region 4) placed together
        let mut verts = m.template.clone();
        verts[1] = Vec3::new(0.0, 0.0, 10.0);
        verts[4] = Vec3::new(0.0, 0.0, 10.1);
        let p = [Vec3::new(0.0, 0.0, 10.05)];
        let l = gt_contact_labels(&verts, &m, &p, 0.07);
        assert_eq!(l.categories, vec![category_of_region(1)]);
    }

    #[test]
    fn toy_model_is_valid() {
        let m = BodyModel::toy();
        assert_eq!(m.n_vertices(), 432);
        assert_eq!(m.n_joints(), 14);
        m.validate().unwrap();
    }
}
