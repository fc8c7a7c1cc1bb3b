//! Scene geometry: a triangle mesh with signed-distance queries and the
//! scanned point cloud.
//!
//! Sign is resolved with angle-weighted pseudo-normals at the closest
//! feature (face interior, edge, or vertex), which gives the correct sign
//! for any consistently oriented mesh. Negative means inside / penetrating.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{acos, Aabb, Vec3};

const MIN_TRIANGLE_AREA: f64 = 1e-12;
const BVH_LEAF_SIZE: usize = 4;

/// Which part of a triangle a closest point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Face,
    /// Local edge index: 0 = (a,b), 1 = (b,c), 2 = (c,a).
    Edge(u8),
    /// Local vertex index.
    Vertex(u8),
}

/// Closest point on triangle `abc` to `p`, with the Voronoi feature it
/// belongs to.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

/// Result of a closest-triangle query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub triangle: usize,
    pub point: Vec3,
    pub feature: Feature,
    pub distance_squared: f64,
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    /// Leaf: `start..start+count` into `order`. Inner: children at `left`, `left+1`... stored explicitly.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

impl Bvh {
    fn build(tri_bounds: &[Aabb]) -> Bvh {
        let mut order: Vec<usize> = (0..tri_bounds.len()).collect();
        let mut nodes = Vec::new();
        let n = order.len();
        Self::build_node(tri_bounds, &mut order, 0, n, &mut nodes);
        Bvh { nodes, order }
    }

    fn build_node(
        tb: &[Aabb],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let mut bounds = Aabb::EMPTY;
        let mut centroids = Aabb::EMPTY;
        for &t in &order[start..end] {
            bounds = bounds.union(&tb[t]);
            centroids.grow(tb[t].center());
        }
        let id = nodes.len();
        nodes.push(BvhNode {
            bounds,
            start,
            count: end - start,
            left: usize::MAX,
            right: usize::MAX,
        });
        if end - start <= BVH_LEAF_SIZE {
            return id;
        }
        let ext = centroids.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        order[start..end].sort_by(|&a, &b| {
            tb[a].center()[axis]
                .partial_cmp(&tb[b].center()[axis])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let left = Self::build_node(tb, order, start, mid, nodes);
        let right = Self::build_node(tb, order, mid, end, nodes);
        let node = &mut nodes[id];
        node.left = left;
        node.right = right;
        node.count = 0;
        id
    }
}

/// A consistently oriented triangle mesh plus the scanned point cloud.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub points: Vec<Vec3>,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    /// Keyed by (min vertex, max vertex).
    edge_normals: BTreeMap<(u32, u32), Vec3>,
    bvh: Bvh,
}

/// Orientation/manifoldness diagnostics gathered at load time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MeshReport {
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
    /// Interior edges traversed in the same direction by both faces.
    pub inconsistent_edges: usize,
}

impl SceneModel {
    /// Build a scene, validating indices and rejecting degenerate or
    /// inconsistently oriented triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, points: Vec<Vec3>) -> Result<Self> {
        let (scene, report) = Self::with_report(vertices, triangles, points)?;
        if report.inconsistent_edges > 0 {
            return Err(Error::InvalidMesh(alloc::format!(
                "{} edges with inconsistent triangle orientation",
                report.inconsistent_edges
            )));
        }
        Ok(scene)
    }

    /// Like [`SceneModel::new`] but returns the diagnostics instead of
    /// failing on orientation problems. Non-manifold edges are never fatal.
    pub fn with_report(
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        points: Vec<Vec3>,
    ) -> Result<(Self, MeshReport)> {
        if triangles.is_empty() {
            return Err(Error::EmptyScene);
        }
        let nv = vertices.len();
        let mut face_normals = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i as usize >= nv) {
                return Err(Error::InvalidMesh(alloc::format!("triangle {t} index out of range")));
            }
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            let n = (b - a).cross(c - a);
            if 0.5 * n.norm() < MIN_TRIANGLE_AREA {
                return Err(Error::InvalidMesh(alloc::format!("triangle {t} is degenerate")));
            }
            face_normals.push(n.normalized());
        }

        let mut vertex_normals = vec![Vec3::ZERO; nv];
        let mut edge_sum: BTreeMap<(u32, u32), Vec3> = BTreeMap::new();
        let mut directed: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            let n = face_normals[t];
            for k in 0..3 {
                let i = tri[k];
                let prev = vertices[tri[(k + 2) % 3] as usize];
                let next = vertices[tri[(k + 1) % 3] as usize];
                let here = vertices[i as usize];
                let e1 = (next - here).normalized();
                let e2 = (prev - here).normalized();
                let angle = acos(e1.dot(e2).clamp(-1.0, 1.0));
                vertex_normals[i as usize] += n * angle;

                let j = tri[(k + 1) % 3];
                *edge_sum.entry((i.min(j), i.max(j))).or_insert(Vec3::ZERO) += n;
                *directed.entry((i, j)).or_insert(0) += 1;
            }
        }
        let mut report = MeshReport::default();
        let mut undirected: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (&(i, j), &c) in &directed {
            *undirected.entry((i.min(j), i.max(j))).or_insert(0) += c;
            if c > 1 {
                report.inconsistent_edges += 1;
            }
        }
        for &c in undirected.values() {
            match c {
                1 => report.boundary_edges += 1,
                2 => {}
                _ => report.non_manifold_edges += 1,
            }
        }
        let edge_normals = edge_sum
            .into_iter()
            .map(|(k, v)| (k, v.normalized()))
            .collect();
        for n in &mut vertex_normals {
            *n = n.normalized();
        }

        let tri_bounds: Vec<Aabb> = triangles
            .iter()
            .map(|t| Aabb::from_points(t.iter().map(|&i| &vertices[i as usize])))
            .collect();
        let bvh = Bvh::build(&tri_bounds);

        Ok((
            SceneModel {
                vertices,
                triangles,
                points,
                face_normals,
                vertex_normals,
                edge_normals,
                bvh,
            },
            report,
        ))
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        self.face_normals[t]
    }

    fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    #[inline]
    fn better(d: f64, t: usize, best: &Option<SurfaceHit>) -> bool {
        match best {
            None => true,
            Some(b) => d < b.distance_squared || (d == b.distance_squared && t < b.triangle),
        }
    }

    fn hit(&self, p: Vec3, t: usize) -> SurfaceHit {
        let [a, b, c] = self.corners(t);
        let (q, feature) = closest_point_on_triangle(p, a, b, c);
        SurfaceHit {
            triangle: t,
            point: q,
            feature,
            distance_squared: p.distance_squared(q),
        }
    }

    /// Closest triangle by exhaustive scan. Ties go to the lower index.
    pub fn closest_exhaustive(&self, p: Vec3) -> SurfaceHit {
        let mut best: Option<SurfaceHit> = None;
        for t in 0..self.triangles.len() {
            let h = self.hit(p, t);
            if Self::better(h.distance_squared, t, &best) {
                best = Some(h);
            }
        }
        best.expect("scene has at least one triangle")
    }

    /// Closest triangle through the BVH; identical to
    /// [`SceneModel::closest_exhaustive`] including tie-breaking.
    pub fn closest(&self, p: Vec3) -> SurfaceHit {
        let mut best: Option<SurfaceHit> = None;
        let mut stack: Vec<usize> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(id) = stack.pop() {
            let node = &self.bvh.nodes[id];
            if let Some(b) = &best {
                if node.bounds.distance_squared(p) > b.distance_squared {
                    continue;
                }
            }
            if node.left == usize::MAX {
                for &t in &self.bvh.order[node.start..node.start + node.count] {
                    let h = self.hit(p, t);
                    if Self::better(h.distance_squared, t, &best) {
                        best = Some(h);
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = self.bvh.nodes[l].bounds.distance_squared(p);
                let dr = self.bvh.nodes[r].bounds.distance_squared(p);
                // visit nearer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.expect("scene has at least one triangle")
    }

    /// Pseudo-normal of the feature a hit landed on.
    pub fn pseudo_normal(&self, hit: &SurfaceHit) -> Vec3 {
        let tri = self.triangles[hit.triangle];
        match hit.feature {
            Feature::Face => self.face_normals[hit.triangle],
            Feature::Vertex(k) => self.vertex_normals[tri[k as usize] as usize],
            Feature::Edge(k) => {
                let i = tri[k as usize];
                let j = tri[(k as usize + 1) % 3];
                self.edge_normals[&(i.min(j), i.max(j))]
            }
        }
    }

    fn signed_from_hit(&self, p: Vec3, hit: &SurfaceHit) -> f64 {
        let d = crate::math::sqrt(hit.distance_squared);
        if d == 0.0 {
            return 0.0;
        }
        if (p - hit.point).dot(self.pseudo_normal(hit)) < 0.0 {
            -d
        } else {
            d
        }
    }

    /// Signed distance from `p` to the scene surface (negative inside).
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let hit = self.closest(p);
        self.signed_from_hit(p, &hit)
    }

    /// Signed distance using the exhaustive closest-triangle scan.
    pub fn signed_distance_exhaustive(&self, p: Vec3) -> f64 {
        let hit = self.closest_exhaustive(p);
        self.signed_from_hit(p, &hit)
    }

    /// Signed distance and its gradient with respect to `p`.
    ///
    /// Away from the medial axis the gradient is the unit vector from the
    /// closest point, flipped by the sign; on the surface it is the
    /// pseudo-normal.
    pub fn signed_distance_with_gradient(&self, p: Vec3) -> (f64, Vec3) {
        let hit = self.closest(p);
        let sd = self.signed_from_hit(p, &hit);
        let grad = if sd == 0.0 {
            self.pseudo_normal(&hit)
        } else {
            (p - hit.point) * (1.0 / sd)
        };
        (sd, grad)
    }

    /// First intersection of the ray `origin + t·dir` (t > 0) with the mesh.
    pub fn raycast(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        self.raycast_hit(origin, dir).map(|(d, _)| d)
    }

    /// Ray parameter and triangle of the first intersection.
    pub fn raycast_hit(&self, origin: Vec3, dir: Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            if let Some(d) = ray_triangle(origin, dir, a, b, c) {
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, t));
                }
            }
        }
        best
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter())
    }
}

/// Möller–Trumbore ray/triangle intersection.
fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let h = d.cross(e2);
    let det = e1.dot(h);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = inv * s.dot(h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = inv * d.dot(q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = inv * e2.dot(q);
    (t > 1e-12).then_some(t)
}

/// Triangulated closed box with outward-facing triangles.
pub fn box_mesh(min: Vec3, max: Vec3) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let v = vec![
        Vec3::new(min.x, min.y, min.z),
        Vec3::new(max.x, min.y, min.z),
        Vec3::new(max.x, max.y, min.z),
        Vec3::new(min.x, max.y, min.z),
        Vec3::new(min.x, min.y, max.z),
        Vec3::new(max.x, min.y, max.z),
        Vec3::new(max.x, max.y, max.z),
        Vec3::new(min.x, max.y, max.z),
    ];
    let t = vec![
        [0, 2, 1],
        [0, 3, 2], // bottom (-z)
        [4, 5, 6],
        [4, 6, 7], // top (+z)
        [0, 1, 5],
        [0, 5, 4], // -y
        [2, 3, 7],
        [2, 7, 6], // +y
        [1, 2, 6],
        [1, 6, 5], // +x
        [3, 0, 4],
        [3, 4, 7], // -x
    ];
    (v, t)
}

/// Closed-form signed distance to an axis-aligned box.
pub fn box_sdf(min: Vec3, max: Vec3, p: Vec3) -> f64 {
    let c = (min + max) * 0.5;
    let h = (max - min) * 0.5;
    let q = (p - c).abs() - h;
    let outside = q.max(Vec3::ZERO).norm();
    let inside = q.max_element().min(0.0);
    outside + inside
}
