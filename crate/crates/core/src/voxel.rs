//! Sparse voxelization of scene points and root-anchored region selection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{floor, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub index: [i64; 3],
    pub center: Vec3,
    /// Indices into the point slice passed to [`voxelize`].
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    pub voxel_size: f64,
    pub origin: Vec3,
    /// Sorted lexicographically by `index`.
    pub voxels: Vec<Voxel>,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index_of(&self, p: Vec3) -> [i64; 3] {
        cell_index(p, self.origin, self.voxel_size)
    }

    /// Position of the voxel with integer index `idx`, if occupied.
    pub fn find(&self, idx: [i64; 3]) -> Option<usize> {
        self.voxels.binary_search_by(|v| v.index.cmp(&idx)).ok()
    }

    /// For each point index (up to `n_points`), the voxel that holds it.
    pub fn point_to_voxel(&self, n_points: usize) -> Vec<Option<usize>> {
        let mut out = alloc::vec![None; n_points];
        for (vi, v) in self.voxels.iter().enumerate() {
            for &m in &v.members {
                if m < n_points {
                    out[m] = Some(vi);
                }
            }
        }
        out
    }
}

fn cell_index(p: Vec3, origin: Vec3, size: f64) -> [i64; 3] {
    let d = p - origin;
    [
        floor(d.x / size) as i64,
        floor(d.y / size) as i64,
        floor(d.z / size) as i64,
    ]
}

/// Component-wise minimum of `points` snapped down to a multiple of `voxel_size`.
pub fn default_origin(points: &[Vec3], voxel_size: f64) -> Vec3 {
    let lo = points
        .iter()
        .fold(Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY), |a, &p| a.min(p));
    if !lo.is_finite() {
        return Vec3::ZERO;
    }
    Vec3::new(
        floor(lo.x / voxel_size) * voxel_size,
        floor(lo.y / voxel_size) * voxel_size,
        floor(lo.z / voxel_size) * voxel_size,
    )
}

pub fn voxelize(points: &[Vec3], voxel_size: f64, origin: Vec3) -> Result<SparseVoxelGrid> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, &p) in points.iter().enumerate() {
        cells.entry(cell_index(p, origin, voxel_size)).or_default().push(i);
    }
    let voxels = cells
        .into_iter()
        .map(|(index, members)| {
            let center = origin
                + Vec3::new(
                    (index[0] as f64 + 0.5) * voxel_size,
                    (index[1] as f64 + 0.5) * voxel_size,
                    (index[2] as f64 + 0.5) * voxel_size,
                );
            Voxel {
                index,
                center,
                members,
            }
        })
        .collect();
    Ok(SparseVoxelGrid {
        voxel_size,
        origin,
        voxels,
    })
}

/// Indices of points within `gamma1` of `root` or of the two extra anchors
/// `root ± gamma2·axis`. `axis` should be the camera optical axis in scene
/// coordinates.
pub fn roi_select(points: &[Vec3], root: Vec3, axis: Vec3, gamma1: f64, gamma2: f64) -> Vec<usize> {
    let r2 = gamma1 * gamma1;
    let a = axis.normalized();
    let anchors = [root, root + a * gamma2, root - a * gamma2];
    points
        .iter()
        .enumerate()
        .filter(|(_, &p)| anchors.iter().any(|&c| p.distance_squared(c) <= r2))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_point_single_voxel() {
        let g = voxelize(&[Vec3::new(0.12, 0.32, -0.01)], 0.05, Vec3::ZERO).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].index, [2, 6, -1]);
        assert_eq!(g.voxels[0].members, vec![0]);
    }

    #[test]
    fn two_close_points_share_a_cell() {
        let pts = [Vec3::new(0.005, 0.0, 0.0), Vec3::new(0.045, 0.0, 0.0)];
        let g = voxelize(&pts, 0.05, Vec3::ZERO).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].members, vec![0, 1]);
        assert!(g.voxels[0].center.distance(Vec3::new(0.025, 0.025, 0.025)) < 1e-15);
    }

    #[test]
    fn boundary_straddle_gives_two_cells() {
        let pts = [Vec3::new(0.049, 0.01, 0.01), Vec3::new(0.051, 0.01, 0.01)];
        let g = voxelize(&pts, 0.05, Vec3::ZERO).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.voxels[0].index, [0, 0, 0]);
        assert_eq!(g.voxels[1].index, [1, 0, 0]);
    }

    #[test]
    fn roi_far_points_dropped() {
        let pts = [Vec3::new(5.0, 0.0, 0.0)];
        assert!(roi_select(&pts, Vec3::ZERO, Vec3::Z, 1.25, 0.5).is_empty());
    }

    #[test]
    fn roi_keeps_point_inside_gamma1() {
        let pts = [Vec3::new(1.2, 0.0, 0.0)];
        assert_eq!(roi_select(&pts, Vec3::ZERO, Vec3::Z, 1.25, 0.5), vec![0]);
    }

    #[test]
    fn roi_keeps_point_via_far_anchor() {
        let pts = [Vec3::new(0.0, 0.0, 1.5)];
        assert_eq!(roi_select(&pts, Vec3::ZERO, Vec3::Z, 1.25, 0.5), vec![0]);
        assert!(roi_select(&pts, Vec3::ZERO, Vec3::Z, 1.25, 0.0).is_empty());
    }

    #[test]
    fn default_origin_snaps_down() {
        let o = default_origin(&[Vec3::new(0.12, -0.03, 1.0)], 0.05);
        assert!(o.distance(Vec3::new(0.1, -0.05, 1.0)) < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_size() {
        assert!(voxelize(&[Vec3::ZERO], 0.0, Vec3::ZERO).is_err());
    }
}
