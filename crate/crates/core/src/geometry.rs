//! Pinhole camera, 2.5D root lifting, frustum selection and feature-map
//! sampling.
//!
//! The camera stores intrinsics of the square crop the networks see, not of
//! the full sensor image. [`Camera::from_full_image`] converts a full-image
//! calibration plus a square bounding box into crop intrinsics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{floor, Mat3, Vec3};

/// Minimum camera-space depth accepted by [`Camera::project`].
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// Focal length in crop pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Scene → camera rotation.
    pub rotation: Mat3,
    /// Scene → camera translation (meters).
    pub translation: Vec3,
    /// Side length of the square crop in pixels.
    pub crop: f64,
}

/// Square bounding box in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareBox {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl Camera {
    pub fn new(
        f: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        crop: f64,
    ) -> Result<Self> {
        let cam = Camera {
            f,
            cx,
            cy,
            rotation,
            translation,
            crop,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Crop intrinsics from a full-image calibration: scale by
    /// `crop / side`, then shift the principal point by the box origin.
    pub fn from_full_image(
        f_full: f64,
        cx_full: f64,
        cy_full: f64,
        rotation: Mat3,
        translation: Vec3,
        bbox: SquareBox,
        crop: f64,
    ) -> Result<Self> {
        if !(bbox.side > 0.0) {
            return Err(Error::InvalidCamera("bounding box side must be positive".into()));
        }
        let s = crop / bbox.side;
        Camera::new(
            f_full * s,
            (cx_full - bbox.x0) * s,
            (cy_full - bbox.y0) * s,
            rotation,
            translation,
            crop,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) || !self.f.is_finite() {
            return Err(Error::InvalidCamera(alloc::format!("focal length {}", self.f)));
        }
        if !(self.crop > 0.0) || !self.crop.is_finite() {
            return Err(Error::InvalidCamera(alloc::format!("crop size {}", self.crop)));
        }
        if self.rotation.orthonormality_error() >= 1e-9 || self.rotation.determinant() <= 0.0 {
            return Err(Error::InvalidCamera("rotation is not a proper rotation".into()));
        }
        if !self.translation.is_finite() || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("non-finite parameters".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn to_scene(&self, p_cam: Vec3) -> Vec3 {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    /// Camera centre in scene coordinates.
    pub fn center(&self) -> Vec3 {
        self.to_scene(Vec3::ZERO)
    }

    /// The optical axis expressed in scene coordinates.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::Z
    }

    /// Project a scene point to crop pixels; returns `(u, v, depth)`.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        self.project_camera(self.to_camera(p))
    }

    /// Project a point already in camera coordinates.
    pub fn project_camera(&self, c: Vec3) -> Result<(f64, f64, f64)> {
        if c.z <= MIN_DEPTH {
            return Err(Error::PointBehindCamera { depth: c.z });
        }
        Ok((self.f * c.x / c.z + self.cx, self.f * c.y / c.z + self.cy, c.z))
    }

    /// Normalized depth `Z̃ = Z·w/f` for a camera-space depth.
    #[inline]
    pub fn normalized_depth(&self, depth: f64) -> f64 {
        depth * self.crop / self.f
    }

    /// 2.5D lifting: pixel `(x, y)` plus normalized depth to a camera-space
    /// root.
    pub fn lift_root(&self, x: f64, y: f64, z_norm: f64) -> Result<Root3D> {
        if !(z_norm > 0.0) {
            return Err(Error::InvalidDepth(z_norm));
        }
        let z = z_norm * self.f / self.crop;
        Ok(Root3D {
            position: Vec3::new((x - self.cx) / self.f * z, (y - self.cy) / self.f * z, z),
            provenance: Provenance::Initial,
        })
    }

    /// Indices of points that project inside `[0, w) × [0, w)` with positive
    /// depth, in input order.
    pub fn frustum_select(&self, points: &[Vec3]) -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| match self.project(*p) {
                Ok((u, v, _)) if self.in_crop(u, v) => Some(i),
                _ => None,
            })
            .collect()
    }

    #[inline]
    pub fn in_crop(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.crop && v >= 0.0 && v < self.crop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Initial,
    Refined,
    GroundTruth,
}

/// Human root in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root3D {
    pub position: Vec3,
    pub provenance: Provenance,
}

impl Root3D {
    pub fn new(position: Vec3, provenance: Provenance) -> Self {
        Root3D {
            position,
            provenance,
        }
    }

    pub fn from_scene(camera: &Camera, p: Vec3, provenance: Provenance) -> Self {
        Root3D::new(camera.to_camera(p), provenance)
    }

    pub fn to_scene(&self, camera: &Camera) -> Vec3 {
        camera.to_scene(self.position)
    }
}

/// Dense `H × W × C` feature map, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(alloc::format!(
                "feature map {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear interpolation at continuous texel coordinates `(u, v)`
    /// (`u` along the width). Coordinates are clamped to the border.
    pub fn bilinear_sample(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(u, v, &mut out);
        out
    }

    pub fn bilinear_sample_into(&self, u: f64, v: f64, out: &mut [f64]) {
        let (c0, c1, tu) = lerp_cell(u, self.width);
        let (r0, r1, tv) = lerp_cell(v, self.height);
        let (a, b, c, d) = (
            self.texel(r0, c0),
            self.texel(r0, c1),
            self.texel(r1, c0),
            self.texel(r1, c1),
        );
        for k in 0..self.channels {
            let top = a[k] + (b[k] - a[k]) * tu;
            let bottom = c[k] + (d[k] - c[k]) * tu;
            out[k] = top + (bottom - top) * tv;
        }
    }
}

fn lerp_cell(x: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 || x.is_nan() {
        return (0, 0, 0.0);
    }
    let x = x.clamp(0.0, (n - 1) as f64);
    let i0 = (floor(x) as usize).min(n - 2);
    (i0, i0 + 1, x - i0 as f64)
}
