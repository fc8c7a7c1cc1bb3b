//! JSON records and the binary feature-map file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sahmr_core::body::{BodyModel, ContactLabels, N_REGIONS};
use sahmr_core::{Camera, FeatureMap, Mat3, Vec3};

use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Crop side in pixels.
    pub w: f64,
    /// Scene-to-camera rotation, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        CameraJson {
            f: c.f,
            cx: c.cx,
            cy: c.cy,
            w: c.crop,
            r: c.rotation.to_row_major(),
            t: c.translation.to_array(),
        }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> sahmr_core::Result<Camera> {
        Camera::new(
            self.f,
            self.cx,
            self.cy,
            Mat3::from_row_major(self.r),
            Vec3::from_array(self.t),
            self.w,
        )
    }
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    write_json(path, &CameraJson::from(camera))
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    read_json::<CameraJson>(path)?
        .to_camera()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Ground-truth contact labels of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsJson {
    /// Category per scene point, 0 = none, 1..=7 body regions.
    pub points: Vec<u8>,
    /// Contact flag per body vertex.
    pub vertices: Vec<bool>,
}

impl LabelsJson {
    pub fn new(points: &ContactLabels, vertices: &[bool]) -> Self {
        LabelsJson {
            points: points.categories.clone(),
            vertices: vertices.to_vec(),
        }
    }

    pub fn point_labels(&self) -> ContactLabels {
        ContactLabels {
            categories: self.points.clone(),
        }
    }
}

/// Vertex ids of each of the seven contact regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub regions: Vec<Vec<usize>>,
}

impl RegionPartition {
    pub fn of(body: &BodyModel) -> Self {
        RegionPartition {
            regions: body.region_members(),
        }
    }

    /// Region per vertex for a body with `n` vertices. Regions must be
    /// seven, non-empty, in range and disjoint.
    pub fn region_of_vertex(&self, n: usize) -> std::result::Result<Vec<Option<u8>>, String> {
        if self.regions.len() != N_REGIONS {
            return Err(format!("expected {N_REGIONS} regions, got {}", self.regions.len()));
        }
        let mut out = vec![None; n];
        for (r, ids) in self.regions.iter().enumerate() {
            if ids.is_empty() {
                return Err(format!("region {r} is empty"));
            }
            for &i in ids {
                match out.get_mut(i) {
                    None => return Err(format!("vertex {i} out of range")),
                    Some(Some(_)) => return Err(format!("vertex {i} in two regions")),
                    Some(slot) => *slot = Some(r as u8),
                }
            }
        }
        Ok(out)
    }
}

/// Output of the root and contact stage for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Json {
    /// Refined root, scene frame.
    pub root: [f64; 3],
    /// Point cloud of the predicted contact points.
    pub contacts: PathBuf,
    pub categories: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootJson {
    pub root: [f64; 3],
}

const MAPS_MAGIC: &[u8; 6] = b"SAHMRM";

/// Channel-interleaved `H×W×C` little-endian f32 maps.
pub fn write_maps(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + map.data.len() * 4);
    buf.extend_from_slice(MAPS_MAGIC);
    for d in [map.height, map.width, map.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &map.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_maps(path: &Path) -> Result<FeatureMap> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if raw.len() < 18 || &raw[..6] != MAPS_MAGIC {
        return Err(bad("not a SAHMRM map file"));
    }
    let dim = |k: usize| u32::from_le_bytes(raw[6 + 4 * k..10 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| bad("map size overflows"))?;
    if raw.len() != 18 + 4 * n {
        return Err(bad("map payload size does not match its header"));
    }
    let data = raw[18..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::from_data(h, w, c, data).map_err(|e| Error::format(path, e.to_string()))
}
