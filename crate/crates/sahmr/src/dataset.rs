//! Synthetic datasets on disk: one directory per frame plus a manifest.
//!
//! ```text
//! manifest.json
//! body/template.obj, body/regions.json
//! frame_0000/scene.ply      scene mesh
//! frame_0000/points.ply     scene point cloud
//! frame_0000/body_gt.obj    ground-truth body, scene frame
//! frame_0000/camera.json
//! frame_0000/labels.json    point categories and vertex contact flags
//! frame_0000/maps.bin       root heatmap, depth map, rendered features
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sahmr_core::body::BodyModel;
use sahmr_core::root_contact::RootMaps;
use sahmr_core::synth::{gen_frame, image_feature, scenario_for, Scenario, SynthConfig, SynthFrame, IMAGE_GRID};
use sahmr_core::{FeatureMap, SceneModel, Vec3};

use crate::error::{Error, Result};
use crate::formats::{read_camera, read_json, read_maps, write_camera, write_json, write_maps, LabelsJson, RegionPartition};
use crate::mesh::{read_obj, read_ply, read_points, write_obj, write_ply, write_points, Mesh};
use crate::pipeline::par_map;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub crop: f64,
    pub map_size: usize,
    pub sigma: f64,
    pub point_spacing: f64,
    pub contact_threshold: f64,
    pub f_full: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl From<&SynthConfig> for SynthSettings {
    fn from(c: &SynthConfig) -> Self {
        SynthSettings {
            crop: c.crop,
            map_size: c.map_size,
            sigma: c.sigma,
            point_spacing: c.point_spacing,
            contact_threshold: c.contact_threshold,
            f_full: c.f_full,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }
}

impl From<&SynthSettings> for SynthConfig {
    fn from(c: &SynthSettings) -> Self {
        SynthConfig {
            crop: c.crop,
            map_size: c.map_size,
            sigma: c.sigma,
            point_spacing: c.point_spacing,
            contact_threshold: c.contact_threshold,
            f_full: c.f_full,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: usize,
    pub dir: String,
    pub seed: u64,
    pub scenario: String,
    /// Boxes composing the scene besides the floor, as `[min, max]`.
    pub boxes: Vec<[[f64; 3]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub synth: SynthSettings,
    pub frames: Vec<FrameEntry>,
}

/// Seed of frame `i` of a dataset generated with `seed`.
pub fn frame_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Generate `n` frames; scenarios rotate through the four kinds.
pub fn generate(n: usize, seed: u64, body: &BodyModel, cfg: &SynthConfig, workers: usize) -> Result<Vec<SynthFrame>> {
    let ids: Vec<usize> = (0..n).collect();
    par_map(workers, &ids, |_, &i| Ok(gen_frame(frame_seed(seed, i), scenario_for(i), body, cfg)?))
}

fn frame_dir(i: usize) -> String {
    format!("frame_{i:04}")
}

pub fn write_frame(dir: &Path, frame: &SynthFrame) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ply(
        &dir.join("scene.ply"),
        &Mesh {
            vertices: frame.scene.vertices.clone(),
            faces: frame.scene.triangles.clone(),
        },
    )?;
    write_points(&dir.join("points.ply"), &frame.scene.points)?;
    write_obj(
        &dir.join("body_gt.obj"),
        &Mesh {
            vertices: frame.body.clone(),
            faces: Vec::new(),
        },
    )?;
    write_camera(&dir.join("camera.json"), &frame.camera)?;
    write_json(&dir.join("labels.json"), &LabelsJson::new(&frame.labels, &frame.vertex_contact))?;
    write_maps(&dir.join("maps.bin"), &pack_maps(&frame.maps, &frame.features))
}

/// Heatmap and depth map followed by the feature channels.
fn pack_maps(maps: &RootMaps, features: &FeatureMap) -> FeatureMap {
    let c = 2 + features.channels;
    let mut out = FeatureMap::zeros(maps.size, maps.size, c);
    for r in 0..maps.size {
        for k in 0..maps.size {
            let i = r * maps.size + k;
            let t = out.texel_mut(r, k);
            t[0] = maps.heatmap[i];
            t[1] = maps.depthmap[i];
            t[2..].copy_from_slice(features.texel(r, k));
        }
    }
    out
}

fn unpack_maps(path: &Path, packed: &FeatureMap) -> Result<(RootMaps, FeatureMap)> {
    if packed.height != packed.width || packed.channels < 2 {
        return Err(Error::format(path, "expected square maps with at least two channels"));
    }
    let n = packed.height;
    let mut maps = RootMaps {
        size: n,
        heatmap: vec![0.0; n * n],
        depthmap: vec![0.0; n * n],
    };
    let mut features = FeatureMap::zeros(n, n, packed.channels - 2);
    for r in 0..n {
        for k in 0..n {
            let t = packed.texel(r, k);
            maps.heatmap[r * n + k] = t[0];
            maps.depthmap[r * n + k] = t[1];
            features.texel_mut(r, k).copy_from_slice(&t[2..]);
        }
    }
    Ok((maps, features))
}

/// Load one frame. Non-manifold or open scene edges are reported on
/// standard error; inconsistent orientation is an error.
pub fn read_frame(dir: &Path, entry: &FrameEntry, body: &BodyModel) -> Result<SynthFrame> {
    let scene_path = dir.join("scene.ply");
    let mesh = read_ply(&scene_path)?;
    let points = read_points(&dir.join("points.ply"))?;
    let (scene, report) = SceneModel::with_report(mesh.vertices, mesh.faces, points).map_err(|e| Error::format(&scene_path, e.to_string()))?;
    if report.inconsistent_edges > 0 {
        return Err(Error::format(&scene_path, format!("{} inconsistently oriented edges", report.inconsistent_edges)));
    }
    if report.non_manifold_edges > 0 || report.boundary_edges > 0 {
        eprintln!(
            "warning: {}: {} non-manifold and {} boundary edges",
            scene_path.display(),
            report.non_manifold_edges,
            report.boundary_edges
        );
    }
    let body_path = dir.join("body_gt.obj");
    let verts = read_obj(&body_path)?.vertices;
    if verts.len() != body.n_vertices() {
        return Err(Error::format(&body_path, format!("{} vertices, body model has {}", verts.len(), body.n_vertices())));
    }
    let camera = read_camera(&dir.join("camera.json"))?;
    let labels_path = dir.join("labels.json");
    let labels: LabelsJson = read_json(&labels_path)?;
    if labels.points.len() != scene.points.len() || labels.vertices.len() != verts.len() {
        return Err(Error::format(&labels_path, "label counts do not match the scene and body"));
    }
    let maps_path = dir.join("maps.bin");
    let (maps, features) = unpack_maps(&maps_path, &read_maps(&maps_path)?)?;
    let scenario = Scenario::parse(&entry.scenario)?;
    Ok(SynthFrame {
        seed: entry.seed,
        scenario,
        root: body.root_joint(&verts)?,
        boxes: entry.boxes.iter().map(|[a, b]| (Vec3::from_array(*a), Vec3::from_array(*b))).collect(),
        scene,
        body: verts,
        camera,
        labels: labels.point_labels(),
        vertex_contact: labels.vertices,
        image_feature: image_feature(&features, IMAGE_GRID),
        maps,
        features,
    })
}

/// Write `frames` under `root` together with the manifest and the body
/// model's template and region partition.
pub fn write_dataset(root: &Path, frames: &[SynthFrame], seed: u64, cfg: &SynthConfig, body: &BodyModel, workers: usize) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    par_map(workers, frames, |i, f| write_frame(&root.join(frame_dir(i)), f))?;
    write_obj(
        &root.join("body").join("template.obj"),
        &Mesh {
            vertices: body.template.clone(),
            faces: Vec::new(),
        },
    )?;
    write_json(&root.join("body").join("regions.json"), &RegionPartition::of(body))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        synth: SynthSettings::from(cfg),
        frames: frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameEntry {
                id: i,
                dir: frame_dir(i),
                seed: f.seed,
                scenario: f.scenario.as_str().into(),
                boxes: f.boxes.iter().map(|(a, b)| [a.to_array(), b.to_array()]).collect(),
            })
            .collect(),
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<SynthFrame>,
}

impl Dataset {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig::from(&self.manifest.synth)
    }

    pub fn frame_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.frames[i].dir)
    }

    /// Files the dataset consists of, in a stable order.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut out = vec![self.root.join(MANIFEST)];
        for e in &self.manifest.frames {
            for f in ["scene.ply", "points.ply", "body_gt.obj", "camera.json", "labels.json", "maps.bin"] {
                out.push(self.root.join(&e.dir).join(f));
            }
        }
        out
    }
}

pub fn read_dataset(root: &Path, body: &BodyModel, workers: usize) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.frames.is_empty() {
        return Err(sahmr_core::Error::EmptyFrameSet.into());
    }
    let frames = par_map(workers, &manifest.frames, |_, e| read_frame(&root.join(&e.dir), e, body))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let body = BodyModel::toy();
        let cfg = SynthConfig::default();
        let frames = generate(4, 3, &body, &cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &frames, 3, &cfg, &body, 2).unwrap();
        let ds = read_dataset(dir.path(), &body, 1).unwrap();
        assert_eq!(ds.frames.len(), 4);
        for (a, b) in frames.iter().zip(&ds.frames) {
            // mesh and labels are exact, maps are stored as f32
            assert_eq!(a.body, b.body);
            assert_eq!(a.root, b.root);
            assert_eq!(a.scene.vertices, b.scene.vertices);
            assert_eq!(a.scene.triangles, b.scene.triangles);
            assert_eq!(a.scene.points, b.scene.points);
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.vertex_contact, b.vertex_contact);
            assert_eq!((a.seed, a.scenario, &a.boxes), (b.seed, b.scenario, &b.boxes));
            for (x, y) in a.maps.heatmap.iter().zip(&b.maps.heatmap) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
            }
            for (x, y) in a.image_feature.iter().zip(&b.image_feature) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let part: RegionPartition = read_json(&dir.path().join("body/regions.json")).unwrap();
        assert_eq!(part.region_of_vertex(body.n_vertices()).unwrap(), body.region_of_vertex);
    }

    #[test]
    fn generation_does_not_depend_on_workers() {
        let body = BodyModel::toy();
        let cfg = SynthConfig::default();
        let a = generate(3, 9, &body, &cfg, 1).unwrap();
        let b = generate(3, 9, &body, &cfg, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.body, y.body);
            assert_eq!(x.scene.points, y.scene.points);
        }
    }

    #[test]
    fn missing_dataset_is_a_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let e = read_dataset(&dir.path().join("nope"), &BodyModel::toy(), 1).err().unwrap();
        assert_eq!(e.exit_code(), 3);
    }
}
