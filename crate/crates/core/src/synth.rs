//! Synthetic frames: box-and-plane scenes, a posed toy body resting on
//! them, a camera looking at it, and every ground-truth quantity the
//! pipeline consumes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body::{gt_contact_labels, vertex_contact_flags, BodyModel, ContactLabels, Part, Pose};
use crate::error::{Error, Result};
use crate::geometry::{Camera, FeatureMap, SquareBox};
use crate::math::{exp, floor, Mat3, Vec3};
use crate::root_contact::RootMaps;
use crate::scene::SceneModel;

/// Gap left between the body and the surfaces it rests on.
pub const CLEARANCE: f64 = 0.0015;
/// Half side of the square floor.
pub const FLOOR_HALF: f64 = 2.5;
/// Channels of the rendered feature map: mask, gray, one per region.
pub const FEATURE_CHANNELS: usize = 9;
/// Side of the pooled intensity grid used as the global image feature.
pub const IMAGE_GRID: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    StandFloor,
    SitBox,
    LiePlane,
    LeanWall,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::StandFloor,
        Scenario::SitBox,
        Scenario::LiePlane,
        Scenario::LeanWall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::StandFloor => "stand_floor",
            Scenario::SitBox => "sit_box",
            Scenario::LiePlane => "lie_plane",
            Scenario::LeanWall => "lean_wall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownScenario(String::from(s)))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Crop side in pixels.
    pub crop: f64,
    /// Root map side (cells).
    pub map_size: usize,
    /// Heatmap Gaussian width in cells.
    pub sigma: f64,
    /// Scene point spacing in metres.
    pub point_spacing: f64,
    pub contact_threshold: f64,
    pub f_full: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            crop: 224.0,
            map_size: 56,
            sigma: 2.0,
            point_spacing: 0.03,
            contact_threshold: 0.07,
            f_full: 1000.0,
            image_width: 1280.0,
            image_height: 960.0,
        }
    }
}

impl SynthConfig {
    /// Crop pixels per map cell.
    pub fn stride(&self) -> f64 {
        self.crop / self.map_size as f64
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub seed: u64,
    pub scenario: Scenario,
    pub scene: SceneModel,
    /// Axis-aligned boxes composing the scene besides the floor.
    pub boxes: Vec<(Vec3, Vec3)>,
    /// Ground-truth body, scene frame.
    pub body: Vec<Vec3>,
    pub camera: Camera,
    /// Regressed root joint of `body`, scene frame.
    pub root: Vec3,
    /// Per scene point.
    pub labels: ContactLabels,
    /// Per body vertex.
    pub vertex_contact: Vec<bool>,
    pub maps: RootMaps,
    pub features: FeatureMap,
    pub image_feature: Vec<f64>,
}

/// Triangulated square floor at z = 0 with an optional rectangular hole
/// filled by an open-bottom box, so the union is one consistently oriented
/// mesh without T-junctions.
pub fn floor_with_box(half: f64, bx: Option<(Vec3, Vec3)>) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut xs = vec![-half, half];
    let mut ys = vec![-half, half];
    if let Some((lo, hi)) = bx {
        xs = vec![-half, lo.x, hi.x, half];
        ys = vec![-half, lo.y, hi.y, half];
    }
    let mut verts = Vec::new();
    for &y in &ys {
        for &x in &xs {
            verts.push(Vec3::new(x, y, 0.0));
        }
    }
    let nx = xs.len();
    let id = |i: usize, j: usize| (j * nx + i) as u32;
    let mut tris = Vec::new();
    for j in 0..ys.len() - 1 {
        for i in 0..nx - 1 {
            if bx.is_some() && i == 1 && j == 1 {
                continue;
            }
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    if let Some((_, hi)) = bx {
        // bottom ring is shared with the floor hole
        let b = [id(1, 1), id(2, 1), id(2, 2), id(1, 2)];
        let t0 = verts.len() as u32;
        for k in 0..4 {
            let p = verts[b[k] as usize];
            verts.push(Vec3::new(p.x, p.y, hi.z));
        }
        let t = [t0, t0 + 1, t0 + 2, t0 + 3];
        tris.push([t[0], t[1], t[2]]);
        tris.push([t[0], t[2], t[3]]);
        for k in 0..4 {
            let k1 = (k + 1) % 4;
            tris.push([b[k], b[k1], t[k1]]);
            tris.push([b[k], t[k1], t[k]]);
        }
    }
    (verts, tris)
}

fn grid_points(
    rng: &mut ChaCha8Rng,
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    lu: f64,
    lv: f64,
    spacing: f64,
    skip: impl Fn(Vec3) -> bool,
    out: &mut Vec<Vec3>,
) {
    let nu = libm::ceil(lu / spacing).max(1.0) as usize;
    let nv = libm::ceil(lv / spacing).max(1.0) as usize;
    let (du, dv) = (lu / nu as f64, lv / nv as f64);
    for j in 0..nv {
        for i in 0..nu {
            let a = (i as f64 + 0.5 + rng.random_range(-0.3..0.3)) * du;
            let b = (j as f64 + 0.5 + rng.random_range(-0.3..0.3)) * dv;
            let p = origin + u * a + v * b;
            if !skip(p) {
                out.push(p);
            }
        }
    }
}

/// Points sampled on the floor and on the visible faces of the box.
fn sample_scene_points(rng: &mut ChaCha8Rng, half: f64, bx: Option<(Vec3, Vec3)>, spacing: f64) -> Vec<Vec3> {
    let mut pts = Vec::new();
    let inside = |p: Vec3| match bx {
        Some((lo, hi)) => p.x > lo.x && p.x < hi.x && p.y > lo.y && p.y < hi.y,
        None => false,
    };
    grid_points(
        rng,
        Vec3::new(-half, -half, 0.0),
        Vec3::X,
        Vec3::Y,
        2.0 * half,
        2.0 * half,
        spacing,
        inside,
        &mut pts,
    );
    if let Some((lo, hi)) = bx {
        let e = hi - lo;
        let faces = [
            (Vec3::new(lo.x, lo.y, hi.z), Vec3::X, Vec3::Y, e.x, e.y),
            (lo, Vec3::X, Vec3::Z, e.x, e.z),
            (Vec3::new(lo.x, hi.y, lo.z), Vec3::X, Vec3::Z, e.x, e.z),
            (lo, Vec3::Y, Vec3::Z, e.y, e.z),
            (Vec3::new(hi.x, lo.y, lo.z), Vec3::Y, Vec3::Z, e.y, e.z),
        ];
        for (o, u, v, lu, lv) in faces {
            grid_points(rng, o, u, v, lu, lv, spacing, |_| false, &mut pts);
        }
    }
    pts
}

fn deg(d: f64) -> f64 {
    d * core::f64::consts::PI / 180.0
}

fn region_vertices<'a>(body: &'a BodyModel, verts: &'a [Vec3], regions: &'a [u8]) -> impl Iterator<Item = Vec3> + 'a {
    verts
        .iter()
        .zip(&body.region_of_vertex)
        .filter(move |(_, r)| r.is_some_and(|r| regions.contains(&r)))
        .map(|(&v, _)| v)
}

fn min_z(verts: &[Vec3]) -> f64 {
    verts.iter().map(|v| v.z).fold(f64::INFINITY, f64::min)
}

/// Body and optional box in the body-local frame (facing +y, floor z = 0).
fn pose_scenario(body: &BodyModel, scenario: Scenario, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Option<(Vec3, Vec3)>) {
    let toy = body.toy.as_ref().expect("synthetic frames need the toy body");
    let mut pose = Pose {
        scale: rng.random_range(0.92..1.08),
        ..Pose::default()
    };
    let arms = |pose: &mut Pose, flex: (f64, f64), abduct: f64, elbow: f64, rng: &mut ChaCha8Rng| {
        for (upper, lower, sign) in [(Part::RUpperArm, Part::RLowerArm, -1.0), (Part::LUpperArm, Part::LLowerArm, 1.0)] {
            let f = deg(rng.random_range(flex.0..flex.1));
            let a = deg(rng.random_range(0.0..abduct)) * sign;
            pose.set(upper, Mat3::rot_y(a) * Mat3::rot_x(f));
            pose.set(lower, Mat3::rot_x(deg(rng.random_range(0.0..elbow))));
        }
    };
    match scenario {
        Scenario::StandFloor => arms(&mut pose, (-20.0, 30.0), 25.0, 40.0, rng),
        // hands stay in front so the back meets the wall first
        Scenario::LeanWall => arms(&mut pose, (0.0, 30.0), 25.0, 40.0, rng),
        Scenario::SitBox => {
            arms(&mut pose, (50.0, 80.0), 15.0, 20.0, rng);
            let knee = rng.random_range(80.0..100.0);
            for (thigh, shin, foot) in [(Part::RThigh, Part::RShin, Part::RFoot), (Part::LThigh, Part::LShin, Part::LFoot)] {
                pose.set(thigh, Mat3::rot_x(FRAC_PI_2));
                pose.set(shin, Mat3::rot_x(-deg(knee)));
                pose.set(foot, Mat3::rot_x(deg(knee - 90.0)));
            }
        }
        Scenario::LiePlane => {
            arms(&mut pose, (-5.0, 10.0), 30.0, 20.0, rng);
            pose.rotation = Mat3::rot_x(FRAC_PI_2);
        }
    }
    let mut verts = toy.pose(&pose);
    let lift = CLEARANCE - min_z(&verts);
    for v in &mut verts {
        v.z += lift;
    }
    let bx = match scenario {
        Scenario::SitBox => {
            let seat_parts = [1u8, 6];
            let seat = region_vertices(body, &verts, &seat_parts).map(|v| v.z).fold(f64::INFINITY, f64::min) - CLEARANCE;
            let back = region_vertices(body, &verts, &[1]).map(|v| v.y).fold(f64::INFINITY, f64::min);
            // front face stays behind everything that hangs below the seat
            let front = verts
                .iter()
                .filter(|v| v.z < seat)
                .map(|v| v.y)
                .fold(f64::INFINITY, f64::min)
                - 0.03;
            Some((Vec3::new(-0.35, back - 0.2, 0.0), Vec3::new(0.35, front, seat)))
        }
        Scenario::LeanWall => {
            let back = verts.iter().map(|v| v.y).fold(f64::INFINITY, f64::min) - CLEARANCE;
            Some((Vec3::new(-1.0, back - 0.25, 0.0), Vec3::new(1.0, back, 2.2)))
        }
        _ => None,
    };
    (verts, bx)
}

fn look_at(eye: Vec3, target: Vec3) -> (Mat3, Vec3) {
    let fwd = (target - eye).normalized();
    let right = fwd.cross(Vec3::Z).normalized();
    let down = fwd.cross(right);
    let r = Mat3::from_rows(right, down, fwd);
    (r, -(r * eye))
}

/// Heatmap cell holding the projection of `root` (scene frame).
pub fn root_cell(camera: &Camera, root: Vec3, map_size: usize) -> Result<(usize, usize)> {
    let (u, v, _) = camera.project(root)?;
    let stride = camera.crop / map_size as f64;
    let (cu, cv) = (floor(u / stride), floor(v / stride));
    if cu < 0.0 || cv < 0.0 || cu >= map_size as f64 || cv >= map_size as f64 {
        return Err(Error::RootOutsideFrustum);
    }
    Ok((cv as usize, cu as usize))
}

/// Gaussian heatmap centred on a cell and a normalised-depth map holding
/// `z_norm` inside the 3σ disc. σ = 0 gives a one-hot heatmap.
pub fn render_maps_at(size: usize, cell: (usize, usize), z_norm: f64, sigma: f64) -> RootMaps {
    let mut heatmap = vec![0.0; size * size];
    let mut depth = vec![0.0; size * size];
    let (r0, c0) = (cell.0 as f64, cell.1 as f64);
    for r in 0..size {
        for c in 0..size {
            let d2 = (r as f64 - r0) * (r as f64 - r0) + (c as f64 - c0) * (c as f64 - c0);
            let i = r * size + c;
            if sigma > 0.0 {
                heatmap[i] = exp(-d2 / (2.0 * sigma * sigma));
            } else if d2 == 0.0 {
                heatmap[i] = 1.0;
            }
            if d2 <= 9.0 * sigma * sigma {
                depth[i] = z_norm;
            }
        }
    }
    RootMaps {
        size,
        heatmap,
        depthmap: depth,
    }
}

/// Ground-truth root maps for a frame's root.
pub fn render_root_maps(camera: &Camera, root: Vec3, map_size: usize, sigma: f64) -> Result<RootMaps> {
    let cell = root_cell(camera, root, map_size)?;
    let depth = camera.to_camera(root).z;
    Ok(render_maps_at(map_size, cell, camera.normalized_depth(depth), sigma))
}

/// Noise of the simulated 2D root head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootHeadNoise {
    /// Std of the heatmap peak jitter, in cells.
    pub cell_sigma: f64,
    /// Std of the log of the depth scale error.
    pub depth_log_sigma: f64,
}

impl Default for RootHeadNoise {
    fn default() -> Self {
        RootHeadNoise {
            cell_sigma: 0.5,
            depth_log_sigma: 0.08,
        }
    }
}

/// Maps as an imperfect image network would predict them: peak jitter and
/// a multiplicative depth error. Deterministic in `seed`.
pub fn simulate_root_head(frame: &SynthFrame, cfg: &SynthConfig, noise: RootHeadNoise, seed: u64) -> Result<RootMaps> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_4ead);
    let (r, c) = root_cell(&frame.camera, frame.root, cfg.map_size)?;
    let jitter = Normal::new(0.0, noise.cell_sigma.max(1e-12)).expect("finite");
    let clamp = |x: f64| libm::round(x).clamp(0.0, cfg.map_size as f64 - 1.0) as usize;
    let cell = (clamp(r as f64 + jitter.sample(&mut rng)), clamp(c as f64 + jitter.sample(&mut rng)));
    let z = frame.camera.normalized_depth(frame.camera.to_camera(frame.root).z);
    let scale = exp(Normal::new(0.0, noise.depth_log_sigma.max(1e-12)).expect("finite").sample(&mut rng));
    Ok(render_maps_at(cfg.map_size, cell, z * scale, cfg.sigma))
}

/// Splat body vertices into a `size × size` feature map with a depth test.
fn render_features(body: &BodyModel, verts: &[Vec3], camera: &Camera, size: usize) -> FeatureMap {
    let toy = body.toy.as_ref();
    let mut fm = FeatureMap::zeros(size, size, FEATURE_CHANNELS);
    let mut zbuf = vec![f64::INFINITY; size * size];
    let scale = size as f64 / camera.crop;
    for (i, &v) in verts.iter().enumerate() {
        let Ok((u, vv, z)) = camera.project(v) else { continue };
        let (cu, cv) = (u * scale - 0.5, vv * scale - 0.5);
        let rad = (0.05 * camera.f / z * scale).max(0.75);
        let shade = toy.map_or(0.5, |t| t.part_of_vertex[i].shade());
        let region = body.region_of_vertex[i];
        let r0 = floor(cv - rad).max(0.0) as usize;
        let c0 = floor(cu - rad).max(0.0) as usize;
        let r1 = (libm::ceil(cv + rad).max(0.0) as usize).min(size - 1);
        let c1 = (libm::ceil(cu + rad).max(0.0) as usize).min(size - 1);
        if cu + rad < 0.0 || cv + rad < 0.0 {
            continue;
        }
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (r as f64 - cv) * (r as f64 - cv) + (c as f64 - cu) * (c as f64 - cu);
                if d2 > rad * rad || z >= zbuf[r * size + c] {
                    continue;
                }
                zbuf[r * size + c] = z;
                let t = fm.texel_mut(r, c);
                t.iter_mut().for_each(|x| *x = 0.0);
                t[0] = 1.0;
                t[1] = shade;
                if let Some(k) = region {
                    t[2 + k as usize] = 1.0;
                }
            }
        }
    }
    fm
}

/// Average-pooled gray channel, flattened row-major.
pub fn image_feature(fm: &FeatureMap, grid: usize) -> Vec<f64> {
    let k = fm.height / grid;
    let mut out = vec![0.0; grid * grid];
    for r in 0..grid * k {
        for c in 0..grid * k {
            out[(r / k) * grid + c / k] += fm.texel(r, c)[1];
        }
    }
    let n = (k * k) as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

pub fn gen_frame(seed: u64, scenario: Scenario, body: &BodyModel, cfg: &SynthConfig) -> Result<SynthFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ scenario.index());
    let (local, local_box) = pose_scenario(body, scenario, &mut rng);

    let yaw = Mat3::rot_z(FRAC_PI_2 * rng.random_range(0..4u32) as f64);
    let offset = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 0.0);
    let place = |p: Vec3| yaw * p + offset;
    let verts: Vec<Vec3> = local.iter().map(|&p| place(p)).collect();
    let bx = local_box.map(|(lo, hi)| {
        let (a, b) = (place(lo), place(hi));
        (a.min(b), a.max(b))
    });

    let (sv, st) = floor_with_box(FLOOR_HALF, bx);
    let points = sample_scene_points(&mut rng, FLOOR_HALF, bx, cfg.point_spacing);
    let scene = SceneModel::new(sv, st, points)?;

    // camera in the front half-space of the body
    let facing = yaw * Vec3::Y;
    let lo = verts.iter().fold(verts[0], |a, &b| a.min(b));
    let hi = verts.iter().fold(verts[0], |a, &b| a.max(b));
    let target = (lo + hi) * 0.5;
    let az = deg(rng.random_range(-60.0..60.0));
    let dir = Mat3::rot_z(az) * facing;
    let dist = rng.random_range(2.5..4.5);
    let height = rng.random_range(0.8..2.0);
    let eye = Vec3::new(target.x + dir.x * dist, target.y + dir.y * dist, height);
    let (rot, trans) = look_at(eye, target);

    let full = Camera::new(cfg.f_full, cfg.image_width / 2.0, cfg.image_height / 2.0, rot, trans, cfg.image_width)?;
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in &verts {
        let (u, v, _) = full.project(p)?;
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let side = (u1 - u0).max(v1 - v0) * 1.2;
    let bbox = SquareBox {
        x0: (u0 + u1) / 2.0 - side / 2.0,
        y0: (v0 + v1) / 2.0 - side / 2.0,
        side,
    };
    let camera = Camera::from_full_image(
        cfg.f_full,
        cfg.image_width / 2.0,
        cfg.image_height / 2.0,
        rot,
        trans,
        bbox,
        cfg.crop,
    )?;

    let root = body.root_joint(&verts)?;
    let labels = gt_contact_labels(&verts, body, &scene.points, cfg.contact_threshold);
    let vertex_contact = vertex_contact_flags(&verts, body, &scene, cfg.contact_threshold);
    let maps = render_root_maps(&camera, root, cfg.map_size, cfg.sigma)?;
    let features = render_features(body, &verts, &camera, cfg.map_size);
    let image_feature = image_feature(&features, IMAGE_GRID);
    Ok(SynthFrame {
        seed,
        scenario,
        scene,
        boxes: bx.into_iter().collect(),
        body: verts,
        camera,
        root,
        labels,
        vertex_contact,
        maps,
        features,
        image_feature,
    })
}

/// Scenario assigned to frame `i` of a generated set (round robin).
pub fn scenario_for(i: usize) -> Scenario {
    Scenario::ALL[i % Scenario::ALL.len()]
}
