use proptest::prelude::*;

use sahmr_core::body::BodyModel;
use sahmr_core::geometry::Provenance;
use sahmr_core::scene::box_mesh;
use sahmr_core::synth::{gen_frame, scenario_for, SynthConfig};
use sahmr_core::{Camera, Mat3, SceneModel, Vec3};

// Signed distance to an axis-aligned box, written out per case.
fn box_distance(lo: [f64; 3], hi: [f64; 3], p: [f64; 3]) -> f64 {
    let mut out2 = 0.0;
    let mut inside = f64::NEG_INFINITY;
    for k in 0..3 {
        let below = lo[k] - p[k];
        let above = p[k] - hi[k];
        let d = below.max(above);
        if d > 0.0 {
            out2 += d * d;
        }
        inside = inside.max(d);
    }
    if out2 > 0.0 {
        out2.sqrt()
    } else {
        inside
    }
}

fn camera(ax: f64, ay: f64, az: f64, angle: f64, t: [f64; 3]) -> Camera {
    let axis = Vec3::new(ax, ay, az + 1.5);
    let r = Mat3::rotation(axis * (1.0 / axis.norm()), angle);
    Camera::new(500.0, 128.0, 128.0, r, Vec3::new(t[0], t[1], t[2]), 256.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scene_camera_round_trip(
        ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64, angle in -3.0..3.0f64,
        t in prop::array::uniform3(-3.0..3.0f64),
        p in prop::array::uniform3(-5.0..5.0f64),
    ) {
        let cam = camera(ax, ay, az, angle, t);
        let p = Vec3::new(p[0], p[1], p[2]);
        let back = cam.to_scene(cam.to_camera(p));
        prop_assert!(back.distance(p) < 1e-9);
    }

    #[test]
    fn lifting_inverts_projection(
        x in 0.0..256.0f64, y in 0.0..256.0f64, z in 0.5..8.0f64,
    ) {
        let cam = camera(0.1, -0.2, 0.3, 0.4, [0.0, 0.0, 3.0]);
        let root = cam.lift_root(x, y, cam.normalized_depth(z)).unwrap();
        prop_assert_eq!(root.provenance, Provenance::Initial);
        let (u, v, d) = cam.project_camera(root.position).unwrap();
        prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9 && (d - z).abs() < 1e-9);
    }

    #[test]
    fn closed_box_distance_matches_closed_form(
        lo in prop::array::uniform3(-1.0..0.0f64),
        size in prop::array::uniform3(0.1..1.5f64),
        p in prop::array::uniform3(-2.5..2.5f64),
    ) {
        let hi = [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]];
        let (v, t) = box_mesh(Vec3::new(lo[0], lo[1], lo[2]), Vec3::new(hi[0], hi[1], hi[2]));
        let scene = SceneModel::new(v, t, Vec::new()).unwrap();
        let q = Vec3::new(p[0], p[1], p[2]);
        let want = box_distance(lo, hi, p);
        prop_assert!((scene.signed_distance(q) - want).abs() < 1e-9);
        prop_assert!((scene.signed_distance_exhaustive(q) - want).abs() < 1e-9);
    }
}

#[test]
fn frustum_keeps_only_visible_points_in_order() {
    let cam = camera(0.0, 0.0, 0.0, 0.0, [0.0, 0.0, 3.0]);
    let pts: Vec<Vec3> = (-20..=20)
        .flat_map(|i| (-3..=3).map(move |k| Vec3::new(i as f64 * 0.1, 0.0, k as f64)))
        .collect();
    let keep = cam.frustum_select(&pts);
    assert!(keep.windows(2).all(|w| w[0] < w[1]));
    for (i, p) in pts.iter().enumerate() {
        let visible = match cam.project(*p) {
            Ok((u, v, _)) => (0.0..256.0).contains(&u) && (0.0..256.0).contains(&v),
            Err(_) => false,
        };
        assert_eq!(keep.contains(&i), visible, "point {i}");
    }
}

#[test]
fn synthetic_frames_are_consistent() {
    let body = BodyModel::toy();
    let cfg = SynthConfig::default();
    for i in 0..4 {
        let f = gen_frame(100 + i as u64, scenario_for(i), &body, &cfg).unwrap();
        assert_eq!(f.body.len(), body.n_vertices());
        assert_eq!(f.labels.categories.len(), f.scene.points.len());
        assert_eq!(f.vertex_contact.len(), body.n_vertices());
        assert!(body.root_joint(&f.body).unwrap().distance(f.root) < 1e-12);
        // the ground-truth body sits in front of the camera
        assert!(f.body.iter().all(|&v| cam_depth(&f.camera, v) > 0.0));
        let again = gen_frame(100 + i as u64, scenario_for(i), &body, &cfg).unwrap();
        assert_eq!(again.body, f.body);
        assert_eq!(again.labels, f.labels);
    }
}

fn cam_depth(cam: &Camera, p: Vec3) -> f64 {
    cam.to_camera(p).z
}
