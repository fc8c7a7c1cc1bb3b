use proptest::prelude::*;

use sahmr_core::body::BodyModel;
use sahmr_core::metrics::{cerr, conf_e_from_sdf, g_mpjpe, mpjpe, mpve, pen_e_from_sdf};
use sahmr_core::Vec3;

fn points(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), n).prop_map(|v| v.into_iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn global_error_of_a_shift_is_its_length(gt in points(17), t in prop::array::uniform3(-1.0..1.0f64)) {
        let t = Vec3::new(t[0], t[1], t[2]);
        let moved: Vec<Vec3> = gt.iter().map(|&p| p + t).collect();
        prop_assert!((g_mpjpe(&moved, &gt).unwrap() - 1000.0 * t.norm()).abs() < 1e-9);
        prop_assert!(mpjpe(&moved, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn root_aligned_errors_ignore_translation(seed in 0u64..1000, t in prop::array::uniform3(-1.0..1.0f64), s in 0.0..0.05f64) {
        let body = BodyModel::toy();
        let t = Vec3::new(t[0], t[1], t[2]);
        let gt = body.template.clone();
        let pred: Vec<Vec3> = gt
            .iter()
            .enumerate()
            .map(|(i, &p)| p + Vec3::new(s * ((i as u64 * 7 + seed) % 5) as f64, 0.0, 0.0))
            .collect();
        let moved: Vec<Vec3> = pred.iter().map(|&p| p + t).collect();
        let contact: Vec<bool> = (0..gt.len()).map(|i| i % 3 == 0).collect();
        prop_assert!((mpve(&body, &moved, &gt).unwrap() - mpve(&body, &pred, &gt).unwrap()).abs() < 1e-9);
        let (a, b) = (cerr(&body, &moved, &gt, &contact).unwrap().unwrap(), cerr(&body, &pred, &gt, &contact).unwrap().unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn penetration_bounds_confidence_energy(sdf in prop::collection::vec(-0.2..0.2f64, 1..40)) {
        let none = vec![false; sdf.len()];
        let all = vec![true; sdf.len()];
        let pen = pen_e_from_sdf(&sdf);
        prop_assert!(pen >= 0.0);
        prop_assert_eq!(conf_e_from_sdf(&sdf, &none).unwrap().to_bits(), pen.to_bits());
        let abs: f64 = sdf.iter().map(|d| d.abs()).sum();
        prop_assert!((conf_e_from_sdf(&sdf, &all).unwrap() - abs).abs() < 1e-12);
        prop_assert!(conf_e_from_sdf(&sdf, &all).unwrap() >= pen - 1e-12);
    }
}

#[test]
fn no_contact_vertices_gives_no_contact_error() {
    let body = BodyModel::toy();
    let v = body.template.clone();
    assert_eq!(cerr(&body, &v, &v, &vec![false; v.len()]).unwrap(), None);
    assert!(cerr(&body, &v, &v, &[true]).is_err());
}
