//! Evaluation metrics. Distances are reported in millimetres except the
//! penetration and contact-failure sums, which stay in metres.

use alloc::vec::Vec;

use crate::body::{BodyModel, ContactLabels, N_CATEGORIES, NONE};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::SceneModel;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(alloc::format!("{a} vs {b} points")));
    }
    Ok(())
}

/// Mean Euclidean distance in millimetres.
pub fn mean_distance_mm(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).sum();
    Ok(1000.0 * s / pred.len() as f64)
}

fn centered(points: &[Vec3], origin: Vec3) -> Vec<Vec3> {
    points.iter().map(|&p| p - origin).collect()
}

/// Global joint error (scene frame).
pub fn g_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance_mm(pred, gt)
}

/// Global vertex error (scene frame).
pub fn g_mpve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    mean_distance_mm(pred, gt)
}

/// Joint error after subtracting each set's joint 0.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    mean_distance_mm(&centered(pred, pred[0]), &centered(gt, gt[0]))
}

/// Vertex error after subtracting each mesh's regressed root joint.
pub fn mpve(body: &BodyModel, pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (rp, rg) = (body.root_joint(pred)?, body.root_joint(gt)?);
    mean_distance_mm(&centered(pred, rp), &centered(gt, rg))
}

/// Root-aligned error over ground-truth contact vertices; `None` when no
/// vertex is in contact.
pub fn cerr(body: &BodyModel, pred: &[Vec3], gt: &[Vec3], contact: &[bool]) -> Result<Option<f64>> {
    check_len(contact.len(), gt.len())?;
    let (rp, rg) = (body.root_joint(pred)?, body.root_joint(gt)?);
    let (mut s, mut n) = (0.0, 0usize);
    for ((p, g), &c) in pred.iter().zip(gt).zip(contact) {
        if c {
            s += (*p - rp).distance(*g - rg);
            n += 1;
        }
    }
    Ok((n > 0).then(|| 1000.0 * s / n as f64))
}

/// Summed penetration depth of vertices inside the scene.
pub fn pen_e_from_sdf(sdf: &[f64]) -> f64 {
    // float `sum` starts from -0.0, which would leak into reports
    sdf.iter().filter(|&&d| d < 0.0).fold(0.0, |s, d| s - d)
}

pub fn pen_e(vertices: &[Vec3], scene: &SceneModel) -> f64 {
    let sdf: Vec<f64> = vertices.iter().map(|&v| scene.signed_distance(v)).collect();
    pen_e_from_sdf(&sdf)
}

/// Hover distance of contact vertices plus penetration of the rest.
pub fn conf_e_from_sdf(sdf: &[f64], contact: &[bool]) -> Result<f64> {
    check_len(sdf.len(), contact.len())?;
    Ok(sdf
        .iter()
        .zip(contact)
        .map(|(&d, &c)| {
            if c {
                d.abs()
            } else if d < 0.0 {
                -d
            } else {
                0.0
            }
        })
        .sum())
}

pub fn conf_e(vertices: &[Vec3], scene: &SceneModel, contact: &[bool]) -> Result<f64> {
    let sdf: Vec<f64> = vertices.iter().map(|&v| scene.signed_distance(v)).collect();
    conf_e_from_sdf(&sdf, contact)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactPr {
    pub precision: f64,
    pub recall: f64,
    /// False when nothing was predicted as contact (precision reported 0).
    pub precision_defined: bool,
    /// False when the ground truth has no contact (recall reported 0).
    pub recall_defined: bool,
    /// `confusion[gt][pred]` counts.
    pub confusion: [[u64; N_CATEGORIES]; N_CATEGORIES],
}

/// Binary contact-vs-none precision and recall plus the per-category
/// confusion matrix.
pub fn contact_pr(pred: &ContactLabels, gt: &ContactLabels) -> Result<ContactPr> {
    check_len(pred.len(), gt.len())?;
    let mut confusion = [[0u64; N_CATEGORIES]; N_CATEGORIES];
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.categories.iter().zip(&gt.categories) {
        confusion[g as usize][p as usize] += 1;
        match (p != NONE, g != NONE) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fne > 0;
    Ok(ContactPr {
        precision: if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 },
        recall: if recall_defined { tp as f64 / (tp + fne) as f64 } else { 0.0 },
        precision_defined,
        recall_defined,
        confusion,
    })
}

/// All metrics for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMetrics {
    pub frame: usize,
    pub g_mpjpe: f64,
    pub g_mpve: f64,
    pub mpjpe: f64,
    pub mpve: f64,
    /// 0 when the frame has no contact vertex (see `has_contact`).
    pub cerr: f64,
    pub has_contact: bool,
    pub pen_e: f64,
    pub conf_e: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_defined: bool,
    /// Root error in millimetres.
    pub root_error: f64,
}

/// Inputs needed to score one frame.
pub struct FrameEval<'a> {
    pub body: &'a BodyModel,
    pub scene: &'a SceneModel,
    pub pred: &'a [Vec3],
    pub gt: &'a [Vec3],
    pub gt_contact: &'a [bool],
    pub pred_labels: Option<&'a ContactLabels>,
    pub gt_labels: Option<&'a ContactLabels>,
}

pub fn evaluate_frame(frame: usize, x: &FrameEval) -> Result<FrameMetrics> {
    let jp = x.body.regress_joints(x.pred)?;
    let jg = x.body.regress_joints(x.gt)?;
    let sdf: Vec<f64> = x.pred.iter().map(|&v| x.scene.signed_distance(v)).collect();
    let ce = cerr(x.body, x.pred, x.gt, x.gt_contact)?;
    let (precision, recall, precision_defined) = match (x.pred_labels, x.gt_labels) {
        (Some(p), Some(g)) => {
            let pr = contact_pr(p, g)?;
            (pr.precision, pr.recall, pr.precision_defined)
        }
        _ => (0.0, 0.0, false),
    };
    Ok(FrameMetrics {
        frame,
        g_mpjpe: g_mpjpe(&jp, &jg)?,
        g_mpve: g_mpve(x.pred, x.gt)?,
        mpjpe: mpjpe(&jp, &jg)?,
        mpve: mpve(x.body, x.pred, x.gt)?,
        cerr: ce.unwrap_or(0.0),
        has_contact: ce.is_some(),
        pen_e: pen_e_from_sdf(&sdf),
        conf_e: conf_e_from_sdf(&sdf, x.gt_contact)?,
        precision,
        recall,
        precision_defined,
        root_error: 1000.0 * jp[0].distance(jg[0]),
    })
}

/// Per-frame metrics and their means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub method: alloc::string::String,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: FrameMetrics,
}

impl MetricReport {
    pub fn new(method: &str, frames: Vec<FrameMetrics>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyFrameSet);
        }
        let n = frames.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        let with_contact: Vec<&FrameMetrics> = frames.iter().filter(|f| f.has_contact).collect();
        let cerr = if with_contact.is_empty() {
            0.0
        } else {
            with_contact.iter().map(|f| f.cerr).sum::<f64>() / with_contact.len() as f64
        };
        let aggregate = FrameMetrics {
            frame: frames.len(),
            g_mpjpe: mean(|f| f.g_mpjpe),
            g_mpve: mean(|f| f.g_mpve),
            mpjpe: mean(|f| f.mpjpe),
            mpve: mean(|f| f.mpve),
            cerr,
            has_contact: !with_contact.is_empty(),
            pen_e: mean(|f| f.pen_e),
            conf_e: mean(|f| f.conf_e),
            precision: mean(|f| f.precision),
            recall: mean(|f| f.recall),
            precision_defined: frames.iter().all(|f| f.precision_defined),
            root_error: mean(|f| f.root_error),
        };
        Ok(MetricReport {
            method: method.into(),
            frames,
            aggregate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn plane() -> SceneModel {
        let v = vec![
            Vec3::new(-5.0, -5.0, 0.0),
            Vec3::new(5.0, -5.0, 0.0),
            Vec3::new(5.0, 5.0, 0.0),
            Vec3::new(-5.0, 5.0, 0.0),
        ];
        SceneModel::new(v, vec![[0, 1, 2], [0, 2, 3]], vec![]).unwrap()
    }

    #[test]
    fn identical_meshes_score_zero() {
        let body = BodyModel::toy();
        let v = body.template.clone();
        let j = body.regress_joints(&v).unwrap();
        assert_eq!(g_mpjpe(&j, &j).unwrap(), 0.0);
        assert_eq!(mpjpe(&j, &j).unwrap(), 0.0);
        assert_eq!(mpve(&body, &v, &v).unwrap(), 0.0);
        assert_eq!(g_mpve(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn pure_translation() {
        let gt: Vec<Vec3> = (0..14).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 1.0)).collect();
        let pred: Vec<Vec3> = gt.iter().map(|&p| p + Vec3::new(0.0, 0.1, 0.0)).collect();
        assert!((g_mpjpe(&pred, &gt).unwrap() - 100.0).abs() < 1e-9);
        assert!(mpjpe(&pred, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn single_joint_displaced() {
        let gt: Vec<Vec3> = (0..14).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 1.0)).collect();
        let mut pred = gt.clone();
        pred[5].z += 0.030;
        assert!((mpjpe(&pred, &gt).unwrap() - 30.0 / 14.0).abs() < 1e-9);
    }

    #[test]
    fn pen_e_cases() {
        let s = plane();
        let outside = [Vec3::new(0.0, 0.0, 0.1), Vec3::new(1.0, 0.0, 0.2)];
        assert_eq!(pen_e(&outside, &s), 0.0);
        let one = [Vec3::new(0.0, 0.0, -0.2), Vec3::new(1.0, 0.0, 0.2)];
        assert!((pen_e(&one, &s) - 0.2).abs() < 1e-15);
        let two = [Vec3::new(0.0, 0.0, -0.1), Vec3::new(1.0, 0.0, -0.05)];
        assert!((pen_e(&two, &s) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn conf_e_cases() {
        assert_eq!(conf_e_from_sdf(&[0.0, 0.3], &[true, false]).unwrap(), 0.0);
        assert!((conf_e_from_sdf(&[0.05], &[true]).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(conf_e_from_sdf(&[0.05], &[false]).unwrap(), 0.0);
        assert!((conf_e_from_sdf(&[-0.05], &[false]).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn contact_pr_cases() {
        let gt = ContactLabels {
            categories: vec![0, 2, 2, 0],
        };
        let pr = contact_pr(&gt, &gt).unwrap();
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
        let none = ContactLabels::none(4);
        let pr = contact_pr(&none, &gt).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.precision_defined), (0.0, 0.0, false));
        let half = ContactLabels {
            categories: vec![3, 2, 2, 1],
        };
        let pr = contact_pr(&half, &gt).unwrap();
        assert_eq!((pr.precision, pr.recall), (0.5, 1.0));
        assert_eq!(pr.confusion[0][3], 1);
    }

    #[test]
    fn empty_report_rejected() {
        assert_eq!(MetricReport::new("x", vec![]).unwrap_err(), Error::EmptyFrameSet);
    }

    proptest! {
        #[test]
        fn conf_e_equals_pen_e_without_contacts(sdf in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let flags = vec![false; sdf.len()];
            prop_assert_eq!(conf_e_from_sdf(&sdf, &flags).unwrap(), pen_e_from_sdf(&sdf));
        }

        #[test]
        fn conf_e_bounds_pen_e_of_non_contact(
            sdf in proptest::collection::vec(-1.0f64..1.0, 1..50),
            seed in 0u64..1000,
        ) {
            let flags: Vec<bool> = (0..sdf.len()).map(|i| (seed >> (i % 10)) & 1 == 1).collect();
            let non_contact: Vec<f64> = sdf.iter().zip(&flags).filter(|(_, &c)| !c).map(|(&d, _)| d).collect();
            prop_assert!(conf_e_from_sdf(&sdf, &flags).unwrap() >= pen_e_from_sdf(&non_contact));
        }

        #[test]
        fn mpjpe_translation_invariant(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 14),
            t in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        ) {
            let gt: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let pred: Vec<Vec3> = gt.iter().map(|&p| p + Vec3::new(0.01, -0.02, 0.03)).collect();
            let t = Vec3::new(t.0, t.1, t.2);
            let moved_p: Vec<Vec3> = pred.iter().map(|&p| p + t).collect();
            let moved_g: Vec<Vec3> = gt.iter().map(|&p| p + t).collect();
            let a = mpjpe(&pred, &gt).unwrap();
            let b = mpjpe(&moved_p, &moved_g).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn g_mpjpe_adds_translation_norm(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 14),
            len in 0.0f64..2.0,
        ) {
            let gt: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let pred: Vec<Vec3> = gt.iter().map(|&p| p + Vec3::new(len, 0.0, 0.0)).collect();
            prop_assert!((g_mpjpe(&pred, &gt).unwrap() - 1000.0 * len).abs() < 1e-9);
        }
    }
}
