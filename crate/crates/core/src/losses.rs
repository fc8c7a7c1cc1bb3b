//! Training losses for the root/contact stage and the mesh stage.
//!
//! Every L1 term is a mean over elements (coordinates × points).

use alloc::vec::Vec;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_rz: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_rz: 10.0 }
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "l1")?;
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Mean squared difference.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "mse")?;
    let d = g.sub(pred, target)?;
    let s = g.square(d)?;
    g.mean(s)
}

/// Mean absolute difference over entries where `mask` is 1. Zero when the
/// mask is empty.
pub fn masked_l1(g: &mut Graph, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
    same_shape(g, pred, target, "masked_l1")?;
    if mask.shape() != g.shape(pred) {
        return Err(Error::ShapeMismatch("masked_l1 mask".into()));
    }
    let n: f64 = mask.data.iter().sum();
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    let m = g.input(mask.clone())?;
    let am = g.mul(a, m)?;
    let s = g.sum(am)?;
    g.scale(s, if n > 0.0 { 1.0 / n } else { 0.0 })
}

/// Inputs of the root/contact loss. Tensors marked `gt` are constants.
pub struct RcInputs<'a> {
    pub heatmap: Var,
    pub heatmap_gt: Var,
    pub depth: Var,
    pub depth_gt: Var,
    /// 1 inside the ground-truth disc, 0 elsewhere.
    pub depth_mask: &'a Tensor,
    /// n×3 predicted offsets o*.
    pub offsets: Var,
    pub offsets_gt: Var,
    /// 1×3
    pub root: Var,
    pub root_gt: Var,
    /// n×8 category logits.
    pub logits: Var,
    pub labels: &'a [usize],
    /// Optional per-voxel class weights for the cross-entropy.
    pub label_weights: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcLoss {
    pub total: Var,
    pub r2d: f64,
    pub rz: f64,
    pub rov: f64,
    pub r3d: f64,
    pub c: f64,
}

/// `L_R2D + w_RZ·L_RZ + L_ROV + L_R3D + L_C`.
pub fn loss_rc(g: &mut Graph, x: &RcInputs, w: LossWeights) -> Result<RcLoss> {
    let r2d = mse(g, x.heatmap, x.heatmap_gt)?;
    let rz = masked_l1(g, x.depth, x.depth_gt, x.depth_mask)?;
    let rov = l1(g, x.offsets, x.offsets_gt)?;
    let r3d = l1(g, x.root, x.root_gt)?;
    let c = g.cross_entropy(x.logits, x.labels, x.label_weights)?;
    let rz_w = g.scale(rz, w.w_rz)?;
    let mut total = g.add(r2d, rz_w)?;
    for t in [rov, r3d, c] {
        total = g.add(total, t)?;
    }
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(RcLoss {
        total,
        r2d: g.value(r2d).item(),
        rz: g.value(rz).item(),
        rov: g.value(rov).item(),
        r3d: g.value(r3d).item(),
        c: g.value(c).item(),
    })
}

/// Inputs of the mesh loss.
pub struct HmrInputs<'a> {
    /// n×3 predicted vertices relative to the predicted root.
    pub vertices: Var,
    /// n×3 ground-truth vertices in the scene frame.
    pub vertices_gt: &'a Tensor,
    /// Dense J×n regressor.
    pub regressor: &'a Tensor,
    /// 1×3 predicted root r*, scene frame (constant).
    pub root: &'a Tensor,
    /// k×3 reconstructed contact points and their k×3 inputs; `None` when
    /// there were no contacts.
    pub contacts: Option<(Var, &'a Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmrLoss {
    pub total: Var,
    pub v: f64,
    pub j: f64,
    pub cp: f64,
    pub gv: f64,
}

/// Subtract each mesh's own root joint (row 0 of the regressor).
pub fn align_to_root(g: &mut Graph, verts: Var, regressor: &Tensor) -> Result<Var> {
    let n = g.shape(verts).0;
    if regressor.cols != n {
        return Err(Error::ShapeMismatch(alloc::format!(
            "regressor has {} columns for {n} vertices",
            regressor.cols
        )));
    }
    let m0 = g.input(Tensor::from_vec(1, n, regressor.row(0).to_vec())?)?;
    let root = g.matmul(m0, verts)?;
    let rb = g.broadcast_rows(root, n)?;
    g.sub(verts, rb)
}

/// `L_V + L_J + L_CP + L_GV`.
pub fn loss_hmr(g: &mut Graph, x: &HmrInputs) -> Result<HmrLoss> {
    let (n, c) = g.shape(x.vertices);
    if x.vertices_gt.shape() != (n, c) || c != 3 || x.root.shape() != (1, 3) {
        return Err(Error::ShapeMismatch("loss_hmr vertex shapes".into()));
    }
    let gt = g.input(x.vertices_gt.clone())?;
    let m = g.input(x.regressor.clone())?;
    let pred_a = align_to_root(g, x.vertices, x.regressor)?;
    let gt_a = align_to_root(g, gt, x.regressor)?;
    let lv = l1(g, pred_a, gt_a)?;
    let pj = g.matmul(m, pred_a)?;
    let gj = g.matmul(m, gt_a)?;
    let lj = l1(g, pj, gj)?;
    let r = g.input(x.root.clone())?;
    let global = g.add_row(x.vertices, r)?;
    let lgv = l1(g, global, gt)?;
    let mut total = g.add(lv, lj)?;
    total = g.add(total, lgv)?;
    let mut cp = 0.0;
    if let Some((recon, inputs)) = x.contacts {
        let t = g.input(inputs.clone())?;
        let lcp = l1(g, recon, t)?;
        cp = g.value(lcp).item();
        total = g.add(total, lcp)?;
    }
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(HmrLoss {
        total,
        v: g.value(lv).item(),
        j: g.value(lj).item(),
        cp,
        gv: g.value(lgv).item(),
    })
}

/// n×3 tensor from points.
pub fn points_tensor(points: &[crate::math::Vec3]) -> Tensor {
    let data: Vec<f64> = points.iter().flat_map(|p| p.to_array()).collect();
    Tensor {
        rows: points.len(),
        cols: 3,
        data,
    }
}
