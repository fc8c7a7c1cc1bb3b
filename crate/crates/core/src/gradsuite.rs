//! Central-difference audit of every differentiable operation, both
//! training losses and the fitting energy. Inputs are drawn away from the
//! kinks of `relu`, `abs` and the L1 terms so that finite differences are
//! meaningful.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, linear_attention, GradCheck, Graph, ParamStore, Tensor, Var};
use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::losses::{loss_hmr, loss_rc, points_tensor, HmrInputs, LossWeights, RcInputs};
use crate::math::Vec3;
use crate::saopt::{energy_graph, kink_margin, project_joints, state_store, FitProblem, FitState, SaOptConfig};
use crate::synth::{gen_frame, Scenario, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case {
    pub name: &'static str,
    pub check: GradCheck,
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    lo: f64,
    hi: f64,
    op: OpFn,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor { rows, cols, data }
}

/// Entries of magnitude in `[lo, hi)` with random signs.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor { rows, cols, data }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

fn custom_pair(g: &mut Graph, x: &[Var]) -> Result<Var> {
    // f(row) = (r0·r1, r2²)
    let t = g.value(x[0]).clone();
    let mut val = Tensor::zeros(t.rows, 2);
    let mut jac = vec![0.0; t.rows * 6];
    for r in 0..t.rows {
        let (a, b, c) = (t.at(r, 0), t.at(r, 1), t.at(r, 2));
        val.data[r * 2] = a * b;
        val.data[r * 2 + 1] = c * c;
        jac[r * 6] = b;
        jac[r * 6 + 1] = a;
        jac[r * 6 + 5] = 2.0 * c;
    }
    g.custom_rowwise(x[0], val, jac)
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[(3, 4), (4, 2)], lo: -1.0, hi: 1.0, op: |g, x| g.matmul(x[0], x[1]) },
    OpCase { name: "matmul_nt", shapes: &[(3, 4), (5, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.matmul_nt(x[0], x[1]) },
    OpCase { name: "matmul_tn", shapes: &[(4, 3), (4, 2)], lo: -1.0, hi: 1.0, op: |g, x| g.matmul_tn(x[0], x[1]) },
    OpCase { name: "add", shapes: &[(2, 3), (2, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.add(x[0], x[1]) },
    OpCase { name: "sub", shapes: &[(2, 3), (2, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.sub(x[0], x[1]) },
    OpCase { name: "mul", shapes: &[(2, 3), (2, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.mul(x[0], x[1]) },
    OpCase { name: "div", shapes: &[(2, 3), (2, 3)], lo: 0.5, hi: 2.0, op: |g, x| g.div(x[0], x[1]) },
    OpCase { name: "add_row", shapes: &[(4, 3), (1, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.add_row(x[0], x[1]) },
    OpCase { name: "mul_row", shapes: &[(4, 3), (1, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.mul_row(x[0], x[1]) },
    OpCase { name: "mul_col", shapes: &[(4, 3), (4, 1)], lo: -1.0, hi: 1.0, op: |g, x| g.mul_col(x[0], x[1]) },
    OpCase { name: "div_col", shapes: &[(4, 3), (4, 1)], lo: 0.5, hi: 2.0, op: |g, x| g.div_col(x[0], x[1]) },
    OpCase { name: "mul_scalar", shapes: &[(4, 3), (1, 1)], lo: -1.0, hi: 1.0, op: |g, x| g.mul_scalar(x[0], x[1]) },
    OpCase { name: "scale", shapes: &[(3, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.scale(x[0], -2.5) },
    OpCase { name: "add_scalar", shapes: &[(3, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.add_scalar(x[0], 0.7) },
    OpCase {
        name: "relu",
        shapes: &[(4, 4)],
        lo: 0.01,
        hi: 1.0,
        op: |g, x| {
            let y = g.scale(x[0], -1.0)?;
            let z = g.relu(x[0])?;
            let w = g.relu(y)?;
            g.add(z, w)
        },
    },
    OpCase { name: "elu1", shapes: &[(4, 4)], lo: -2.0, hi: 2.0, op: |g, x| g.elu1(x[0]) },
    OpCase { name: "softplus", shapes: &[(4, 4)], lo: -3.0, hi: 3.0, op: |g, x| g.softplus(x[0]) },
    OpCase { name: "sigmoid", shapes: &[(4, 4)], lo: -3.0, hi: 3.0, op: |g, x| g.sigmoid(x[0]) },
    OpCase {
        name: "abs",
        shapes: &[(4, 4)],
        lo: 0.01,
        hi: 1.0,
        op: |g, x| {
            let y = g.scale(x[0], -1.0)?;
            g.abs(y)
        },
    },
    OpCase { name: "square", shapes: &[(4, 4)], lo: -2.0, hi: 2.0, op: |g, x| g.square(x[0]) },
    OpCase { name: "sqrt", shapes: &[(4, 4)], lo: 0.2, hi: 2.0, op: |g, x| g.sqrt(x[0]) },
    OpCase { name: "exp", shapes: &[(4, 4)], lo: -2.0, hi: 2.0, op: |g, x| g.exp(x[0]) },
    OpCase { name: "ln", shapes: &[(4, 4)], lo: 0.2, hi: 2.0, op: |g, x| g.ln(x[0]) },
    OpCase { name: "sum", shapes: &[(3, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.sum(x[0]) },
    OpCase { name: "mean", shapes: &[(3, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.mean(x[0]) },
    OpCase { name: "sum_rows", shapes: &[(3, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.sum_rows(x[0]) },
    OpCase { name: "sum_cols", shapes: &[(3, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.sum_cols(x[0]) },
    OpCase { name: "mean_rows", shapes: &[(3, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.mean_rows(x[0]) },
    OpCase { name: "broadcast_rows", shapes: &[(1, 4)], lo: -1.0, hi: 1.0, op: |g, x| g.broadcast_rows(x[0], 5) },
    OpCase { name: "concat_cols", shapes: &[(3, 2), (3, 4), (3, 1)], lo: -1.0, hi: 1.0, op: |g, x| g.concat_cols(x) },
    OpCase { name: "slice_cols", shapes: &[(3, 5)], lo: -1.0, hi: 1.0, op: |g, x| g.slice_cols(x[0], 1, 4) },
    OpCase { name: "gather_rows", shapes: &[(4, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.gather_rows(x[0], &[2, 0, 2, 3]) },
    OpCase {
        name: "layer_norm",
        shapes: &[(4, 6), (1, 6), (1, 6)],
        lo: -1.0,
        hi: 1.0,
        op: |g, x| g.layer_norm(x[0], x[1], x[2]),
    },
    OpCase {
        name: "cross_entropy",
        shapes: &[(5, 4)],
        lo: -2.0,
        hi: 2.0,
        op: |g, x| g.cross_entropy(x[0], &[0, 3, 1, 1, 2], Some(&[1.0, 2.0, 0.5, 1.0, 3.0])),
    },
    OpCase { name: "softmax_col", shapes: &[(6, 1)], lo: -2.0, hi: 2.0, op: |g, x| g.softmax_col(x[0]) },
    OpCase { name: "max_rows", shapes: &[(5, 3)], lo: -1.0, hi: 1.0, op: |g, x| g.max_rows(x[0]) },
    OpCase {
        name: "linear_attention",
        shapes: &[(4, 3), (5, 3), (5, 2)],
        lo: -1.5,
        hi: 1.5,
        op: |g, x| linear_attention(g, x[0], x[1], x[2]),
    },
    OpCase { name: "custom_rowwise", shapes: &[(4, 3)], lo: -1.0, hi: 1.0, op: custom_pair },
];

/// Every graph operation, read out through a fixed random projection so
/// that each output entry contributes.
pub fn op_cases(eps: f64, seed: u64) -> Result<Vec<Case>> {
    OPS.iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            for (i, &(r, k)) in c.shapes.iter().enumerate() {
                store.add(&alloc::format!("x{i}"), random_tensor(&mut rng, r, k, c.lo, c.hi));
            }
            let n = c.shapes.len();
            let out_shape = {
                let mut g = Graph::new();
                let xs = (0..n).map(|i| g.param(&store, i)).collect::<Result<Vec<_>>>()?;
                let out = (c.op)(&mut g, &xs)?;
                g.shape(out)
            };
            let w = random_tensor(&mut rng, out_shape.0, out_shape.1, -1.0, 1.0);
            let check = check_gradients(&mut store, eps, None, |g, s| {
                let xs = (0..n).map(|i| g.param(s, i)).collect::<Result<Vec<_>>>()?;
                let out = (c.op)(g, &xs)?;
                let wv = g.input(w.clone())?;
                let m = g.mul(out, wv)?;
                g.sum(m)
            })?;
            Ok(Case { name: c.name, check })
        })
        .collect()
}

/// The root/contact loss with every prediction a parameter. Each L1
/// residual is at least 0.01 away from zero.
pub fn rc_case(eps: f64, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, n) = (6, 7);
    let heat = random_tensor(&mut rng, s, s, 0.0, 1.0);
    let heat_gt = random_tensor(&mut rng, s, s, 0.0, 1.0);
    let depth = random_tensor(&mut rng, s, s, 0.5, 1.5);
    let depth_gt = add(&depth, &signed_away_from_zero(&mut rng, s, s, 0.01, 0.1));
    let mask = Tensor {
        rows: s,
        cols: s,
        data: (0..s * s).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    };
    let offsets = random_tensor(&mut rng, n, 3, -0.3, 0.3);
    let offsets_gt = add(&offsets, &signed_away_from_zero(&mut rng, n, 3, 0.01, 0.1));
    let root = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let root_gt = add(&root, &signed_away_from_zero(&mut rng, 1, 3, 0.01, 0.1));
    let logits = random_tensor(&mut rng, n, 8, -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let weights: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 } else { 4.0 }).collect();

    let mut store = ParamStore::new();
    let ids = [
        store.add("heatmap", heat),
        store.add("depth", depth),
        store.add("offsets", offsets),
        store.add("root", root),
        store.add("logits", logits),
    ];
    let check = check_gradients(&mut store, eps, None, |g, st| {
        let [h, d, o, r, l] = ids.map(|id| g.param(st, id));
        let (h, d, o, r, l) = (h?, d?, o?, r?, l?);
        let x = RcInputs {
            heatmap: h,
            heatmap_gt: g.input(heat_gt.clone())?,
            depth: d,
            depth_gt: g.input(depth_gt.clone())?,
            depth_mask: &mask,
            offsets: o,
            offsets_gt: g.input(offsets_gt.clone())?,
            root: r,
            root_gt: g.input(root_gt.clone())?,
            logits: l,
            labels: &labels,
            label_weights: Some(&weights),
        };
        Ok(loss_rc(g, &x, LossWeights::default())?.total)
    })?;
    Ok(Case { name: "loss_rc", check })
}

/// Jitter such that every residual of the mesh loss, after root alignment
/// and joint regression, stays at least `margin` from zero.
fn kink_free_jitter(body: &BodyModel, seed: u64, margin: f64) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clear = |v: Vec3| v.to_array().iter().all(|c| c.abs() > margin);
    // magnitudes bounded away from zero keep the raw residuals clear; only
    // the aligned ones and the joints can still land near a kink
    let draw = |rng: &mut ChaCha8Rng| {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        s * rng.random_range(0.01..0.05)
    };
    for _ in 0..1000 {
        let j: Vec<Vec3> = (0..body.n_vertices())
            .map(|_| Vec3::new(draw(&mut rng), draw(&mut rng), draw(&mut rng)))
            .collect();
        let root = body.root_joint(&j)?;
        let aligned: Vec<Vec3> = j.iter().map(|&x| x - root).collect();
        let joints = body.regress_joints(&aligned)?;
        if j.iter().all(|&d| clear(d)) && aligned.iter().all(|&d| clear(d)) && joints[1..].iter().all(|&d| clear(d)) {
            return Ok(j);
        }
    }
    Err(Error::NonFinite("no kink-free jitter found"))
}

/// The mesh loss with vertices and reconstructed contacts as parameters.
pub fn hmr_case(eps: f64, seed: u64) -> Result<Case> {
    let body = BodyModel::toy();
    let n = body.n_vertices();
    let reg = Tensor::from_vec(body.n_joints(), n, body.regressor.to_dense(n))?;
    let offset = Vec3::new(0.5, 0.0, 2.0);
    let gt_global: Vec<Vec3> = body.template.iter().map(|&v| v + offset).collect();
    let gt = points_tensor(&gt_global);
    let r = Vec3::new(0.5, 0.9, 2.0);
    let root = Tensor::row_vector(r.to_array().to_vec());
    let jitter = kink_free_jitter(&body, seed, 10.0 * eps)?;
    let pred: Vec<Vec3> = gt_global.iter().zip(&jitter).map(|(&v, &j)| v - r + j).collect();
    let contacts = points_tensor(&[Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.2, 0.0, 0.1)]);
    let rec = add(&contacts, &points_tensor(&jitter[..2]));
    let mut store = ParamStore::new();
    let pv = store.add("vertices", points_tensor(&pred));
    let pc = store.add("contacts", rec);
    let check = check_gradients(&mut store, eps, Some(60), |g, s| {
        let v = g.param(s, pv)?;
        let c = g.param(s, pc)?;
        let x = HmrInputs {
            vertices: v,
            vertices_gt: &gt,
            regressor: &reg,
            root: &root,
            contacts: Some((c, &contacts)),
        };
        Ok(loss_hmr(g, &x)?.total)
    })?;
    Ok(Case { name: "loss_hmr", check })
}

/// The fitting energy with all three variable groups free, at a state
/// where every term is active and the nearest kink is at least
/// `3·eps` of vertex motion away.
pub fn saopt_case(eps: f64, seed: u64) -> Result<Case> {
    let body = BodyModel::toy();
    let frame = gen_frame(seed, Scenario::SitBox, &body, &SynthConfig::default())?;
    let shape: Vec<Vec3> = frame.body.iter().map(|&v| v - frame.root).collect();
    let (contacts, categories) = frame.labels.contact_points(&frame.scene.points);
    let joints = project_joints(&body, &frame.camera, &frame.body)?;
    let problem = FitProblem::new(&body, &shape, &frame.camera, &frame.scene, &contacts, &categories, &joints)?;
    let mut cfg = SaOptConfig::default();
    cfg.variables.orientation = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        // sunk and tilted, so the penetration and contact terms are active
        let state = FitState {
            translation: frame.root
                + Vec3::new(
                    rng.random_range(-0.04..0.04),
                    rng.random_range(-0.04..0.04),
                    rng.random_range(-0.08..-0.03),
                ),
            log_scale: rng.random_range(-0.05..0.05),
            orientation: Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ),
        };
        if kink_margin(&problem, &state) < 3.0 * eps {
            continue;
        }
        let (mut store, ids) = state_store(&state);
        let check = check_gradients(&mut store, eps, None, |g, st| Ok(energy_graph(g, st, ids, &problem, &cfg)?.total))?;
        return Ok(Case { name: "saopt_energy", check });
    }
    Err(Error::NonFinite("no kink-free fitting state found"))
}

/// The whole suite.
pub fn run(eps: f64, seed: u64) -> Result<Vec<Case>> {
    let mut cases = op_cases(eps, seed)?;
    cases.push(rc_case(eps, seed)?);
    cases.push(hmr_case(eps, seed)?);
    cases.push(saopt_case(eps, seed)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_losses_pass_at_default_step() {
        for case in [rc_case(1e-4, 3).unwrap(), hmr_case(1e-4, 3).unwrap()] {
            assert!(case.check.max_rel_error < 1e-4, "{case:?}");
        }
    }

    #[test]
    fn every_op_is_covered_once() {
        let mut names: Vec<_> = OPS.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), OPS.len());
    }
}
