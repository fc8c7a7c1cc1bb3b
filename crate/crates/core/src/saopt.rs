//! Scene-aware optimisation baseline: fit global translation, scale and
//! optionally orientation of a fixed body shape by minimising
//! reprojection, penetration, contact and ordinal-depth energies.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::body::{BodyModel, NONE};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::losses::points_tensor;
use crate::math::{cos, exp, sigmoid, sin, sqrt, Mat3, Vec3};
use crate::scene::SceneModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaOptWeights {
    pub reproj: f64,
    pub pen: f64,
    pub contact: f64,
    pub ordinal: f64,
}

impl Default for SaOptWeights {
    fn default() -> Self {
        SaOptWeights {
            reproj: 1.0,
            pen: 10.0,
            contact: 10.0,
            ordinal: 1.0,
        }
    }
}

/// Which state variables move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variables {
    pub translation: bool,
    pub scale: bool,
    pub orientation: bool,
}

impl Default for Variables {
    fn default() -> Self {
        Variables {
            translation: true,
            scale: true,
            orientation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaOptConfig {
    pub weights: SaOptWeights,
    pub max_iterations: usize,
    pub energy_tol: f64,
    /// Meters in state space.
    pub step_tol: f64,
    /// Sharpness of the smoothed penetration indicator.
    pub beta: f64,
    pub max_halvings: usize,
    /// Length of the first trial step.
    pub initial_step: f64,
    pub variables: Variables,
}

impl Default for SaOptConfig {
    fn default() -> Self {
        SaOptConfig {
            weights: SaOptWeights::default(),
            max_iterations: 200,
            energy_tol: 1e-8,
            step_tol: 1e-6,
            beta: 100.0,
            max_halvings: 40,
            initial_step: 0.05,
            variables: Variables::default(),
        }
    }
}

impl SaOptConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        let ws = [w.reproj, w.pen, w.contact, w.ordinal];
        if ws.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig("energy weights must be finite and nonnegative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max iterations must be at least 1".into()));
        }
        if !(self.beta > 0.0) || !(self.initial_step > 0.0) {
            return Err(Error::InvalidConfig("beta and initial step must be positive".into()));
        }
        let v = self.variables;
        if !(v.translation || v.scale || v.orientation) {
            return Err(Error::InvalidConfig("no free variables".into()));
        }
        Ok(())
    }
}

/// Body placement: `translation + exp(log_scale) · R(orientation) · v` for
/// root-centred shape vertices `v`. Orientation is z-y-x Euler angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitState {
    pub translation: Vec3,
    pub log_scale: f64,
    pub orientation: Vec3,
}

impl FitState {
    pub fn at(translation: Vec3) -> Self {
        FitState {
            translation,
            log_scale: 0.0,
            orientation: Vec3::ZERO,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        euler_zyx(self.orientation).0
    }

    pub fn vertices(&self, shape: &[Vec3]) -> Vec<Vec3> {
        let r = self.rotation();
        let s = exp(self.log_scale);
        shape.iter().map(|&v| self.translation + (r * v) * s).collect()
    }
}

/// `Rz(a)·Ry(b)·Rx(c)` and its partial derivatives.
fn euler_zyx(e: Vec3) -> (Mat3, [Mat3; 3]) {
    let (rz, ry, rx) = (Mat3::rot_z(e.x), Mat3::rot_y(e.y), Mat3::rot_x(e.z));
    let dz = Mat3::from_row_major([-sin(e.x), -cos(e.x), 0., cos(e.x), -sin(e.x), 0., 0., 0., 0.]);
    let dy = Mat3::from_row_major([-sin(e.y), 0., cos(e.y), 0., 0., 0., -cos(e.y), 0., -sin(e.y)]);
    let dx = Mat3::from_row_major([0., 0., 0., 0., -sin(e.z), -cos(e.z), 0., cos(e.z), -sin(e.z)]);
    (rz * ry * rx, [dz * ry * rx, rz * dy * rx, rz * ry * dx])
}

/// Everything the energy needs besides the state.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    /// Root-centred, scene orientation.
    pub shape: &'a [Vec3],
    pub camera: &'a Camera,
    pub scene: &'a SceneModel,
    /// Scene contact points and their categories; `none` entries are ignored.
    pub contacts: &'a [Vec3],
    pub categories: &'a [u8],
    /// Target joint positions in crop pixels.
    pub joints_2d: &'a [(f64, f64)],
    regressor: Tensor,
    members: Vec<Vec<usize>>,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        body: &BodyModel,
        shape: &'a [Vec3],
        camera: &'a Camera,
        scene: &'a SceneModel,
        contacts: &'a [Vec3],
        categories: &'a [u8],
        joints_2d: &'a [(f64, f64)],
    ) -> Result<Self> {
        let n = body.n_vertices();
        if shape.len() != n {
            return Err(Error::DimensionMismatch(alloc::format!("shape has {} vertices, body {n}", shape.len())));
        }
        if contacts.len() != categories.len() {
            return Err(Error::DimensionMismatch("one category per contact point".into()));
        }
        if joints_2d.len() != body.n_joints() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} 2D joints for {} joints",
                joints_2d.len(),
                body.n_joints()
            )));
        }
        Ok(FitProblem {
            shape,
            camera,
            scene,
            contacts,
            categories,
            joints_2d,
            regressor: Tensor::from_vec(body.n_joints(), n, body.regressor.to_dense(n))?,
            members: body.region_members(),
        })
    }
}

impl FitProblem<'_> {
    fn regressor_root(&self, verts: &[Vec3]) -> Result<Vec3> {
        let row = self.regressor.row(0);
        if row.len() != verts.len() {
            return Err(Error::DimensionMismatch("regressor width".into()));
        }
        Ok(row.iter().zip(verts).fold(Vec3::ZERO, |a, (&w, &v)| a + v * w))
    }
}

/// Projected joints of `vertices`, crop pixels.
pub fn project_joints(body: &BodyModel, camera: &Camera, vertices: &[Vec3]) -> Result<Vec<(f64, f64)>> {
    body.regress_joints(vertices)?
        .into_iter()
        .map(|j| camera.project(j).map(|(u, v, _)| (u, v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub reproj: f64,
    pub pen: f64,
    pub contact: f64,
    pub ordinal: f64,
}

/// Parameter ids of the state inside a store built by [`state_store`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateParams {
    pub translation: ParamId,
    pub log_scale: ParamId,
    pub orientation: ParamId,
}

pub fn state_store(s: &FitState) -> (ParamStore, StateParams) {
    let mut store = ParamStore::new();
    let ids = StateParams {
        translation: store.add("translation", Tensor::row_vector(s.translation.to_array().to_vec())),
        log_scale: store.add("log_scale", Tensor::scalar(s.log_scale)),
        orientation: store.add("orientation", Tensor::row_vector(s.orientation.to_array().to_vec())),
    };
    (store, ids)
}

/// State held in a store built by [`state_store`].
pub fn state_from_store(store: &ParamStore, ids: StateParams) -> FitState {
    let v = |id| Vec3::from_array(store.value(id).data[..3].try_into().unwrap());
    FitState {
        translation: v(ids.translation),
        log_scale: store.value(ids.log_scale).item(),
        orientation: v(ids.orientation),
    }
}

/// Terms as graph nodes.
pub struct EnergyVars {
    pub total: Var,
    pub reproj: Var,
    pub pen: Var,
    pub contact: Var,
    pub ordinal: Var,
}

/// Record the weighted energy on `g`.
pub fn energy_graph(
    g: &mut Graph,
    store: &ParamStore,
    ids: StateParams,
    problem: &FitProblem,
    cfg: &SaOptConfig,
) -> Result<EnergyVars> {
    let shape = g.input(points_tensor(problem.shape))?;
    let rotated = if cfg.variables.orientation {
        let o = g.param(store, ids.orientation)?;
        let e = Vec3::from_array(store.value(ids.orientation).data[..3].try_into().unwrap());
        let (r, d) = euler_zyx(e);
        let mut jac = vec![0.0; 27];
        for (k, dk) in d.iter().enumerate() {
            for (i, x) in dk.to_row_major().iter().enumerate() {
                jac[i * 3 + k] = *x;
            }
        }
        let rflat = g.custom_rowwise(o, Tensor::row_vector(r.to_row_major().to_vec()), jac)?;
        let mut cols = [shape; 3];
        for (j, col) in cols.iter_mut().enumerate() {
            let row = g.slice_cols(rflat, 3 * j, 3 * j + 3)?;
            *col = g.matmul_nt(shape, row)?;
        }
        g.concat_cols(&cols)?
    } else {
        shape
    };
    let s = g.param(store, ids.log_scale)?;
    let es = g.exp(s)?;
    let scaled = g.mul_scalar(rotated, es)?;
    let t = g.param(store, ids.translation)?;
    let posed = g.add_row(scaled, t)?;
    let posed_value: Vec<Vec3> = {
        let p = g.value(posed);
        (0..p.rows).map(|i| Vec3::new(p.at(i, 0), p.at(i, 1), p.at(i, 2))).collect()
    };

    let reproj = reprojection(g, posed, problem)?;
    let pen = penetration(g, posed, &posed_value, problem.scene, cfg.beta)?;
    let contact = contact_term(g, posed, &posed_value, problem)?;
    let ordinal = ordinal_term(g, posed, problem)?;

    let w = cfg.weights;
    let mut total = g.scale(reproj, w.reproj)?;
    for (v, k) in [(pen, w.pen), (contact, w.contact), (ordinal, w.ordinal)] {
        let x = g.scale(v, k)?;
        total = g.add(total, x)?;
    }
    Ok(EnergyVars {
        total,
        reproj,
        pen,
        contact,
        ordinal,
    })
}

/// Mean squared pixel distance of projected joints to their targets.
fn reprojection(g: &mut Graph, posed: Var, p: &FitProblem) -> Result<Var> {
    let m = g.input(p.regressor.clone())?;
    let joints = g.matmul(m, posed)?;
    let rc = g.input(Tensor {
        rows: 3,
        cols: 3,
        data: p.camera.rotation.to_row_major().to_vec(),
    })?;
    let cam = g.matmul_nt(joints, rc)?;
    let tc = g.input(Tensor::row_vector(p.camera.translation.to_array().to_vec()))?;
    let cam = g.add_row(cam, tc)?;
    let z = g.slice_cols(cam, 2, 3)?;
    if g.value(z).data.iter().any(|&z| z <= crate::geometry::MIN_DEPTH) {
        return Err(Error::PointBehindCamera {
            depth: g.value(z).data.iter().cloned().fold(f64::INFINITY, f64::min),
        });
    }
    let mut sq = Vec::with_capacity(2);
    for (axis, c) in [(0, p.camera.cx), (1, p.camera.cy)] {
        let x = g.slice_cols(cam, axis, axis + 1)?;
        let u = g.div(x, z)?;
        let u = g.scale(u, p.camera.f)?;
        let target: Vec<f64> = p.joints_2d.iter().map(|j| if axis == 0 { j.0 } else { j.1 } - c).collect();
        let target = g.input(Tensor {
            rows: target.len(),
            cols: 1,
            data: target,
        })?;
        let d = g.sub(u, target)?;
        let d = g.square(d)?;
        sq.push(g.sum(d)?);
    }
    let s = g.add(sq[0], sq[1])?;
    g.scale(s, 1.0 / p.joints_2d.len() as f64)
}

/// `Σ σ(−β·sdf)·max(−sdf, 0)`: the penetration sum with its indicator
/// replaced by a sigmoid; vertices outside the scene contribute nothing.
fn penetration(g: &mut Graph, posed: Var, verts: &[Vec3], scene: &SceneModel, beta: f64) -> Result<Var> {
    let mut value = Tensor::zeros(verts.len(), 1);
    let mut jac = vec![0.0; verts.len() * 3];
    for (i, &v) in verts.iter().enumerate() {
        let (d, grad) = scene.signed_distance_with_gradient(v);
        if d < 0.0 {
            let s = sigmoid(-beta * d);
            value.data[i] = -d * s;
            let dphi = -s + beta * d * s * (1.0 - s);
            jac[i * 3..i * 3 + 3].copy_from_slice(&(grad * dphi).to_array());
        }
    }
    let per = g.custom_rowwise(posed, value, jac)?;
    g.sum(per)
}

/// Mean smoothed distance from each scene contact point to the nearest body
/// vertex of its region.
fn contact_term(g: &mut Graph, posed: Var, verts: &[Vec3], p: &FitProblem) -> Result<Var> {
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (&q, &c) in p.contacts.iter().zip(p.categories) {
        if c == NONE {
            continue;
        }
        let members = &p.members[c as usize - 1];
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| verts[a].distance_squared(q).total_cmp(&verts[b].distance_squared(q)))
            .ok_or(Error::EmptyRegion(c as usize - 1))?;
        idx.push(best);
        targets.push(q);
    }
    if idx.is_empty() {
        return g.input(Tensor::scalar(0.0));
    }
    let near = g.gather_rows(posed, &idx)?;
    let q = g.input(points_tensor(&targets))?;
    let d = g.sub(near, q)?;
    let d = g.square(d)?;
    let d = g.sum_cols(d)?;
    let d = g.add_scalar(d, 1e-9)?;
    let d = g.sqrt(d)?;
    g.mean(d)
}

/// Hinge on the root lying behind the first scene surface along its
/// viewing ray: `max(0, z_root − z_hit)` in camera depth.
fn ordinal_term(g: &mut Graph, posed: Var, p: &FitProblem) -> Result<Var> {
    let m0 = g.input(Tensor::from_vec(1, p.regressor.cols, p.regressor.row(0).to_vec())?)?;
    let root = g.matmul(m0, posed)?;
    let r = {
        let t = g.value(root);
        Vec3::new(t.at(0, 0), t.at(0, 1), t.at(0, 2))
    };
    let (value, jac) = ordinal_hinge(p.camera, p.scene, r);
    let h = g.custom_rowwise(root, Tensor::scalar(value), jac.to_array().to_vec())?;
    g.sum(h)
}

/// Value and gradient of the ordinal hinge at root `r`. The hit surface is
/// linearised as the plane of the hit triangle.
pub fn ordinal_hinge(camera: &Camera, scene: &SceneModel, r: Vec3) -> (f64, Vec3) {
    let o = camera.center();
    let d = r - o;
    let Some((lambda, tri)) = scene.raycast_hit(o, d) else {
        return (0.0, Vec3::ZERO);
    };
    if lambda >= 1.0 {
        return (0.0, Vec3::ZERO);
    }
    let n = scene.face_normal(tri);
    let nd = n.dot(d);
    let r2 = camera.rotation.row(2);
    let z = r2.dot(r) + camera.translation.z;
    let value = (1.0 - lambda) * z;
    let grad = n * (lambda * z / nd) + r2 * (1.0 - lambda);
    (value, grad)
}

/// Distance of `state` from the energy's non-differentiable set, in metres
/// of vertex motion: the smallest of the vertex |SDF| values, the gap
/// between the two nearest region vertices of any contact point and the
/// distance of the root from its ray hit.
pub fn kink_margin(problem: &FitProblem, state: &FitState) -> f64 {
    let verts = state.vertices(problem.shape);
    let mut m = verts
        .iter()
        .map(|&v| problem.scene.signed_distance(v).abs())
        .fold(f64::INFINITY, f64::min);
    for (&q, &c) in problem.contacts.iter().zip(problem.categories) {
        if c == NONE {
            continue;
        }
        let mut d: Vec<f64> = problem.members[c as usize - 1].iter().map(|&i| verts[i].distance(q)).collect();
        d.sort_by(f64::total_cmp);
        if d.len() > 1 {
            m = m.min(d[1] - d[0]);
        }
    }
    if let Ok(root) = problem.regressor_root(&verts) {
        let o = problem.camera.center();
        if let Some((lambda, _)) = problem.scene.raycast_hit(o, root - o) {
            m = m.min((1.0 - lambda).abs() * root.distance(o));
        }
    }
    m
}

/// Energy of `state`.
pub fn energy(problem: &FitProblem, state: &FitState, cfg: &SaOptConfig) -> Result<EnergyBreakdown> {
    let (store, ids) = state_store(state);
    let mut g = Graph::new();
    let e = energy_graph(&mut g, &store, ids, problem, cfg)?;
    Ok(breakdown(&g, &e))
}

fn breakdown(g: &Graph, e: &EnergyVars) -> EnergyBreakdown {
    EnergyBreakdown {
        total: g.value(e.total).item(),
        reproj: g.value(e.reproj).item(),
        pen: g.value(e.pen).item(),
        contact: g.value(e.contact).item(),
        ordinal: g.value(e.ordinal).item(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
    /// Length of the accepted step; 0 for the initial row.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: FitState,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// Iteration budget ran out; `state` is the best found.
    pub max_iterations_reached: bool,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn is_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1].energy.total <= w[0].energy.total)
    }
}

struct Evaluator<'p, 'a> {
    problem: &'p FitProblem<'a>,
    cfg: &'p SaOptConfig,
    base: FitState,
}

impl Evaluator<'_, '_> {
    fn free(&self) -> Vec<usize> {
        let v = self.cfg.variables;
        let mut out = Vec::new();
        if v.translation {
            out.extend(0..3);
        }
        if v.scale {
            out.push(3);
        }
        if v.orientation {
            out.extend(4..7);
        }
        out
    }

    fn state(&self, x: &[f64]) -> FitState {
        let mut all = [
            self.base.translation.x,
            self.base.translation.y,
            self.base.translation.z,
            self.base.log_scale,
            self.base.orientation.x,
            self.base.orientation.y,
            self.base.orientation.z,
        ];
        for (&i, &v) in self.free().iter().zip(x) {
            all[i] = v;
        }
        FitState {
            translation: Vec3::new(all[0], all[1], all[2]),
            log_scale: all[3],
            orientation: Vec3::new(all[4], all[5], all[6]),
        }
    }

    fn vector(&self, s: &FitState) -> Vec<f64> {
        let all = [
            s.translation.x,
            s.translation.y,
            s.translation.z,
            s.log_scale,
            s.orientation.x,
            s.orientation.y,
            s.orientation.z,
        ];
        self.free().iter().map(|&i| all[i]).collect()
    }

    /// Energy and gradient over the free variables; `None` when the energy
    /// is not finite.
    fn eval(&self, x: &[f64]) -> Result<Option<(EnergyBreakdown, Vec<f64>)>> {
        let (store, ids) = state_store(&self.state(x));
        let mut g = Graph::new();
        let e = match energy_graph(&mut g, &store, ids, self.problem, self.cfg) {
            Ok(e) => e,
            Err(Error::NonFinite(_)) | Err(Error::PointBehindCamera { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let b = breakdown(&g, &e);
        if !b.total.is_finite() {
            return Ok(None);
        }
        let grads = g.backward(e.total)?;
        let get = |id: ParamId, k: usize| grads.get(id).map_or(0.0, |t| t.data[k]);
        let all = [
            get(ids.translation, 0),
            get(ids.translation, 1),
            get(ids.translation, 2),
            get(ids.log_scale, 0),
            get(ids.orientation, 0),
            get(ids.orientation, 1),
            get(ids.orientation, 2),
        ];
        Ok(Some((b, self.free().iter().map(|&i| all[i]).collect())))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton descent with step halving. Only strictly decreasing steps
/// are accepted, so the energy trace never increases.
pub fn fit(problem: &FitProblem, init: FitState, cfg: &SaOptConfig) -> Result<FitResult> {
    cfg.validate()?;
    let ev = Evaluator { problem, cfg, base: init };
    let mut x = ev.vector(&init);
    let (mut e, mut grad) = ev.eval(&x)?.ok_or(Error::Diverged(0))?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        energy: e,
        step: 0.0,
    }];
    let k = x.len();
    // inverse Hessian estimate, row-major k×k; None until the first step
    let mut h: Option<Vec<f64>> = None;
    let mut converged = false;
    for it in 1..=cfg.max_iterations {
        let gnorm = sqrt(dot(&grad, &grad));
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = match &h {
            Some(h) => (0..k).map(|i| -dot(&h[i * k..(i + 1) * k], &grad)).collect(),
            None => grad.iter().map(|g| -g * cfg.initial_step / gnorm).collect(),
        };
        if dot(&dir, &grad) >= 0.0 {
            h = None;
            dir = grad.iter().map(|g| -g * cfg.initial_step / gnorm).collect();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut all_non_finite = true;
        for _ in 0..=cfg.max_halvings {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
            if let Some((en, gn)) = ev.eval(&xn)? {
                all_non_finite = false;
                if en.total < e.total {
                    accepted = Some((xn, en, gn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, en, gn)) = accepted else {
            if all_non_finite {
                return Err(Error::Diverged(it));
            }
            // no descent along the direction: a stationary point at this
            // resolution
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * sqrt(dot(&s, &s) * dot(&y, &y)) {
            let hm = h.get_or_insert_with(|| {
                let scale = sy / dot(&y, &y);
                let mut id = vec![0.0; k * k];
                for i in 0..k {
                    id[i * k + i] = scale;
                }
                id
            });
            bfgs_update(hm, &s, &y, k);
        }
        let step = sqrt(dot(&s, &s));
        let drop = e.total - en.total;
        x = xn;
        e = en;
        grad = gn;
        trace.push(TraceRow {
            iteration: it,
            energy: e,
            step,
        });
        if drop < cfg.energy_tol || step < cfg.step_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        state: ev.state(&x),
        max_iterations_reached: !converged,
        converged,
        trace,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], k: usize) {
    let rho = 1.0 / dot(s, y);
    let hy: Vec<f64> = (0..k).map(|i| dot(&h[i * k..(i + 1) * k], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::metrics::pen_e;
    use crate::scene::SceneModel;
    use crate::synth::{gen_frame, Scenario, SynthConfig, SynthFrame};

    struct Setup {
        body: BodyModel,
        frame: SynthFrame,
        shape: Vec<Vec3>,
        contacts: Vec<Vec3>,
        categories: Vec<u8>,
        joints: Vec<(f64, f64)>,
    }

    fn setup(seed: u64, scenario: Scenario) -> Setup {
        let body = BodyModel::toy();
        let frame = gen_frame(seed, scenario, &body, &SynthConfig::default()).unwrap();
        let shape = frame.body.iter().map(|&v| v - frame.root).collect();
        let (contacts, categories) = frame.labels.contact_points(&frame.scene.points);
        let joints = project_joints(&body, &frame.camera, &frame.body).unwrap();
        Setup {
            body,
            frame,
            shape,
            contacts,
            categories,
            joints,
        }
    }

    impl Setup {
        fn problem(&self) -> FitProblem<'_> {
            FitProblem::new(
                &self.body,
                &self.shape,
                &self.frame.camera,
                &self.frame.scene,
                &self.contacts,
                &self.categories,
                &self.joints,
            )
            .unwrap()
        }
    }

    fn weights(reproj: f64, pen: f64, contact: f64, ordinal: f64) -> SaOptConfig {
        SaOptConfig {
            weights: SaOptWeights {
                reproj,
                pen,
                contact,
                ordinal,
            },
            ..Default::default()
        }
    }

    #[test]
    fn ground_truth_state_has_no_residual_outside_contact() {
        for sc in Scenario::ALL {
            let s = setup(3, sc);
            let gt = FitState::at(s.frame.root);
            let e = energy(&s.problem(), &gt, &weights(1.0, 10.0, 0.0, 1.0)).unwrap();
            assert!(e.total < 1e-6, "{sc:?} {e:?}");
            // contact distances are not zero at ground truth, but nearby
            // states are worse
            let cfg = SaOptConfig::default();
            let e0 = energy(&s.problem(), &gt, &cfg).unwrap().total;
            for d in [Vec3::X, Vec3::Y, Vec3::Z, -Vec3::Z] {
                let e1 = energy(&s.problem(), &FitState::at(s.frame.root + d * 0.05), &cfg).unwrap().total;
                assert!(e1 > e0, "{sc:?} {d:?}");
            }
        }
    }

    #[test]
    fn depth_shift_increases_reprojection() {
        let s = setup(5, Scenario::SitBox);
        let cfg = weights(1.0, 0.0, 0.0, 0.0);
        let gt = energy(&s.problem(), &FitState::at(s.frame.root), &cfg).unwrap();
        let shift = s.frame.camera.optical_axis() * 0.1;
        let moved = energy(&s.problem(), &FitState::at(s.frame.root + shift), &cfg).unwrap();
        assert!(moved.reproj > gt.reproj);
        assert_eq!(moved.total, moved.reproj);
    }

    #[test]
    fn optimum_returns_immediately() {
        let s = setup(6, Scenario::StandFloor);
        let r = fit(&s.problem(), FitState::at(s.frame.root), &weights(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(r.iterations() <= 1, "{}", r.iterations());
        assert!(r.converged);
    }

    #[test]
    fn recovers_perturbed_translation() {
        for (i, sc) in Scenario::ALL.iter().enumerate() {
            let s = setup(20 + i as u64, *sc);
            let d = Vec3::new(0.3, -0.2, 0.1).normalized() * 0.3;
            let r = fit(&s.problem(), FitState::at(s.frame.root + d), &SaOptConfig::default()).unwrap();
            assert!(r.is_monotone());
            let err = r.state.translation.distance(s.frame.root);
            assert!(err < 0.01, "{sc:?}: {err} after {} iterations", r.iterations());
        }
    }

    #[test]
    fn contradictory_targets_stay_monotone() {
        let mut s = setup(8, Scenario::LeanWall);
        // contacts dragged 20 cm through the wall
        let back = -s.frame.camera.optical_axis();
        for p in &mut s.contacts {
            *p += back * 0.2;
        }
        let r = fit(&s.problem(), FitState::at(s.frame.root), &SaOptConfig::default()).unwrap();
        assert!(r.is_monotone());
        assert!(r.trace.len() > 1);
    }

    #[test]
    fn heavy_penetration_weight_never_increases_pen_e() {
        for (i, sc) in Scenario::ALL.iter().enumerate() {
            let s = setup(30 + i as u64, *sc);
            let init = FitState::at(s.frame.root - Vec3::Z * 0.08);
            let cfg = weights(1.0, 1e4, 10.0, 1.0);
            let r = fit(&s.problem(), init, &cfg).unwrap();
            let before = pen_e(&init.vertices(&s.shape), &s.frame.scene);
            let after = pen_e(&r.state.vertices(&s.shape), &s.frame.scene);
            assert!(after <= before, "{sc:?}: {before} -> {after}");
        }
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let s = setup(9, Scenario::SitBox);
        let mut cfg = SaOptConfig::default();
        cfg.variables.orientation = true;
        let p = s.problem();
        // sunk and tilted, so every term is active
        let state = FitState {
            translation: s.frame.root + Vec3::new(0.02, -0.03, -0.06),
            log_scale: 0.03,
            orientation: Vec3::new(0.05, -0.02, 0.03),
        };
        let (mut store, ids) = state_store(&state);
        let e = energy(&p, &state, &cfg).unwrap();
        assert!(e.pen > 0.0 && e.contact > 0.0 && e.reproj > 0.0, "{e:?}");
        let check = check_gradients(&mut store, 1e-6, None, |g, st| Ok(energy_graph(g, st, ids, &p, &cfg)?.total)).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn ordinal_hinge_gradient() {
        let s = setup(4, Scenario::LeanWall);
        let cam = &s.frame.camera;
        // a point pushed behind the wall
        let r = s.frame.root - cam.optical_axis() * -0.6;
        let (v, grad) = ordinal_hinge(cam, &s.frame.scene, r);
        assert!(v > 0.0);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::ZERO;
            e[k] = h;
            let num = (ordinal_hinge(cam, &s.frame.scene, r + e).0 - ordinal_hinge(cam, &s.frame.scene, r - e).0) / (2.0 * h);
            assert!((num - grad[k]).abs() < 1e-6 * (1.0 + num.abs()), "{k}: {num} vs {}", grad[k]);
        }
        assert_eq!(ordinal_hinge(cam, &s.frame.scene, s.frame.root).0, 0.0);
    }

    #[test]
    fn trace_is_equivariant_to_rigid_motion() {
        let s = setup(12, Scenario::SitBox);
        let q = Mat3::rot_z(0.7);
        let c = Vec3::new(1.5, -2.0, 0.0);
        let m = |p: Vec3| q * p + c;
        let scene = SceneModel::new(
            s.frame.scene.vertices.iter().map(|&p| m(p)).collect(),
            s.frame.scene.triangles.clone(),
            s.frame.scene.points.iter().map(|&p| m(p)).collect(),
        )
        .unwrap();
        let cam0 = &s.frame.camera;
        let camera = Camera::new(
            cam0.f,
            cam0.cx,
            cam0.cy,
            cam0.rotation * q.transpose(),
            cam0.translation - cam0.rotation * q.transpose() * c,
            cam0.crop,
        )
        .unwrap();
        let shape: Vec<Vec3> = s.shape.iter().map(|&v| q * v).collect();
        let contacts: Vec<Vec3> = s.contacts.iter().map(|&p| m(p)).collect();
        let moved = FitProblem::new(&s.body, &shape, &camera, &scene, &contacts, &s.categories, &s.joints).unwrap();
        let d = Vec3::new(0.1, 0.2, -0.1);
        let cfg = SaOptConfig::default();
        let a = fit(&s.problem(), FitState::at(s.frame.root + d), &cfg).unwrap();
        let b = fit(&moved, FitState::at(m(s.frame.root + d)), &cfg).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert!((x.energy.total - y.energy.total).abs() < 1e-9 * (1.0 + x.energy.total), "{x:?} {y:?}");
        }
    }

    #[test]
    fn non_finite_start_diverges() {
        let s = setup(1, Scenario::StandFloor);
        let init = FitState::at(Vec3::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(fit(&s.problem(), init, &SaOptConfig::default()), Err(Error::Diverged(0))));
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let s = setup(2, Scenario::LiePlane);
        let cfg = SaOptConfig {
            max_iterations: 2,
            ..Default::default()
        };
        let r = fit(&s.problem(), FitState::at(s.frame.root + Vec3::X * 0.3), &cfg).unwrap();
        assert!(r.max_iterations_reached && !r.converged);
        assert_eq!(r.iterations(), 2);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SaOptConfig::default();
        c.weights.pen = -1.0;
        assert!(c.validate().is_err());
        let c = SaOptConfig {
            max_iterations: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SaOptConfig {
            variables: Variables {
                translation: false,
                scale: false,
                orientation: false,
            },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
