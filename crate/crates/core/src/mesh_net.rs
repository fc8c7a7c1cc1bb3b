//! Stage 2: vertex-token transformer with a parallel scene branch.
//!
//! Vertex tokens attend to each other, then to scene-contact tokens; the
//! scene tokens are contact positions relative to the root joined with the
//! mean vertex token of the matching body region. Both branches end in one
//! shared affine regressor. Everything runs in camera orientation, centred
//! on the root, and is rotated back to the scene orientation on output.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{linear_attention, Adam, Graph, LayerNormParams, Linear, Optimizer, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::body::{BodyModel, N_REGIONS, NONE};
use crate::error::{Error, Result};
use crate::losses::{loss_hmr, points_tensor, HmrInputs, HmrLoss};
use crate::math::{Mat3, Vec3};

/// Width of the image code multiplied with template coordinates.
const OUTER_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshNetConfig {
    /// Token width of each block.
    pub dims: Vec<usize>,
    pub image_dim: usize,
    /// Contacts beyond this are thinned by farthest-point sampling.
    pub contact_cap: usize,
    /// Initial scale of the image embedding relative to Glorot.
    pub image_init_scale: f64,
    pub seed: u64,
}

impl Default for MeshNetConfig {
    fn default() -> Self {
        MeshNetConfig {
            dims: vec![64, 32, 16],
            image_dim: 196,
            contact_cap: 512,
            image_init_scale: 0.1,
            seed: 11,
        }
    }
}

impl MeshNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::InvalidConfig("mesh net needs at least one block of positive width".into()));
        }
        if self.dims.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig("block widths must not increase".into()));
        }
        if self.contact_cap == 0 || self.image_dim == 0 {
            return Err(Error::InvalidConfig("contact cap and image width must be positive".into()));
        }
        Ok(())
    }
}

/// Mean token of each region: `7 × d`. Vertices without a region are
/// ignored.
pub fn pool_region_tokens(tokens: &Tensor, body: &BodyModel) -> Result<Tensor> {
    let m = pooling_matrix(body)?;
    if tokens.rows != m.cols {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} tokens for {} vertices",
            tokens.rows,
            m.cols
        )));
    }
    let d = tokens.cols;
    let mut out = Tensor::zeros(N_REGIONS, d);
    for r in 0..N_REGIONS {
        for (i, &w) in m.row(r).iter().enumerate() {
            if w != 0.0 {
                for c in 0..d {
                    out.data[r * d + c] += w * tokens.at(i, c);
                }
            }
        }
    }
    Ok(out)
}

/// `7 × n` averaging matrix over region members.
fn pooling_matrix(body: &BodyModel) -> Result<Tensor> {
    let n = body.n_vertices();
    let mut m = Tensor::zeros(N_REGIONS, n);
    for (r, members) in body.region_members().iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyRegion(r));
        }
        let w = 1.0 / members.len() as f64;
        for &i in members {
            m.data[r * n + i] = w;
        }
    }
    Ok(m)
}

/// Deterministic farthest-point order: start at index 0, repeatedly take
/// the point farthest from those chosen (ties to the smaller index).
pub fn farthest_point_subsample(points: &[Vec3], k: usize) -> Vec<usize> {
    if points.len() <= k {
        return (0..points.len()).collect();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..k {
        chosen.push(next);
        let p = points[next];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in points.iter().enumerate() {
            dist[i] = dist[i].min(p.distance_squared(*q));
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        next = best.1;
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm: LayerNormParams,
    /// Normalises a separate context; absent for self-attention.
    ctx_norm: Option<LayerNormParams>,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, cross: bool, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            q: Linear::new(store, &alloc::format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &alloc::format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &alloc::format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &alloc::format!("{name}.o"), d, d, rng),
            norm: LayerNormParams::new(store, &alloc::format!("{name}.norm"), d),
            ctx_norm: cross.then(|| LayerNormParams::new(store, &alloc::format!("{name}.ctx_norm"), d)),
        }
    }

    /// `x + attend(LN(x) → LN(ctx))`, attending to `x` itself without a
    /// context.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: Option<Var>) -> Result<Var> {
        let xn = self.norm.forward(g, store, x)?;
        let c = match (ctx, self.ctx_norm) {
            (Some(c), Some(norm)) => norm.forward(g, store, c)?,
            _ => xn,
        };
        let q = self.q.forward(g, store, xn)?;
        let k = self.k.forward(g, store, c)?;
        let v = self.v.forward(g, store, c)?;
        let a = linear_attention(g, q, k, v)?;
        let a = self.o.forward(g, store, a)?;
        g.add(x, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
    norm: LayerNormParams,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &alloc::format!("{name}.up"), d, 2 * d, rng),
            down: Linear::new(store, &alloc::format!("{name}.down"), 2 * d, d, rng),
            norm: LayerNormParams::new(store, &alloc::format!("{name}.norm"), d),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.up.forward(g, store, h)?;
        // elu + 1: smooth, so finite differences stay meaningful
        let h = g.elu1(h)?;
        let h = self.down.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    proj: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
    scene_proj: Linear,
    scene_attn: Attention,
    scene_ffn: FeedForward,
}

/// One frame of stage-2 input.
#[derive(Debug, Clone, Copy)]
pub struct MeshInput<'a> {
    pub image_feature: &'a [f64],
    /// Scene frame.
    pub contacts: &'a [Vec3],
    pub categories: &'a [u8],
    /// r*, scene frame.
    pub root: Vec3,
    /// Scene → camera rotation.
    pub rotation: Mat3,
}

/// Graph outputs, root-centred and in scene orientation.
pub struct MeshHeads {
    pub vertices: Var,
    /// Reconstructed contacts and the k×3 tensor they reconstruct.
    pub reconstructed: Option<(Var, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshOutput {
    /// Root-centred, scene orientation.
    pub vertices: Vec<Vec3>,
    /// Reconstructed contact points, root-centred, scene orientation.
    pub reconstructed: Vec<Vec3>,
    /// Set when no contact points reached the network.
    pub no_contacts: bool,
}

impl MeshOutput {
    /// Scene-frame mesh for root `r`.
    pub fn placed(&self, r: Vec3) -> Vec<Vec3> {
        self.vertices.iter().map(|&v| v + r).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MeshNet {
    pub cfg: MeshNetConfig,
    pub store: ParamStore,
    template: Tensor,
    pooling: Tensor,
    embed_pos: Linear,
    embed_image: Linear,
    image_code: Linear,
    image_gain: Linear,
    embed_outer: Linear,
    vertex_embedding: ParamId,
    blocks: Vec<Block>,
    regressor: Linear,
}

fn matrix(r: Mat3) -> Tensor {
    Tensor {
        rows: 3,
        cols: 3,
        data: r.to_row_major().to_vec(),
    }
}

impl MeshNet {
    pub fn new(body: &BodyModel, cfg: MeshNetConfig) -> Result<Self> {
        cfg.validate()?;
        let pooling = pooling_matrix(body)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let root = body.root_joint(&body.template)?;
        let centred: Vec<Vec3> = body.template.iter().map(|&v| v - root).collect();
        let template = points_tensor(&centred);
        let n = body.n_vertices();
        let d0 = cfg.dims[0];
        let embed_pos = Linear::new(&mut store, "mesh.embed_pos", 3, d0, &mut rng);
        let embed_image = Linear::new(&mut store, "mesh.embed_image", cfg.image_dim, d0, &mut rng);
        // keep the shared image code from drowning the per-vertex signal
        let scale = cfg.image_init_scale;
        store.value_mut(embed_image.w).data.iter_mut().for_each(|w| *w *= scale);
        let image_code = Linear::new(&mut store, "mesh.image_code", cfg.image_dim, OUTER_RANK, &mut rng);
        store.value_mut(image_code.w).data.iter_mut().for_each(|w| *w *= scale);
        let image_gain = Linear::new(&mut store, "mesh.image_gain", cfg.image_dim, d0, &mut rng);
        store.value_mut(image_gain.w).data.iter_mut().for_each(|w| *w *= scale);
        let embed_outer = Linear::new(&mut store, "mesh.embed_outer", 3 * OUTER_RANK, d0, &mut rng);
        let vertex_embedding = store.add_normal("mesh.vertex_embedding", n, d0, 0.1, &mut rng);
        let mut blocks = Vec::new();
        let mut prev = d0;
        for (b, &d) in cfg.dims.iter().enumerate() {
            let name = |s: &str| alloc::format!("mesh.block{b}.{s}");
            let scene_in = 3 + d + if b == 0 { 0 } else { prev };
            blocks.push(Block {
                proj: Linear::new(&mut store, &name("proj"), prev + 3, d, &mut rng),
                self_attn: Attention::new(&mut store, &name("self_attn"), d, false, &mut rng),
                cross_attn: Attention::new(&mut store, &name("cross_attn"), d, true, &mut rng),
                ffn: FeedForward::new(&mut store, &name("ffn"), d, &mut rng),
                scene_proj: Linear::new(&mut store, &name("scene_proj"), scene_in, d, &mut rng),
                scene_attn: Attention::new(&mut store, &name("scene_attn"), d, false, &mut rng),
                scene_ffn: FeedForward::new(&mut store, &name("scene_ffn"), d, &mut rng),
            });
            prev = d;
        }
        let regressor = Linear::new(&mut store, "mesh.regressor", prev, 3, &mut rng);
        Ok(MeshNet {
            cfg,
            store,
            template,
            pooling,
            embed_pos,
            embed_image,
            image_code,
            image_gain,
            embed_outer,
            vertex_embedding,
            blocks,
            regressor,
        })
    }

    /// Parameter ids of the regressor shared by both branches.
    pub fn regressor_params(&self) -> (ParamId, ParamId) {
        (self.regressor.w, self.regressor.b)
    }

    /// Contacts actually fed to the network: at most `contact_cap`, chosen
    /// by farthest-point order.
    pub fn select_contacts(&self, input: &MeshInput) -> Vec<usize> {
        farthest_point_subsample(input.contacts, self.cfg.contact_cap)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &MeshInput) -> Result<MeshHeads> {
        if input.image_feature.len() != self.cfg.image_dim {
            return Err(Error::DimensionMismatch(alloc::format!(
                "image feature has {} values, expected {}",
                input.image_feature.len(),
                self.cfg.image_dim
            )));
        }
        if input.contacts.len() != input.categories.len() {
            return Err(Error::DimensionMismatch("one category per contact point".into()));
        }
        let n = self.template.rows;
        let template = g.input(self.template.clone())?;
        let image = g.input(Tensor::row_vector(input.image_feature.to_vec()))?;

        // (template ⊕ per-vertex embedding ⊕ template ⊗ image code) scaled
        // channel-wise by an image gain, plus an image offset
        let x = self.embed_pos.forward(g, store, template)?;
        let code = self.image_code.forward(g, store, image)?;
        let code = g.broadcast_rows(code, n)?;
        let mut outer = [code; 3];
        for (i, o) in outer.iter_mut().enumerate() {
            let col = g.slice_cols(template, i, i + 1)?;
            *o = g.mul_col(code, col)?;
        }
        let outer = g.concat_cols(&outer)?;
        let outer = self.embed_outer.forward(g, store, outer)?;
        let x = g.add(x, outer)?;
        let e = g.param(store, self.vertex_embedding)?;
        let x = g.add(x, e)?;
        let gain = self.image_gain.forward(g, store, image)?;
        let gain = g.add_scalar(gain, 1.0)?;
        let x = g.mul_row(x, gain)?;
        let gi = self.embed_image.forward(g, store, image)?;
        let mut x = g.add_row(x, gi)?;

        let keep: Vec<usize> = self
            .select_contacts(input)
            .into_iter()
            .filter(|&i| input.categories[i] != NONE)
            .collect();
        let scene = if keep.is_empty() {
            None
        } else {
            let local: Vec<Vec3> = keep.iter().map(|&i| input.rotation * (input.contacts[i] - input.root)).collect();
            let regions: Vec<usize> = keep.iter().map(|&i| input.categories[i] as usize - 1).collect();
            let t = points_tensor(&local);
            Some((g.input(t.clone())?, t, regions))
        };
        let pooling = match scene {
            Some(_) => Some(g.input(self.pooling.clone())?),
            None => None,
        };

        let mut s: Option<Var> = None;
        for block in &self.blocks {
            let xin = g.concat_cols(&[x, template])?;
            x = block.proj.forward(g, store, xin)?;
            x = block.self_attn.forward(g, store, x, None)?;
            if let (Some((p, _, regions)), Some(pool)) = (&scene, pooling) {
                let tokens = g.matmul(pool, x)?;
                let per_point = g.gather_rows(tokens, regions)?;
                let sin = match s {
                    None => g.concat_cols(&[*p, per_point])?,
                    Some(prev) => g.concat_cols(&[*p, per_point, prev])?,
                };
                let mut st = block.scene_proj.forward(g, store, sin)?;
                st = block.scene_attn.forward(g, store, st, None)?;
                st = block.scene_ffn.forward(g, store, st)?;
                x = block.cross_attn.forward(g, store, x, Some(st))?;
                s = Some(st);
            }
            x = block.ffn.forward(g, store, x)?;
        }
        debug_assert_eq!(g.shape(x).0, n);

        // camera-oriented rows times R gives scene-oriented rows
        let rot = g.input(matrix(input.rotation))?;
        let v = self.regressor.forward(g, store, x)?;
        let vertices = g.matmul(v, rot)?;
        let reconstructed = match (s, scene) {
            (Some(st), Some((_, t, _))) => {
                let r = self.regressor.forward(g, store, st)?;
                let r = g.matmul(r, rot)?;
                let target = Tensor {
                    rows: t.rows,
                    cols: 3,
                    data: (0..t.rows)
                        .flat_map(|i| {
                            (input.rotation.transpose() * Vec3::new(t.at(i, 0), t.at(i, 1), t.at(i, 2))).to_array()
                        })
                        .collect(),
                };
                Some((r, target))
            }
            _ => None,
        };
        Ok(MeshHeads { vertices, reconstructed })
    }

    pub fn predict(&self, input: &MeshInput) -> Result<MeshOutput> {
        let mut g = Graph::new();
        let heads = self.forward(&mut g, &self.store, input)?;
        let rows = |t: &Tensor| (0..t.rows).map(|i| Vec3::new(t.at(i, 0), t.at(i, 1), t.at(i, 2))).collect();
        Ok(MeshOutput {
            vertices: rows(g.value(heads.vertices)),
            reconstructed: heads.reconstructed.as_ref().map_or_else(Vec::new, |(r, _)| rows(g.value(*r))),
            no_contacts: heads.reconstructed.is_none(),
        })
    }
}

/// One frame of stage-2 supervision.
#[derive(Debug, Clone)]
pub struct MeshSample {
    pub image_feature: Vec<f64>,
    pub contacts: Vec<Vec3>,
    pub categories: Vec<u8>,
    pub root: Vec3,
    pub rotation: Mat3,
    /// Scene frame.
    pub vertices_gt: Vec<Vec3>,
}

impl MeshSample {
    pub fn input(&self) -> MeshInput<'_> {
        MeshInput {
            image_feature: &self.image_feature,
            contacts: &self.contacts,
            categories: &self.categories,
            root: self.root,
            rotation: self.rotation,
        }
    }
}

/// `L_HMR` of one sample recorded on `g`.
pub fn mesh_loss(g: &mut Graph, net: &MeshNet, store: &ParamStore, s: &MeshSample, regressor: &Tensor) -> Result<HmrLoss> {
    let heads = net.forward(g, store, &s.input())?;
    let gt = points_tensor(&s.vertices_gt);
    let root = Tensor::row_vector(s.root.to_array().to_vec());
    let contacts = heads.reconstructed.as_ref().map(|(r, t)| (*r, t));
    loss_hmr(
        g,
        &HmrInputs {
            vertices: heads.vertices,
            vertices_gt: &gt,
            regressor,
            root: &root,
            contacts,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for MeshTrainConfig {
    fn default() -> Self {
        MeshTrainConfig {
            epochs: 300,
            batch: 1,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 5,
        }
    }
}

impl MeshTrainConfig {
    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd { momentum } => Optimizer::Sgd(Sgd::new(self.lr, momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.lr)),
        }
    }
}

/// Mean loss of a batch and one optimizer step on its averaged gradient.
pub fn train_step(net: &mut MeshNet, opt: &mut Optimizer, batch: &[&MeshSample], regressor: &Tensor) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyFrameSet);
    }
    let mut total = 0.0;
    let mut grads: Option<crate::autodiff::Gradients> = None;
    for s in batch {
        let mut g = Graph::new();
        let l = mesh_loss(&mut g, net, &net.store, s, regressor)?;
        let v = g.value(l.total).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        total += v;
        let gr = g.backward(l.total)?;
        match &mut grads {
            Some(acc) => acc.accumulate(&gr),
            None => grads = Some(gr),
        }
    }
    let mut grads = grads.expect("non-empty batch");
    grads.scale(1.0 / batch.len() as f64);
    opt.step(&mut net.store, &grads);
    Ok(total / batch.len() as f64)
}

/// Seeded shuffled mini-batches with cosine learning-rate decay. The
/// callback sees the epoch, its mean loss and the net, and may stop
/// training early by returning false.
pub fn train_mesh_net(
    net: &mut MeshNet,
    samples: &[MeshSample],
    regressor: &Tensor,
    cfg: &MeshTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &MeshNet) -> bool,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyFrameSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.set_lr(crate::root_contact::cosine_lr(cfg.lr, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&MeshSample> = chunk.iter().map(|&i| &samples[i]).collect();
            sum += train_step(net, &mut opt, &batch, regressor)? * batch.len() as f64;
        }
        let mean = sum / samples.len() as f64;
        history.push(mean);
        if !on_epoch(epoch, mean, net) {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> MeshNetConfig {
        MeshNetConfig {
            dims: vec![8, 6],
            image_dim: 5,
            contact_cap: 512,
            image_init_scale: 0.1,
            seed: 3,
        }
    }

    fn sample(rng: &mut ChaCha8Rng, body: &BodyModel, k: usize) -> MeshSample {
        let contacts: Vec<Vec3> = (0..k)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.2)))
            .collect();
        let categories = (0..k).map(|_| rng.random_range(1..8u8)).collect();
        MeshSample {
            image_feature: (0..5).map(|_| rng.random_range(0.0..1.0)).collect(),
            contacts,
            categories,
            root: Vec3::new(0.1, -0.2, 0.9),
            rotation: Mat3::rot_x(-1.8) * Mat3::rot_z(0.4),
            vertices_gt: body.template.iter().map(|&v| v + Vec3::new(0.05, 0.0, 0.0)).collect(),
        }
    }

    fn regressor(body: &BodyModel) -> Tensor {
        Tensor::from_vec(body.n_joints(), body.n_vertices(), body.regressor.to_dense(body.n_vertices())).unwrap()
    }

    #[test]
    fn pooled_tokens_are_region_means() {
        let body = BodyModel::toy();
        let n = body.n_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_vec(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pooled = pool_region_tokens(&t, &body).unwrap();
        for (r, members) in body.region_members().iter().enumerate() {
            for c in 0..4 {
                let mean = members.iter().map(|&i| t.at(i, c)).sum::<f64>() / members.len() as f64;
                assert!((pooled.at(r, c) - mean).abs() < 1e-12);
            }
        }
        let same = Tensor::filled(n, 3, 0.25);
        assert!(pool_region_tokens(&same, &body).unwrap().data.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pooling_two_members_is_midpoint() {
        let template = vec![Vec3::ZERO; 9];
        let mut regions: Vec<Option<u8>> = (0..7).map(Some).collect();
        regions.push(Some(3));
        regions.push(None);
        let reg = crate::body::JointRegressor { rows: vec![vec![(0, 1.0)]] };
        let body = BodyModel::new(template, reg, regions).unwrap();
        let t = Tensor::from_vec(9, 1, vec![0., 1., 2., 3., 4., 5., 6., 10., 100.]).unwrap();
        let p = pool_region_tokens(&t, &body).unwrap();
        assert_eq!(p.at(3, 0), 6.5);
        assert_eq!(p.at(0, 0), 0.0);
    }

    #[test]
    fn empty_region_is_rejected() {
        let mut body = BodyModel::toy();
        for r in &mut body.region_of_vertex {
            if *r == Some(2) {
                *r = None;
            }
        }
        let t = Tensor::zeros(body.n_vertices(), 2);
        assert_eq!(pool_region_tokens(&t, &body).unwrap_err(), Error::EmptyRegion(2));
    }

    #[test]
    fn no_contacts_equals_trunk_only_bitwise() {
        let body = BodyModel::toy();
        let net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample(&mut rng, &body, 0);
        let a = net.predict(&s.input()).unwrap();
        assert!(a.no_contacts && a.reconstructed.is_empty());
        // contacts labelled `none` never reach the network either
        let mut t = sample(&mut rng, &body, 5);
        t.image_feature = s.image_feature.clone();
        t.categories = vec![NONE; 5];
        let b = net.predict(&t.input()).unwrap();
        assert_eq!(a.vertices, b.vertices);
        let with = sample(&mut rng, &body, 5);
        let c = net.predict(&MeshInput { image_feature: &s.image_feature, ..with.input() }).unwrap();
        assert!(!c.no_contacts);
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn regressor_is_shared() {
        let body = BodyModel::toy();
        let mut net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample(&mut rng, &body, 6);
        let before = net.predict(&s.input()).unwrap();
        let (_, b) = net.regressor_params();
        net.store.value_mut(b).data[0] += 1.0;
        let after = net.predict(&s.input()).unwrap();
        // a bias shift along camera x moves both outputs by the same vector
        let shift = s.rotation.transpose() * Vec3::X;
        for (p, q) in before.vertices.iter().zip(&after.vertices) {
            assert!((*q - *p).distance(shift) < 1e-12);
        }
        for (p, q) in before.reconstructed.iter().zip(&after.reconstructed) {
            assert!((*q - *p).distance(shift) < 1e-12);
        }
    }

    #[test]
    fn root_translation_invariance() {
        let body = BodyModel::toy();
        let net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample(&mut rng, &body, 7);
        let t = Vec3::new(2.0, -1.0, 0.5);
        let moved: Vec<Vec3> = s.contacts.iter().map(|&p| p + t).collect();
        let a = net.predict(&s.input()).unwrap();
        let b = net
            .predict(&MeshInput {
                contacts: &moved,
                root: s.root + t,
                ..s.input()
            })
            .unwrap();
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert!(p.distance(*q) < 1e-9);
        }
    }

    #[test]
    fn fps_is_deterministic_and_spread() {
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let k = farthest_point_subsample(&pts, 3);
        // 49 and 50 tie after {0, 99}; the smaller index wins
        assert_eq!(k, vec![0, 49, 99]);
        assert_eq!(farthest_point_subsample(&pts, 200).len(), 100);
    }

    #[test]
    fn invalid_configs() {
        let body = BodyModel::toy();
        for dims in [vec![], vec![8, 16], vec![0]] {
            let cfg = MeshNetConfig { dims, ..small_cfg() };
            assert!(matches!(MeshNet::new(&body, cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        // smooth readout: the L1 losses have kinks that finite differences
        // straddle, and are checked on their own in `losses`
        let body = BodyModel::toy();
        let net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = sample(&mut rng, &body, 6);
        let mut store = net.store.clone();
        let check = check_gradients(&mut store, 1e-5, Some(4), |g, st| {
            let h = net.forward(g, st, &s.input())?;
            let (r, _) = h.reconstructed.unwrap();
            let a = g.square(h.vertices)?;
            let a = g.sum(a)?;
            let b = g.square(r)?;
            let b = g.sum(b)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let body = BodyModel::toy();
        let mut net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample(&mut rng, &body, 4);
        let before = net.store.clone();
        let cfg = MeshTrainConfig {
            lr: 0.0,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            ..Default::default()
        };
        let mut opt = cfg.optimizer();
        train_step(&mut net, &mut opt, &[&s], &regressor(&body)).unwrap();
        assert_eq!(net.store, before);
    }

    #[test]
    fn single_sample_overfits() {
        let body = BodyModel::toy();
        let mut net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample(&mut rng, &body, 8);
        let reg = regressor(&body);
        let cfg = MeshTrainConfig {
            lr: 3e-3,
            ..Default::default()
        };
        let mut opt = cfg.optimizer();
        let first = train_step(&mut net, &mut opt, &[&s], &reg).unwrap();
        let mut last = first;
        for _ in 0..500 {
            last = train_step(&mut net, &mut opt, &[&s], &reg).unwrap();
        }
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn empty_batch() {
        let body = BodyModel::toy();
        let mut net = MeshNet::new(&body, small_cfg()).unwrap();
        let mut opt = MeshTrainConfig::default().optimizer();
        assert_eq!(train_step(&mut net, &mut opt, &[], &regressor(&body)), Err(Error::EmptyFrameSet));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn body_output_ignores_contact_order(seed in 0u64..1000) {
            let body = BodyModel::toy();
            let net = MeshNet::new(&body, small_cfg()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample(&mut rng, &body, 12);
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rng);
            let pc: Vec<Vec3> = perm.iter().map(|&i| s.contacts[i]).collect();
            let pk: Vec<u8> = perm.iter().map(|&i| s.categories[i]).collect();
            let a = net.predict(&s.input()).unwrap();
            let b = net.predict(&MeshInput { contacts: &pc, categories: &pk, ..s.input() }).unwrap();
            for (p, q) in a.vertices.iter().zip(&b.vertices) {
                prop_assert!(p.distance(*q) < 1e-12);
            }
        }
    }
}
