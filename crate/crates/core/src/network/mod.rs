//! The completion network: a T-Net aligned two-stage PointNet encoder, a
//! fully connected coarse decoder, a folding decoder for the dense cloud and
//! a residual refiner. Stages can be switched off for ablations.
//!
//! Parameters live in a [`ParamStore`] under stable dotted paths. The
//! architecture hyperparameters are stored alongside them (`meta.*`
//! entries) so a checkpoint alone is enough to rebuild the network.

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_indices, PointCloud, PointTag};
use crate::tensor::{no_grad, Activation, BatchStats, ParamStore, Tensor, BN_EPS};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture switches and sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub enable_stn: bool,
    pub enable_pfe: bool,
    pub enable_refiner: bool,
    /// Merge the input with the dense cloud and resample before refining;
    /// off passes the dense cloud alone through the refiner.
    pub refiner_fps: bool,
    /// Coarse point count.
    pub n_coarse: usize,
    /// Dense points per coarse point; must be a perfect square.
    pub r: usize,
    /// Half-width of the folding grid.
    pub grid_extent: f64,
    pub batch_norm: bool,
    /// Divides every hidden width (1 = full size).
    pub width_divisor: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            enable_stn: true,
            enable_pfe: true,
            enable_refiner: true,
            refiner_fps: true,
            n_coarse: 1024,
            r: 16,
            grid_extent: 0.05,
            batch_norm: true,
            width_divisor: 1,
        }
    }
}

impl NetConfig {
    /// Side of the square folding grid.
    pub fn grid_side(&self) -> Result<usize> {
        let u = (self.r as f64).sqrt().round() as usize;
        if self.r == 0 || u * u != self.r {
            return Err(Error::InvalidArgument(format!("r = {} is not a perfect square", self.r)));
        }
        Ok(u)
    }

    pub fn dense_size(&self) -> usize {
        self.n_coarse * self.r
    }

    fn w(&self, width: usize) -> usize {
        (width / self.width_divisor.max(1)).max(1)
    }

    /// Width of the pooled first-stage feature.
    pub fn f1_len(&self) -> usize {
        self.w(256)
    }

    pub fn f2_len(&self) -> usize {
        self.w(1024)
    }

    /// Width of the latent code fed to the decoders.
    pub fn f3_len(&self) -> usize {
        if self.enable_pfe {
            self.f2_len() + self.f1_len()
        } else {
            self.f2_len()
        }
    }

    fn validate(&self) -> Result<()> {
        self.grid_side()?;
        if self.n_coarse == 0 || self.width_divisor == 0 {
            return Err(Error::InvalidArgument("n_coarse and width_divisor must be positive".into()));
        }
        if !(self.grid_extent.is_finite() && self.grid_extent >= 0.0) {
            return Err(Error::InvalidArgument(format!("grid_extent {}", self.grid_extent)));
        }
        Ok(())
    }

    fn to_meta(self) -> [(&'static str, f64); 9] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        [
            ("meta.batch_norm", b(self.batch_norm)),
            ("meta.enable_pfe", b(self.enable_pfe)),
            ("meta.enable_refiner", b(self.enable_refiner)),
            ("meta.enable_stn", b(self.enable_stn)),
            ("meta.grid_extent", self.grid_extent),
            ("meta.n_coarse", self.n_coarse as f64),
            ("meta.r", self.r as f64),
            ("meta.refiner_fps", b(self.refiner_fps)),
            ("meta.width_divisor", self.width_divisor as f64),
        ]
    }

    fn from_meta(params: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<f64> { Ok(params.get(k)?.item()) };
        let cfg = NetConfig {
            batch_norm: get("meta.batch_norm")? != 0.0,
            enable_pfe: get("meta.enable_pfe")? != 0.0,
            enable_refiner: get("meta.enable_refiner")? != 0.0,
            enable_stn: get("meta.enable_stn")? != 0.0,
            grid_extent: get("meta.grid_extent")?,
            n_coarse: get("meta.n_coarse")? as usize,
            r: get("meta.r")? as usize,
            refiner_fps: get("meta.refiner_fps")? != 0.0,
            width_divisor: get("meta.width_divisor")? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether batch norm uses batch statistics (and records them) or the
/// stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a training-mode forward pass, keyed by
/// layer path; fold them in with [`Network::apply_bn_updates`].
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(pub Vec<(String, BatchStats)>);

struct Ctx {
    mode: Mode,
    updates: BnUpdates,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// 3 x 3 alignment applied as `points * transform`.
    pub transform: Tensor,
    /// Per-point features of the first layer, `n x 64` at full width.
    pub p1: Tensor,
    pub f1: Tensor,
    pub f2: Tensor,
    /// Latent code, `1 x f3_len`.
    pub f3: Tensor,
}

#[derive(Clone, Debug)]
pub struct CompletionOutput {
    pub coarse: Tensor,
    pub dense: Tensor,
    /// Equals `dense` when the refiner is disabled.
    pub refined: Tensor,
    /// The cloud the refiner offsets were added to.
    pub refiner_base: Tensor,
    /// Provenance of each `refiner_base` row.
    pub tags: Vec<PointTag>,
}

/// A network: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
    pub params: ParamStore,
}

/// Layer spec used while building parameters: input width, output width,
/// whether it carries batch norm.
type LayerSpec = (usize, usize, bool);

impl Network {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        for (k, v) in cfg.to_meta() {
            params.insert(k, &[1], vec![v], false)?;
        }
        let mut net = Network { cfg, params };
        for (prefix, layers) in net.layer_plan() {
            for (i, (c_in, c_out, bn)) in layers.into_iter().enumerate() {
                net.add_layer(&format!("{prefix}.mlp{i}"), c_in, c_out, bn)?;
            }
        }
        if cfg.enable_stn {
            // the regressed transform starts as the identity
            let w = cfg.w(256);
            net.params.insert("encoder.tnet.out.weight", &[w, 9], vec![0.0; w * 9], true)?;
            let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            net.params.insert("encoder.tnet.out.bias", &[9], eye, true)?;
        }
        Ok(net)
    }

    /// Rebuilds a network from a checkpointed store.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let cfg = NetConfig::from_meta(&params)?;
        let net = Network { cfg, params };
        for (prefix, layers) in net.layer_plan() {
            for i in 0..layers.len() {
                net.params.param(&format!("{prefix}.mlp{i}.weight"))?;
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Toggles the refiner's merge-and-resample step. It has no parameters
    /// of its own, so a trained network can run either way.
    pub fn set_refiner_fps(&mut self, on: bool) -> Result<()> {
        self.cfg.refiner_fps = on;
        self.params.set_data("meta.refiner_fps", vec![if on { 1.0 } else { 0.0 }])
    }

    fn layer_plan(&self) -> Vec<(&'static str, Vec<LayerSpec>)> {
        let c = &self.cfg;
        let w = |x| c.w(x);
        let mut plan = Vec::new();
        if c.enable_stn {
            plan.push((
                "encoder.tnet.conv",
                vec![(3, w(64), true), (w(64), w(128), true), (w(128), w(1024), true)],
            ));
            plan.push(("encoder.tnet.fc", vec![(w(1024), w(512), false), (w(512), w(256), false)]));
        }
        plan.push((
            "encoder.pn1",
            vec![(3, w(64), true), (w(64), w(128), true), (w(128), c.f1_len(), false)],
        ));
        plan.push((
            "encoder.pn2",
            vec![(w(64) + c.f1_len(), w(512), false), (w(512), c.f2_len(), false)],
        ));
        plan.push((
            "decoder.coarse",
            vec![
                (c.f3_len(), w(1024), false),
                (w(1024), w(1024), false),
                (w(1024), 3 * c.n_coarse, false),
            ],
        ));
        plan.push((
            "decoder.fold",
            vec![(3 + c.f3_len() + 2, w(512), false), (w(512), w(512), true), (w(512), 3, false)],
        ));
        if c.enable_refiner {
            plan.push((
                "refiner.enc",
                vec![(3, w(64), true), (w(64), w(128), true), (w(128), w(1024), true)],
            ));
            plan.push((
                "refiner.dec",
                vec![
                    (w(64) + w(1024), w(512), false),
                    (w(512), w(256), true),
                    (w(256), w(128), true),
                    (w(128), 3, true),
                ],
            ));
        }
        plan
    }

    fn add_layer(&mut self, path: &str, c_in: usize, c_out: usize, bn: bool) -> Result<()> {
        self.params.init_uniform(&format!("{path}.weight"), &[c_in, c_out], c_in)?;
        self.params.insert(&format!("{path}.bias"), &[c_out], vec![0.0; c_out], true)?;
        if bn && self.cfg.batch_norm {
            self.params.insert(&format!("{path}.bn.gamma"), &[c_out], vec![1.0; c_out], true)?;
            self.params.insert(&format!("{path}.bn.beta"), &[c_out], vec![0.0; c_out], true)?;
            self.params.insert(&format!("{path}.bn.running_mean"), &[c_out], vec![0.0; c_out], false)?;
            self.params.insert(&format!("{path}.bn.running_var"), &[c_out], vec![1.0; c_out], false)?;
        }
        Ok(())
    }

    /// `x * W + b`, then batch norm when the layer has it, then `act`.
    fn layer(&self, ctx: &mut Ctx, x: &Tensor, path: &str, act: Activation) -> Result<Tensor> {
        let w = self.params.get(&format!("{path}.weight"))?;
        let b = self.params.get(&format!("{path}.bias"))?;
        self.norm_act(ctx, &x.matmul(&w)?.add_row(&b)?, path, act)
    }

    fn norm_act(&self, ctx: &mut Ctx, h: &Tensor, path: &str, act: Activation) -> Result<Tensor> {
        let gamma_path = format!("{path}.bn.gamma");
        let h = if self.params.contains(&gamma_path) {
            let gamma = self.params.get(&gamma_path)?;
            let beta = self.params.get(&format!("{path}.bn.beta"))?;
            match ctx.mode {
                Mode::Train => {
                    let (out, mean, var) = h.batch_norm_train(&gamma, &beta, BN_EPS)?;
                    ctx.updates.0.push((path.to_string(), BatchStats { mean, var }));
                    out
                }
                Mode::Eval => {
                    let mean = self.params.get(&format!("{path}.bn.running_mean"))?;
                    let var = self.params.get(&format!("{path}.bn.running_var"))?;
                    h.batch_norm_eval(&gamma, &beta, mean.data(), var.data(), BN_EPS)?
                }
            }
        } else {
            h.clone()
        };
        match act {
            Activation::Relu => h.relu(),
            Activation::Tanh => h.tanh(),
            Activation::None => Ok(h),
        }
    }

    /// Hidden layers use ReLU, the last one `last`.
    fn mlp(&self, ctx: &mut Ctx, x: &Tensor, prefix: &str, depth: usize, last: Activation) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(depth);
        let mut h = x.clone();
        for i in 0..depth {
            let act = if i + 1 == depth { last } else { Activation::Relu };
            h = self.layer(ctx, &h, &format!("{prefix}.mlp{i}"), act)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    fn pool_row(x: &Tensor) -> Result<Tensor> {
        let p = x.max_pool_points()?;
        let c = p.numel();
        p.reshape(&[1, c])
    }

    /// Folds batch statistics from a training pass into the running
    /// statistics.
    pub fn apply_bn_updates(&mut self, updates: BnUpdates) -> Result<()> {
        for (path, stats) in updates.0 {
            for (key, batch) in [("running_mean", stats.mean), ("running_var", stats.var)] {
                let p = format!("{path}.bn.{key}");
                let old = self.params.get(&p)?;
                let new = old
                    .data()
                    .iter()
                    .zip(&batch)
                    .map(|(o, b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
                    .collect();
                self.params.set_data(&p, new)?;
            }
        }
        Ok(())
    }

    fn check_points(points: &Tensor) -> Result<()> {
        if points.shape().len() != 2 || points.shape()[1] != 3 || points.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "network input",
                detail: format!("expected n x 3 with n >= 1, got {:?}", points.shape()),
            });
        }
        Ok(())
    }

    fn tnet_ctx(&self, ctx: &mut Ctx, points: &Tensor) -> Result<Tensor> {
        let h = self.mlp(ctx, points, "encoder.tnet.conv", 3, Activation::Relu)?.pop().unwrap();
        let g = Self::pool_row(&h)?;
        let g = self.mlp(ctx, &g, "encoder.tnet.fc", 2, Activation::Relu)?.pop().unwrap();
        let t = self.layer(ctx, &g, "encoder.tnet.out", Activation::None)?;
        t.reshape(&[3, 3])
    }

    /// 3 x 3 alignment predicted from the input. Errors when the STN is
    /// disabled.
    pub fn tnet(&self, points: &Tensor, mode: Mode) -> Result<(Tensor, BnUpdates)> {
        Self::check_points(points)?;
        if !self.cfg.enable_stn {
            return Err(Error::InvalidArgument("STN disabled".into()));
        }
        let mut ctx = Ctx { mode, updates: BnUpdates::default() };
        let t = self.tnet_ctx(&mut ctx, points)?;
        Ok((t, ctx.updates))
    }

    fn encode_ctx(&self, ctx: &mut Ctx, points: &Tensor) -> Result<EncoderOutput> {
        let transform = if self.cfg.enable_stn {
            self.tnet_ctx(ctx, points)?
        } else {
            Tensor::constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?
        };
        let aligned = if self.cfg.enable_stn { points.matmul(&transform)? } else { points.clone() };
        let l1 = self.mlp(ctx, &aligned, "encoder.pn1", 3, Activation::None)?;
        let p1 = l1[0].clone();
        let f1 = Self::pool_row(&l1[2])?;
        let n = points.rows();
        let fp = Tensor::concat_cols(&[p1.clone(), f1.tile_rows(n)?])?;
        let h = self.mlp(ctx, &fp, "encoder.pn2", 2, Activation::None)?.pop().unwrap();
        let f2 = Self::pool_row(&h)?;
        let f3 = if self.cfg.enable_pfe {
            Tensor::concat_cols(&[f2.clone(), f1.clone()])?
        } else {
            f2.clone()
        };
        Ok(EncoderOutput { transform, p1, f1, f2, f3 })
    }

    pub fn encode(&self, points: &Tensor, mode: Mode) -> Result<(EncoderOutput, BnUpdates)> {
        Self::check_points(points)?;
        let mut ctx = Ctx { mode, updates: BnUpdates::default() };
        let out = self.encode_ctx(&mut ctx, points)?;
        Ok((out, ctx.updates))
    }

    fn decode_coarse_ctx(&self, ctx: &mut Ctx, f3: &Tensor) -> Result<Tensor> {
        let h = self.mlp(ctx, f3, "decoder.coarse", 3, Activation::None)?.pop().unwrap();
        h.reshape(&[self.cfg.n_coarse, 3])
    }

    /// Latent code (`1 x f3_len`) to the `N x 3` coarse cloud.
    pub fn decode_coarse(&self, f3: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx { mode: Mode::Eval, updates: BnUpdates::default() };
        self.decode_coarse_ctx(&mut ctx, f3)
    }

    /// The `r x 2` zero-centered grid attached to every coarse point.
    pub fn folding_grid(&self) -> Result<Vec<[f64; 2]>> {
        let u = self.cfg.grid_side()?;
        let g = self.cfg.grid_extent;
        let lin: Vec<f64> = (0..u)
            .map(|i| if u == 1 { 0.0 } else { g * ((2.0 * i as f64 - (u - 1) as f64) / (u - 1) as f64) })
            .collect();
        Ok((0..u * u).map(|k| [lin[k / u], lin[k % u]]).collect())
    }

    fn decode_dense_ctx(&self, ctx: &mut Ctx, coarse: &Tensor, f3: &Tensor) -> Result<Tensor> {
        let r = self.cfg.r;
        let n = coarse.rows();
        let rows = n * r;
        let tiled = coarse.repeat_rows(r)?;
        let grid = self.folding_grid()?;
        let mut m = Vec::with_capacity(rows * 2);
        for _ in 0..n {
            for g in &grid {
                m.extend_from_slice(g);
            }
        }
        let m = Tensor::constant(&[rows, 2], m)?;
        // concat(tiled, F3, grid) * W split by row blocks of W, so the F3
        // product is computed once instead of per point
        let w = self.params.get("decoder.fold.mlp0.weight")?;
        let f = f3.cols();
        let wp = w.slice_rows(0, 3)?;
        let wf = w.slice_rows(3, 3 + f)?;
        let wg = w.slice_rows(3 + f, 3 + f + 2)?;
        let pre = tiled
            .matmul(&wp)?
            .add(&f3.matmul(&wf)?.tile_rows(rows)?)?
            .add(&m.matmul(&wg)?)?;
        let b = self.params.get("decoder.fold.mlp0.bias")?;
        let h = self.norm_act(ctx, &pre.add_row(&b)?, "decoder.fold.mlp0", Activation::Relu)?;
        let h = self.layer(ctx, &h, "decoder.fold.mlp1", Activation::Relu)?;
        let offsets = self.layer(ctx, &h, "decoder.fold.mlp2", Activation::None)?;
        tiled.add(&offsets)
    }

    /// Coarse cloud plus latent code to the `rN x 3` dense cloud.
    pub fn decode_dense(&self, coarse: &Tensor, f3: &Tensor, mode: Mode) -> Result<(Tensor, BnUpdates)> {
        let mut ctx = Ctx { mode, updates: BnUpdates::default() };
        let d = self.decode_dense_ctx(&mut ctx, coarse, f3)?;
        Ok((d, ctx.updates))
    }

    fn refine_ctx(&self, ctx: &mut Ctx, dense: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor, Vec<PointTag>)> {
        let target = dense.rows();
        let (base, tags) = if self.cfg.refiner_fps {
            let merged = Tensor::concat_rows(&[input.clone(), dense.clone()])?;
            let pts: Vec<[f64; 3]> = merged.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let idx = farthest_point_indices(&pts, target)?;
            let tags = idx
                .iter()
                .map(|&i| if i < input.rows() { PointTag::FromInput } else { PointTag::Generated })
                .collect();
            (merged.gather_rows(&idx)?, tags)
        } else {
            (dense.clone(), vec![PointTag::Generated; target])
        };
        let enc = self.mlp(ctx, &base, "refiner.enc", 3, Activation::Relu)?;
        let global = Self::pool_row(&enc[2])?;
        let feat = Tensor::concat_cols(&[enc[0].clone(), global.tile_rows(target)?])?;
        let offsets = self.mlp(ctx, &feat, "refiner.dec", 4, Activation::Tanh)?.pop().unwrap();
        let refined = base.add(&offsets)?;
        Ok((refined, base, tags))
    }

    /// Residual refinement of the dense cloud. Returns the refined cloud,
    /// the cloud the offsets were added to, and its provenance tags.
    pub fn refine(&self, dense: &Tensor, input: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, Vec<PointTag>, BnUpdates)> {
        if !self.cfg.enable_refiner {
            return Err(Error::InvalidArgument("refiner disabled".into()));
        }
        let mut ctx = Ctx { mode, updates: BnUpdates::default() };
        let (r, b, t) = self.refine_ctx(&mut ctx, dense, input)?;
        Ok((r, b, t, ctx.updates))
    }

    /// Full pass from an `n x 3` input.
    pub fn forward(&self, points: &Tensor, mode: Mode) -> Result<(CompletionOutput, BnUpdates)> {
        Self::check_points(points)?;
        let mut ctx = Ctx { mode, updates: BnUpdates::default() };
        let enc = self.encode_ctx(&mut ctx, points)?;
        let coarse = self.decode_coarse_ctx(&mut ctx, &enc.f3)?;
        let dense = self.decode_dense_ctx(&mut ctx, &coarse, &enc.f3)?;
        let (refined, refiner_base, tags) = if self.cfg.enable_refiner {
            self.refine_ctx(&mut ctx, &dense, points)?
        } else {
            (dense.clone(), dense.clone(), vec![PointTag::Generated; dense.rows()])
        };
        Ok((
            CompletionOutput {
                coarse,
                dense,
                refined,
                refiner_base,
                tags,
            },
            ctx.updates,
        ))
    }

    /// Inference on a point cloud: evaluation mode without a graph.
    pub fn complete(&self, input: &PointCloud) -> Result<PointCloud> {
        no_grad(|| {
            let (out, _) = self.forward(&input.to_tensor()?, Mode::Eval)?;
            let mut pc = PointCloud::from_tensor(&out.refined)?;
            pc.tags = Some(out.tags);
            Ok(pc)
        })
    }
}
