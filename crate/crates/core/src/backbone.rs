//! Reparameterizable multi-branch backbone.
//!
//! Each block computes `relu(bn(conv3x3(x)) + bn(conv1x1(x)) + bn(x))`, the
//! last branch existing only when the block keeps both channel count and
//! resolution. Batch norm runs with fixed statistics, so every branch is affine
//! in `x` and the block folds into one 3x3 convolution for deployment.

use rand::Rng;
use semidense_tensor::{conv2d, Float, Tensor, Var};

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::{normal, Ctx, Params};

pub const BN_EPS: f64 = 1e-5;

/// Position of one block in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub stage: usize,
    pub block: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_identity(&self) -> bool {
        self.in_c == self.out_c && self.stride == 1
    }

    pub fn prefix(&self) -> String {
        format!("backbone.stage{}.block{}", self.stage, self.block)
    }
}

/// Blocks in execution order. The input is single-channel.
pub fn block_specs(cfg: &BackboneConfig) -> Vec<BlockSpec> {
    let mut out = Vec::new();
    let mut in_c = 1;
    for s in 0..4 {
        for b in 0..cfg.blocks[s] {
            let stride = if b == 0 { cfg.strides[s] } else { 1 };
            out.push(BlockSpec { stage: s, block: b, in_c, out_c: cfg.widths[s], stride });
            in_c = cfg.widths[s];
        }
    }
    out
}

/// Fixed-statistics batch norm with learnable affine part.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Float = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn identity(c: usize) -> Self {
        BatchNorm { mean: Tensor::zeros([c]), var: Tensor::ones([c]), scale: Tensor::ones([c]), shift: Tensor::zeros([c]) }
    }

    /// Per-channel `(a, c)` with `bn(x) = a x + c`.
    pub fn affine(&self) -> Result<(Vec<T>, Vec<T>)> {
        let eps = T::lit(BN_EPS);
        let mut a = Vec::with_capacity(self.mean.numel());
        let mut c = Vec::with_capacity(self.mean.numel());
        for k in 0..self.mean.numel() {
            let v = self.var.data()[k] + eps;
            if v.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Input(format!("batch-norm variance {} is not positive", v)));
            }
            let ak = self.scale.data()[k] / v.sqrt();
            a.push(ak);
            c.push(self.shift.data()[k] - self.mean.data()[k] * ak);
        }
        Ok((a, c))
    }

    fn random(rng: &mut impl Rng, c: usize) -> Self {
        BatchNorm {
            mean: Tensor::from_fn([c], |_| T::lit(rng.random_range(-0.5..0.5))),
            var: Tensor::from_fn([c], |_| T::lit(rng.random_range(0.25..2.0))),
            scale: Tensor::from_fn([c], |_| T::lit(rng.random_range(0.5..1.5))),
            shift: Tensor::from_fn([c], |_| T::lit(rng.random_range(-0.5..0.5))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBranch<T: Float = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNorm<T>,
}

/// Training-time block.
#[derive(Clone, Debug, PartialEq)]
pub struct RepVggBlock<T: Float = f32> {
    pub conv3x3: ConvBranch<T>,
    pub conv1x1: ConvBranch<T>,
    pub identity: Option<BatchNorm<T>>,
    pub stride: usize,
}

/// Deployment block: a single 3x3 convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBlock<T: Float = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

fn apply_affine<T: Float>(x: &mut Tensor<T>, a: &[T], c: &[T]) {
    let hw = x.numel() / a.len();
    for (ch, chunk) in x.data_mut().chunks_mut(hw).enumerate() {
        for v in chunk {
            *v = *v * a[ch] + c[ch];
        }
    }
}

impl<T: Float> RepVggBlock<T> {
    /// Block with random weights and batch-norm statistics; used to test fusion.
    pub fn random(rng: &mut impl Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let mut branch = |k: usize| ConvBranch {
            kernel: normal(rng, &[out_c, in_c, k, k], (1.0 / (in_c * k * k) as f64).sqrt()),
            bias: normal(rng, &[out_c], 0.1),
            bn: BatchNorm::random(rng, out_c),
        };
        let conv3x3 = branch(3);
        let conv1x1 = branch(1);
        let identity = (in_c == out_c && stride == 1).then(|| BatchNorm::random(rng, out_c));
        RepVggBlock { conv3x3, conv1x1, identity, stride }
    }

    /// Freshly initialized block for training.
    pub fn init(rng: &mut impl Rng, spec: &BlockSpec) -> Self {
        let (i, o) = (spec.in_c, spec.out_c);
        let mut branch = |k: usize| ConvBranch {
            kernel: normal(rng, &[o, i, k, k], (1.0 / (i * k * k) as f64).sqrt()),
            bias: Tensor::zeros([o]),
            bn: BatchNorm::identity(o),
        };
        let conv3x3 = branch(3);
        let conv1x1 = branch(1);
        RepVggBlock { conv3x3, conv1x1, identity: spec.has_identity().then(|| BatchNorm::identity(o)), stride: spec.stride }
    }

    pub fn out_channels(&self) -> usize {
        self.conv3x3.kernel.shape()[0]
    }

    /// Multi-branch forward on plain tensors.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = conv2d(x, &self.conv3x3.kernel, Some(&self.conv3x3.bias), self.stride, 1)?;
        let (a, c) = self.conv3x3.bn.affine()?;
        apply_affine(&mut out, &a, &c);
        let mut one = conv2d(x, &self.conv1x1.kernel, Some(&self.conv1x1.bias), self.stride, 0)?;
        let (a, c) = self.conv1x1.bn.affine()?;
        apply_affine(&mut one, &a, &c);
        let od = out.data_mut();
        for (o, v) in od.iter_mut().zip(one.data()) {
            *o += *v;
        }
        if let Some(bn) = &self.identity {
            let mut id = x.clone();
            let (a, c) = bn.affine()?;
            apply_affine(&mut id, &a, &c);
            for (o, v) in out.data_mut().iter_mut().zip(id.data()) {
                *o += *v;
            }
        }
        Ok(out.map(|v| v.max(T::zero())))
    }

    /// Folds batch norm into each branch and sums the branches into one 3x3 kernel.
    pub fn fuse(&self) -> Result<FusedBlock<T>> {
        let o = self.out_channels();
        let i = self.conv3x3.kernel.shape()[1];
        let mut kernel = Tensor::<T>::zeros([o, i, 3, 3]);
        let mut bias = vec![T::zero(); o];
        for (br, k) in [(&self.conv3x3, 3usize), (&self.conv1x1, 1)] {
            let (a, c) = br.bn.affine()?;
            let off = (3 - k) / 2;
            for oc in 0..o {
                for ic in 0..i {
                    for y in 0..k {
                        for x in 0..k {
                            let v = br.kernel.at(&[oc, ic, y, x]) * a[oc];
                            let cur = kernel.at(&[oc, ic, y + off, x + off]);
                            kernel.set(&[oc, ic, y + off, x + off], cur + v);
                        }
                    }
                }
                bias[oc] += br.bias.data()[oc] * a[oc] + c[oc];
            }
        }
        if let Some(bn) = &self.identity {
            let (a, c) = bn.affine()?;
            for ch in 0..o {
                let cur = kernel.at(&[ch, ch, 1, 1]);
                kernel.set(&[ch, ch, 1, 1], cur + a[ch]);
                bias[ch] += c[ch];
            }
        }
        Ok(FusedBlock { kernel, bias: Tensor::new([o], bias)?, stride: self.stride })
    }

    pub fn write_params(&self, params: &mut Params<T>, prefix: &str) {
        for (name, br) in [("conv3x3", &self.conv3x3), ("conv1x1", &self.conv1x1)] {
            let p = format!("{prefix}.{name}");
            params.insert(format!("{p}.kernel"), br.kernel.clone());
            params.insert(format!("{p}.bias"), br.bias.clone());
            write_bn(params, &p, &br.bn);
        }
        if let Some(bn) = &self.identity {
            write_bn(params, &format!("{prefix}.identity"), bn);
        }
    }

    pub fn from_params(params: &Params<T>, spec: &BlockSpec) -> Result<Self> {
        let prefix = spec.prefix();
        let (o, i) = (spec.out_c, spec.in_c);
        let branch = |name: &str, k: usize| -> Result<ConvBranch<T>> {
            let p = format!("{prefix}.{name}");
            params.require(&format!("{p}.kernel"), &[o, i, k, k])?;
            params.require(&format!("{p}.bias"), &[o])?;
            Ok(ConvBranch {
                kernel: params.get(&format!("{p}.kernel"))?.clone(),
                bias: params.get(&format!("{p}.bias"))?.clone(),
                bn: read_bn(params, &p, o)?,
            })
        };
        let identity = if spec.has_identity() { Some(read_bn(params, &format!("{prefix}.identity"), o)?) } else { None };
        Ok(RepVggBlock { conv3x3: branch("conv3x3", 3)?, conv1x1: branch("conv1x1", 1)?, identity, stride: spec.stride })
    }
}

fn write_bn<T: Float>(params: &mut Params<T>, p: &str, bn: &BatchNorm<T>) {
    params.insert(format!("{p}.bn_mean"), bn.mean.clone());
    params.insert(format!("{p}.bn_var"), bn.var.clone());
    params.insert(format!("{p}.bn_scale"), bn.scale.clone());
    params.insert(format!("{p}.bn_shift"), bn.shift.clone());
}

fn read_bn<T: Float>(params: &Params<T>, p: &str, c: usize) -> Result<BatchNorm<T>> {
    let get = |f: &str| -> Result<Tensor<T>> {
        let name = format!("{p}.{f}");
        params.require(&name, &[c])?;
        Ok(params.get(&name)?.clone())
    };
    Ok(BatchNorm { mean: get("bn_mean")?, var: get("bn_var")?, scale: get("bn_scale")?, shift: get("bn_shift")? })
}

impl<T: Float> FusedBlock<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, &self.kernel, Some(&self.bias), self.stride, 1)?.map(|v| v.max(T::zero())))
    }
}

/// Names of the multi-branch parameters that batch norm leaves fixed during training.
pub fn is_frozen_stat(name: &str) -> bool {
    name.starts_with("backbone.") && (name.ends_with(".bn_mean") || name.ends_with(".bn_var"))
}

pub fn init_params<T: Float>(cfg: &BackboneConfig, rng: &mut impl Rng, params: &mut Params<T>) {
    for spec in block_specs(cfg) {
        RepVggBlock::<T>::init(rng, &spec).write_params(params, &spec.prefix());
    }
}

/// Replaces every multi-branch block by its fused kernel (`{prefix}.fused.kernel|bias`).
pub fn fuse_params<T: Float>(cfg: &BackboneConfig, params: &Params<T>) -> Result<Params<T>> {
    let mut out = Params::new();
    for (name, t) in params.iter() {
        if !name.starts_with("backbone.") {
            out.insert(name.clone(), t.clone());
        }
    }
    for spec in block_specs(cfg) {
        let fused = RepVggBlock::from_params(params, &spec)?.fuse()?;
        out.insert(format!("{}.fused.kernel", spec.prefix()), fused.kernel);
        out.insert(format!("{}.fused.bias", spec.prefix()), fused.bias);
    }
    Ok(out)
}

/// True when `params` holds deployment kernels for every block.
pub fn is_fused<T: Float>(cfg: &BackboneConfig, params: &Params<T>) -> bool {
    block_specs(cfg).iter().all(|s| params.contains(&format!("{}.fused.kernel", s.prefix())))
}

/// Backbone outputs at 1/2, 1/4 and 1/8 resolution.
#[derive(Clone, Debug)]
pub struct Pyramid<V> {
    pub half: V,
    pub quarter: V,
    pub coarse: V,
}

pub type FeaturePyramid<T = f32> = Pyramid<Tensor<T>>;

fn check_image(shape: &[usize]) -> Result<()> {
    match shape {
        [1, h, w] if h % 8 == 0 && w % 8 == 0 && *h > 0 && *w > 0 => Ok(()),
        [1, h, w] => Err(Error::Input(format!("image {w}x{h} is not a positive multiple of 8; pad first"))),
        _ => Err(Error::Input(format!("expected a [1, H, W] grayscale map, got {shape:?}"))),
    }
}

fn collect<T: Float>(cfg: &BackboneConfig, ctx: &mut Ctx<'_, T>, x: Var, mut step: impl FnMut(&mut Ctx<'_, T>, &BlockSpec, Var) -> Result<Var>) -> Result<Pyramid<Var>> {
    check_image(ctx.g.shape(x))?;
    let mut cur = x;
    let mut outs = [x; 4];
    for spec in block_specs(cfg) {
        cur = step(ctx, &spec, cur)?;
        outs[spec.stage] = cur;
    }
    Ok(Pyramid { half: outs[1], quarter: outs[2], coarse: outs[3] })
}

fn bn_graph<T: Float>(ctx: &mut Ctx<'_, T>, p: &str, x: Var, c: usize) -> Result<Var> {
    let stat = |ctx: &mut Ctx<'_, T>, f: &str| -> Result<Tensor<T>> { Ok(ctx.params().get(&format!("{p}.{f}"))?.clone()) };
    let mean = stat(ctx, "bn_mean")?;
    let var = stat(ctx, "bn_var")?;
    let inv_std = ctx.constant(var.map(|v| T::one() / (v + T::lit(BN_EPS)).sqrt()).into_shape([c, 1, 1])?);
    let mean = ctx.constant(mean.into_shape([c, 1, 1])?);
    let scale = ctx.w(&format!("{p}.bn_scale"))?;
    let shift = ctx.w(&format!("{p}.bn_shift"))?;
    let scale = ctx.g.reshape(scale, &[c, 1, 1])?;
    let shift = ctx.g.reshape(shift, &[c, 1, 1])?;
    let a = ctx.g.mul(scale, inv_std)?;
    let am = ctx.g.mul(a, mean)?;
    let off = ctx.g.sub(shift, am)?;
    let y = ctx.g.mul(x, a)?;
    Ok(ctx.g.add(y, off)?)
}

/// Multi-branch forward recorded on the graph.
pub fn forward_train_graph<T: Float>(cfg: &BackboneConfig, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Pyramid<Var>> {
    collect(cfg, ctx, image, |ctx, spec, x| {
        let p = spec.prefix();
        let mut sum = None;
        for (name, pad) in [("conv3x3", 1), ("conv1x1", 0)] {
            let k = ctx.w(&format!("{p}.{name}.kernel"))?;
            let b = ctx.w(&format!("{p}.{name}.bias"))?;
            let y = ctx.g.conv2d(x, k, Some(b), spec.stride, pad)?;
            let y = bn_graph(ctx, &format!("{p}.{name}"), y, spec.out_c)?;
            sum = Some(match sum {
                None => y,
                Some(s) => ctx.g.add(s, y)?,
            });
        }
        let mut s = sum.expect("two branches");
        if spec.has_identity() {
            let id = bn_graph(ctx, &format!("{p}.identity"), x, spec.out_c)?;
            s = ctx.g.add(s, id)?;
        }
        Ok(ctx.g.relu(s)?)
    })
}

/// Single-convolution forward recorded on the graph; needs fused parameters.
pub fn forward_deploy_graph<T: Float>(cfg: &BackboneConfig, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Pyramid<Var>> {
    collect(cfg, ctx, image, |ctx, spec, x| {
        let p = spec.prefix();
        let k = ctx.w(&format!("{p}.fused.kernel"))?;
        let b = ctx.w(&format!("{p}.fused.bias"))?;
        let (ks, cin) = (ctx.g.shape(k).to_vec(), ctx.g.shape(x)[0]);
        if ks != [spec.out_c, cin, 3, 3] {
            return Err(Error::TensorShape { name: format!("{p}.fused.kernel"), got: ks, want: vec![spec.out_c, cin, 3, 3] });
        }
        let y = ctx.g.conv2d(x, k, Some(b), spec.stride, 1)?;
        Ok(ctx.g.relu(y)?)
    })
}

fn run<T: Float>(
    cfg: &BackboneConfig,
    params: &Params<T>,
    image: &Tensor<T>,
    f: fn(&BackboneConfig, &mut Ctx<'_, T>, Var) -> Result<Pyramid<Var>>,
) -> Result<FeaturePyramid<T>> {
    let mut ctx = Ctx::new(params, false);
    let x = ctx.constant(image.clone());
    let p = f(cfg, &mut ctx, x)?;
    Ok(Pyramid { half: ctx.g.value(p.half).clone(), quarter: ctx.g.value(p.quarter).clone(), coarse: ctx.g.value(p.coarse).clone() })
}

/// Training-mode pyramid of a `[1, H, W]` image with `H`, `W` multiples of 8.
pub fn forward_train<T: Float>(cfg: &BackboneConfig, params: &Params<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
    run(cfg, params, image, forward_train_graph)
}

/// Deployment-mode pyramid; `params` must come from [`fuse_params`].
pub fn forward_deploy<T: Float>(cfg: &BackboneConfig, params: &Params<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
    run(cfg, params, image, forward_deploy_graph)
}
