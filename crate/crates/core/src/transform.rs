//! Aggregated-attention feature transformer.
//!
//! A block reduces the target map to query tokens with a strided depthwise
//! convolution and the source map to key/value tokens with max pooling, runs
//! multi-head attention on the reduced sets, upsamples the result back to the
//! coarse grid and merges it into the target map.

use rand::Rng;
use semidense_tensor::{depthwise_conv2d, maxpool2d, Float, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{normal, Ctx, Params};
use crate::rope::rope_graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    SelfAttn,
    Cross,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::SelfAttn => "self",
            Kind::Cross => "cross",
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

pub fn block_prefix(layer: usize, kind: Kind) -> String {
    format!("transform.layer{layer}.{}", kind.name())
}

pub fn init_params<T: Float>(cfg: &ModelConfig, rng: &mut impl Rng, params: &mut Params<T>) {
    let c = cfg.d_model();
    let s = cfg.agg;
    for layer in 0..cfg.n_layers {
        for kind in [Kind::SelfAttn, Kind::Cross] {
            let p = block_prefix(layer, kind);
            let avg = T::lit(1.0 / (s * s) as f64);
            let jitter: Tensor<T> = normal(rng, &[c, s, s], 0.1 / (s * s) as f64);
            params.insert(format!("{p}.agg_conv.kernel"), jitter.map(|v| v + avg));
            params.insert(format!("{p}.agg_conv.bias"), Tensor::zeros([c]));
            for n in ["norm1", "norm2"] {
                params.insert(format!("{p}.{n}.gamma"), Tensor::ones([c]));
                params.insert(format!("{p}.{n}.beta"), Tensor::zeros([c]));
            }
            let proj = (1.0 / c as f64).sqrt();
            for n in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                params.insert(format!("{p}.{n}.weight"), normal(rng, &[c, c], proj));
            }
            params.insert(format!("{p}.merge.weight"), normal(rng, &[c, 2 * c, 1, 1], (1.0 / (2 * c) as f64).sqrt()));
            params.insert(format!("{p}.ffn.fc1.weight"), normal(rng, &[2 * c, c], (2.0 / c as f64).sqrt()));
            params.insert(format!("{p}.ffn.fc1.bias"), Tensor::zeros([2 * c]));
            params.insert(format!("{p}.ffn.fc2.weight"), normal(rng, &[c, 2 * c], 0.5 * (1.0 / (2 * c) as f64).sqrt()));
            params.insert(format!("{p}.ffn.fc2.bias"), Tensor::zeros([c]));
        }
    }
}

fn check_grid(op: &str, h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Input(format!("{op}: {h}x{w} grid is not divisible by aggregation range {s}")));
    }
    Ok(())
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub(crate) fn to_tokens<T: Float>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    let flat = ctx.g.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok(ctx.g.transpose(flat)?)
}

/// `[H*W, C]` tokens back to a `[C, H, W]` map.
pub(crate) fn to_map<T: Float>(ctx: &mut Ctx<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let t = ctx.g.transpose(tokens)?;
    let c = ctx.g.shape(t)[0];
    Ok(ctx.g.reshape(t, &[c, h, w])?)
}

/// Query tokens from a learned strided depthwise convolution and key/value
/// tokens from max pooling, both `[H*W/s^2, C]`.
pub fn aggregate_tokens<T: Float>(
    f: &Tensor<T>,
    s: usize,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = f.dims3()?;
    check_grid("aggregate_tokens", h, w, s)?;
    let q = depthwise_conv2d(f, kernel, bias, s, 0)?;
    let (kv, _) = maxpool2d(f, s, s)?;
    let n = (h / s) * (w / s);
    Ok((q.into_shape([c, n])?.transpose2()?, kv.into_shape([c, n])?.transpose2()?))
}

fn linear<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = ctx.w(&format!("{name}.weight"))?;
    let y = ctx.g.matmul(x, w, false, true)?;
    if !bias {
        return Ok(y);
    }
    let b = ctx.w(&format!("{name}.bias"))?;
    let n = ctx.g.shape(b)[0];
    let b = ctx.g.reshape(b, &[1, n])?;
    Ok(ctx.g.add(y, b)?)
}

fn layer_norm<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, name: &str) -> Result<Var> {
    let g = ctx.w(&format!("{name}.gamma"))?;
    let b = ctx.w(&format!("{name}.beta"))?;
    Ok(ctx.g.layer_norm(x, g, b, T::lit(LN_EPS))?)
}

fn split_heads<T: Float>(ctx: &mut Ctx<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let (n, c) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
    let r = ctx.g.reshape(x, &[n, heads, c / heads])?;
    Ok(ctx.g.permute(r, &[1, 0, 2])?)
}

/// Token positions on a `gh x gw` aggregated grid, in coarse-cell units.
pub fn token_positions(gh: usize, gw: usize, s: usize, offset: (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            out.push(((s * c) as f64 + offset.0, (s * r) as f64 + offset.1));
        }
    }
    out
}

/// Multi-head attention of query tokens over key/value tokens, including the
/// output projection. Rotary encoding is applied to queries and keys only
/// when `positions` is given.
pub fn attend<T: Float>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    q_tok: Var,
    kv_tok: Var,
    heads: usize,
    positions: Option<(&[(f64, f64)], &[(f64, f64)])>,
) -> Result<Var> {
    let mut q = linear(ctx, q_tok, &format!("{prefix}.q_proj"), false)?;
    let mut k = linear(ctx, kv_tok, &format!("{prefix}.k_proj"), false)?;
    let v = linear(ctx, kv_tok, &format!("{prefix}.v_proj"), false)?;
    if let Some((pq, pk)) = positions {
        q = rope_graph(&mut ctx.g, q, pq)?;
        k = rope_graph(&mut ctx.g, k, pk)?;
    }
    let (n, c) = (ctx.g.shape(q)[0], ctx.g.shape(q)[1]);
    let qh = split_heads(ctx, q, heads)?;
    let kh = split_heads(ctx, k, heads)?;
    let vh = split_heads(ctx, v, heads)?;
    let scale = T::lit(1.0 / ((c / heads) as f64).sqrt());
    let o = ctx.g.attention(qh, kh, vh, Some(scale))?;
    let o = ctx.g.permute(o, &[1, 0, 2])?;
    let o = ctx.g.reshape(o, &[n, c])?;
    linear(ctx, o, &format!("{prefix}.out_proj"), false)
}

/// One aggregated attention block; returns a map shaped like `target`.
///
/// `pos_offset` shifts all token positions of both maps; with rotary
/// encoding the output does not depend on it.
pub fn agg_attention_block<T: Float>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    kind: Kind,
    target: Var,
    source: Var,
    s: usize,
    heads: usize,
    pos_offset: (f64, f64),
) -> Result<Var> {
    let ts = ctx.g.shape(target).to_vec();
    let ss = ctx.g.shape(source).to_vec();
    if ts.len() != 3 || ss.len() != 3 || ts[0] != ss[0] {
        return Err(Error::Input(format!("attention block: target {ts:?} and source {ss:?} must be [C, H, W] with equal C")));
    }
    if kind == Kind::SelfAttn && ts != ss {
        return Err(Error::Input("self attention needs source == target".into()));
    }
    let (c, h, w) = (ts[0], ts[1], ts[2]);
    check_grid("attention block", h, w, s)?;
    check_grid("attention block", ss[1], ss[2], s)?;
    if c % heads != 0 {
        return Err(Error::Input(format!("{c} channels not divisible by {heads} heads")));
    }
    let kern = ctx.w(&format!("{prefix}.agg_conv.kernel"))?;
    let bias = ctx.w(&format!("{prefix}.agg_conv.bias"))?;
    let qmap = ctx.g.depthwise_conv2d(target, kern, Some(bias), s, 0)?;
    let kvmap = ctx.g.maxpool2d(source, s, s)?;
    let q_tok = to_tokens(ctx, qmap)?;
    let kv_tok = to_tokens(ctx, kvmap)?;
    let q_tok = layer_norm(ctx, q_tok, &format!("{prefix}.norm1"))?;
    let kv_tok = layer_norm(ctx, kv_tok, &format!("{prefix}.norm1"))?;
    let (gh, gw) = (h / s, w / s);
    let pq = token_positions(gh, gw, s, pos_offset);
    let pk = token_positions(ss[1] / s, ss[2] / s, s, pos_offset);
    let positions = (kind == Kind::SelfAttn).then_some((&pq[..], &pk[..]));
    let msg = attend(ctx, prefix, q_tok, kv_tok, heads, positions)?;
    let msg = to_map(ctx, msg, gh, gw)?;
    let up = ctx.g.upsample(msg, s)?;
    let cat = ctx.g.concat(&[target, up], 0)?;
    let mw = ctx.w(&format!("{prefix}.merge.weight"))?;
    let m = ctx.g.conv2d(cat, mw, None, 1, 0)?;
    let mt = to_tokens(ctx, m)?;
    let mt = layer_norm(ctx, mt, &format!("{prefix}.norm2"))?;
    let hdn = linear(ctx, mt, &format!("{prefix}.ffn.fc1"), true)?;
    let hdn = ctx.g.relu(hdn)?;
    let out = linear(ctx, hdn, &format!("{prefix}.ffn.fc2"), true)?;
    let out = to_map(ctx, out, h, w)?;
    Ok(ctx.g.add(target, out)?)
}

/// `n_layers` rounds of self(A), self(B), then simultaneous cross(A<-B), cross(B<-A).
pub fn transform_graph<T: Float>(cfg: &ModelConfig, ctx: &mut Ctx<'_, T>, fa: Var, fb: Var) -> Result<(Var, Var)> {
    if ctx.g.shape(fa)[0] != ctx.g.shape(fb)[0] {
        return Err(Error::Input("transform: channel dims differ".into()));
    }
    let (mut a, mut b) = (fa, fb);
    for layer in 0..cfg.n_layers {
        let p = block_prefix(layer, Kind::SelfAttn);
        a = agg_attention_block(ctx, &p, Kind::SelfAttn, a, a, cfg.agg, cfg.n_heads, (0.0, 0.0))?;
        b = agg_attention_block(ctx, &p, Kind::SelfAttn, b, b, cfg.agg, cfg.n_heads, (0.0, 0.0))?;
        let p = block_prefix(layer, Kind::Cross);
        let na = agg_attention_block(ctx, &p, Kind::Cross, a, b, cfg.agg, cfg.n_heads, (0.0, 0.0))?;
        let nb = agg_attention_block(ctx, &p, Kind::Cross, b, a, cfg.agg, cfg.n_heads, (0.0, 0.0))?;
        a = na;
        b = nb;
    }
    Ok((a, b))
}

/// Inference wrapper around [`transform_graph`].
pub fn transform<T: Float>(cfg: &ModelConfig, params: &Params<T>, fa: &Tensor<T>, fb: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut ctx = Ctx::new(params, false);
    let a = ctx.constant(fa.clone());
    let b = ctx.constant(fb.clone());
    let (a, b) = transform_graph(cfg, &mut ctx, a, b)?;
    Ok((ctx.g.value(a).clone(), ctx.g.value(b).clone()))
}
