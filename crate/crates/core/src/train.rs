//! Differentiable training losses and the toy training loop.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semidense_tensor::{Float, Gradients, Tensor, Var};

use crate::backbone::{forward_train_graph, is_frozen_stat};
use crate::config::{parse_value, ModelConfig};
use crate::error::{Error, Result};
use crate::fine::{fuse_fine_graph, patch_gather_index, patch_origin, stage1_from_scores, Bounds, WINDOW};
use crate::geometry::{Homography, Point};
use crate::io::LossRecord;
use crate::model::init_params;
use crate::params::{Ctx, Params};
use crate::supervision::{build_gt_homography, LossWeights, PROB_FLOOR};
use crate::synth::SynthPair;
use crate::transform::{to_tokens, transform_graph};

/// Additive score for masked entries; large enough that `exp` underflows to 0.
const MASK: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    /// Pairs per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            steps: 2000,
            batch: 1,
            lr: 4e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 100,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Toy defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_pairs(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.model.apply(kv)?;
        for (k, v) in kv {
            match k.as_str() {
                "steps" => c.steps = parse_value(k, v)?,
                "batch" => c.batch = parse_value(k, v)?,
                "lr" => c.lr = parse_value(k, v)?,
                "weight_decay" => c.weight_decay = parse_value(k, v)?,
                "beta1" => c.beta1 = parse_value(k, v)?,
                "beta2" => c.beta2 = parse_value(k, v)?,
                "eps" => c.eps = parse_value(k, v)?,
                "warmup" => c.warmup = parse_value(k, v)?,
                "alpha" => c.loss.alpha = parse_value(k, v)?,
                "beta" => c.loss.beta = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "preset" | "widths" | "blocks" | "n_layers" | "n_heads" | "agg" | "d_fine" | "patch" | "inv_temp" | "tau" => {}
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Loss terms of one pair on the graph. Fine terms are absent when no
/// target survives the patch and image bounds.
#[derive(Clone, Copy, Debug)]
pub struct PairLoss {
    pub l_c: Var,
    pub l_f1: Option<Var>,
    pub l_f2: Option<Var>,
}

fn apply_h(h: &Homography, x: i64, y: i64) -> Option<Point> {
    h.apply((x as f64, y as f64)).filter(|q| q.0.is_finite() && q.1.is_finite())
}

fn inside(x: i64, y: i64, b: Bounds) -> bool {
    x >= 0 && y >= 0 && (x as usize) < b.0 && (y as usize) < b.1
}

/// Records the three losses of one pair. Coarse pairs are the ground-truth
/// cells (teacher forcing), so the fine terms see every supervised cell.
pub fn pair_loss_graph<T: Float>(cfg: &ModelConfig, ctx: &mut Ctx<'_, T>, a: &Tensor<T>, b: &Tensor<T>, h: &Homography) -> Result<Option<PairLoss>> {
    let (_, ha, wa) = a.dims3()?;
    let (_, hb, wb) = b.dims3()?;
    let m = cfg.pad_multiple();
    if ha % m != 0 || wa % m != 0 || hb % m != 0 || wb % m != 0 {
        return Err(Error::Input(format!("training images must be multiples of {m} pixels")));
    }
    let (bounds_a, bounds_b) = ((wa, ha), (wb, hb));
    let gt = build_gt_homography(h, bounds_a, bounds_b)?;
    if gt.coarse_pairs.is_empty() {
        return Ok(None);
    }

    let ia = ctx.constant(a.clone());
    let ib = ctx.constant(b.clone());
    let pa = forward_train_graph(&cfg.backbone, ctx, ia)?;
    let pb = forward_train_graph(&cfg.backbone, ctx, ib)?;
    let (ta, tb) = transform_graph(cfg, ctx, pa.coarse, pb.coarse)?;

    // Coarse: dual-softmax of scaled correlations, -log P at ground-truth cells.
    let c = ctx.g.shape(ta)[0];
    let tok_a = to_tokens(ctx, ta)?;
    let tok_b = to_tokens(ctx, tb)?;
    let n_b = gt.grid_b.0 * gt.grid_b.1;
    let s = ctx.g.matmul(tok_a, tok_b, false, true)?;
    let s = ctx.g.scale(s, T::lit(cfg.inv_temp as f64 / c as f64))?;
    let rows = ctx.g.softmax(s, 1)?;
    let cols = ctx.g.softmax(s, 0)?;
    let p = ctx.g.mul(rows, cols)?;
    let idx = gt.coarse_pairs.iter().map(|&(i, j)| Some(i * n_b + j)).collect();
    let picked = ctx.g.gather(p, idx, &[gt.coarse_pairs.len()])?;
    let logs = ctx.g.log_clamped(picked, T::lit(PROB_FLOOR))?;
    let mean = ctx.g.mean(logs)?;
    let l_c = ctx.g.scale(mean, -T::one())?;

    // Fine stage 1: batched local dual-softmax over all pixel correspondences.
    let fa = fuse_fine_graph(ctx, ta, pa.quarter, pa.half)?;
    let fb = fuse_fine_graph(ctx, tb, pb.quarter, pb.half)?;
    let dims_a = {
        let s = ctx.g.shape(fa);
        (s[0], s[1], s[2])
    };
    let dims_b = {
        let s = ctx.g.shape(fb);
        (s[0], s[1], s[2])
    };
    let d = dims_a.0;
    let w = cfg.patch;
    let ww = w * w;
    let mm = gt.coarse_pairs.len();
    let mut idx_a = Vec::with_capacity(mm * ww * d);
    let mut idx_b = Vec::with_capacity(mm * ww * d);
    let mut origins = Vec::with_capacity(mm);
    for &(i, j) in &gt.coarse_pairs {
        let oa = patch_origin(i, gt.grid_a.0, w);
        let ob = patch_origin(j, gt.grid_b.0, w);
        idx_a.extend(patch_gather_index(dims_a, oa, w, bounds_a));
        idx_b.extend(patch_gather_index(dims_b, ob, w, bounds_b));
        origins.push((oa, ob));
    }
    let valid = |o: (i64, i64), k: usize, b: Bounds| inside(o.0 + (k % w) as i64, o.1 + (k / w) as i64, b);
    let patch_a = ctx.g.gather(fa, idx_a, &[mm, ww, d])?;
    let patch_b = ctx.g.gather(fb, idx_b, &[mm, ww, d])?;
    let sl = ctx.g.matmul(patch_a, patch_b, false, true)?;
    let sl = ctx.g.scale(sl, T::lit(1.0 / (d as f64).sqrt()))?;
    let mask = Tensor::from_fn([mm, ww, ww], |ix| {
        let (oa, ob) = origins[ix[0]];
        if valid(oa, ix[1], bounds_a) && valid(ob, ix[2], bounds_b) {
            T::zero()
        } else {
            T::lit(MASK)
        }
    });
    let mask = ctx.constant(mask);
    let slm = ctx.g.add(sl, mask)?;
    let rows = ctx.g.softmax(slm, 2)?;
    let cols = ctx.g.softmax(slm, 1)?;
    let pl = ctx.g.mul(rows, cols)?;
    let mut targets = Vec::new();
    for (k, &(oa, ob)) in origins.iter().enumerate() {
        for pa_i in (0..ww).filter(|&p| valid(oa, p, bounds_a)) {
            let Some(q) = apply_h(h, oa.0 + (pa_i % w) as i64, oa.1 + (pa_i / w) as i64) else { continue };
            let (qx, qy) = (q.0.round() as i64 - ob.0, q.1.round() as i64 - ob.1);
            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= w as i64 {
                continue;
            }
            let pb_i = qy as usize * w + qx as usize;
            if valid(ob, pb_i, bounds_b) {
                targets.push(Some((k * ww + pa_i) * ww + pb_i));
            }
        }
    }
    let l_f1 = if targets.is_empty() {
        None
    } else {
        let n = targets.len();
        let picked = ctx.g.gather(pl, targets, &[n])?;
        let logs = ctx.g.log_clamped(picked, T::lit(PROB_FLOOR))?;
        let mean = ctx.g.mean(logs)?;
        Some(ctx.g.scale(mean, -T::one())?)
    };

    // Fine stage 2: 3x3 window around the warped stage-1 pixel, target is the exact warp.
    let sl_val = ctx.g.value(sl).clone();
    let mut fa_idx = Vec::new();
    let mut win_idx = Vec::new();
    let mut win_mask = Vec::new();
    let mut centres = Vec::new();
    let mut goals = Vec::new();
    for (k, &(oa, ob)) in origins.iter().enumerate() {
        let scores = Tensor::new([ww, ww], sl_val.data()[k * ww * ww..(k + 1) * ww * ww].to_vec())?;
        let va: Vec<bool> = (0..ww).map(|p| valid(oa, p, bounds_a)).collect();
        let vb: Vec<bool> = (0..ww).map(|p| valid(ob, p, bounds_b)).collect();
        let Some(s1) = stage1_from_scores(&scores, &va, &vb)? else { continue };
        let (ax, ay) = (oa.0 + (s1.a % w) as i64, oa.1 + (s1.a / w) as i64);
        let Some(q) = apply_h(h, ax, ay) else { continue };
        if !(q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (wb - 1) as f64 && q.1 <= (hb - 1) as f64) {
            continue;
        }
        let (cx, cy) = (q.0.round() as i64, q.1.round() as i64);
        let (d_a, h_a, w_a) = dims_a;
        fa_idx.extend((0..d_a).map(|ch| Some((ch * h_a + ay as usize) * w_a + ax as usize)));
        let (_, h_b, w_b) = dims_b;
        for &(u, v) in &WINDOW {
            let (x, y) = (cx + u, cy + v);
            let ok = inside(x, y, bounds_b);
            win_mask.push(if ok { T::zero() } else { T::lit(MASK) });
            win_idx.extend((0..d).map(|ch| ok.then(|| (ch * h_b + y as usize) * w_b + x as usize)));
        }
        centres.extend([T::lit(cx as f64), T::lit(cy as f64)]);
        goals.extend([T::lit(q.0), T::lit(q.1)]);
    }
    let m2 = centres.len() / 2;
    let l_f2 = if m2 == 0 {
        None
    } else {
        let feat = ctx.g.gather(fa, fa_idx, &[m2, 1, d])?;
        let win = ctx.g.gather(fb, win_idx, &[m2, 9, d])?;
        let sc = ctx.g.matmul(feat, win, false, true)?;
        let sc = ctx.g.scale(sc, T::lit(1.0 / (d as f64).sqrt()))?;
        let sc = ctx.g.reshape(sc, &[m2, 9])?;
        let wm = ctx.constant(Tensor::new([m2, 9], win_mask)?);
        let sc = ctx.g.add(sc, wm)?;
        let prob = ctx.g.softmax(sc, 1)?;
        let offsets = ctx.constant(Tensor::from_fn([9, 2], |ix| T::lit(if ix[1] == 0 { WINDOW[ix[0]].0 } else { WINDOW[ix[0]].1 } as f64)));
        let e = ctx.g.matmul(prob, offsets, false, false)?;
        let base = ctx.constant(Tensor::new([m2, 2], centres)?);
        let pred = ctx.g.add(e, base)?;
        let goal = ctx.constant(Tensor::new([m2, 2], goals)?);
        let diff = ctx.g.sub(pred, goal)?;
        let sq = ctx.g.mul(diff, diff)?;
        let total = ctx.g.sum(sq)?;
        Some(ctx.g.scale(total, T::lit(1.0 / m2 as f64))?)
    };
    Ok(Some(PairLoss { l_c, l_f1, l_f2 }))
}

/// Batch loss on the graph plus the per-term means for logging.
pub struct BatchLoss {
    pub total: Var,
    pub l_c: f64,
    pub l_f1: f64,
    pub l_f2: f64,
}

/// Mean of the per-pair weighted totals. Missing fine terms contribute nothing;
/// `None` when no pair in the batch has coarse ground truth.
pub fn batch_loss_graph<T: Float>(cfg: &ModelConfig, weights: &LossWeights, ctx: &mut Ctx<'_, T>, pairs: &[(&Tensor<T>, &Tensor<T>, &Homography)]) -> Result<Option<BatchLoss>> {
    let mut totals = Vec::new();
    let (mut sc, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &(a, b, h) in pairs {
        let Some(pl) = pair_loss_graph(cfg, ctx, a, b, h)? else { continue };
        sc += ctx.g.scalar(pl.l_c).to_f64();
        let mut t = pl.l_c;
        if let Some(f1) = pl.l_f1 {
            s1 += ctx.g.scalar(f1).to_f64();
            let f1 = ctx.g.scale(f1, T::lit(weights.alpha))?;
            t = ctx.g.add(t, f1)?;
        }
        if let Some(f2) = pl.l_f2 {
            s2 += ctx.g.scalar(f2).to_f64();
            let f2 = ctx.g.scale(f2, T::lit(weights.beta))?;
            t = ctx.g.add(t, f2)?;
        }
        totals.push(t);
    }
    if totals.is_empty() {
        return Ok(None);
    }
    let n = totals.len();
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = ctx.g.add(total, t)?;
    }
    let total = ctx.g.scale(total, T::lit(1.0 / n as f64))?;
    let k = n as f64;
    Ok(Some(BatchLoss { total, l_c: sc / k, l_f1: s1 / k, l_f2: s2 / k }))
}

/// Scalar batch loss and gradients for every bound trainable parameter.
pub fn loss_and_grads<T: Float>(cfg: &ModelConfig, weights: &LossWeights, params: &Params<T>, pairs: &[(&Tensor<T>, &Tensor<T>, &Homography)]) -> Result<Option<(f64, HashMap<String, Tensor<T>>)>> {
    let mut ctx = Ctx::new(params, true);
    let Some(bl) = batch_loss_graph(cfg, weights, &mut ctx, pairs)? else { return Ok(None) };
    let value = ctx.g.scalar(bl.total).to_f64();
    let mut grads: Gradients<T> = ctx.g.backward(bl.total)?;
    let out = ctx.bound().filter_map(|(name, &v)| Some((name.clone(), grads.take(v)?))).collect();
    Ok(Some((value, out)))
}

/// Forward-only batch loss; `None` when no pair has coarse ground truth.
pub fn loss_value<T: Float>(cfg: &ModelConfig, weights: &LossWeights, params: &Params<T>, pairs: &[(&Tensor<T>, &Tensor<T>, &Homography)]) -> Result<Option<f64>> {
    let mut ctx = Ctx::new(params, false);
    Ok(batch_loss_graph(cfg, weights, &mut ctx, pairs)?.map(|bl| ctx.g.scalar(bl.total).to_f64()))
}

/// Central-difference agreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    /// Elements compared.
    pub sampled: usize,
    /// `|fd - analytic| / max(|fd|, |analytic|)` over the sampled elements,
    /// as vectors; zero when both vanish.
    pub rel_norm_error: f64,
}

/// Compares the analytic gradient of the batch loss with central differences
/// of step `h`, on up to `per_tensor` seeded elements of every trainable tensor.
pub fn pipeline_gradcheck(
    cfg: &ModelConfig,
    weights: &LossWeights,
    params: &Params<f64>,
    pairs: &[(&Tensor<f64>, &Tensor<f64>, &Homography)],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let Some((_, grads)) = loss_and_grads(cfg, weights, params, pairs)? else {
        return Err(Error::EmptyGroundTruth("gradient check pair has no coarse ground truth"));
    };
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let g = &grads[name];
        let n = g.numel();
        let idx: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { rand::seq::index::sample(&mut rng, n, per_tensor).into_vec() };
        let (mut num, mut den_fd, mut den_an) = (0.0, 0.0, 0.0);
        for &k in &idx {
            let orig = work.get(name)?.data()[k];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(name)?.data_mut()[k] = v;
                loss_value(cfg, weights, &work, pairs)?.ok_or(Error::EmptyGroundTruth("ground truth vanished under perturbation"))
            };
            let fd = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            work.get_mut(name)?.data_mut()[k] = orig;
            let an = g.data()[k];
            num += (fd - an).powi(2);
            den_fd += fd * fd;
            den_an += an * an;
        }
        let den = den_fd.max(den_an).sqrt();
        let rel_norm_error = if den == 0.0 { 0.0 } else { num.sqrt() / den };
        out.push(GroupCheck { name: name.clone(), sampled: idx.len(), rel_norm_error });
    }
    Ok(out)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, step: 0, moments: HashMap::new() }
    }

    /// One update at learning rate `lr`. Frozen statistics and parameters
    /// without a gradient are left untouched, as is everything when `lr` is 0.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &HashMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            if is_frozen_stat(name) {
                continue;
            }
            let g = &grads[name];
            let p = params.get_mut(name)?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                if lr == 0.0 {
                    continue;
                }
                let upd = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps) + self.weight_decay * *pv as f64;
                *pv = (*pv as f64 - lr * upd) as f32;
            }
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step` under linear warmup.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup == 0 || step >= cfg.warmup {
        cfg.lr
    } else {
        cfg.lr * (step + 1) as f64 / cfg.warmup as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: Params<f32>,
    pub curve: Vec<LossRecord>,
}

/// Trains `params` in place for `cfg.steps` steps over `data`, visiting the
/// pairs in a seeded shuffled order. Stops with an error on a non-finite loss.
pub fn train(mut params: Params<f32>, data: &[SynthPair], cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(cfg);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let p = &data[order.pop().expect("refilled")];
            batch.push((&p.a, &p.b, &p.h));
        }
        let diag = |e: Error| -> Error {
            if e.is_numeric() {
                Error::NonFinite(format!("training diverged at step {step}: {e}"))
            } else {
                e
            }
        };
        let mut ctx = Ctx::new(&params, true);
        let Some(bl) = batch_loss_graph(&cfg.model, &cfg.loss, &mut ctx, &batch).map_err(diag)? else { continue };
        let total = ctx.g.scalar(bl.total) as f64;
        let rec = LossRecord { step, l_c: bl.l_c, l_f1: bl.l_f1, l_f2: bl.l_f2, total };
        if !(rec.total.is_finite() && rec.l_c.is_finite() && rec.l_f1.is_finite() && rec.l_f2.is_finite()) {
            return Err(Error::NonFinite(format!("training diverged at step {step}: loss {rec:?}")));
        }
        let mut grads = ctx.g.backward(bl.total).map_err(|e| diag(e.into()))?;
        let named: HashMap<String, Tensor<f32>> = ctx.bound().filter_map(|(n, &v)| Some((n.clone(), grads.take(v)?))).collect();
        drop(ctx);
        opt.step(&mut params, &named, lr_at(cfg, step))?;
        on_step(&rec);
        curve.push(rec);
    }
    Ok(TrainOutput { params, curve })
}

/// Fresh parameters from `cfg.seed`, then [`train`].
pub fn train_toy(data: &[SynthPair], cfg: &TrainConfig, on_step: impl FnMut(&LossRecord)) -> Result<TrainOutput> {
    train(init_params(&cfg.model, cfg.seed), data, cfg, on_step)
}

/// Means of `k` equal consecutive blocks of the total loss.
pub fn block_means(curve: &[LossRecord], k: usize) -> Vec<f64> {
    let n = curve.len() / k;
    (0..k).map(|i| curve[i * n..(i + 1) * n].iter().map(|r| r.total).sum::<f64>() / n as f64).collect()
}
