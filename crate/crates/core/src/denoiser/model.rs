//! Forward and backward passes of the denoiser.
//!
//! A latent is cut into square patches, one token per patch. Each block is
//! `group-norm → self-attention → group-norm → cross-attention →
//! group-norm → MLP`, every stage with a residual connection. The timestep
//! embedding is added to every token before the first block.

use ndarray::{s, Array2, Axis, Zip};

use super::config::DenoiserConfig;
use super::weights::{DenoiserWeights, NormParams};
use super::Condition;
use crate::attention::{
    attention_backward, attention_forward, AttentionCache, AttentionHook, AttentionSiteId,
    AttnWeights, SiteKind,
};
use crate::error::{Error, Result};
use crate::real::{c, Real};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Sinusoidal embedding of a timestep, `width` entries.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

pub(crate) fn patchify<F: Real>(z: &Tensor, cfg: &DenoiserConfig) -> Result<Array2<F>> {
    if z.shape() != cfg.latent_shape() {
        return Err(Error::Shape(format!(
            "latent shape {:?} does not match model shape {:?}",
            z.shape(),
            cfg.latent_shape()
        )));
    }
    let (p, side, size) = (cfg.patch_size, cfg.patches_per_side(), cfg.latent_size);
    let data = z.data();
    Ok(Array2::from_shape_fn((cfg.tokens(), cfg.patch_dim()), |(tok, feat)| {
        let (py, px) = (tok / side, tok % side);
        let (ch, dy, dx) = (feat / (p * p), (feat / p) % p, feat % p);
        F::of_f32(data[(ch * size + py * p + dy) * size + px * p + dx])
    }))
}

pub(crate) fn unpatchify<F: Real>(tokens: &Array2<F>, cfg: &DenoiserConfig) -> Result<Tensor> {
    let (p, side, size) = (cfg.patch_size, cfg.patches_per_side(), cfg.latent_size);
    let plane = size * size;
    Tensor::from_fn(&cfg.latent_shape(), |i| {
        let (ch, y, x) = (i / plane, (i % plane) / size, i % size);
        let tok = (y / p) * side + x / p;
        let feat = ch * p * p + (y % p) * p + x % p;
        tokens[[tok, feat]].as_f32()
    })
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub(crate) struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
}

/// Group norm over all tokens of a sequence; channels split into `groups`.
fn group_norm<F: Real>(x: &Array2<F>, p: &NormParams<F>, groups: usize) -> (Array2<F>, NormCache<F>) {
    let (n, w) = x.dim();
    let cg = w / groups;
    let count = c::<F>((n * cg) as f64);
    let mut xhat = Array2::zeros((n, w));
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let cols = s![.., g * cg..(g + 1) * cg];
        let xs = x.slice(cols);
        let mean = xs.sum() / count;
        let var = xs.mapv(|v| (v - mean) * (v - mean)).sum() / count;
        let inv = F::one() / (var + c(NORM_EPS)).sqrt();
        xhat.slice_mut(cols).assign(&xs.mapv(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
fn group_norm_backward<F: Real>(
    dy: &Array2<F>,
    p: &NormParams<F>,
    cache: &NormCache<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (n, w) = dy.dim();
    let groups = cache.inv_std.len();
    let cg = w / groups;
    let count = c::<F>((n * cg) as f64);
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &p.gain;
    let mut dx = Array2::zeros((n, w));
    for (g, &inv) in cache.inv_std.iter().enumerate() {
        let cols = s![.., g * cg..(g + 1) * cg];
        let d = dxhat.slice(cols);
        let xh = cache.xhat.slice(cols);
        let mean_d = d.sum() / count;
        let mean_dx = (&d * &xh).sum() / count;
        let mut out = dx.slice_mut(cols);
        Zip::from(&mut out)
            .and(&d)
            .and(&xh)
            .for_each(|o, &dv, &xv| *o = inv * (dv - mean_d - xv * mean_dx));
    }
    (dx, dgain, dbias)
}

pub(crate) struct BlockCache<F> {
    n_self: NormCache<F>,
    a_self: Array2<F>,
    att_self: AttentionCache<F>,
    n_cross: NormCache<F>,
    a_cross: Array2<F>,
    att_cross: AttentionCache<F>,
    n_mlp: NormCache<F>,
    a_mlp: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

pub(crate) struct ForwardCache<F> {
    patches: Array2<F>,
    time_in: Array2<F>,
    time_pre: Array2<F>,
    context: Array2<F>,
    condition: usize,
    blocks: Vec<BlockCache<F>>,
    n_out: NormCache<F>,
    a_out: Array2<F>,
}

fn self_weights<F>(b: &super::weights::BlockWeights<F>) -> AttnWeights<'_, F> {
    AttnWeights {
        wq: &b.self_wq,
        wk: &b.self_wk,
        wv: &b.self_wv,
        wo: &b.self_out.w,
        bo: &b.self_out.b,
    }
}

fn cross_weights<F>(b: &super::weights::BlockWeights<F>) -> AttnWeights<'_, F> {
    AttnWeights {
        wq: &b.cross_wq,
        wk: &b.cross_wk,
        wv: &b.cross_wv,
        wo: &b.cross_out.w,
        bo: &b.cross_out.b,
    }
}

pub(crate) fn context_for<F: Real>(
    w: &DenoiserWeights<F>,
    cfg: &DenoiserConfig,
    cond: Condition,
) -> Result<Array2<F>> {
    if cond.0 >= cfg.num_conditions {
        return Err(Error::Argument(format!(
            "condition id {} outside table of {} entries",
            cond.0, cfg.num_conditions
        )));
    }
    Ok(w
        .conditions
        .row(cond.0)
        .to_owned()
        .into_shape_with_order((cfg.context_tokens, cfg.context_dim))
        .expect("condition row has context_tokens * context_dim entries"))
}

/// Predicted noise in patch-token layout (`tokens × patch_dim`).
pub(crate) fn forward<F: Real>(
    w: &DenoiserWeights<F>,
    cfg: &DenoiserConfig,
    z: &Tensor,
    t: usize,
    cond: Condition,
    hook: Option<&dyn AttentionHook>,
) -> Result<(Array2<F>, ForwardCache<F>)> {
    let patches = patchify::<F>(z, cfg)?;
    let context = context_for(w, cfg, cond)?;
    let time_in = Array2::from_shape_vec(
        (1, cfg.width),
        timestep_embedding(t, cfg.width).into_iter().map(F::of_f64).collect(),
    )
    .expect("embedding has width entries");
    let time_pre = time_in.dot(&w.time.w) + &w.time.b;
    let time_emb = time_pre.mapv(silu);

    let mut h = patches.dot(&w.patch_in.w) + &w.patch_in.b + &w.position + &time_emb;
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for (layer, b) in w.blocks.iter().enumerate() {
        let (a_self, n_self) = group_norm(&h, &b.norm_self, cfg.norm_groups);
        let site = AttentionSiteId::new(layer, SiteKind::SelfAttention);
        let (out, att_self) = attention_forward(&a_self, &a_self, self_weights(b), cfg.heads, site, hook)?;
        h += &out;

        let (a_cross, n_cross) = group_norm(&h, &b.norm_cross, cfg.norm_groups);
        let site = AttentionSiteId::new(layer, SiteKind::CrossAttention);
        let (out, att_cross) = attention_forward(&a_cross, &context, cross_weights(b), cfg.heads, site, hook)?;
        h += &out;

        let (a_mlp, n_mlp) = group_norm(&h, &b.norm_mlp, cfg.norm_groups);
        let pre_act = a_mlp.dot(&b.mlp_in.w) + &b.mlp_in.b;
        let act = pre_act.mapv(silu);
        h += &(act.dot(&b.mlp_out.w) + &b.mlp_out.b);

        blocks.push(BlockCache {
            n_self,
            a_self,
            att_self,
            n_cross,
            a_cross,
            att_cross,
            n_mlp,
            a_mlp,
            pre_act,
            act,
        });
    }
    let (a_out, n_out) = group_norm(&h, &w.norm_out, cfg.norm_groups);
    let out = a_out.dot(&w.patch_out.w) + &w.patch_out.b;
    Ok((
        out,
        ForwardCache {
            patches,
            time_in,
            time_pre,
            context,
            condition: cond.0,
            blocks,
            n_out,
            a_out,
        },
    ))
}

/// Accumulates parameter gradients for one forward pass into `grads`,
/// given the gradient of the loss with respect to the token-layout output.
pub(crate) fn backward<F: Real>(
    w: &DenoiserWeights<F>,
    cfg: &DenoiserConfig,
    cache: &ForwardCache<F>,
    d_out: &Array2<F>,
    grads: &mut DenoiserWeights<F>,
) {
    grads.patch_out.w += &cache.a_out.t().dot(d_out);
    grads.patch_out.b += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    let da_out = d_out.dot(&w.patch_out.w.t());
    let (mut dh, dgain, dbias) = group_norm_backward(&da_out, &w.norm_out, &cache.n_out);
    grads.norm_out.gain += &dgain;
    grads.norm_out.bias += &dbias;

    let mut dcontext = Array2::<F>::zeros(cache.context.dim());
    for (layer, (b, bc)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[layer];

        // MLP
        g.mlp_out.w += &bc.act.t().dot(&dh);
        g.mlp_out.b += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dpre = dh.dot(&b.mlp_out.w.t());
        Zip::from(&mut dpre)
            .and(&bc.pre_act)
            .for_each(|d, &x| *d *= silu_grad(x));
        g.mlp_in.w += &bc.a_mlp.t().dot(&dpre);
        g.mlp_in.b += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
        let da = dpre.dot(&b.mlp_in.w.t());
        let (dx, dgain, dbias) = group_norm_backward(&da, &b.norm_mlp, &bc.n_mlp);
        g.norm_mlp.gain += &dgain;
        g.norm_mlp.bias += &dbias;
        dh += &dx;

        // cross-attention
        let ag = attention_backward(&bc.a_cross, &cache.context, cross_weights(b), cfg.heads, &bc.att_cross, &dh);
        g.cross_wq += &ag.dwq;
        g.cross_wk += &ag.dwk;
        g.cross_wv += &ag.dwv;
        g.cross_out.w += &ag.dwo;
        g.cross_out.b += &ag.dbo;
        dcontext += &ag.dctx;
        let (dx, dgain, dbias) = group_norm_backward(&ag.dx, &b.norm_cross, &bc.n_cross);
        g.norm_cross.gain += &dgain;
        g.norm_cross.bias += &dbias;
        dh += &dx;

        // self-attention: queries, keys and values all come from a_self
        let ag = attention_backward(&bc.a_self, &bc.a_self, self_weights(b), cfg.heads, &bc.att_self, &dh);
        g.self_wq += &ag.dwq;
        g.self_wk += &ag.dwk;
        g.self_wv += &ag.dwv;
        g.self_out.w += &ag.dwo;
        g.self_out.b += &ag.dbo;
        let da = ag.dx + &ag.dctx;
        let (dx, dgain, dbias) = group_norm_backward(&da, &b.norm_self, &bc.n_self);
        g.norm_self.gain += &dgain;
        g.norm_self.bias += &dbias;
        dh += &dx;
    }

    grads.patch_in.w += &cache.patches.t().dot(&dh);
    grads.patch_in.b += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.position += &dh;
    let mut dpre = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
    Zip::from(&mut dpre)
        .and(&cache.time_pre)
        .for_each(|d, &x| *d *= silu_grad(x));
    grads.time.w += &cache.time_in.t().dot(&dpre);
    grads.time.b += &dpre;

    let flat = dcontext
        .into_shape_with_order(cfg.context_tokens * cfg.context_dim)
        .expect("context gradient is contiguous");
    let mut row = grads.conditions.row_mut(cache.condition);
    row += &flat;
}
