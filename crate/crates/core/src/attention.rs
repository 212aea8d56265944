//! Scaled dot-product attention with self- and cross-attention sites.
//!
//! Every attention site exposes its `(Q, K, V)` projections to an optional
//! [`AttentionHook`] before the softmax is applied. The hook is the single
//! injection point used by teacher capture and by student modulation.

use std::fmt;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::real::{c, matrix_to_tensor, tensor_to_matrix, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    SelfAttention,
    CrossAttention,
}

impl SiteKind {
    /// Directory name used in trace dumps.
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::SelfAttention => "self",
            SiteKind::CrossAttention => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self" => Some(SiteKind::SelfAttention),
            "cross" => Some(SiteKind::CrossAttention),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionSiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl AttentionSiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for AttentionSiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {}-attention", self.layer, self.kind.as_str())
    }
}

/// Query, key and value matrices captured at one attention site.
///
/// `q` is `tokens × d`, `k` is `tokens_kv × d`, `v` is `tokens_kv × d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionProjections {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let p = Self { q, k, v };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, k, v) = (self.q.shape(), self.k.shape(), self.v.shape());
        if q.len() != 2 || k.len() != 2 || v.len() != 2 {
            return Err(Error::Shape(format!(
                "projections must be rank 2, got q {q:?}, k {k:?}, v {v:?}"
            )));
        }
        if q[1] != k[1] {
            return Err(Error::Shape(format!(
                "q and k feature sizes differ: {} vs {}",
                q[1], k[1]
            )));
        }
        if k[0] != v[0] {
            return Err(Error::Shape(format!(
                "k and v token counts differ: {} vs {}",
                k[0], v[0]
            )));
        }
        Ok(())
    }

    pub fn same_shapes(&self, other: &AttentionProjections) -> bool {
        self.q.shape() == other.q.shape()
            && self.k.shape() == other.k.shape()
            && self.v.shape() == other.v.shape()
    }

    pub fn bit_eq(&self, other: &AttentionProjections) -> bool {
        self.q.bit_eq(&other.q) && self.k.bit_eq(&other.k) && self.v.bit_eq(&other.v)
    }
}

/// Rewrites the projections at an attention site. Implementations must
/// preserve every shape and be safe to call from several threads.
pub trait AttentionHook: Sync {
    fn modulate(
        &self,
        site: AttentionSiteId,
        projections: AttentionProjections,
    ) -> Result<AttentionProjections>;
}

/// Returns projections unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn modulate(&self, _: AttentionSiteId, p: AttentionProjections) -> Result<AttentionProjections> {
        Ok(p)
    }
}

impl<F> AttentionHook for F
where
    F: Fn(AttentionSiteId, AttentionProjections) -> Result<AttentionProjections> + Sync,
{
    fn modulate(&self, site: AttentionSiteId, p: AttentionProjections) -> Result<AttentionProjections> {
        self(site, p)
    }
}

/// Learned weights of one attention site. Projections have no bias; the
/// output projection does.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    /// `d_in × d`
    pub wq: Tensor,
    /// `d_ctx × d`
    pub wk: Tensor,
    /// `d_ctx × d`
    pub wv: Tensor,
    /// `d × d_in`
    pub wo: Tensor,
    /// `1 × d_in`
    pub bo: Tensor,
}

/// `softmax(Q Kᵀ / √d_k) V` with a single head.
pub fn scaled_dot_product_attention(p: &AttentionProjections) -> Result<Tensor> {
    multi_head_attention(p, 1)
}

/// Splits the feature axis into `heads` equal slices and attends per slice.
pub fn multi_head_attention(p: &AttentionProjections, heads: usize) -> Result<Tensor> {
    p.validate()?;
    let q = tensor_to_matrix::<f32>(&p.q)?;
    let k = tensor_to_matrix::<f32>(&p.k)?;
    let v = tensor_to_matrix::<f32>(&p.v)?;
    check_heads(q.ncols(), v.ncols(), heads)?;
    let (out, _) = attend(&q, &k, &v, heads);
    matrix_to_tensor(&out)
}

/// Projects `x` to queries and `context` to keys and values.
///
/// For a self-attention site `context` must be `x` itself.
pub fn project(
    x: &Tensor,
    context: &Tensor,
    weights: &ProjectionWeights,
    kind: SiteKind,
) -> Result<AttentionProjections> {
    if kind == SiteKind::SelfAttention && x != context {
        return Err(Error::Argument(
            "self-attention projects keys and values from x itself".into(),
        ));
    }
    let w = MatrixWeights::<f32>::from_tensors(weights)?;
    let x = tensor_to_matrix::<f32>(x)?;
    let ctx = tensor_to_matrix::<f32>(context)?;
    let (q, k, v) = w.as_view().project(&x, &ctx)?;
    AttentionProjections::new(matrix_to_tensor(&q)?, matrix_to_tensor(&k)?, matrix_to_tensor(&v)?)
}

/// Projects, lets the hook rewrite the projections, attends, applies the
/// output projection and adds the residual `x`.
pub fn run_attention_block(
    x: &Tensor,
    context: &Tensor,
    weights: &ProjectionWeights,
    site: AttentionSiteId,
    heads: usize,
    hook: Option<&dyn AttentionHook>,
) -> Result<Tensor> {
    if site.kind == SiteKind::SelfAttention && x != context {
        return Err(Error::Argument(
            "self-attention projects keys and values from x itself".into(),
        ));
    }
    let w = MatrixWeights::<f32>::from_tensors(weights)?;
    let xm = tensor_to_matrix::<f32>(x)?;
    let ctx = tensor_to_matrix::<f32>(context)?;
    let (contribution, _) = attention_forward(&xm, &ctx, w.as_view(), heads, site, hook)?;
    matrix_to_tensor(&(xm + contribution))
}

fn check_heads(d: usize, dv: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) || !dv.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "feature sizes {d} (qk) and {dv} (v) must be divisible by {heads} heads"
        )));
    }
    Ok(())
}

struct MatrixWeights<F> {
    wq: Array2<F>,
    wk: Array2<F>,
    wv: Array2<F>,
    wo: Array2<F>,
    bo: Array2<F>,
}

impl<F: Real> MatrixWeights<F> {
    fn from_tensors(w: &ProjectionWeights) -> Result<Self> {
        Ok(Self {
            wq: tensor_to_matrix(&w.wq)?,
            wk: tensor_to_matrix(&w.wk)?,
            wv: tensor_to_matrix(&w.wv)?,
            wo: tensor_to_matrix(&w.wo)?,
            bo: tensor_to_matrix(&w.bo)?,
        })
    }

    fn as_view(&self) -> AttnWeights<'_, F> {
        AttnWeights {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            wo: &self.wo,
            bo: &self.bo,
        }
    }
}

/// Borrowed weights of one attention site, shared by the denoiser and the
/// tensor-level entry points above.
#[derive(Clone, Copy)]
pub(crate) struct AttnWeights<'a, F> {
    pub wq: &'a Array2<F>,
    pub wk: &'a Array2<F>,
    pub wv: &'a Array2<F>,
    pub wo: &'a Array2<F>,
    pub bo: &'a Array2<F>,
}

impl<F: Real> AttnWeights<'_, F> {
    fn project(&self, x: &Array2<F>, ctx: &Array2<F>) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
        let mismatch = |what: &str, a: (usize, usize), b: (usize, usize)| {
            Error::Shape(format!("{what}: {a:?} cannot multiply {b:?}"))
        };
        if x.ncols() != self.wq.nrows() {
            return Err(mismatch("query projection", x.dim(), self.wq.dim()));
        }
        if ctx.ncols() != self.wk.nrows() || ctx.ncols() != self.wv.nrows() {
            return Err(mismatch("key/value projection", ctx.dim(), self.wk.dim()));
        }
        if self.wq.ncols() != self.wk.ncols() {
            return Err(mismatch("q/k width", self.wq.dim(), self.wk.dim()));
        }
        if self.wv.ncols() != self.wo.nrows()
            || self.wo.ncols() != x.ncols()
            || self.bo.dim() != (1, x.ncols())
        {
            return Err(mismatch("output projection", self.wv.dim(), self.wo.dim()));
        }
        Ok((x.dot(self.wq), ctx.dot(self.wk), ctx.dot(self.wv)))
    }
}

/// Intermediate values kept for the backward pass.
pub(crate) struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attended: Array2<F>,
}

pub(crate) struct AttentionGrads<F> {
    pub dx: Array2<F>,
    pub dctx: Array2<F>,
    pub dwq: Array2<F>,
    pub dwk: Array2<F>,
    pub dwv: Array2<F>,
    pub dwo: Array2<F>,
    pub dbo: Array2<F>,
}

/// Attention contribution (without residual) of one site.
pub(crate) fn attention_forward<F: Real>(
    x: &Array2<F>,
    ctx: &Array2<F>,
    w: AttnWeights<'_, F>,
    heads: usize,
    site: AttentionSiteId,
    hook: Option<&dyn AttentionHook>,
) -> Result<(Array2<F>, AttentionCache<F>)> {
    let (mut q, mut k, mut v) = w.project(x, ctx)?;
    check_heads(q.ncols(), v.ncols(), heads)?;
    if let Some(hook) = hook {
        (q, k, v) = apply_hook(hook, site, q, k, v)?;
    }
    let (attended, probs) = attend(&q, &k, &v, heads);
    let out = attended.dot(w.wo) + w.bo;
    Ok((
        out,
        AttentionCache {
            q,
            k,
            v,
            probs,
            attended,
        },
    ))
}

fn apply_hook<F: Real>(
    hook: &dyn AttentionHook,
    site: AttentionSiteId,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
) -> Result<(Array2<F>, Array2<F>, Array2<F>)> {
    let before = AttentionProjections {
        q: matrix_to_tensor(&q)?,
        k: matrix_to_tensor(&k)?,
        v: matrix_to_tensor(&v)?,
    };
    let shapes = (before.q.shape().to_vec(), before.k.shape().to_vec(), before.v.shape().to_vec());
    let after = hook.modulate(site, before)?;
    if after.q.shape() != shapes.0 || after.k.shape() != shapes.1 || after.v.shape() != shapes.2 {
        return Err(Error::Contract {
            site: site.to_string(),
            detail: format!(
                "hook changed shapes from q {:?} k {:?} v {:?} to q {:?} k {:?} v {:?}",
                shapes.0,
                shapes.1,
                shapes.2,
                after.q.shape(),
                after.k.shape(),
                after.v.shape()
            ),
        });
    }
    Ok((
        tensor_to_matrix(&after.q)?,
        tensor_to_matrix(&after.k)?,
        tensor_to_matrix(&after.v)?,
    ))
}

pub(crate) fn attention_backward<F: Real>(
    x: &Array2<F>,
    ctx: &Array2<F>,
    w: AttnWeights<'_, F>,
    heads: usize,
    cache: &AttentionCache<F>,
    d_out: &Array2<F>,
) -> AttentionGrads<F> {
    let dwo = cache.attended.t().dot(d_out);
    let dbo = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_attended = d_out.dot(&w.wo.t());
    let (dq, dk, dv) = attend_backward(&cache.q, &cache.k, &cache.v, &cache.probs, heads, &d_attended);
    AttentionGrads {
        dx: dq.dot(&w.wq.t()),
        dctx: dk.dot(&w.wk.t()) + dv.dot(&w.wv.t()),
        dwq: x.t().dot(&dq),
        dwk: ctx.t().dot(&dk),
        dwv: ctx.t().dot(&dv),
        dwo,
        dbo,
    }
}

/// Multi-head attention; returns the attended values and per-head
/// attention probabilities.
pub(crate) fn attend<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let dh = q.ncols() / heads;
    let dvh = v.ncols() / heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        let vh = v.slice(s![.., h * dvh..(h + 1) * dvh]);
        let mut p = qh.dot(&kh.t()) * scale;
        softmax_rows(&mut p);
        out.slice_mut(s![.., h * dvh..(h + 1) * dvh]).assign(&p.dot(&vh));
        probs.push(p);
    }
    (out, probs)
}

fn attend_backward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    probs: &[Array2<F>],
    heads: usize,
    d_out: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let dh = q.ncols() / heads;
    let dvh = v.ncols() / heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for (h, p) in probs.iter().enumerate() {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        let vh = v.slice(s![.., h * dvh..(h + 1) * dvh]);
        let doh = d_out.slice(s![.., h * dvh..(h + 1) * dvh]);
        dv.slice_mut(s![.., h * dvh..(h + 1) * dvh]).assign(&p.t().dot(&doh));
        let dp = doh.dot(&vh.t());
        // softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (&dp - &row_dot) * p * scale;
        dq.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&kh));
        dk.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.t().dot(&qh));
    }
    (dq, dk, dv)
}

fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Naive attention written with explicit loops and f64 arithmetic.
    fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let (m, dv) = (k.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    (0..d)
                        .map(|x| q.data()[i * d + x] as f64 * k.data()[j * d + x] as f64)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..m {
                let w = logits[j].exp() / z;
                for c in 0..dv {
                    out[i * dv + c] += w * v.data()[j * dv + c] as f64;
                }
            }
        }
        out
    }

    fn oracle_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k)
                    .map(|x| a.data()[i * k + x] as f64 * b.data()[x * m + j] as f64)
                    .sum();
            }
        }
        out
    }

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap()
    }

    fn weights(rng: &mut ChaCha8Rng, d_in: usize, d_ctx: usize, d: usize) -> ProjectionWeights {
        ProjectionWeights {
            wq: random(rng, &[d_in, d]),
            wk: random(rng, &[d_ctx, d]),
            wv: random(rng, &[d_ctx, d]),
            wo: random(rng, &[d, d_in]),
            bo: random(rng, &[1, d_in]),
        }
    }

    #[test]
    fn singleton_softmax_returns_value() {
        let p = AttentionProjections::new(t(&[1, 1], &[1.0]), t(&[1, 1], &[1.0]), t(&[1, 1], &[7.0])).unwrap();
        assert_eq!(scaled_dot_product_attention(&p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]);
        let k = t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v = t(&[3, 1], &[1.0, 2.0, 6.0]);
        let out = scaled_dot_product_attention(&AttentionProjections::new(q, k, v).unwrap()).unwrap();
        for &o in out.data() {
            assert!((o - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_identity_case() {
        let i2 = identity(2);
        let out = scaled_dot_product_attention(
            &AttentionProjections::new(i2.clone(), i2.clone(), i2.clone()).unwrap(),
        )
        .unwrap();
        let hi = (1.0f64 / 2f64.sqrt()).exp();
        let (w_same, w_other) = (hi / (hi + 1.0), 1.0 / (hi + 1.0));
        let expected = [w_same, w_other, w_other, w_same];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((*o as f64 - e).abs() < 1e-6, "{o} vs {e}");
        }
        let oracle = oracle_attention(&i2, &i2, &i2);
        for (o, e) in out.data().iter().zip(oracle) {
            assert!((*o as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn random_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (random(&mut rng, &[5, 4]), random(&mut rng, &[3, 4]), random(&mut rng, &[3, 6]));
        let out = scaled_dot_product_attention(&AttentionProjections::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
        for (o, e) in out.data().iter().zip(oracle_attention(&q, &k, &v)) {
            assert!((*o as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn multi_head_splits_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4]));
        let out = multi_head_attention(&AttentionProjections::new(q.clone(), k.clone(), v.clone()).unwrap(), 2).unwrap();
        let slice = |x: &Tensor, h: usize| {
            let (r, c) = (x.shape()[0], x.shape()[1] / 2);
            Tensor::from_fn(&[r, c], |i| x.data()[(i / c) * 2 * c + h * c + i % c]).unwrap()
        };
        for h in 0..2 {
            let expected = oracle_attention(&slice(&q, h), &slice(&k, h), &slice(&v, h));
            for (i, e) in expected.iter().enumerate() {
                let (r, col) = (i / 2, i % 2);
                assert!((out.data()[r * 4 + h * 2 + col] as f64 - e).abs() < 1e-5);
            }
        }
        assert!(multi_head_attention(&AttentionProjections::new(q, k, v).unwrap(), 3).is_err());
    }

    #[test]
    fn mismatched_projection_shapes_rejected() {
        let r = AttentionProjections::new(
            Tensor::zeros(&[2, 3]).unwrap(),
            Tensor::zeros(&[2, 4]).unwrap(),
            Tensor::zeros(&[2, 4]).unwrap(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
        let r = AttentionProjections::new(
            Tensor::zeros(&[2, 4]).unwrap(),
            Tensor::zeros(&[2, 4]).unwrap(),
            Tensor::zeros(&[3, 4]).unwrap(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn identity_projection_of_identity_input() {
        let i3 = identity(3);
        let w = ProjectionWeights {
            wq: i3.clone(),
            wk: i3.clone(),
            wv: i3.clone(),
            wo: i3.clone(),
            bo: Tensor::zeros(&[1, 3]).unwrap(),
        };
        let p = project(&i3, &i3, &w, SiteKind::SelfAttention).unwrap();
        assert!(p.q.bit_eq(&i3) && p.k.bit_eq(&i3) && p.v.bit_eq(&i3));
    }

    #[test]
    fn zero_weights_give_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 3]);
        let zero = |r, c| Tensor::zeros(&[r, c]).unwrap();
        let w = ProjectionWeights {
            wq: zero(3, 2),
            wk: zero(3, 2),
            wv: zero(3, 2),
            wo: random(&mut rng, &[2, 3]),
            bo: zero(1, 3),
        };
        let p = project(&x, &x, &w, SiteKind::SelfAttention).unwrap();
        assert!(p.q.data().iter().chain(p.k.data()).chain(p.v.data()).all(|&v| v == 0.0));
        let out = scaled_dot_product_attention(&p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let block = run_attention_block(&x, &x, &w, AttentionSiteId::new(0, SiteKind::SelfAttention), 1, None).unwrap();
        assert!(block.bit_eq(&x));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 4]);
        let ctx = random(&mut rng, &[2, 5]);
        let w = weights(&mut rng, 4, 5, 6);
        let p = project(&x, &ctx, &w, SiteKind::CrossAttention).unwrap();
        for (got, want) in [(&p.q, oracle_matmul(&x, &w.wq)), (&p.k, oracle_matmul(&ctx, &w.wk)), (&p.v, oracle_matmul(&ctx, &w.wv))] {
            for (g, e) in got.data().iter().zip(want) {
                assert!((*g as f64 - e).abs() < 1e-5);
            }
        }
        assert!(matches!(project(&ctx, &ctx, &w, SiteKind::CrossAttention), Err(Error::Shape(_))));
        assert!(project(&x, &ctx, &w, SiteKind::SelfAttention).is_err());
    }

    #[test]
    fn identity_hook_is_bitwise_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[6, 4]);
        let ctx = random(&mut rng, &[3, 5]);
        let w = weights(&mut rng, 4, 5, 4);
        let site = AttentionSiteId::new(2, SiteKind::CrossAttention);
        let plain = run_attention_block(&x, &ctx, &w, site, 2, None).unwrap();
        let hooked = run_attention_block(&x, &ctx, &w, site, 2, Some(&IdentityHook)).unwrap();
        assert!(plain.bit_eq(&hooked));
        let again = run_attention_block(&x, &ctx, &w, site, 2, None).unwrap();
        assert!(plain.bit_eq(&again));
    }

    #[test]
    fn zeroed_values_leave_only_output_bias_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[4, 3]);
        let w = weights(&mut rng, 3, 3, 3);
        let zero_v = |_: AttentionSiteId, p: AttentionProjections| {
            let v = Tensor::zeros(p.v.shape())?;
            Ok(AttentionProjections { v, ..p })
        };
        let site = AttentionSiteId::new(0, SiteKind::SelfAttention);
        let out = run_attention_block(&x, &x, &w, site, 1, Some(&zero_v)).unwrap();
        let expected = Tensor::from_fn(&[4, 3], |i| x.data()[i] + w.bo.data()[i % 3]).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
    }

    #[test]
    fn hook_changing_shape_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, &[4, 3]);
        let w = weights(&mut rng, 3, 3, 3);
        let bad = |_: AttentionSiteId, p: AttentionProjections| {
            Ok(AttentionProjections { q: Tensor::zeros(&[5, 3])?, ..p })
        };
        let err = run_attention_block(&x, &x, &w, AttentionSiteId::new(1, SiteKind::SelfAttention), 1, Some(&bad)).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "{err}");
    }

    #[test]
    fn hook_sees_projected_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, &[4, 3]);
        let w = weights(&mut rng, 3, 3, 2);
        let site = AttentionSiteId::new(0, SiteKind::SelfAttention);
        let expected = project(&x, &x, &w, SiteKind::SelfAttention).unwrap();
        let check = move |s: AttentionSiteId, p: AttentionProjections| {
            assert_eq!(s, site);
            assert!(p.bit_eq(&expected));
            Ok(p)
        };
        run_attention_block(&x, &x, &w, site, 1, Some(&check)).unwrap();
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-30.0f32..30.0, 12)) {
            let mut m = Array2::from_shape_vec((3, 4), logits).unwrap();
            softmax_rows(&mut m);
            for row in m.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn joint_kv_permutation_is_invariant(seed in 0u64..500, shift in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 2]));
            let rot = |x: &Tensor| {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                Tensor::from_fn(&[r, c], |i| x.data()[((i / c + shift) % r) * c + i % c]).unwrap()
            };
            let a = scaled_dot_product_attention(&AttentionProjections::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
            let b = scaled_dot_product_attention(&AttentionProjections::new(q, rot(&k), rot(&v)).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }
}
