use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::DenoiserConfig;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in × out`
    pub w: Array2<F>,
    /// `1 × out`
    pub b: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<F> {
    pub gain: Array2<F>,
    pub bias: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<F> {
    pub norm_self: NormParams<F>,
    pub self_wq: Array2<F>,
    pub self_wk: Array2<F>,
    pub self_wv: Array2<F>,
    pub self_out: Linear<F>,
    pub norm_cross: NormParams<F>,
    pub cross_wq: Array2<F>,
    pub cross_wk: Array2<F>,
    pub cross_wv: Array2<F>,
    pub cross_out: Linear<F>,
    pub norm_mlp: NormParams<F>,
    pub mlp_in: Linear<F>,
    pub mlp_out: Linear<F>,
}

/// Every learned parameter of the denoiser, stored as matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<F> {
    pub patch_in: Linear<F>,
    /// `tokens × width` learned position embedding.
    pub position: Array2<F>,
    pub time: Linear<F>,
    /// `num_conditions × (context_tokens · context_dim)`; row 0 is the null
    /// condition.
    pub conditions: Array2<F>,
    pub blocks: Vec<BlockWeights<F>>,
    pub norm_out: NormParams<F>,
    pub patch_out: Linear<F>,
}

/// Expands to a `Vec<(String, ref)>` over every parameter in a fixed order.
/// `$r` is `&` or `&mut`.
macro_rules! param_list {
    ($w:expr, $($r:tt)+) => {{
        let w = $w;
        let mut out = vec![
            ("patch_in.w".to_string(), $($r)+ w.patch_in.w),
            ("patch_in.b".to_string(), $($r)+ w.patch_in.b),
            ("position".to_string(), $($r)+ w.position),
            ("time.w".to_string(), $($r)+ w.time.w),
            ("time.b".to_string(), $($r)+ w.time.b),
            ("conditions".to_string(), $($r)+ w.conditions),
        ];
        for (i, b) in ($($r)+ w.blocks).iter_mut_or_ref().enumerate() {
            let p = |name: &str| format!("blocks.{i}.{name}");
            out.extend([
                (p("norm_self.gain"), $($r)+ b.norm_self.gain),
                (p("norm_self.bias"), $($r)+ b.norm_self.bias),
                (p("self_wq"), $($r)+ b.self_wq),
                (p("self_wk"), $($r)+ b.self_wk),
                (p("self_wv"), $($r)+ b.self_wv),
                (p("self_out.w"), $($r)+ b.self_out.w),
                (p("self_out.b"), $($r)+ b.self_out.b),
                (p("norm_cross.gain"), $($r)+ b.norm_cross.gain),
                (p("norm_cross.bias"), $($r)+ b.norm_cross.bias),
                (p("cross_wq"), $($r)+ b.cross_wq),
                (p("cross_wk"), $($r)+ b.cross_wk),
                (p("cross_wv"), $($r)+ b.cross_wv),
                (p("cross_out.w"), $($r)+ b.cross_out.w),
                (p("cross_out.b"), $($r)+ b.cross_out.b),
                (p("norm_mlp.gain"), $($r)+ b.norm_mlp.gain),
                (p("norm_mlp.bias"), $($r)+ b.norm_mlp.bias),
                (p("mlp_in.w"), $($r)+ b.mlp_in.w),
                (p("mlp_in.b"), $($r)+ b.mlp_in.b),
                (p("mlp_out.w"), $($r)+ b.mlp_out.w),
                (p("mlp_out.b"), $($r)+ b.mlp_out.b),
            ]);
        }
        out.extend([
            ("norm_out.gain".to_string(), $($r)+ w.norm_out.gain),
            ("norm_out.bias".to_string(), $($r)+ w.norm_out.bias),
            ("patch_out.w".to_string(), $($r)+ w.patch_out.w),
            ("patch_out.b".to_string(), $($r)+ w.patch_out.b),
        ]);
        out
    }};
}

/// Lets the macro pick `iter()` or `iter_mut()` from the reference kind.
trait IterMutOrRef<'a, T: 'a> {
    type Iter: Iterator;
    fn iter_mut_or_ref(self) -> Self::Iter;
}

impl<'a, T: 'a> IterMutOrRef<'a, T> for &'a Vec<T> {
    type Iter = std::slice::Iter<'a, T>;
    fn iter_mut_or_ref(self) -> Self::Iter {
        self.iter()
    }
}

impl<'a, T: 'a> IterMutOrRef<'a, T> for &'a mut Vec<T> {
    type Iter = std::slice::IterMut<'a, T>;
    fn iter_mut_or_ref(self) -> Self::Iter {
        self.iter_mut()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            F::of_f64(z * std)
        })
    }

    fn linear<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Linear<F> {
        Linear {
            w: self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: Array2::zeros((1, fan_out)),
        }
    }
}

fn norm<F: Real>(width: usize) -> NormParams<F> {
    NormParams {
        gain: Array2::ones((1, width)),
        bias: Array2::zeros((1, width)),
    }
}

impl<F: Real> DenoiserWeights<F> {
    /// Seeded initialization. The final patch projection starts at zero, so
    /// an untrained model predicts zero noise.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = config.width;
        let ctx = config.context_dim;
        let patch_in = init.linear(config.patch_dim(), w);
        let position = init.normal(config.tokens(), w, 0.1);
        let time = init.linear(w, w);
        let conditions = init.normal(config.num_conditions, config.context_tokens * ctx, 1.0);
        let blocks = (0..config.num_blocks)
            .map(|_| BlockWeights {
                norm_self: norm(w),
                self_wq: init.normal(w, w, 1.0 / (w as f64).sqrt()),
                self_wk: init.normal(w, w, 1.0 / (w as f64).sqrt()),
                self_wv: init.normal(w, w, 1.0 / (w as f64).sqrt()),
                self_out: init.linear(w, w),
                norm_cross: norm(w),
                cross_wq: init.normal(w, w, 1.0 / (w as f64).sqrt()),
                cross_wk: init.normal(ctx, w, 1.0 / (ctx as f64).sqrt()),
                cross_wv: init.normal(ctx, w, 1.0 / (ctx as f64).sqrt()),
                cross_out: init.linear(w, w),
                norm_mlp: norm(w),
                mlp_in: init.linear(w, config.mlp_hidden()),
                mlp_out: init.linear(config.mlp_hidden(), w),
            })
            .collect();
        Self {
            patch_in,
            position,
            time,
            conditions,
            blocks,
            norm_out: norm(w),
            patch_out: Linear {
                w: Array2::zeros((w, config.patch_dim())),
                b: Array2::zeros((1, config.patch_dim())),
            },
        }
    }

    pub fn params(&self) -> Vec<(String, &Array2<F>)> {
        param_list!(self, &)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        param_list!(self, &mut)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|a| Array2::zeros(a.dim()))
    }

    pub fn map<G: Real>(&self, f: impl Fn(&Array2<F>) -> Array2<G>) -> DenoiserWeights<G> {
        let lin = |l: &Linear<F>| Linear {
            w: f(&l.w),
            b: f(&l.b),
        };
        let nrm = |n: &NormParams<F>| NormParams {
            gain: f(&n.gain),
            bias: f(&n.bias),
        };
        DenoiserWeights {
            patch_in: lin(&self.patch_in),
            position: f(&self.position),
            time: lin(&self.time),
            conditions: f(&self.conditions),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    norm_self: nrm(&b.norm_self),
                    self_wq: f(&b.self_wq),
                    self_wk: f(&b.self_wk),
                    self_wv: f(&b.self_wv),
                    self_out: lin(&b.self_out),
                    norm_cross: nrm(&b.norm_cross),
                    cross_wq: f(&b.cross_wq),
                    cross_wk: f(&b.cross_wk),
                    cross_wv: f(&b.cross_wv),
                    cross_out: lin(&b.cross_out),
                    norm_mlp: nrm(&b.norm_mlp),
                    mlp_in: lin(&b.mlp_in),
                    mlp_out: lin(&b.mlp_out),
                })
                .collect(),
            norm_out: nrm(&self.norm_out),
            patch_out: lin(&self.patch_out),
        }
    }

    pub fn cast<G: Real>(&self) -> DenoiserWeights<G> {
        self.map(|a| a.mapv(|v| G::of_f64(v.as_f64())))
    }

    /// `self += scale · other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for ((_, dst), (_, src)) in self.params_mut().into_iter().zip(other.params()) {
            dst.scaled_add(scale, src);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_unique_and_shapes_consistent() {
        let cfg = DenoiserConfig {
            num_blocks: 2,
            ..DenoiserConfig::default()
        };
        let w = DenoiserWeights::<f32>::init(&cfg, 0);
        let params = w.params();
        let mut names: Vec<_> = params.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), params.len());
        assert_eq!(params.len(), 6 + 2 * 20 + 4);
        let mut w2 = w.clone();
        let shapes: Vec<_> = w.params().iter().map(|(_, a)| a.dim()).collect();
        let shapes_mut: Vec<_> = w2.params_mut().iter().map(|(_, a)| a.dim()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DenoiserConfig::default();
        let a = DenoiserWeights::<f32>::init(&cfg, 5);
        let b = DenoiserWeights::<f32>::init(&cfg, 5);
        let c = DenoiserWeights::<f32>::init(&cfg, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.patch_out.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cast_round_trip_is_exact_from_f32() {
        let cfg = DenoiserConfig::default();
        let a = DenoiserWeights::<f32>::init(&cfg, 1);
        assert_eq!(a.cast::<f64>().cast::<f32>(), a);
    }
}
