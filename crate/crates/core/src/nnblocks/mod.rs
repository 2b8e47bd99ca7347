//! Differentiable building blocks shared by the guidance pyramid, the fusion
//! block and the U-Net: residual blocks, channel layer norm, channel squeeze,
//! feed-forward network, plus a finite-difference gradient checker.

pub mod params;

pub use params::{Graph, ParamBuilder, ParamSet};

use crate::autodiff::Var;
use crate::error::{CoreError, Result};
use ndarray::{Array1, Array3};

/// Stabilizer added to the variance in channel layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Default squeeze-bottleneck reduction ratio.
pub const SQUEEZE_REDUCTION: usize = 4;

/// Default sinusoidal time-embedding width.
pub const TIME_EMBED_DIM: usize = 64;

/// Sinusoidal embedding of a diffusion timestep; a pure function of (t, dim)
/// with entries in [-1, 1].
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub t: usize,
    pub vector: Array1<f64>,
}

pub fn time_embedding(t: usize, dim: usize) -> TimeEmbedding {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut v = Array1::zeros(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        v[2 * i] = angle.sin();
        v[2 * i + 1] = angle.cos();
    }
    TimeEmbedding { t, vector: v }
}

fn dyn3(x: &Array3<f64>) -> ndarray::ArrayD<f64> {
    x.clone().into_dyn()
}

fn to3(x: ndarray::ArrayD<f64>) -> Array3<f64> {
    x.into_dimensionality().expect("expected 3-d feature map")
}

/// Channel layer normalization at each spatial location; no learnable
/// affine (modulation is supplied by SFT downstream).
pub fn layernorm2d(x: &Array3<f64>) -> Array3<f64> {
    let mut g = Graph::new_unbound();
    let leaf = g.leaf(dyn3(x));
    let out = g.tape.layernorm_channels(leaf, LAYERNORM_EPS);
    to3(g.tape.value(out).clone())
}

impl Graph<'_> {
    /// Graph over an empty parameter set, for parameter-free evaluation.
    pub fn new_unbound() -> Graph<'static> {
        static EMPTY: std::sync::OnceLock<ParamSet> = std::sync::OnceLock::new();
        Graph::new(EMPTY.get_or_init(ParamSet::new))
    }
}

/// Residual block in the SR3 style: two 3x3 convolutions with pre-activation
/// channel norm, additive time-embedding injection after the first
/// projection, and an identity or 1x1-projected skip.
#[derive(Debug, Clone)]
pub struct ResBlockDef {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub temb_dim: usize,
}

impl ResBlockDef {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, temb_dim: usize) -> Self {
        ResBlockDef {
            prefix: prefix.into(),
            cin,
            cout,
            temb_dim,
        }
    }

    pub fn register(&self, b: &mut ParamBuilder) {
        b.conv(&format!("{}.conv1", self.prefix), self.cout, 3, self.cin);
        b.linear(&format!("{}.temb", self.prefix), self.cout, self.temb_dim);
        b.conv(&format!("{}.conv2", self.prefix), self.cout, 3, self.cout);
        if self.cin != self.cout {
            b.conv(&format!("{}.skip", self.prefix), self.cout, 1, self.cin);
        }
    }

    pub fn build(&self, g: &mut Graph, x: Var, temb: Var) -> Var {
        let p = &self.prefix;
        let n1 = g.tape.layernorm_channels(x, LAYERNORM_EPS);
        let a1 = g.tape.silu(n1);
        let (w1, b1) = (g.param(&format!("{p}.conv1.w")), g.param(&format!("{p}.conv1.b")));
        let h = g.tape.conv2d(a1, w1, b1, 1, 1);
        let te_act = g.tape.silu(temb);
        let (tw, tb) = (g.param(&format!("{p}.temb.w")), g.param(&format!("{p}.temb.b")));
        let tproj = g.tape.linear(te_act, tw, tb);
        let h = g.tape.add_channel(h, tproj);
        let n2 = g.tape.layernorm_channels(h, LAYERNORM_EPS);
        let a2 = g.tape.silu(n2);
        let (w2, b2) = (g.param(&format!("{p}.conv2.w")), g.param(&format!("{p}.conv2.b")));
        let h = g.tape.conv2d(a2, w2, b2, 1, 1);
        let skip = if self.cin == self.cout {
            x
        } else {
            let (ws, bs) = (g.param(&format!("{p}.skip.w")), g.param(&format!("{p}.skip.b")));
            g.tape.conv2d(x, ws, bs, 1, 0)
        };
        g.tape.add(h, skip)
    }

    /// Pure forward evaluation outside any training graph.
    pub fn apply(
        &self,
        x: &Array3<f64>,
        t_emb: &TimeEmbedding,
        params: &ParamSet,
    ) -> Result<Array3<f64>> {
        if x.dim().2 != self.cin {
            return Err(CoreError::shape(format!(
                "resblock {} expects {} input channels, got {}",
                self.prefix,
                self.cin,
                x.dim().2
            )));
        }
        let mut g = Graph::new(params);
        let xv = g.leaf(dyn3(x));
        let tv = g.leaf(t_emb.vector.clone().into_dyn());
        let out = self.build(&mut g, xv, tv);
        Ok(to3(g.tape.value(out).clone()))
    }
}

/// Squeeze-excitation style gate: global average pool, bottleneck MLP with a
/// smooth hidden activation, logistic output in (0, 1) per channel.
#[derive(Debug, Clone)]
pub struct ChannelSqueezeDef {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelSqueezeDef {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        ChannelSqueezeDef {
            prefix: prefix.into(),
            channels,
            reduction: SQUEEZE_REDUCTION,
        }
    }

    fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn register(&self, b: &mut ParamBuilder) {
        b.linear(&format!("{}.fc1", self.prefix), self.hidden(), self.channels);
        b.linear(&format!("{}.fc2", self.prefix), self.channels, self.hidden());
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let p = &self.prefix;
        let pooled = g.tape.global_avg_pool(x);
        let (w1, b1) = (g.param(&format!("{p}.fc1.w")), g.param(&format!("{p}.fc1.b")));
        let h = g.tape.linear(pooled, w1, b1);
        let h = g.tape.silu(h);
        let (w2, b2) = (g.param(&format!("{p}.fc2.w")), g.param(&format!("{p}.fc2.b")));
        let h = g.tape.linear(h, w2, b2);
        g.tape.sigmoid(h)
    }

    pub fn apply(&self, x: &Array3<f64>, params: &ParamSet) -> Result<Array1<f64>> {
        if x.dim().2 != self.channels {
            return Err(CoreError::shape(format!(
                "channel squeeze {} expects {} channels, got {}",
                self.prefix,
                self.channels,
                x.dim().2
            )));
        }
        let mut g = Graph::new(params);
        let xv = g.leaf(dyn3(x));
        let out = self.build(&mut g, xv);
        Ok(g.tape
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("1-d gate"))
    }
}

/// Position-wise feed-forward network: 1x1 conv expansion by 4, smooth
/// nonlinearity, 1x1 conv back; preserves the map shape.
#[derive(Debug, Clone)]
pub struct FfnDef {
    pub prefix: String,
    pub channels: usize,
    pub expansion: usize,
}

impl FfnDef {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        FfnDef {
            prefix: prefix.into(),
            channels,
            expansion: 4,
        }
    }

    pub fn register(&self, b: &mut ParamBuilder, zero_init: bool) {
        let hidden = self.channels * self.expansion;
        if zero_init {
            b.conv_zero(&format!("{}.up", self.prefix), hidden, 1, self.channels);
            b.conv_zero(&format!("{}.down", self.prefix), self.channels, 1, hidden);
        } else {
            b.conv(&format!("{}.up", self.prefix), hidden, 1, self.channels);
            b.conv(&format!("{}.down", self.prefix), self.channels, 1, hidden);
        }
    }

    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let p = &self.prefix;
        let (w1, b1) = (g.param(&format!("{p}.up.w")), g.param(&format!("{p}.up.b")));
        let h = g.tape.conv2d(x, w1, b1, 1, 0);
        let h = g.tape.silu(h);
        let (w2, b2) = (g.param(&format!("{p}.down.w")), g.param(&format!("{p}.down.b")));
        g.tape.conv2d(h, w2, b2, 1, 0)
    }

    pub fn apply(&self, x: &Array3<f64>, params: &ParamSet) -> Result<Array3<f64>> {
        if x.dim().2 != self.channels {
            return Err(CoreError::shape(format!(
                "ffn {} expects {} channels, got {}",
                self.prefix,
                self.channels,
                x.dim().2
            )));
        }
        let mut g = Graph::new(params);
        let xv = g.leaf(dyn3(x));
        let out = self.build(&mut g, xv);
        Ok(to3(g.tape.value(out).clone()))
    }
}

/// Compares analytic parameter gradients of a scalar-valued graph against
/// central finite differences on `probe_count` randomly chosen coordinates.
/// Returns the maximum relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(
    build: F,
    params: &ParamSet,
    probe_count: usize,
    fd_step: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Var,
{
    use rand::Rng;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(p);
        let root = build(&mut g);
        let v = g.tape.scalar(root);
        if !v.is_finite() {
            return Err(CoreError::numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    // analytic sweep
    let mut g = Graph::new(params);
    let root = build(&mut g);
    if !g.tape.scalar(root).is_finite() {
        return Err(CoreError::numeric("non-finite loss in gradient check"));
    }
    let mut buf = g.tape.backward(root);
    let analytic = g.param_grads(&mut buf).flat_view();

    let total = params.total_len();
    if total == 0 {
        return Ok(0.0);
    }
    let mut rng = crate::util::rng_from_seed(seed);
    let mut worst = 0.0f64;
    let base = params.flat_view();
    for _ in 0..probe_count {
        let idx = rng.gen_range(0..total);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[idx] += fd_step;
        minus[idx] -= fd_step;
        let mut pp = params.clone();
        pp.set_from_flat(&plus)?;
        let mut pm = params.clone();
        pm.set_from_flat(&minus)?;
        let numeric = (eval(&pp)? - eval(&pm)?) / (2.0 * fd_step);
        let a = analytic[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_image, rng_from_seed};
    use ndarray::IxDyn;

    #[test]
    fn time_embedding_is_deterministic_and_bounded() {
        let a = time_embedding(17, 64);
        let b = time_embedding(17, 64);
        assert_eq!(a.vector, b.vector);
        for v in a.vector.iter() {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
        assert_ne!(a.vector, time_embedding(18, 64).vector);
    }

    #[test]
    fn layernorm_passes_through_standardized_input() {
        // build input already zero-mean unit-variance per location
        let mut x = Array3::zeros((2, 2, 4));
        for y in 0..2 {
            for xx in 0..2 {
                let vals = [1.0, -1.0, 1.0, -1.0];
                for (c, v) in vals.iter().enumerate() {
                    x[[y, xx, c]] = *v;
                }
            }
        }
        let out = layernorm2d(&x);
        for (o, i) in out.iter().zip(x.iter()) {
            assert!((o - i).abs() < 1e-3);
        }
    }

    #[test]
    fn layernorm_zeroes_constant_input() {
        let x = Array3::from_elem((3, 3, 5), 7.5);
        let out = layernorm2d(&x);
        for v in out.iter() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_per_location_mean_is_tiny() {
        let mut rng = rng_from_seed(2);
        let x = normal_image(4, 4, 8, &mut rng);
        let out = layernorm2d(&x);
        for y in 0..4 {
            for xx in 0..4 {
                let mut m = 0.0;
                for c in 0..8 {
                    m += out[[y, xx, c]];
                }
                assert!((m / 8.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn resblock_identity_with_zero_params() {
        let def = ResBlockDef::new("rb", 4, 4, TIME_EMBED_DIM);
        let mut b = ParamBuilder::new(0);
        def.register(&mut b);
        let zeros = b.set.zeros_like();
        let mut rng = rng_from_seed(3);
        let x = normal_image(6, 6, 4, &mut rng);
        let out = def.apply(&x, &time_embedding(5, TIME_EMBED_DIM), &zeros).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn resblock_output_shape_follows_config() {
        let def = ResBlockDef::new("rb", 3, 8, TIME_EMBED_DIM);
        let mut b = ParamBuilder::new(1);
        def.register(&mut b);
        let mut rng = rng_from_seed(4);
        let x = normal_image(5, 7, 3, &mut rng);
        let out = def.apply(&x, &time_embedding(1, TIME_EMBED_DIM), &b.set).unwrap();
        assert_eq!(out.dim(), (5, 7, 8));
    }

    #[test]
    fn resblock_rejects_channel_mismatch() {
        let def = ResBlockDef::new("rb", 3, 8, TIME_EMBED_DIM);
        let mut b = ParamBuilder::new(1);
        def.register(&mut b);
        let x = Array3::zeros((4, 4, 5));
        assert!(def.apply(&x, &time_embedding(1, TIME_EMBED_DIM), &b.set).is_err());
    }

    #[test]
    fn resblock_gradients_match_finite_differences() {
        let def = ResBlockDef::new("rb", 3, 5, 16);
        let mut b = ParamBuilder::new(5);
        def.register(&mut b);
        let mut rng = rng_from_seed(6);
        let x = normal_image(5, 5, 3, &mut rng).into_dyn();
        let te = time_embedding(40, 16);
        let err = grad_check(
            |g| {
                let xv = g.leaf(x.clone());
                let tv = g.leaf(te.vector.clone().into_dyn());
                let out = def.build(g, xv, tv);
                g.tape.mean_all(out)
            },
            &b.set,
            60,
            1e-5,
            99,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn channel_squeeze_zero_params_is_half() {
        let def = ChannelSqueezeDef::new("cs", 8);
        let mut b = ParamBuilder::new(0);
        def.register(&mut b);
        let zeros = b.set.zeros_like();
        let mut rng = rng_from_seed(7);
        let x = normal_image(4, 4, 8, &mut rng);
        let w = def.apply(&x, &zeros).unwrap();
        for v in w.iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn channel_squeeze_range_and_gradients() {
        let def = ChannelSqueezeDef::new("cs", 8);
        let mut b = ParamBuilder::new(8);
        def.register(&mut b);
        let mut rng = rng_from_seed(9);
        let x = normal_image(4, 4, 8, &mut rng);
        let w = def.apply(&x, &b.set).unwrap();
        for v in w.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        let xd = x.into_dyn();
        let err = grad_check(
            |g| {
                let xv = g.leaf(xd.clone());
                let gate = def.build(g, xv);
                let sq = g.tape.mul(gate, gate);
                g.tape.sum_all(sq)
            },
            &b.set,
            40,
            1e-5,
            100,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn ffn_zero_params_zero_output_and_shape() {
        let def = FfnDef::new("ffn", 6);
        let mut b = ParamBuilder::new(0);
        def.register(&mut b, true);
        let mut rng = rng_from_seed(10);
        let x = normal_image(3, 5, 6, &mut rng);
        let out = def.apply(&x, &b.set).unwrap();
        assert_eq!(out.dim(), (3, 5, 6));
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let def = FfnDef::new("ffn", 4);
        let mut b = ParamBuilder::new(11);
        def.register(&mut b, false);
        let mut rng = rng_from_seed(12);
        let x = normal_image(4, 4, 4, &mut rng).into_dyn();
        let err = grad_check(
            |g| {
                let xv = g.leaf(x.clone());
                let out = def.build(g, xv);
                let sq = g.tape.mul(out, out);
                g.tape.mean_all(sq)
            },
            &b.set,
            40,
            1e-5,
            101,
        )
        .unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_quadratic_toy_is_exact() {
        let mut set = ParamSet::new();
        set.insert(
            "p",
            ndarray::ArrayD::from_shape_vec(IxDyn(&[6]), vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9])
                .unwrap(),
        );
        let err = grad_check(
            |g| {
                let p = g.param("p");
                let sq = g.tape.mul(p, p);
                g.tape.sum_all(sq)
            },
            &set,
            6,
            1e-5,
            102,
        )
        .unwrap();
        assert!(err <= 1e-8, "quadratic relative error {err}");
    }

    #[test]
    fn initialization_is_pure_function_of_seed() {
        let build = |seed| {
            let def = ResBlockDef::new("rb", 3, 4, 16);
            let mut b = ParamBuilder::new(seed);
            def.register(&mut b);
            b.set.flat_view()
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn blocks_preserve_finiteness() {
        let def = ResBlockDef::new("rb", 3, 6, 16);
        let mut b = ParamBuilder::new(20);
        def.register(&mut b);
        let mut rng = rng_from_seed(21);
        let x = normal_image(8, 8, 3, &mut rng);
        let out = def.apply(&x, &time_embedding(999, 16), &b.set).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
