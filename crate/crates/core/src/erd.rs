//! Encoder-Resnet-Decoder residual denoiser used as the learned proximal map.
//!
//! ```text
//! z ─► encoder(5x5) ─► [fuse(prelu+1x1) ◄─ feedback] ─► 5 x resblock ─┐
//!                             ▲                                        │ fb_steps passes
//!                             └────────────────────────────────────────┘
//!   ─► decoder(5x5 transposed) ─► l2-ball projection ─► z - r ─► clip[0, 255]
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{
    clip_intensity, clip_intensity_backward, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward, prelu, prelu_backward, transposed_conv2d, transposed_conv2d_backward, ConvSpec,
    PaddingMode,
};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const INTENSITY_MIN: f64 = 0.0;
pub const INTENSITY_MAX: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ErdConfig {
    /// Image channels (3 for RGB).
    pub channels: usize,
    pub features: usize,
    pub resblocks: usize,
    pub encoder_kernel: usize,
    pub resblock_kernel: usize,
    /// Adds the 1x1 fusion layer used by the feedback path.
    pub feedback: bool,
}

impl Default for ErdConfig {
    fn default() -> Self {
        Self { channels: 3, features: 64, resblocks: 5, encoder_kernel: 5, resblock_kernel: 3, feedback: false }
    }
}

impl ErdConfig {
    pub fn with_feedback(mut self, feedback: bool) -> Self {
        self.feedback = feedback;
        self
    }

    fn encoder(&self) -> ConvSpec {
        ConvSpec::new(self.channels, self.features, self.encoder_kernel, PaddingMode::Reflect)
    }

    fn resconv(&self) -> ConvSpec {
        ConvSpec::new(self.features, self.features, self.resblock_kernel, PaddingMode::Reflect)
    }

    fn fuse(&self) -> ConvSpec {
        ConvSpec::new(2 * self.features, self.features, 1, PaddingMode::Reflect)
    }

    fn decoder(&self) -> ConvSpec {
        ConvSpec::transposed(self.features, self.channels, self.encoder_kernel, PaddingMode::Reflect)
    }

    /// Scalar parameter count, including the projection parameter.
    pub fn param_count(&self) -> usize {
        let res = 2 * (self.features + self.resconv().param_count());
        let fuse = if self.feedback { 2 * self.features + self.fuse().param_count() } else { 0 };
        self.encoder().param_count() + self.resblocks * res + fuse + self.decoder().param_count() + 1
    }
}

pub const ALPHA: &str = "projection.alpha";

fn block(i: usize, leaf: &str) -> String {
    format!("resblocks.{i}.{leaf}")
}

/// Trainable parameters of one ERD block, shared across all solver steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ErdWeights<T> {
    pub config: ErdConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ErdWeights<T> {
    /// All parameters zero except PReLU slopes (0.25) and `alpha = ln 2`.
    pub fn zeros(config: ErdConfig) -> Self {
        let mut p = ParamStore::new();
        let mut put = |name: String, shape: [usize; 4], v: f64| {
            p.insert(name, Tensor::full(shape, T::lit(v))).expect("unique names");
        };
        let f = config.features;
        let enc = config.encoder();
        put("encoder.weight".into(), enc.weight_shape(), 0.0);
        put("encoder.bias".into(), [1, 1, 1, f], 0.0);
        let rc = config.resconv();
        for i in 0..config.resblocks {
            put(block(i, "prelu1.slope"), [1, 1, 1, f], 0.25);
            put(block(i, "conv1.weight"), rc.weight_shape(), 0.0);
            put(block(i, "conv1.bias"), [1, 1, 1, f], 0.0);
            put(block(i, "prelu2.slope"), [1, 1, 1, f], 0.25);
            put(block(i, "conv2.weight"), rc.weight_shape(), 0.0);
            put(block(i, "conv2.bias"), [1, 1, 1, f], 0.0);
        }
        if config.feedback {
            put("fb_fuse.prelu.slope".into(), [1, 1, 1, 2 * f], 0.25);
            put("fb_fuse.conv.weight".into(), config.fuse().weight_shape(), 0.0);
            put("fb_fuse.conv.bias".into(), [1, 1, 1, f], 0.0);
        }
        let dec = config.decoder();
        put("decoder.weight".into(), dec.weight_shape(), 0.0);
        put("decoder.bias".into(), [1, 1, 1, config.channels], 0.0);
        put(ALPHA.into(), [1, 1, 1, 1], std::f64::consts::LN_2);
        Self { config, params: p }
    }

    /// He-normal convolution weights, zero biases, PReLU slopes 0.25 and the
    /// log-domain projection parameter at `ln 2`.
    pub fn init<R: Rng + ?Sized>(config: ErdConfig, rng: &mut R) -> Self {
        let mut w = Self::zeros(config);
        let names: Vec<String> = w.params.names().filter(|n| n.ends_with(".weight")).map(String::from).collect();
        for name in names {
            let t = w.params.expect_mut(&name);
            let [a, b, kh, kw] = t.shape();
            // conv weights are (out, in, ..), the transposed decoder (in, out, ..);
            // fan-in is the number of inputs feeding each output either way
            let fan_in = if name == "decoder.weight" { a * kh * kw } else { b * kh * kw };
            let std = (2.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = T::lit(std * e);
            }
        }
        w
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn alpha(&self) -> T {
        self.params.expect(ALPHA).data()[0]
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.params.expect(name)
    }

    fn acc(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        self.params.expect_mut(name).accumulate_grad(g.data())
    }

    pub fn cast<U: Scalar>(&self) -> ErdWeights<U> {
        let mut params = ParamStore::new();
        for (k, v) in self.params.iter() {
            params.insert(k, v.cast()).expect("unique");
        }
        ErdWeights { config: self.config, params }
    }
}

/// Projection layer inputs: the log-domain radius control and the per-image
/// noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    pub alpha: T,
    pub sigma: Vec<T>,
}

/// Per-item state of the l2-ball projection.
#[derive(Clone, Copy, Debug)]
struct ProjItem<T> {
    norm: T,
    radius: T,
    active: bool,
}

fn radius<T: Scalar>(alpha: T, sigma: T, numel: usize) -> T {
    alpha.exp() * sigma * T::from_usize(numel.saturating_sub(1)).unwrap().sqrt()
}

/// Projects each batch item of `r` onto the l2 ball of radius
/// `exp(alpha) * sigma * sqrt(N - 1)`, `N` the element count of one item.
pub fn project_residual<T: Scalar>(r: &Tensor<T>, proj: &ProjectionParams<T>) -> Result<Tensor<T>> {
    Ok(project(r, proj)?.0)
}

fn project<T: Scalar>(r: &Tensor<T>, proj: &ProjectionParams<T>) -> Result<(Tensor<T>, Vec<ProjItem<T>>)> {
    if proj.sigma.len() != r.n() {
        return Err(Error::Shape(format!(
            "{} noise levels for a batch of {}",
            proj.sigma.len(),
            r.n()
        )));
    }
    let numel = r.c() * r.h() * r.w();
    let mut out = r.detach();
    let mut items = Vec::with_capacity(r.n());
    for (n, &sigma) in proj.sigma.iter().enumerate() {
        if sigma < T::zero() || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("noise level {sigma} must be finite and >= 0")));
        }
        let rad = radius(proj.alpha, sigma, numel);
        let norm = r.item(n).iter().map(|&v| v * v).sum::<T>().sqrt();
        let active = norm > rad;
        if active {
            let k = if norm > T::zero() { rad / norm } else { T::zero() };
            out.item_mut(n).iter_mut().for_each(|v| *v *= k);
        }
        items.push(ProjItem { norm, radius: rad, active });
    }
    Ok((out, items))
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    input: Tensor<T>,
    act1: Tensor<T>,
    conv1: Tensor<T>,
    act2: Tensor<T>,
}

#[derive(Clone, Debug)]
struct PassTape<T> {
    /// `(concat input, prelu output)` when the fusion layer ran.
    fuse: Option<(Tensor<T>, Tensor<T>)>,
    blocks: Vec<BlockTape<T>>,
}

/// Everything the backward pass of one ERD call needs.
#[derive(Clone, Debug)]
pub struct ErdTape<T> {
    z: Tensor<T>,
    encoded: Tensor<T>,
    passes: Vec<PassTape<T>>,
    features: Tensor<T>,
    residual: Tensor<T>,
    projected: Tensor<T>,
    proj: Vec<ProjItem<T>>,
    pre_clip: Tensor<T>,
}

/// Inference-only forward pass.
pub fn erd_forward<T: Scalar>(z: &Tensor<T>, weights: &ErdWeights<T>, sigma: &[T], fb_steps: usize) -> Result<Tensor<T>> {
    Ok(erd_forward_taped(z, weights, sigma, fb_steps)?.0)
}

fn resnet<T: Scalar>(x: Tensor<T>, weights: &ErdWeights<T>) -> Result<(Tensor<T>, Vec<BlockTape<T>>)> {
    let spec = weights.config.resconv();
    let mut h = x;
    let mut tapes = Vec::with_capacity(weights.config.resblocks);
    for i in 0..weights.config.resblocks {
        let act1 = prelu(&h, weights.p(&block(i, "prelu1.slope")))?;
        let conv1 = conv2d(&act1, weights.p(&block(i, "conv1.weight")), weights.p(&block(i, "conv1.bias")), &spec)?;
        let act2 = prelu(&conv1, weights.p(&block(i, "prelu2.slope")))?;
        let conv2 = conv2d(&act2, weights.p(&block(i, "conv2.weight")), weights.p(&block(i, "conv2.bias")), &spec)?;
        let out = h.add(&conv2)?;
        tapes.push(BlockTape { input: h, act1, conv1, act2 });
        h = out;
    }
    Ok((h, tapes))
}

/// Forward pass that records the activations needed by [`erd_backward`].
pub fn erd_forward_taped<T: Scalar>(
    z: &Tensor<T>,
    weights: &ErdWeights<T>,
    sigma: &[T],
    fb_steps: usize,
) -> Result<(Tensor<T>, ErdTape<T>)> {
    let cfg = weights.config;
    if z.c() != cfg.channels {
        return Err(Error::Shape(format!(
            "input has {} channels, weights expect {}",
            z.c(),
            cfg.channels
        )));
    }
    if fb_steps < 1 {
        return Err(Error::InvalidParameter("fb_steps must be at least 1".into()));
    }
    if fb_steps > 1 && !cfg.feedback {
        return Err(Error::InvalidParameter(format!(
            "fb_steps = {fb_steps} requires weights with a feedback fusion layer"
        )));
    }
    let encoded = conv2d(z, weights.p("encoder.weight"), weights.p("encoder.bias"), &cfg.encoder())?;
    let mut passes = Vec::with_capacity(fb_steps);
    let mut feedback = Tensor::zeros(encoded.shape());
    let mut features = encoded.clone();
    for _ in 0..fb_steps {
        let (input, fuse) = if cfg.feedback {
            let cat = concat_channels(&encoded, &feedback)?;
            let act = prelu(&cat, weights.p("fb_fuse.prelu.slope"))?;
            let fused = conv2d(&act, weights.p("fb_fuse.conv.weight"), weights.p("fb_fuse.conv.bias"), &cfg.fuse())?;
            (fused, Some((cat, act)))
        } else {
            (encoded.clone(), None)
        };
        let (out, blocks) = resnet(input, weights)?;
        passes.push(PassTape { fuse, blocks });
        feedback = out.clone();
        features = out;
    }
    let residual = transposed_conv2d(&features, weights.p("decoder.weight"), weights.p("decoder.bias"), &cfg.decoder())?;
    let (projected, proj) = project(&residual, &ProjectionParams { alpha: weights.alpha(), sigma: sigma.to_vec() })?;
    let pre_clip = z.sub(&projected)?;
    let out = clip_intensity(&pre_clip, T::lit(INTENSITY_MIN), T::lit(INTENSITY_MAX))?;
    let tape = ErdTape { z: z.detach(), encoded, passes, features, residual, projected, proj, pre_clip };
    Ok((out, tape))
}

/// Backpropagates `grad_out` through one taped ERD call. Parameter gradients
/// are accumulated into `weights`; the gradient w.r.t. the input `z` is returned.
pub fn erd_backward<T: Scalar>(tape: &ErdTape<T>, weights: &mut ErdWeights<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = weights.config;
    let g_pre = clip_intensity_backward(&tape.pre_clip, T::lit(INTENSITY_MIN), T::lit(INTENSITY_MAX), grad_out)?;

    // pre_clip = z - projected
    let mut g_z = g_pre.clone();
    let g_proj = g_pre.scale(-T::one());

    // projection
    let mut g_res = g_proj.clone();
    let mut g_alpha = T::zero();
    for (n, item) in tape.proj.iter().enumerate() {
        if !item.active || item.norm == T::zero() {
            continue;
        }
        let r = tape.residual.item(n);
        let g = g_proj.item(n);
        let rg: T = r.iter().zip(g).map(|(&a, &b)| a * b).sum();
        let k = item.radius / item.norm;
        let nn = item.norm * item.norm;
        for ((dst, &gi), &ri) in g_res.item_mut(n).iter_mut().zip(g).zip(r) {
            *dst = k * (gi - ri * rg / nn);
        }
        g_alpha += tape.projected.item(n).iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
    }
    weights.acc(ALPHA, &Tensor::scalar(g_alpha))?;

    let dec = transposed_conv2d_backward(&tape.features, weights.p("decoder.weight"), &cfg.decoder(), &g_res)?;
    weights.acc("decoder.weight", &dec.weight)?;
    weights.acc("decoder.bias", &dec.bias)?;

    let mut g_h = dec.input;
    let mut g_enc = Tensor::zeros(tape.encoded.shape());
    let rspec = cfg.resconv();
    for pass in tape.passes.iter().rev() {
        for (i, bt) in pass.blocks.iter().enumerate().rev() {
            // out = input + conv2(prelu2(conv1(prelu1(input))))
            let c2 = conv2d_backward(&bt.act2, weights.p(&block(i, "conv2.weight")), &rspec, &g_h)?;
            weights.acc(&block(i, "conv2.weight"), &c2.weight)?;
            weights.acc(&block(i, "conv2.bias"), &c2.bias)?;
            let (g_c1, g_s2) = prelu_backward(&bt.conv1, weights.p(&block(i, "prelu2.slope")), &c2.input)?;
            weights.acc(&block(i, "prelu2.slope"), &g_s2)?;
            let c1 = conv2d_backward(&bt.act1, weights.p(&block(i, "conv1.weight")), &rspec, &g_c1)?;
            weights.acc(&block(i, "conv1.weight"), &c1.weight)?;
            weights.acc(&block(i, "conv1.bias"), &c1.bias)?;
            let (g_in, g_s1) = prelu_backward(&bt.input, weights.p(&block(i, "prelu1.slope")), &c1.input)?;
            weights.acc(&block(i, "prelu1.slope"), &g_s1)?;
            g_h.axpy(T::one(), &g_in)?;
        }
        match &pass.fuse {
            Some((cat, act)) => {
                let fc = conv2d_backward(act, weights.p("fb_fuse.conv.weight"), &cfg.fuse(), &g_h)?;
                weights.acc("fb_fuse.conv.weight", &fc.weight)?;
                weights.acc("fb_fuse.conv.bias", &fc.bias)?;
                let (g_cat, g_s) = prelu_backward(cat, weights.p("fb_fuse.prelu.slope"), &fc.input)?;
                weights.acc("fb_fuse.prelu.slope", &g_s)?;
                let (ge, gf) = concat_channels_backward(&g_cat, cfg.features)?;
                g_enc.axpy(T::one(), &ge)?;
                // feedback of the previous pass; zero (constant) on the first
                g_h = gf;
            }
            None => {
                g_enc.axpy(T::one(), &g_h)?;
            }
        }
    }

    let enc = conv2d_backward(&tape.z, weights.p("encoder.weight"), &cfg.encoder(), &g_enc)?;
    weights.acc("encoder.weight", &enc.weight)?;
    weights.acc("encoder.bias", &enc.bias)?;
    g_z.axpy(T::one(), &enc.input)?;
    Ok(g_z)
}
