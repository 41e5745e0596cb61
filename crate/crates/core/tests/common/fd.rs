//! Finite-difference gradient checking in double precision. Every `check_*`
//! function returns the worst relative error it saw so that callers can
//! assert on it or report it.

use mmsr::degradation::DegradationModel;
use mmsr::erd::{erd_backward, erd_forward, erd_forward_taped, ErdConfig, ErdWeights};
use mmsr::nn::{
    clip_intensity, clip_intensity_backward, concat_channels, concat_channels_backward, conv2d, conv2d_backward,
    l1_loss, l1_loss_backward, prelu, prelu_backward, transposed_conv2d, transposed_conv2d_backward, ConvSpec,
    PaddingMode,
};
use mmsr::solver::{estimate_sigmas, initialize, run, ErdProx, SolverConfig, SolverWeights};
use mmsr::trainer::window_gradients;
use mmsr::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;

pub const LAYER_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Uniform tensor in `[lo, hi)`.
pub fn uniform(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    random_tensor(shape, seed, hi - lo).map(|v| v + lo)
}

/// Values bounded away from zero (for kinked activations).
pub fn away_from_zero(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    uniform(shape, seed, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Up to `max` distinct probe indices in `0..len`, deterministic per seed.
pub fn probes(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = Vec::with_capacity(max);
    while out.len() < max {
        let i = rng.random_range(0..len);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Numerical derivative of `f` along coordinate `i`: fourth-order central
/// differences over a ladder of steps `1e-2 .. 1e-7` (relative), keeping the
/// estimate where two neighbouring steps agree best. Large steps may cross an
/// activation kink and small ones drown in rounding noise; agreement between
/// neighbours picks the clean regime without looking at the analytic value.
pub fn numeric_derivative(x: &Tensor<f64>, i: usize, f: &impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let at = |d: f64| {
        let mut xd = x.clone();
        xd.data_mut()[i] += d;
        f(&xd)
    };
    let base = x.data()[i].abs().max(1.0);
    let est: Vec<f64> = (2..=7)
        .map(|p| {
            let h = base * 10f64.powi(-p);
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        })
        .collect();
    let j = (0..est.len() - 1)
        .min_by(|&a, &b| (est[a] - est[a + 1]).abs().total_cmp(&(est[b] - est[b + 1]).abs()))
        .unwrap();
    est[j + 1]
}

/// Compares `analytic` against [`numeric_derivative`] at the probe indices of
/// `x`. Relative errors use a floor proportional to the largest analytic
/// component so that near-zero entries are judged on an absolute scale.
/// Returns the worst relative error (infinite when any estimate is not finite).
pub fn fd_check(x: &Tensor<f64>, analytic: &[f64], f: impl Fn(&Tensor<f64>) -> f64, max_probes: usize) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-10);
    let mut worst = 0.0f64;
    for i in probes(x.len(), max_probes, x.len() as u64) {
        let numeric = numeric_derivative(x, i, &f);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
    }
    worst
}

/// `L = <a, b>`, used with a fixed random cotangent.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap()
}

/// Input, weight and bias gradients of a (strided) convolution.
pub fn check_conv(spec: ConvSpec, input: [usize; 4], seed: u64) -> f64 {
    let x = uniform(input, seed, -1.0, 1.0);
    let wt = uniform(spec.weight_shape(), seed + 1, -0.5, 0.5);
    let b = uniform([1, 1, 1, spec.out_channels], seed + 2, -0.5, 0.5);
    let out = conv2d(&x, &wt, &b, &spec).unwrap();
    let c = uniform(out.shape(), seed + 3, -1.0, 1.0);
    let g = conv2d_backward(&x, &wt, &spec, &c).unwrap();
    [
        fd_check(&x, g.input.data(), |v| dot(&conv2d(v, &wt, &b, &spec).unwrap(), &c), 40),
        fd_check(&wt, g.weight.data(), |v| dot(&conv2d(&x, v, &b, &spec).unwrap(), &c), 40),
        fd_check(&b, g.bias.data(), |v| dot(&conv2d(&x, &wt, v, &spec).unwrap(), &c), 40),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Every convolution variant the network uses, plus strided and zero-padded ones.
pub fn check_all_convs() -> f64 {
    let mut worst = 0.0f64;
    for (i, mode) in [PaddingMode::Reflect, PaddingMode::Zero].into_iter().enumerate() {
        let i = i as u64;
        worst = worst.max(check_conv(ConvSpec::new(3, 4, 3, mode), [2, 3, 6, 7], 10 + i));
        worst = worst.max(check_conv(ConvSpec::new(2, 3, 5, mode), [1, 2, 7, 6], 20 + i));
        worst = worst.max(check_conv(ConvSpec::new(4, 2, 1, mode), [1, 4, 5, 5], 30 + i));
        let strided = ConvSpec { stride: 2, ..ConvSpec::new(3, 2, 3, mode) };
        worst = worst.max(check_conv(strided, [1, 3, 8, 7], 40 + i));
    }
    worst
}

pub fn check_transposed_convs() -> f64 {
    let mut worst = 0.0f64;
    for (i, mode) in [PaddingMode::Reflect, PaddingMode::Zero].into_iter().enumerate() {
        for (k, shape) in [(5, [2, 4, 6, 5]), (3, [1, 4, 5, 7])] {
            let spec = ConvSpec::transposed(4, 3, k, mode);
            let seed = 50 + 10 * i as u64 + k as u64;
            let x = uniform(shape, seed, -1.0, 1.0);
            let wt = uniform(spec.weight_shape(), seed + 1, -0.5, 0.5);
            let b = uniform([1, 1, 1, 3], seed + 2, -0.5, 0.5);
            let out = transposed_conv2d(&x, &wt, &b, &spec).unwrap();
            let c = uniform(out.shape(), seed + 3, -1.0, 1.0);
            let g = transposed_conv2d_backward(&x, &wt, &spec, &c).unwrap();
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&transposed_conv2d(x, w, b, &spec).unwrap(), &c);
            worst = worst.max(fd_check(&x, g.input.data(), |v| f(v, &wt, &b), 40));
            worst = worst.max(fd_check(&wt, g.weight.data(), |v| f(&x, v, &b), 40));
            worst = worst.max(fd_check(&b, g.bias.data(), |v| f(&x, &wt, v), 40));
        }
    }
    worst
}

pub fn check_prelu() -> f64 {
    let x = away_from_zero([2, 3, 4, 5], 60);
    let slopes = Tensor::from_vec([1, 1, 1, 3], vec![0.25, -0.1, 0.7]).unwrap();
    let c = uniform(x.shape(), 61, -1.0, 1.0);
    let (gx, gs) = prelu_backward(&x, &slopes, &c).unwrap();
    fd_check(&x, gx.data(), |v| dot(&prelu(v, &slopes).unwrap(), &c), 40)
        .max(fd_check(&slopes, gs.data(), |v| dot(&prelu(&x, v).unwrap(), &c), 40))
}

pub fn check_concat() -> f64 {
    let a = uniform([2, 2, 3, 4], 70, -1.0, 1.0);
    let b = uniform([2, 3, 3, 4], 71, -1.0, 1.0);
    let c = uniform([2, 5, 3, 4], 72, -1.0, 1.0);
    let (ga, gb) = concat_channels_backward(&c, 2).unwrap();
    fd_check(&a, ga.data(), |v| dot(&concat_channels(v, &b).unwrap(), &c), 40)
        .max(fd_check(&b, gb.data(), |v| dot(&concat_channels(&a, v).unwrap(), &c), 40))
}

/// Clipping checked on values in (-60, 320) kept at least 1 away from 0 and 255.
pub fn clip_input() -> Tensor<f64> {
    uniform([1, 3, 6, 6], 80, -60.0, 320.0).map(|v| if v.abs() < 1.0 || (v - 255.0).abs() < 1.0 { v + 2.0 } else { v })
}

pub fn check_clip() -> f64 {
    let x = clip_input();
    let c = uniform(x.shape(), 81, -1.0, 1.0);
    let g = clip_intensity_backward(&x, 0.0, 255.0, &c).unwrap();
    fd_check(&x, g.data(), |v| dot(&clip_intensity(v, 0.0, 255.0).unwrap(), &c), 40)
}

pub fn check_l1() -> f64 {
    let p = uniform([2, 3, 4, 4], 90, 0.0, 255.0);
    let t = uniform([2, 3, 4, 4], 91, 0.0, 255.0);
    let g = l1_loss_backward(&p, &t).unwrap();
    fd_check(&p, g.data(), |v| l1_loss(v, &t).unwrap(), 40)
}

/// A small ERD block (4 features, 2 resblocks) with random non-zero biases so
/// that their gradients are exercised away from the initialization point.
pub fn tiny_erd(feedback: bool, seed: u64) -> ErdWeights<f64> {
    let cfg = ErdConfig { channels: 3, features: 4, resblocks: 2, feedback, ..ErdConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ErdWeights::init(cfg, &mut rng);
    let names: Vec<String> = w.params.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for name in names {
        for v in w.params.expect_mut(&name).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    w
}

/// Result of [`check_erd`].
pub struct ErdCheck {
    pub worst: f64,
    /// Analytic gradient of the projection scale `alpha`.
    pub alpha_grad: f64,
}

/// Checks every named ERD parameter and the input gradient.
pub fn check_erd(weights: &ErdWeights<f64>, z: &Tensor<f64>, sigma: &[f64], fb: usize) -> ErdCheck {
    let out = erd_forward(z, weights, sigma, fb).unwrap();
    let c = uniform(out.shape(), 7, -1.0, 1.0);
    let (_, tape) = erd_forward_taped(z, weights, sigma, fb).unwrap();
    let mut w = weights.clone();
    w.params.zero_grad();
    let gz = erd_backward(&tape, &mut w, &c).unwrap();
    let mut worst = fd_check(z, gz.data(), |v| dot(&erd_forward(v, weights, sigma, fb).unwrap(), &c), 40);
    for (name, p) in weights.params.iter() {
        let g = w.params.expect(name).grad().expect("gradient buffer").to_vec();
        let f = |v: &Tensor<f64>| {
            let mut pert = weights.clone();
            pert.params.expect_mut(name).data_mut().copy_from_slice(v.data());
            dot(&erd_forward(z, &pert, sigma, fb).unwrap(), &c)
        };
        worst = worst.max(fd_check(p, &g, f, 12));
    }
    let alpha_grad = w.params.expect(mmsr::erd::ALPHA).grad().unwrap()[0];
    ErdCheck { worst, alpha_grad }
}

/// An instance where the projection is active and nothing is clipped: the
/// decoder is scaled down, and sigma is chosen so that the ball radius
/// `2 sigma sqrt(N - 1)` is half the unprojected residual norm.
pub fn projection_active_instance() -> (ErdWeights<f64>, Tensor<f64>, f64) {
    let z = uniform([1, 3, 6, 6], 100, 30.0, 220.0);
    let mut weights = tiny_erd(false, 101);
    for v in weights.params.expect_mut("decoder.weight").data_mut() {
        *v *= 0.02;
    }
    let free = erd_forward(&z, &weights, &[1e6], 1).unwrap();
    assert!(free.data().iter().all(|v| *v > 0.0 && *v < 255.0), "no clipping in this instance");
    let r_norm = z.sub(&free).unwrap().norm();
    let sigma = 0.25 * r_norm / ((z.len() - 1) as f64).sqrt();
    (weights, z, sigma)
}

/// The full K-step solver loss, recomputed from scratch.
pub fn solver_loss(
    y: &Tensor<f64>,
    hr: &Tensor<f64>,
    model: &DegradationModel,
    erd: &ErdWeights<f64>,
    w: &SolverWeights<f64>,
    cfg: &SolverConfig,
    sigma: &[f64],
) -> f64 {
    let x = run(y, model, &ErdProx { weights: erd, fb_steps: cfg.fb_steps }, w, cfg, sigma).unwrap();
    l1_loss(&x, hr).unwrap()
}

/// Result of [`check_end_to_end`].
pub struct EndToEnd {
    /// Worst relative error over the extrapolation weights and every ERD parameter.
    pub worst: f64,
    /// Analytic gradient of the extrapolation weights.
    pub grad_w: Vec<f64>,
    /// `|window loss - recomputed loss| / loss`.
    pub loss_mismatch: f64,
}

/// Full backpropagation through a K = 2 unrolled solver at ×2 (one truncation
/// window covering every step) against finite differences of the recomputed loss.
pub fn check_end_to_end(feedback: bool, fb: usize, seed: u64) -> EndToEnd {
    let k = 2;
    let scale = 2;
    let model = DegradationModel::new(scale).unwrap();
    let cfg = SolverConfig { steps: k, fb_steps: fb, ..SolverConfig::for_scale(scale) };
    let y = uniform([1, 3, 4, 5], seed, 40.0, 210.0);
    let hr = uniform([1, 3, 8, 10], seed + 1, 40.0, 210.0);
    let sigma = estimate_sigmas(&y).unwrap();
    let erd = tiny_erd(feedback, seed + 2);
    // non-trivial extrapolation weights so both enter the gradient
    let w = SolverWeights::from_values(&[0.3, 0.45]).unwrap();

    let mut erd_g = erd.clone();
    let mut w_g = w.clone();
    erd_g.params.zero_grad();
    w_g.w.zero_grad();
    let init = initialize(&y, &model).unwrap();
    let (last, loss) = window_gradients(&mut erd_g, &mut w_g, &init, &y, &hr, &model, &sigma, fb, k).unwrap();
    assert_eq!(last.k, k);
    let loss_mismatch = (loss - solver_loss(&y, &hr, &model, &erd, &w, &cfg, &sigma)).abs() / loss;

    let grad_w = w_g.w.grad().unwrap().to_vec();
    let f = |v: &Tensor<f64>| {
        let mut ww = w.clone();
        ww.w.data_mut().copy_from_slice(v.data());
        solver_loss(&y, &hr, &model, &erd, &ww, &cfg, &sigma)
    };
    let mut worst = fd_check(&w.w, &grad_w, f, 8);
    for (name, p) in erd.params.iter() {
        let g = erd_g.params.expect(name).grad().unwrap().to_vec();
        let f = |v: &Tensor<f64>| {
            let mut pert = erd.clone();
            pert.params.expect_mut(name).data_mut().copy_from_slice(v.data());
            solver_loss(&y, &hr, &model, &pert, &w, &cfg, &sigma)
        };
        worst = worst.max(fd_check(p, &g, f, 6));
    }
    EndToEnd { worst, grad_w, loss_mismatch }
}
