//! The unrolled iteration: extrapolation, data-consistency update and a
//! learned proximal step, repeated `K` times with shared weights.
//!
//! ```text
//! x0 = U y                              (U: upsampler, bilinear by default)
//! for k in 0..K:
//!     z  = x_k + w_k (x_k - x_{k-1})
//!     z~ = z + U (y - H z)
//!     x_{k+1} = prox(z~)
//! ```
//!
//! The module also carries the quadratic-majorizer test oracles for the
//! objective `J(x) = 1/2 ||y - Hx||^2 + lambda R(x)`.

use crate::degradation::{
    apply_h, apply_ht_adjoint, apply_ht_with, estimate_sigma, spectral_norm_hth_history,
    DegradationModel, UpsampleMode,
};
use crate::erd::{erd_backward, erd_forward, erd_forward_taped, ErdTape, ErdWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SolverConfig {
    /// Number of unrolled steps `K`. Zero returns the initialization.
    pub steps: usize,
    pub fb_steps: usize,
    pub scale: usize,
    /// Upsampler used inside the data-consistency update and the initialization.
    pub up_mode: UpsampleMode,
}

impl SolverConfig {
    /// `K = 20` without feedback for x2/x3, `K = 10` with four feedback passes for x4.
    pub fn for_scale(scale: usize) -> Self {
        let (steps, fb_steps) = if scale >= 4 { (10, 4) } else { (20, 1) };
        Self { steps, fb_steps, scale, up_mode: UpsampleMode::Bilinear }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fb_steps < 1 {
            return Err(Error::Config("fb_steps must be at least 1".into()));
        }
        if self.scale < 1 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trainable extrapolation weights, one per unrolled step.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverWeights<T> {
    pub w: Tensor<T>,
}

pub const EXTRAPOLATION: &str = "extrapolation.w";

impl<T: Scalar> SolverWeights<T> {
    pub fn from_values(values: &[T]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("extrapolation weights must be finite".into()));
        }
        let mut w = Tensor::from_vec([1, 1, 1, values.len()], values.to_vec())?;
        w.require_grad();
        Ok(Self { w })
    }

    pub fn steps(&self) -> usize {
        self.w.len()
    }

    pub fn get(&self, k: usize) -> T {
        self.w.data()[k]
    }

    pub fn cast<U: Scalar>(&self) -> SolverWeights<U> {
        let mut w = self.w.cast();
        w.require_grad();
        SolverWeights { w }
    }
}

/// `w_t = (t - 1) / (t + 2)` for `t = 1..=K`.
pub fn init_extrapolation_weights<T: Scalar>(steps: usize) -> Result<SolverWeights<T>> {
    if steps < 1 {
        return Err(Error::Config("at least one iterative step is required".into()));
    }
    let values: Vec<T> = (1..=steps).map(|t| T::lit((t as f64 - 1.0) / (t as f64 + 2.0))).collect();
    SolverWeights::from_values(&values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState<T> {
    pub x_prev: Tensor<T>,
    pub x_curr: Tensor<T>,
    /// Input of the most recent proximal step (after the data-consistency update).
    pub z: Tensor<T>,
    pub k: usize,
}

impl<T: Scalar> SolverState<T> {
    pub fn detach(&self) -> Self {
        Self { x_prev: self.x_prev.detach(), x_curr: self.x_curr.detach(), z: self.z.detach(), k: self.k }
    }
}

/// The proximal map plugged into each step.
pub trait ProximalMap<T: Scalar> {
    fn apply(&self, z: &Tensor<T>, sigma: &[T]) -> Result<Tensor<T>>;
}

/// Identity map, useful as a test stub.
pub struct IdentityProx;

impl<T: Scalar> ProximalMap<T> for IdentityProx {
    fn apply(&self, z: &Tensor<T>, _sigma: &[T]) -> Result<Tensor<T>> {
        Ok(z.detach())
    }
}

/// The learned ERD denoiser.
pub struct ErdProx<'a, T> {
    pub weights: &'a ErdWeights<T>,
    pub fb_steps: usize,
}

impl<T: Scalar> ProximalMap<T> for ErdProx<'_, T> {
    fn apply(&self, z: &Tensor<T>, sigma: &[T]) -> Result<Tensor<T>> {
        erd_forward(z, self.weights, sigma, self.fb_steps)
    }
}

/// Per-item noise estimates of an LR batch.
pub fn estimate_sigmas<T: Scalar>(y: &Tensor<T>) -> Result<Vec<T>> {
    (0..y.n()).map(|n| estimate_sigma(&y.select(n)).map(T::lit)).collect()
}

fn data_consistency<T: Scalar>(z: &Tensor<T>, y: &Tensor<T>, model: &DegradationModel, mode: UpsampleMode) -> Result<Tensor<T>> {
    let r = y.sub(&apply_h(z, model)?)?;
    z.add(&apply_ht_with(&r, model, mode)?)
}

/// `x0 = U y`, `z = x0 + U(y - H x0)`, using the model's upsampling mode.
pub fn initialize<T: Scalar>(y: &Tensor<T>, model: &DegradationModel) -> Result<SolverState<T>> {
    let x0 = apply_ht_with(y, model, model.up_mode)?;
    let z = data_consistency(&x0, y, model, model.up_mode)?;
    Ok(SolverState { x_prev: x0.clone(), x_curr: x0, z, k: 0 })
}

/// One extrapolation + proximal step.
pub fn step<T: Scalar, P: ProximalMap<T> + ?Sized>(
    state: &SolverState<T>,
    y: &Tensor<T>,
    model: &DegradationModel,
    prox: &P,
    weights: &SolverWeights<T>,
    sigma: &[T],
) -> Result<SolverState<T>> {
    if state.k >= weights.steps() {
        return Err(Error::State(format!(
            "step index {} reached the configured {} steps",
            state.k,
            weights.steps()
        )));
    }
    let w = weights.get(state.k);
    let z = extrapolate(state, w)?;
    let z_dc = data_consistency(&z, y, model, model.up_mode)?;
    let x_next = prox.apply(&z_dc, sigma)?;
    Ok(SolverState { x_prev: state.x_curr.clone(), x_curr: x_next, z: z_dc, k: state.k + 1 })
}

fn extrapolate<T: Scalar>(state: &SolverState<T>, w: T) -> Result<Tensor<T>> {
    if w == T::zero() {
        return Ok(state.x_curr.detach());
    }
    state.x_curr.zip_map(&state.x_prev, |c, p| c + w * (c - p))
}

/// Runs `config.steps` steps from the initialization and returns `x_K`.
pub fn run<T: Scalar, P: ProximalMap<T> + ?Sized>(
    y: &Tensor<T>,
    model: &DegradationModel,
    prox: &P,
    weights: &SolverWeights<T>,
    config: &SolverConfig,
    sigma: &[T],
) -> Result<Tensor<T>> {
    config.validate()?;
    if model.scale != config.scale {
        return Err(Error::Config(format!(
            "solver configured for x{} but the degradation model is x{}",
            config.scale, model.scale
        )));
    }
    if config.steps > weights.steps() {
        return Err(Error::Config(format!(
            "{} steps requested with only {} extrapolation weights",
            config.steps,
            weights.steps()
        )));
    }
    let model = model.with_up_mode(config.up_mode);
    let mut state = initialize(y, &model)?;
    for _ in 0..config.steps {
        state = step(&state, y, &model, prox, weights, sigma)?;
    }
    Ok(state.x_curr)
}

/// Runs the ERD-based solver with noise levels estimated from `y`.
pub fn super_resolve<T: Scalar>(
    y: &Tensor<T>,
    model: &DegradationModel,
    erd: &ErdWeights<T>,
    weights: &SolverWeights<T>,
    config: &SolverConfig,
) -> Result<Tensor<T>> {
    let sigma = estimate_sigmas(y)?;
    run(y, model, &ErdProx { weights: erd, fb_steps: config.fb_steps }, weights, config, &sigma)
}

/// Activations of one taped step.
#[derive(Debug)]
pub struct StepTape<T> {
    k: usize,
    w: T,
    diff: Tensor<T>,
    erd: ErdTape<T>,
}

/// A differentiable forward segment of the unrolled iteration.
#[derive(Debug)]
pub struct WindowTape<T> {
    steps: Vec<StepTape<T>>,
    up_mode: UpsampleMode,
}


impl<T> WindowTape<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs `count` ERD steps from `state`, recording what the backward pass
/// needs. The returned state is the new (still attached) iterate; gradients
/// never flow into the starting `state`.
#[allow(clippy::too_many_arguments)]
pub fn run_window_taped<T: Scalar>(
    state: &SolverState<T>,
    y: &Tensor<T>,
    model: &DegradationModel,
    erd: &ErdWeights<T>,
    weights: &SolverWeights<T>,
    sigma: &[T],
    fb_steps: usize,
    count: usize,
) -> Result<(SolverState<T>, WindowTape<T>)> {
    let mut state = state.detach();
    let mut steps = Vec::with_capacity(count);
    for _ in 0..count {
        if state.k >= weights.steps() {
            return Err(Error::State(format!(
                "step index {} reached the configured {} steps",
                state.k,
                weights.steps()
            )));
        }
        let w = weights.get(state.k);
        let diff = state.x_curr.sub(&state.x_prev)?;
        let z = extrapolate(&state, w)?;
        let z_dc = data_consistency(&z, y, model, model.up_mode)?;
        let (x_next, tape) = erd_forward_taped(&z_dc, erd, sigma, fb_steps)?;
        steps.push(StepTape { k: state.k, w, diff, erd: tape });
        let x_prev = std::mem::replace(&mut state.x_curr, x_next);
        state = SolverState { x_prev, x_curr: state.x_curr, z: z_dc, k: state.k + 1 };
    }
    Ok((state, WindowTape { steps, up_mode: model.up_mode }))
}

/// Backpropagates `grad_x` (the gradient of the loss w.r.t. the window's final
/// iterate) through every taped step. ERD parameter gradients accumulate into
/// `erd`, extrapolation gradients into `weights.w`. The gradient reaching the
/// window's starting state is discarded (truncation).
pub fn window_backward<T: Scalar>(
    tape: &WindowTape<T>,
    model: &DegradationModel,
    erd: &mut ErdWeights<T>,
    weights: &mut SolverWeights<T>,
    grad_x: &Tensor<T>,
) -> Result<()> {
    let mut g_curr = grad_x.detach();
    let mut g_prev: Option<Tensor<T>> = None;
    let mut g_w = vec![T::zero(); weights.steps()];
    for st in tape.steps.iter().rev() {
        // after the step: (x_prev, x_curr) = (x_k, x_{k+1}); g_curr is d/dx_{k+1}
        let g_zdc = erd_backward(&st.erd, erd, &g_curr)?;
        // z~ = z + U (y - H z)  =>  dz = dz~ - H^T U^T dz~
        let ut = apply_ht_adjoint(&g_zdc, model, tape.up_mode)?;
        let g_z = g_zdc.sub(&apply_ht_with(&ut, model, UpsampleMode::Adjoint)?)?;
        g_w[st.k] += g_z.dot(&st.diff)?;
        // z = (1 + w) x_k - w x_{k-1}
        let mut g_xk = g_z.scale(T::one() + st.w);
        if let Some(gp) = &g_prev {
            g_xk.axpy(T::one(), gp)?;
        }
        g_prev = Some(g_z.scale(-st.w));
        g_curr = g_xk;
    }
    weights.w.accumulate_grad(&g_w)
}

/// A convex regularizer used by the objective/majorizer test oracles.
pub trait Regularizer {
    fn value(&self, x: &Tensor<f64>) -> f64;

    /// `argmin_u 1/2 ||u - v||^2 + tau R(u)` when available in closed form.
    fn prox(&self, v: &Tensor<f64>, tau: f64) -> Option<Tensor<f64>>;
}

/// `R(x) = 1/2 ||x||^2`.
pub struct SquaredL2;

impl Regularizer for SquaredL2 {
    fn value(&self, x: &Tensor<f64>) -> f64 {
        0.5 * x.dot(x).unwrap_or(0.0)
    }

    fn prox(&self, v: &Tensor<f64>, tau: f64) -> Option<Tensor<f64>> {
        Some(v.scale(1.0 / (1.0 + tau)))
    }
}

/// Anisotropic total variation: the sum of absolute horizontal and vertical
/// forward differences in every channel.
pub struct AnisotropicTv;

impl Regularizer for AnisotropicTv {
    fn value(&self, x: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = x.shape();
        let mut s = 0.0;
        for ni in 0..n {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = x.at([ni, ci, yy, xx]);
                        if xx + 1 < w {
                            s += (x.at([ni, ci, yy, xx + 1]) - v).abs();
                        }
                        if yy + 1 < h {
                            s += (x.at([ni, ci, yy + 1, xx]) - v).abs();
                        }
                    }
                }
            }
        }
        s
    }

    fn prox(&self, _v: &Tensor<f64>, _tau: f64) -> Option<Tensor<f64>> {
        None
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("regularization weight {lambda} must be non-negative")));
    }
    Ok(())
}

/// `J(x) = 1/2 ||y - H x||^2 + lambda R(x)`.
pub fn objective_j(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    model: &DegradationModel,
    lambda: f64,
    reg: &dyn Regularizer,
) -> Result<f64> {
    check_lambda(lambda)?;
    let r = y.sub(&apply_h(x, model)?)?;
    Ok(0.5 * r.dot(&r)? + lambda * reg.value(x))
}

/// Power-iteration count used to validate majorizer constants.
pub const MAJORIZER_POWER_ITERS: usize = 200;

/// Estimate of `||H^T H||_2` (exact adjoint) on the grid of `x`.
pub fn majorizer_bound(model: &DegradationModel, h: usize, w: usize) -> Result<f64> {
    let exact = model.with_up_mode(UpsampleMode::Adjoint);
    let hist = spectral_norm_hth_history(&exact, MAJORIZER_POWER_ITERS, h, w)?;
    Ok(*hist.last().expect("at least one iteration"))
}

/// `Q - J = 1/2 (x - x0)^T (alpha I - H^T H) (x - x0)`, which is non-negative
/// for `alpha >= ||H^T H||_2`; equality is allowed so that the degenerate
/// `H = I, alpha = 1` case evaluates. The relative slack absorbs rounding in
/// the power-iteration estimate.
fn check_alpha(alpha: f64, norm: f64) -> Result<()> {
    if !(alpha >= norm * (1.0 - 1e-12)) {
        return Err(Error::Validity { alpha, norm });
    }
    Ok(())
}

/// Centre of the majorizer: `z = x0 + (1/alpha) H^T (y - H x0)` with the exact adjoint.
pub fn majorizer_center(x0: &Tensor<f64>, y: &Tensor<f64>, model: &DegradationModel, alpha: f64) -> Result<Tensor<f64>> {
    let r = y.sub(&apply_h(x0, model)?)?;
    let g = apply_ht_with(&r, model, UpsampleMode::Adjoint)?;
    let mut z = x0.detach();
    z.axpy(1.0 / alpha, &g)?;
    Ok(z)
}

/// `Q(x; x0) = (alpha/2) ||x - z||^2 + lambda R(x) + c`, with `c` chosen so that
/// `Q(x0; x0) = J(x0)`. Fails with a validity error when `alpha` is below the
/// spectral-norm estimate of `H^T H`.
pub fn majorizer_q(
    x: &Tensor<f64>,
    x0: &Tensor<f64>,
    y: &Tensor<f64>,
    model: &DegradationModel,
    lambda: f64,
    alpha: f64,
    reg: &dyn Regularizer,
) -> Result<f64> {
    check_lambda(lambda)?;
    x.expect_same_shape(x0, "majorizer")?;
    let norm = majorizer_bound(model, x0.h(), x0.w())?;
    check_alpha(alpha, norm)?;
    let r0 = y.sub(&apply_h(x0, model)?)?;
    let g = apply_ht_with(&r0, model, UpsampleMode::Adjoint)?;
    let c = 0.5 * r0.dot(&r0)? - g.dot(&g)? / (2.0 * alpha);
    let mut z = x0.detach();
    z.axpy(1.0 / alpha, &g)?;
    let d = x.sub(&z)?;
    Ok(0.5 * alpha * d.dot(&d)? + lambda * reg.value(x) + c)
}

/// Exact MM iterations `x <- prox_{lambda/alpha}(z(x))` for a regularizer with
/// a closed-form proximal map. Returns `J` at every iterate, starting at `x0`.
pub fn mm_descent(
    x0: &Tensor<f64>,
    y: &Tensor<f64>,
    model: &DegradationModel,
    lambda: f64,
    alpha: f64,
    reg: &dyn Regularizer,
    iters: usize,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let norm = majorizer_bound(model, x0.h(), x0.w())?;
    check_alpha(alpha, norm)?;
    let mut x = x0.detach();
    let mut history = vec![objective_j(&x, y, model, lambda, reg)?];
    for _ in 0..iters {
        let z = majorizer_center(&x, y, model, alpha)?;
        x = reg
            .prox(&z, lambda / alpha)
            .ok_or_else(|| Error::InvalidParameter("regularizer has no closed-form proximal map".into()))?;
        history.push(objective_j(&x, y, model, lambda, reg)?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erd::ErdConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..scale))
    }

    #[test]
    fn extrapolation_schedule() {
        let w = init_extrapolation_weights::<f64>(20).unwrap();
        assert_eq!(w.get(0), 0.0);
        assert!((w.get(1) - 0.25).abs() < 1e-15);
        for k in 1..20 {
            assert!(w.get(k) > w.get(k - 1) && w.get(k) < 1.0);
        }
        assert!(matches!(init_extrapolation_weights::<f32>(0), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_per_scale() {
        assert_eq!((SolverConfig::for_scale(2).steps, SolverConfig::for_scale(2).fb_steps), (20, 1));
        assert_eq!((SolverConfig::for_scale(3).steps, SolverConfig::for_scale(3).fb_steps), (20, 1));
        assert_eq!((SolverConfig::for_scale(4).steps, SolverConfig::for_scale(4).fb_steps), (10, 4));
    }

    #[test]
    fn zero_steps_returns_upsampled_input() {
        let model = DegradationModel::new(2).unwrap();
        let y = random([1, 3, 6, 5], 1, 255.0);
        let w = init_extrapolation_weights::<f64>(1).unwrap();
        let mut cfg = SolverConfig::for_scale(2);
        cfg.steps = 0;
        let x = run(&y, &model, &IdentityProx, &w, &cfg, &[0.0]).unwrap();
        assert_eq!(x, apply_ht_with(&y, &model, UpsampleMode::Bilinear).unwrap());
    }

    #[test]
    fn stepping_past_the_end_is_a_state_error() {
        let model = DegradationModel::new(2).unwrap();
        let y = random([1, 1, 4, 4], 2, 255.0);
        let w = init_extrapolation_weights::<f64>(2).unwrap();
        let mut s = initialize(&y, &model).unwrap();
        for _ in 0..2 {
            s = step(&s, &y, &model, &IdentityProx, &w, &[0.0]).unwrap();
        }
        assert_eq!(s.k, 2);
        assert!(matches!(step(&s, &y, &model, &IdentityProx, &w, &[0.0]), Err(Error::State(_))));
    }

    #[test]
    fn mismatched_scale_is_rejected() {
        let model = DegradationModel::new(3).unwrap();
        let y = random([1, 1, 4, 4], 3, 1.0);
        let w = init_extrapolation_weights::<f64>(20).unwrap();
        assert!(run(&y, &model, &IdentityProx, &w, &SolverConfig::for_scale(2), &[0.0]).is_err());
    }

    #[test]
    fn majorizer_touches_and_dominates() {
        let model = DegradationModel::new(2).unwrap();
        let y = random([1, 1, 6, 6], 4, 1.0);
        let x0 = random([1, 1, 12, 12], 5, 1.0);
        let alpha = majorizer_bound(&model, 12, 12).unwrap() + 0.01;
        for reg in [&SquaredL2 as &dyn Regularizer, &AnisotropicTv] {
            let q0 = majorizer_q(&x0, &x0, &y, &model, 0.1, alpha, reg).unwrap();
            let j0 = objective_j(&x0, &y, &model, 0.1, reg).unwrap();
            assert!((q0 - j0).abs() <= 1e-10 * j0.abs().max(1.0));
            for seed in 0..5 {
                let x = random([1, 1, 12, 12], 10 + seed, 1.0);
                let q = majorizer_q(&x, &x0, &y, &model, 0.1, alpha, reg).unwrap();
                let j = objective_j(&x, &y, &model, 0.1, reg).unwrap();
                assert!(q >= j - 1e-12);
            }
        }
        assert!(matches!(
            majorizer_q(&x0, &x0, &y, &model, 0.1, 0.1, &SquaredL2),
            Err(Error::Validity { .. })
        ));
        assert!(objective_j(&x0, &y, &model, -1.0, &SquaredL2).is_err());
    }

    #[test]
    fn mm_iterations_do_not_increase_the_objective() {
        let model = DegradationModel::new(2).unwrap();
        let y = random([1, 1, 8, 8], 6, 1.0);
        let x0 = apply_ht_with(&y, &model, UpsampleMode::Bilinear).unwrap();
        let alpha = majorizer_bound(&model, 16, 16).unwrap() + 0.01;
        let hist = mm_descent(&x0, &y, &model, 0.05, alpha, &SquaredL2, 30).unwrap();
        for pair in hist.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{pair:?}");
        }
        assert!(mm_descent(&x0, &y, &model, 0.05, alpha, &AnisotropicTv, 1).is_err());
    }

    #[test]
    fn taped_window_matches_untaped_run() {
        let model = DegradationModel::new(2).unwrap();
        let cfg = ErdConfig { channels: 1, features: 4, resblocks: 1, ..ErdConfig::default() };
        let erd = ErdWeights::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let w = init_extrapolation_weights::<f64>(3).unwrap();
        let y = random([1, 1, 5, 5], 8, 255.0);
        let sigma = [3.0];
        let prox = ErdProx { weights: &erd, fb_steps: 1 };
        let mut s = initialize(&y, &model).unwrap();
        for _ in 0..3 {
            s = step(&s, &y, &model, &prox, &w, &sigma).unwrap();
        }
        let s0 = initialize(&y, &model).unwrap();
        let (a, t1) = run_window_taped(&s0, &y, &model, &erd, &w, &sigma, 1, 2).unwrap();
        let (b, t2) = run_window_taped(&a, &y, &model, &erd, &w, &sigma, 1, 1).unwrap();
        assert_eq!((t1.len(), t2.len()), (2, 1));
        assert_eq!(b.x_curr, s.x_curr);
        assert!(run_window_taped(&b, &y, &model, &erd, &w, &sigma, 1, 1).is_err());
    }
}
