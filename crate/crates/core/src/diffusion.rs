//! Noise schedule, forward process, training objective and the strided
//! restoration sampler.

use serde::{Deserialize, Serialize};

use crate::charprior::CharSequence;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Adds posterior noise at every step but the last.
    Ancestral,
    /// Noiseless update.
    Deterministic,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerMode::Ancestral),
            "deterministic" => Ok(SamplerMode::Deterministic),
            _ => Err(Error::config("schedule.sampler", format!("unknown sampler {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub sampler: SamplerMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
            sampler: SamplerMode::Ancestral,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.sampling_steps)
    }
}

/// Linear beta schedule with its cumulative products and the restoration
/// subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Increasing timesteps visited by the sampler, ending at `T - 1`.
    pub taus: Vec<usize>,
}

/// Builds the schedule. `beta_start = 0` is accepted so that the identity
/// limit can be exercised; otherwise betas lie in `(0, 1)`.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64, sampling_steps: usize) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::config("schedule.timesteps", "must be at least 1"));
    }
    if sampling_steps == 0 || sampling_steps > timesteps {
        return Err(Error::config(
            "schedule.sampling_steps",
            format!("{sampling_steps} must lie in 1..={timesteps}"),
        ));
    }
    if !(0.0..1.0).contains(&beta_start) || !(beta_start..1.0).contains(&beta_end) || beta_end <= 0.0 {
        return Err(Error::config(
            "schedule.beta_start",
            format!("need 0 <= beta_start <= beta_end < 1, got {beta_start} and {beta_end}"),
        ));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|t| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    if acc >= 0.01 {
        log::warn!("final cumulative alpha {acc:.4} leaves signal at the start of sampling");
    }
    let stride = timesteps / sampling_steps;
    let taus = (0..sampling_steps)
        .map(|k| timesteps - 1 - (sampling_steps - 1 - k) * stride)
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        taus,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn sampling_steps(&self) -> usize {
        self.taus.len()
    }

    /// Coefficients of the step from `taus[k]` to `taus[k - 1]` (or to the
    /// clean image when `k == 0`).
    pub fn posterior(&self, k: usize) -> Posterior {
        let ab_t = self.alpha_bars[self.taus[k]];
        let ab_prev = if k == 0 { 1.0 } else { self.alpha_bars[self.taus[k - 1]] };
        let beta = 1.0 - ab_t / ab_prev;
        Posterior {
            alpha_bar: ab_t,
            alpha_bar_prev: ab_prev,
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab_t),
            coef_xt: (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
            variance: (1.0 - ab_prev) / (1.0 - ab_t) * beta,
        }
    }
}

/// `mean = coef_x0 * x0 + coef_xt * x_t`, plus `variance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = *schedule
        .alpha_bars
        .get(t)
        .ok_or_else(|| Error::invalid("q_sample", format!("t = {t} outside 0..{}", schedule.timesteps())))?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

/// Anything that predicts the noise in `x_t` given the conditioning.
pub trait NoisePredictor<T: Scalar> {
    fn predict_eps(&self, tape: &mut Tape<T>, x_t: Var, x_lq: Var, t: &[usize], priors: &[CharSequence])
        -> Result<Var>;
}

impl<T: Scalar> NoisePredictor<T> for DenoiserModel<T> {
    fn predict_eps(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        x_lq: Var,
        t: &[usize],
        priors: &[CharSequence],
    ) -> Result<Var> {
        self.predict(tape, x_t, x_lq, t, priors)
    }
}

/// Records the conditional noise-prediction loss on `tape`.
///
/// Each sample gets its own `t ~ U{0..T-1}` and `eps ~ N(0, I)` drawn from
/// `rng`; the loss is the mean squared error over batch and pixels.
pub fn training_loss<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    x_lq: &Tensor<T>,
    priors: &[CharSequence],
    rng: &mut Rng,
) -> Result<Var> {
    let shape = x0.shape().to_vec();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::invalid(
            "training_loss",
            format!("need a non-empty [n, c, h, w] batch, got {shape:?}"),
        ));
    }
    if x_lq.shape() != shape.as_slice() {
        return Err(Error::shape("training_loss", &shape, x_lq.shape()));
    }
    let n = shape[0];
    let per = x0.len() / n;
    let t: Vec<usize> = (0..n).map(|_| rng.below(schedule.timesteps())).collect();
    let eps: Tensor<T> = rng.normal_tensor(&shape, 1.0);
    let mut xt = Vec::with_capacity(x0.len());
    for (b, &tb) in t.iter().enumerate() {
        let ab = schedule.alpha_bars[tb];
        let (a, s) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let r = b * per..(b + 1) * per;
        xt.extend(
            x0.data()[r.clone()]
                .iter()
                .zip(&eps.data()[r])
                .map(|(&x, &e)| a * x + s * e),
        );
    }
    let xt = tape.constant(Tensor::new(&shape, xt)?);
    let lq = tape.constant(x_lq.clone());
    let target = tape.constant(eps);
    let pred = model.predict_eps(tape, xt, lq, &t, priors)?;
    tape.mse(pred, target)
}

/// Restores a batch from its low-quality observations.
///
/// Sample `b` starts from `N(0, I)` drawn from `Rng::new(seeds[b])`, which
/// also supplies its ancestral noise, so each output depends only on its own
/// inputs and seed. `on_step(k, x0_hat)` sees the clamped clean estimate at
/// every step. Returns the final estimate in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn restore_with<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_lq: &Tensor<T>,
    priors: &[CharSequence],
    mode: SamplerMode,
    seeds: &[u64],
    on_step: &mut dyn FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    let shape = x_lq.shape().to_vec();
    if shape.len() != 4 || shape[0] != seeds.len() {
        return Err(Error::invalid(
            "restore",
            format!("batch {shape:?} needs one seed per sample, got {}", seeds.len()),
        ));
    }
    let n = shape[0];
    let per = x_lq.len() / n;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| Rng::new(s)).collect();
    let mut x: Vec<T> = Vec::with_capacity(x_lq.len());
    for r in &mut rngs {
        x.extend((0..per).map(|_| T::of(r.normal())));
    }
    let mut x0_hat = Tensor::zeros(&shape);
    for k in (0..schedule.sampling_steps()).rev() {
        let t = schedule.taus[k];
        let p = schedule.posterior(k);
        let eps = {
            let mut tape = Tape::no_grad();
            let xt = tape.constant(Tensor::new(&shape, x.clone())?);
            let lq = tape.constant(x_lq.clone());
            let e = model.predict_eps(&mut tape, xt, lq, &vec![t; n], priors)?;
            tape.value(e).clone()
        };
        if eps.shape() != shape.as_slice() {
            return Err(Error::shape("restore", &shape, eps.shape()));
        }
        let (sa, sb) = (p.alpha_bar.sqrt(), (1.0 - p.alpha_bar).sqrt());
        let est: Vec<T> = x
            .iter()
            .zip(eps.data())
            .map(|(&xt, &e)| T::of(((xt.f64() - sb * e.f64()) / sa).clamp(-1.0, 1.0)))
            .collect();
        x0_hat = Tensor::new(&shape, est)?;
        on_step(k, &x0_hat);
        if k == 0 {
            break;
        }
        match mode {
            SamplerMode::Ancestral => {
                let sd = p.variance.max(0.0).sqrt();
                for (b, r) in rngs.iter_mut().enumerate() {
                    for i in b * per..(b + 1) * per {
                        let mean = p.coef_x0 * x0_hat.data()[i].f64() + p.coef_xt * x[i].f64();
                        x[i] = T::of(mean + sd * r.normal());
                    }
                }
            }
            SamplerMode::Deterministic => {
                let (a, s) = (p.alpha_bar_prev.sqrt(), (1.0 - p.alpha_bar_prev).sqrt());
                for i in 0..x.len() {
                    x[i] = T::of(a * x0_hat.data()[i].f64() + s * eps.data()[i].f64());
                }
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("restore"));
        }
    }
    Ok(x0_hat)
}

pub fn restore<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_lq: &Tensor<T>,
    priors: &[CharSequence],
    mode: SamplerMode,
    seeds: &[u64],
) -> Result<Tensor<T>> {
    restore_with(model, schedule, x_lq, priors, mode, seeds, &mut |_, _| {})
}
