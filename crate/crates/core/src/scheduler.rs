//! Noise schedule construction, classifier-free guidance, reverse steps
//! (stochastic posterior and deterministic), clean-sample prediction and the
//! forward noising process used by test oracles.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::text_embed::PromptEmbedding;

// ---------------------------------------------------------------------------
// NoiseSchedule
// ---------------------------------------------------------------------------

/// Per-timestep variance tables. Index 0 carries the boundary convention
/// `alpha_bar(0) = 1`, `beta_bar(0) = 0` so stepping to `t = 0` yields a
/// clean sample; schedule entries proper live at `1..=total_steps`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    total_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t < 1 || t > self.total_steps {
            return Err(Error::timestep(
                op,
                format!("t={t} outside [1, {}]", self.total_steps),
            ));
        }
        Ok(())
    }
}

/// Build a linear-in-beta schedule over `total_steps` timesteps.
pub fn build_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps < 2 {
        return Err(Error::arg("build_schedule", "need at least 2 steps"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(
            "build_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        ));
    }
    let mut beta = vec![0.0; total_steps + 1];
    let mut alpha = vec![1.0; total_steps + 1];
    let mut alpha_bar = vec![1.0; total_steps + 1];
    let mut beta_bar = vec![0.0; total_steps + 1];
    for t in 1..=total_steps {
        let frac = (t - 1) as f64 / (total_steps - 1) as f64;
        beta[t] = beta_start + (beta_end - beta_start) * frac;
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        beta_bar[t] = (1.0 - alpha_bar[t]).sqrt();
    }
    Ok(NoiseSchedule {
        total_steps,
        beta,
        alpha,
        alpha_bar,
        beta_bar,
    })
}

/// Evenly spaced sampling indices over a longer schedule, largest first.
/// With `sampling_steps == schedule_steps` this is plain `T, T-1, ..., 1`.
pub fn sampling_indices(schedule_steps: usize, sampling_steps: usize) -> Result<Vec<usize>> {
    if sampling_steps < 1 || sampling_steps > schedule_steps {
        return Err(Error::arg(
            "sampling_indices",
            format!("sampling steps {sampling_steps} not in [1, {schedule_steps}]"),
        ));
    }
    let mut out = Vec::with_capacity(sampling_steps);
    for k in (1..=sampling_steps).rev() {
        out.push(schedule_steps * k / sampling_steps);
    }
    out.dedup();
    if out.len() != sampling_steps {
        return Err(Error::arg(
            "sampling_indices",
            "schedule too short for requested sampling steps",
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// LatentState / GuidanceConfig
// ---------------------------------------------------------------------------

/// Evolving latent plus its schedule timestep and the RNG stream it came from.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
    /// RNG stream identifier, recorded for audit reproducibility.
    pub stream: String,
}

impl LatentState {
    pub fn new(z: Tensor, t: usize, stream: impl Into<String>) -> Self {
        Self {
            z,
            t,
            stream: stream.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Guidance scale; 0 means unconditional, 1 means conditional only.
    pub gamma: f64,
    pub empty_prompt_embedding: PromptEmbedding,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Guided noise estimate `eps_u + gamma * (eps_c - eps_u)`.
///
/// `gamma = 0` and `gamma = 1` return the respective branch bit-exactly
/// rather than through the arithmetic, which floating point would not keep
/// exact.
pub fn cfg_noise(eps_uncond: &Tensor, eps_cond: &Tensor, gamma: f64) -> Result<Tensor> {
    if !eps_uncond.same_shape(eps_cond) {
        return Err(Error::dim(
            "cfg_noise",
            format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape()),
        ));
    }
    if !gamma.is_finite() {
        return Err(Error::arg("cfg_noise", "gamma must be finite"));
    }
    if gamma == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if gamma == 1.0 {
        return Ok(eps_cond.clone());
    }
    let diff = eps_cond.add_scaled(eps_uncond, -1.0)?;
    eps_uncond.add_scaled(&diff, gamma)
}

/// Posterior mean and standard deviation of the reverse step at `state.t`.
pub fn ddpm_posterior(
    state: &LatentState,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    if state.t == 0 {
        return Err(Error::timestep("ddpm_step", "t=0 has nothing to step"));
    }
    schedule.check_t("ddpm_step", state.t)?;
    if !state.z.same_shape(eps_hat) {
        return Err(Error::dim(
            "ddpm_step",
            format!("{:?} vs {:?}", state.z.shape(), eps_hat.shape()),
        ));
    }
    let t = state.t;
    let beta_t = schedule.beta(t);
    let beta_bar_t = schedule.beta_bar(t);
    let mean = state
        .z
        .add_scaled(eps_hat, -beta_t / beta_bar_t)?
        .scale(1.0 / schedule.alpha(t).sqrt());
    // Variance (beta_bar_{t-1}^2 * beta_t) / beta_bar_t^2; zero at t = 1.
    let bb_prev = schedule.beta_bar(t - 1);
    let sigma = ((bb_prev * bb_prev * beta_t) / (beta_bar_t * beta_bar_t)).sqrt();
    Ok((mean, sigma))
}

/// One stochastic reverse step `t -> t-1`.
pub fn ddpm_step(
    state: &LatentState,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentState> {
    let (mean, sigma) = ddpm_posterior(state, eps_hat, schedule)?;
    let z = if sigma == 0.0 {
        mean
    } else {
        let (c, h, w) = mean.shape();
        let mut data = Vec::with_capacity(mean.len());
        for v in mean.data() {
            let xi: f64 = rng.sample(StandardNormal);
            data.push(v + sigma * xi);
        }
        Tensor::new(c, h, w, data)?
    };
    Ok(LatentState::new(z, state.t - 1, state.stream.clone()))
}

/// One deterministic reverse step `t -> t_prev` (eta = 0): re-noise the
/// predicted clean sample to the target timestep. `t_prev = 0` returns the
/// clean prediction itself.
pub fn ddim_step(
    state: &LatentState,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    t_prev: usize,
) -> Result<LatentState> {
    if t_prev >= state.t {
        return Err(Error::timestep(
            "ddim_step",
            format!("t_prev={} must be below t={}", t_prev, state.t),
        ));
    }
    let x0 = predict_x0(state, eps_hat, schedule)?;
    let z = x0
        .scale(schedule.alpha_bar(t_prev).sqrt())
        .add_scaled(eps_hat, schedule.beta_bar(t_prev))?;
    Ok(LatentState::new(z, t_prev, state.stream.clone()))
}

/// Closed-form clean-sample estimate `(z_t - beta_bar_t * eps) / sqrt(alpha_bar_t)`.
/// No clamping; range handling is the decoder's concern.
pub fn predict_x0(state: &LatentState, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if state.t == 0 {
        return Err(Error::timestep("predict_x0", "undefined at t=0"));
    }
    schedule.check_t("predict_x0", state.t)?;
    if !state.z.same_shape(eps_hat) {
        return Err(Error::dim(
            "predict_x0",
            format!("{:?} vs {:?}", state.z.shape(), eps_hat.shape()),
        ));
    }
    let t = state.t;
    Ok(state
        .z
        .add_scaled(eps_hat, -schedule.beta_bar(t))?
        .scale(1.0 / schedule.alpha_bar(t).sqrt()))
}

/// Forward process `sqrt(alpha_bar_t) * z0 + beta_bar_t * eps`.
pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t("add_noise", t)?;
    if !z0.same_shape(eps) {
        return Err(Error::dim(
            "add_noise",
            format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        ));
    }
    z0.scale(schedule.alpha_bar(t).sqrt())
        .add_scaled(eps, schedule.beta_bar(t))
}
