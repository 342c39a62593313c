//! Noise schedule and the forward (noising) process.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cumulative-product noise schedule. `alpha_bar[t]` is the product of
/// `(1 - beta_s)` for `s <= t`, with `alpha_bar[0] = 1`. Stored in f64 so
/// long products stay accurate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least 1 step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            steps,
            betas,
            alpha_bar,
        })
    }

    /// The default pretraining schedule: linear beta in [1e-4, 0.02], T = 1000.
    pub fn default_pretrain() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative ᾱ_t for t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// True when the terminal state is close to pure noise (ᾱ_T < 0.05),
    /// which the pretraining schedule must satisfy. Short test schedules
    /// (e.g. T = 1) legitimately fail this.
    pub fn is_well_mixed(&self) -> bool {
        self.alpha_bar[self.steps] < 0.05
    }
}

/// One training batch: clean samples, timesteps, noise draws, and the
/// noised samples they produce.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<S> {
    pub x0: Vec<Tensor<S>>,
    pub t: Vec<usize>,
    pub eps: Vec<Tensor<S>>,
    pub xt: Vec<Tensor<S>>,
}

impl<S: Scalar> DiffusionBatch<S> {
    pub fn new(
        x0: Vec<Tensor<S>>,
        t: Vec<usize>,
        eps: Vec<Tensor<S>>,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        if x0.len() != t.len() || x0.len() != eps.len() {
            return Err(Error::Parameter(format!(
                "batch lengths disagree: {} x0, {} t, {} eps",
                x0.len(),
                t.len(),
                eps.len()
            )));
        }
        let mut xt = Vec::with_capacity(x0.len());
        for ((x, &ti), e) in x0.iter().zip(&t).zip(&eps) {
            xt.push(forward_diffuse(x, ti, e, sched)?);
        }
        Ok(DiffusionBatch { x0, t, eps, xt })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// x_t = √(ᾱ_t)·x₀ + √(1−ᾱ_t)·ε
pub fn forward_diffuse<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t < 1 || t > sched.steps() {
        return Err(Error::Parameter(format!(
            "timestep {t} out of range 1..={}",
            sched.steps()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::dimension("forward_diffuse", x0.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = *o * S::from_f64(a) + e * S::from_f64(b);
    }
    Ok(out)
}
