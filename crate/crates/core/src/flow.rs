//! Rectified flow: straight-path interpolation, the velocity objective and
//! an Euler sampler.
//!
//! The velocity target is `ε − x₀` (noise minus data), so sampling runs from
//! `t = 1` (pure noise) down to `t = 0`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dit::{DitModel, ForwardOptions};
use crate::error::{contract, Result};
use crate::params::Ctx;
use crate::rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Sampling steps used unless told otherwise.
pub const DEFAULT_STEPS: usize = 28;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub prompt: Vec<usize>,
    pub category: usize,
}

impl FlowSample {
    pub fn x_t(&self) -> Result<Tensor> {
        interpolate(&self.x0, &self.eps, self.t)
    }

    pub fn target(&self) -> Result<Tensor> {
        self.eps.zip_map(&self.x0, |e, x| e - x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimestepSampling {
    #[default]
    Uniform,
    /// `t = sigmoid(mean + std·z)`, `z ~ N(0, 1)`.
    LogitNormal { mean: f64, std: f64 },
}

impl TimestepSampling {
    pub fn draw(&self, rng: &mut impl rand::Rng) -> f64 {
        match *self {
            TimestepSampling::Uniform => rng::uniform(rng),
            TimestepSampling::LogitNormal { mean, std } => {
                let z = mean + std * rng::normal(rng);
                1.0 / (1.0 + libm::exp(-z))
            }
        }
    }
}

/// `x_t = (1 − t)·x₀ + t·ε`
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("timestep {t} outside [0, 1]")));
    }
    x0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)
}

/// Mean over the batch of `MSE(v_θ(x_t, t), ε − x₀)`.
pub fn rf_loss(ctx: &mut Ctx, model: &DitModel, batch: &[FlowSample], opts: ForwardOptions) -> Result<Var> {
    if batch.is_empty() {
        return Err(contract("rf_loss on an empty batch"));
    }
    let mut total: Option<Var> = None;
    for s in batch {
        let out = model.forward(ctx, &s.x_t()?, &s.prompt, s.t, opts)?;
        let target = ctx.constant(s.target()?);
        let l = ctx.tape.mse(out.velocity, target)?;
        total = Some(match total {
            Some(acc) => ctx.tape.add(acc, l)?,
            None => l,
        });
    }
    ctx.tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// [`rf_loss`] evaluated without gradients.
pub fn rf_loss_value(model: &DitModel, batch: &[FlowSample], opts: ForwardOptions) -> Result<f64> {
    let mut ctx = Ctx::eval(&model.params);
    let l = rf_loss(&mut ctx, model, batch, opts)?;
    Ok(ctx.value(l).item())
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` in `steps` equal
/// Euler steps. `velocity` receives the step index as well.
pub fn euler_integrate(
    x1: Tensor,
    steps: usize,
    mut velocity: impl FnMut(&Tensor, f64, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(contract("euler sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(&x, t, i)?;
        x = x.zip_map(&v, |a, b| a - dt * b)?;
    }
    Ok(x)
}

/// Starting noise of a sampling run.
pub fn initial_noise(model: &DitModel, seed: u64) -> Tensor {
    rng::randn(
        &mut rng::stream(seed, &[rng::tag("sample")]),
        &model.config.latent_shape(),
        1.0,
    )
}

/// Generates one image for `prompt` with the model's velocity field.
pub fn euler_sample(
    model: &DitModel,
    prompt: &[usize],
    steps: usize,
    seed: u64,
    opts: ForwardOptions,
) -> Result<Tensor> {
    euler_integrate(initial_noise(model, seed), steps, |x, t, _| {
        model.predict(x, prompt, t, opts)
    })
}
