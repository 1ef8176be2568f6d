//! Forward noising, x0 reconstruction, guided noise combination and the
//! ancestral sampling loops for the base and upsampler stages.

use buildiff_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::schedule::NoiseSchedule;

fn same_len(what: &'static str, a: &[Point], b: &[Point]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            what,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn combine(a: &[Point], ca: f64, b: &[Point], cb: f64) -> Vec<Point> {
    a.iter()
        .zip(b)
        .map(|(p, q)| [ca * p[0] + cb * q[0], ca * p[1] + cb * q[1], ca * p[2] + cb * q[2]])
        .collect()
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(x0: &[Point], t: usize, eps: &[Point], schedule: &NoiseSchedule) -> Result<Vec<Point>> {
    schedule.check_step(t)?;
    same_len("noise", x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn reconstruct_x0(xt: &[Point], t: usize, eps_hat: &[Point], schedule: &NoiseSchedule) -> Result<Vec<Point>> {
    schedule.check_step(t)?;
    same_len("noise estimate", xt, eps_hat)?;
    let ab = schedule.alpha_bar(t);
    let s = ab.sqrt();
    Ok(combine(xt, 1.0 / s, eps_hat, -(1.0 - ab).sqrt() / s))
}

/// Differentiable reconstruction for a `(B, K, 3)` batch where sample `b`
/// sits at step `ts[b]`. Gradients flow into both `xt` and `eps_hat`.
pub fn reconstruct_x0_tape(
    tape: &mut Tape,
    xt: Var,
    eps_hat: Var,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let shape = tape.shape(xt).to_vec();
    if shape.len() != 3 || shape[0] != ts.len() || shape[2] != 3 {
        return Err(invalid(format!(
            "reconstruction expects ({}, K, 3), got {shape:?}",
            ts.len()
        )));
    }
    let per_sample = shape[1] * 3;
    let mut a = Vec::with_capacity(ts.len() * per_sample);
    let mut b = Vec::with_capacity(ts.len() * per_sample);
    for &t in ts {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let s = ab.sqrt();
        a.extend(std::iter::repeat_n(1.0 / s, per_sample));
        b.extend(std::iter::repeat_n((1.0 - ab).sqrt() / s, per_sample));
    }
    let a = tape.constant(Tensor::new(shape.clone(), a)?);
    let b = tape.constant(Tensor::new(shape, b)?);
    let scaled_x = tape.mul(xt, a)?;
    let scaled_e = tape.mul(eps_hat, b)?;
    Ok(tape.sub(scaled_x, scaled_e)?)
}

/// `(1 + gamma) eps_cond - gamma eps_uncond`.
pub fn guided_epsilon(eps_cond: &[Point], eps_uncond: &[Point], gamma: f64) -> Result<Vec<Point>> {
    same_len("unconditional noise", eps_cond, eps_uncond)?;
    Ok(combine(eps_cond, 1.0 + gamma, eps_uncond, -gamma))
}

/// One reverse step `x_t -> x_{t-1}`. `z` is required for `t > 1` and
/// ignored at `t = 1`, where no noise is added.
pub fn ancestral_step(
    xt: &[Point],
    t: usize,
    eps: &[Point],
    z: Option<&[Point]>,
    schedule: &NoiseSchedule,
) -> Result<Vec<Point>> {
    schedule.check_step(t)?;
    same_len("noise estimate", xt, eps)?;
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = combine(xt, inv, eps, -coef * inv);
    if t == 1 {
        return Ok(mean);
    }
    let z = z.ok_or_else(|| invalid(format!("step {t} needs a noise sample")))?;
    same_len("sampling noise", xt, z)?;
    Ok(combine(&mean, 1.0, z, schedule.sigma(t)))
}

/// What a noise predictor is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition<'a> {
    Embedding(&'a [f64]),
    /// The learned null embedding standing in for a dropped condition.
    Null,
}

/// Anything that predicts the noise in a batch of clouds at step `t`.
pub trait NoisePredictor {
    /// One prediction per input cloud, each the same length as its input.
    fn predict(&self, xs: &[&[Point]], t: usize, conds: &[Condition<'_>]) -> Result<Vec<Vec<Point>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub gamma: f64,
    pub seed: u64,
    /// Independent RNG stream per chain under the same seed.
    pub chain: u64,
    /// Record every `stride`-th state; 0 disables the trace.
    pub trace_stride: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            seed: 0,
            chain: 0,
            trace_stride: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub seed: u64,
    pub gamma: f64,
    pub stride: usize,
    /// `(t, x_t)` in decreasing `t`; the final entry is `t = 0`.
    pub snapshots: Vec<(usize, Vec<Point>)>,
}

pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ]
        })
        .collect()
}

fn guided_prediction(
    model: &dyn NoisePredictor,
    x: &[Point],
    t: usize,
    cond: &[f64],
    gamma: f64,
) -> Result<Vec<Point>> {
    let mut out = if gamma == 0.0 {
        model.predict(&[x], t, &[Condition::Embedding(cond)])?
    } else {
        model.predict(&[x, x], t, &[Condition::Embedding(cond), Condition::Null])?
    };
    if out.len() != if gamma == 0.0 { 1 } else { 2 } || out.iter().any(|e| e.len() != x.len()) {
        return Err(invalid("noise predictor returned the wrong batch shape"));
    }
    let eps = if gamma == 0.0 {
        out.swap_remove(0)
    } else {
        guided_epsilon(&out[0], &out[1], gamma)?
    };
    if eps.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "noise prediction".into(),
            step: t,
        });
    }
    Ok(eps)
}

/// Shared reverse loop. `pin` re-imposes a fixed prefix after every update.
fn reverse_chain(
    model: &dyn NoisePredictor,
    cond: &[f64],
    n: usize,
    pin: &[Point],
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<(Vec<Point>, SampleTrace)> {
    let steps = schedule.steps();
    let mut rng = chain_rng(opts.seed, opts.chain);
    let mut x = gaussian_points(&mut rng, n);
    x[..pin.len()].copy_from_slice(pin);
    let mut trace = SampleTrace {
        seed: opts.seed,
        gamma: opts.gamma,
        stride: opts.trace_stride,
        snapshots: Vec::new(),
    };
    let stride = opts.trace_stride;
    if stride > 0 {
        trace.snapshots.push((steps, x.clone()));
    }
    for t in (1..=steps).rev() {
        let eps = guided_prediction(model, &x, t, cond, opts.gamma)?;
        let z = (t > 1).then(|| gaussian_points(&mut rng, n));
        x = ancestral_step(&x, t, &eps, z.as_deref(), schedule)?;
        x[..pin.len()].copy_from_slice(pin);
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sample".into(),
                step: t,
            });
        }
        if stride > 0 && (t - 1) % stride == 0 {
            trace.snapshots.push((t - 1, x.clone()));
        }
    }
    Ok((x, trace))
}

/// Draw `k` points for condition `cond`, running `t = T..1`. With
/// `gamma == 0` the model is called once per step on the condition alone;
/// otherwise conditional and null predictions share one batched call.
pub fn sample_base(
    model: &dyn NoisePredictor,
    cond: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<(Vec<Point>, SampleTrace)> {
    if k == 0 {
        return Err(invalid("cannot sample an empty cloud"));
    }
    reverse_chain(model, cond, k, &[], schedule, opts)
}

/// Grow `lowres` to `n` points. The first `lowres.len()` positions are
/// overwritten with `lowres` before every model call and after the last
/// step, so they match it bit for bit.
pub fn sample_upsampled(
    model: &dyn NoisePredictor,
    cond: &[f64],
    lowres: &[Point],
    n: usize,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<(Vec<Point>, SampleTrace)> {
    if lowres.is_empty() {
        return Err(invalid("upsampling needs a non-empty low-resolution cloud"));
    }
    if n <= lowres.len() {
        return Err(invalid(format!(
            "target size {n} must exceed the {} conditioning points",
            lowres.len()
        )));
    }
    reverse_chain(model, cond, n, lowres, schedule, opts)
}
