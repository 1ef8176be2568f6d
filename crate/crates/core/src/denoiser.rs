//! Conditional noise predictor: a shared per-point MLP with a global
//! max-pooled context, fed by a fused (condition, time) feature.
//!
//! Per sample:
//! ```text
//! z_t = W_t2 leaky(W_t1 emb(t))                      time path, d -> d -> d
//! f   = leaky(W_f2 leaky(W_f1 [z_I, z_t]))           fusion, 2d -> d -> d
//! h   = leaky(W_p2 leaky(W_p1 [x_i, f]))             per point, 3+d -> 64 -> 128
//! g   = max_i h_i                                    global context
//! eps = W_d3 leaky(W_d2 leaky(W_d1 [x_i, h_i, g, f])) decoder -> 3
//! ```
//! The fusion output is identical for every point, so it is computed once
//! per sample and broadcast over the `K` points.

use buildiff_tensor::{BoundParams, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Condition, NoisePredictor};
use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::schedule::sinusoidal_embedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Shared width of the condition and time embeddings.
    pub d: usize,
    pub point_hidden: usize,
    pub point_out: usize,
    pub dec_hidden: usize,
    pub dec_hidden2: usize,
}

impl DenoiserConfig {
    pub fn with_dim(d: usize) -> Self {
        Self {
            d,
            point_hidden: 64,
            point_out: 128,
            dec_hidden: 128,
            dec_hidden2: 64,
        }
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::with_dim(128)
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

// Parameter indices in insertion order.
const TIME_W1: usize = 0;
const TIME_B1: usize = 1;
const TIME_W2: usize = 2;
const TIME_B2: usize = 3;
const NULL: usize = 4;
const FUSE_W1: usize = 5;
const FUSE_B1: usize = 6;
const FUSE_W2: usize = 7;
const FUSE_B2: usize = 8;
const POINT_W1: usize = 9;
const POINT_B1: usize = 10;
const POINT_W2: usize = 11;
const POINT_B2: usize = 12;
const DEC_W1: usize = 13;
const DEC_B1: usize = 14;
const DEC_W2: usize = 15;
const DEC_B2: usize = 16;
const DEC_W3: usize = 17;
const DEC_B3: usize = 18;

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

impl Denoiser {
    /// Kaiming-uniform weights, zero biases, zero output layer so the
    /// untrained network predicts zero noise.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.d == 0 || c.d % 2 != 0 {
            return Err(invalid(format!("embedding dimension must be even and positive, got {}", c.d)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let zeros = |n: usize| Tensor::zeros(&[n]);
        p.insert("time.w1", kaiming(&mut rng, c.d, c.d))?;
        p.insert("time.b1", zeros(c.d))?;
        p.insert("time.w2", kaiming(&mut rng, c.d, c.d))?;
        p.insert("time.b2", zeros(c.d))?;
        let null = (0..c.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert("cond.null", Tensor::vector(null))?;
        p.insert("fuse.w1", kaiming(&mut rng, 2 * c.d, c.d))?;
        p.insert("fuse.b1", zeros(c.d))?;
        p.insert("fuse.w2", kaiming(&mut rng, c.d, c.d))?;
        p.insert("fuse.b2", zeros(c.d))?;
        p.insert("point.w1", kaiming(&mut rng, 3 + c.d, c.point_hidden))?;
        p.insert("point.b1", zeros(c.point_hidden))?;
        p.insert("point.w2", kaiming(&mut rng, c.point_hidden, c.point_out))?;
        p.insert("point.b2", zeros(c.point_out))?;
        let dec_in = 3 + 2 * c.point_out + c.d;
        p.insert("dec.w1", kaiming(&mut rng, dec_in, c.dec_hidden))?;
        p.insert("dec.b1", zeros(c.dec_hidden))?;
        p.insert("dec.w2", kaiming(&mut rng, c.dec_hidden, c.dec_hidden2))?;
        p.insert("dec.b2", zeros(c.dec_hidden2))?;
        p.insert("dec.w3", Tensor::zeros(&[c.dec_hidden2, 3]))?;
        p.insert("dec.b3", zeros(3))?;
        debug_assert_eq!(p.name(DEC_B3), "dec.b3");
        Ok(Self { config, params: p })
    }

    /// Rebuild from stored parameters, checking every expected tensor.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(invalid(format!(
                "expected {} denoiser tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in reference.params.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != t.shape() {
                return Err(invalid(format!(
                    "denoiser tensor {i}: expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
            if !params.tensor(i).is_finite() {
                return Err(invalid(format!("denoiser tensor {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Per-sample fused `(condition, time)` features, shape `(B, d)`.
    pub fn fuse_conditions(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ts: &[usize],
        conds: &[Condition<'_>],
    ) -> Result<Var> {
        let d = self.config.d;
        let b = ts.len();
        if conds.len() != b || b == 0 {
            return Err(invalid(format!("{} steps for {} conditions", b, conds.len())));
        }
        let mut emb = Vec::with_capacity(b * d);
        let mut mask = Vec::with_capacity(b * d);
        for c in conds {
            match c {
                Condition::Embedding(z) => {
                    if z.len() != d {
                        return Err(Error::ShapeMismatch {
                            what: "condition embedding",
                            expected: d,
                            actual: z.len(),
                        });
                    }
                    emb.extend_from_slice(z);
                    mask.extend(std::iter::repeat_n(0.0, d));
                }
                Condition::Null => {
                    emb.extend(std::iter::repeat_n(0.0, d));
                    mask.extend(std::iter::repeat_n(1.0, d));
                }
            }
        }
        let mut time = Vec::with_capacity(b * d);
        for &t in ts {
            time.extend(sinusoidal_embedding(t as f64, d)?);
        }
        let emb = tape.constant(Tensor::new(vec![b, d], emb)?);
        let mask = tape.constant(Tensor::new(vec![b, d], mask)?);
        let null = tape.expand(bound.var(NULL), 0, b)?;
        let null = tape.mul(null, mask)?;
        let z_i = tape.add(emb, null)?;

        let time = tape.constant(Tensor::new(vec![b, d], time)?);
        let zt = linear(tape, time, bound.var(TIME_W1), bound.var(TIME_B1))?;
        let zt = tape.leaky_relu(zt, LEAKY_SLOPE)?;
        let zt = linear(tape, zt, bound.var(TIME_W2), bound.var(TIME_B2))?;
        check(tape, zt, "time embedding")?;

        let cat = tape.concat_last(&[z_i, zt])?;
        let f = linear(tape, cat, bound.var(FUSE_W1), bound.var(FUSE_B1))?;
        let f = tape.leaky_relu(f, LEAKY_SLOPE)?;
        let f = linear(tape, f, bound.var(FUSE_W2), bound.var(FUSE_B2))?;
        let f = tape.leaky_relu(f, LEAKY_SLOPE)?;
        check(tape, f, "condition fusion")?;
        Ok(f)
    }

    /// Noise prediction for a `(B, K, 3)` input; returns `(B, K, 3)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        ts: &[usize],
        conds: &[Condition<'_>],
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[0] != ts.len() {
            return Err(invalid(format!(
                "denoiser input must be ({}, K, 3), got {shape:?}",
                ts.len()
            )));
        }
        if !tape.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLayer("input".into()));
        }
        let k = shape[1];
        let f = self.fuse_conditions(tape, bound, ts, conds)?;
        let f_k = tape.expand(f, 1, k)?;

        let inp = tape.concat_last(&[x, f_k])?;
        let h = linear(tape, inp, bound.var(POINT_W1), bound.var(POINT_B1))?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = linear(tape, h, bound.var(POINT_W2), bound.var(POINT_B2))?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        check(tape, h, "point features")?;

        let g = tape.max_over_points(h)?;
        let g_k = tape.expand(g, 1, k)?;
        let dec = tape.concat_last(&[x, h, g_k, f_k])?;
        let y = linear(tape, dec, bound.var(DEC_W1), bound.var(DEC_B1))?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
        check(tape, y, "decoder layer 1")?;
        let y = linear(tape, y, bound.var(DEC_W2), bound.var(DEC_B2))?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
        check(tape, y, "decoder layer 2")?;
        let y = linear(tape, y, bound.var(DEC_W3), bound.var(DEC_B3))?;
        check(tape, y, "decoder output")?;
        Ok(y)
    }

    /// Batched prediction outside of training. Clouds may differ in size;
    /// equal-size runs are evaluated as one batch.
    pub fn predict_batch(&self, xs: &[&[Point]], ts: &[usize], conds: &[Condition<'_>]) -> Result<Vec<Vec<Point>>> {
        if xs.is_empty() || xs.len() != ts.len() || xs.len() != conds.len() {
            return Err(invalid("mismatched prediction batch"));
        }
        let k = xs[0].len();
        if k == 0 {
            return Err(invalid("cannot denoise an empty cloud"));
        }
        if xs.iter().any(|x| x.len() != k) {
            return xs
                .iter()
                .zip(ts)
                .zip(conds)
                .map(|((x, &t), c)| Ok(self.predict_batch(&[x], &[t], &[*c])?.remove(0)))
                .collect();
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().flatten().copied()).collect();
        let x = tape.constant(Tensor::new(vec![xs.len(), k, 3], flat)?);
        let y = self.forward(&mut tape, &bound, x, ts, conds)?;
        Ok(tape
            .value(y)
            .chunks_exact(k * 3)
            .map(|c| c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect())
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, xs: &[&[Point]], t: usize, conds: &[Condition<'_>]) -> Result<Vec<Vec<Point>>> {
        let ts = vec![t; xs.len()];
        self.predict_batch(xs, &ts, conds)
    }
}

/// `x W + b` over the last axis of `x`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let shape = tape.shape(y).to_vec();
    let width = *shape.last().expect("matmul output has rank >= 1");
    let rows = tape.value(y).len() / width;
    let bias = tape.expand(b, 0, rows)?;
    let bias = if shape.len() == 2 {
        bias
    } else {
        tape.reshape(bias, &shape)?
    };
    Ok(tape.add(y, bias)?)
}

fn check(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLayer(layer.into()))
    }
}
