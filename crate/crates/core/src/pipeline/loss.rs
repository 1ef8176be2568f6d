use buildiff_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Denoiser;
use crate::diffusion::{forward_noise, gaussian_points, reconstruct_x0_tape, Condition};
use crate::error::{invalid, Error, Result};
use crate::geometry::{KdTree, Point};
use crate::schedule::{lambda_weight, NoiseSchedule};

/// Footprint regularizer for a `(B, K, 3)` reconstruction.
pub struct RegLoss {
    /// `None` when every sample has zero weight; nothing was computed.
    pub loss: Option<Var>,
    pub value: f64,
    pub lambdas: Vec<f64>,
    /// Nearest-neighbour lookups performed.
    pub nn_queries: usize,
}

fn footprint(points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| [p[0], p[1], 0.0]).collect()
}

/// Batch mean of `lambda(t_b) * Chamfer(proj(x0_b), proj(x0_hat_b))`, with
/// `proj` dropping height. Nearest neighbours are found on values; the
/// distances to them stay differentiable in `x0_hat`. Samples with zero
/// weight are skipped without any Chamfer work.
pub fn regularization_loss(
    tape: &mut Tape,
    x0: &[&[Point]],
    x0_hat: Var,
    ts: &[usize],
    steps: usize,
) -> Result<RegLoss> {
    let shape = tape.shape(x0_hat).to_vec();
    let b = x0.len();
    if shape.len() != 3 || shape[0] != b || shape[2] != 3 || ts.len() != b {
        return Err(invalid(format!("regularizer expects ({b}, K, 3) with {b} steps, got {shape:?}")));
    }
    let k = shape[1];
    for x in x0 {
        if x.len() != k {
            return Err(Error::ShapeMismatch {
                what: "regularizer target",
                expected: k,
                actual: x.len(),
            });
        }
    }
    let lambdas = ts.iter().map(|&t| lambda_weight(t, steps)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut nn_queries = 0;
    let values = tape.value(x0_hat).to_vec();
    for s in 0..b {
        if lambdas[s] == 0.0 {
            continue;
        }
        let w = lambdas[s] / (b * k) as f64;
        let fp_ref = footprint(x0[s]);
        let pred: Vec<Point> = values[s * k * 3..(s + 1) * k * 3]
            .chunks_exact(3)
            .map(|p| [p[0], p[1], 0.0])
            .collect();
        let tree_pred = KdTree::new(&pred);
        let tree_ref = KdTree::new(&fp_ref);
        // Reference to prediction.
        for a in &fp_ref {
            let (j, _) = tree_pred.nearest(a);
            rows.push(s * k + j);
            targets.extend_from_slice(a);
            weights.extend([w, w, 0.0]);
        }
        // Prediction to reference.
        for (j, p) in pred.iter().enumerate() {
            let (i, _) = tree_ref.nearest(p);
            rows.push(s * k + j);
            targets.extend_from_slice(&fp_ref[i]);
            weights.extend([w, w, 0.0]);
        }
        nn_queries += 2 * k;
    }
    if rows.is_empty() {
        return Ok(RegLoss {
            loss: None,
            value: 0.0,
            lambdas,
            nn_queries,
        });
    }
    let m = rows.len();
    let flat = tape.reshape(x0_hat, &[b * k, 3])?;
    let picked = tape.gather_rows(flat, rows)?;
    let targets = tape.constant(Tensor::new(vec![m, 3], targets)?);
    let weights = tape.constant(Tensor::new(vec![m, 3], weights)?);
    let diff = tape.sub(picked, targets)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    let loss = tape.sum(weighted)?;
    Ok(RegLoss {
        value: tape.scalar(loss),
        loss: Some(loss),
        lambdas,
        nn_queries,
    })
}

/// Random quantities of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub ts: Vec<usize>,
    pub dropped: Vec<bool>,
    pub eps: Vec<Vec<Point>>,
}

impl StepDraws {
    /// Per sample: `t` uniform on `1..=T`, the drop coin, then the noise.
    pub fn sample(rng: &mut ChaCha8Rng, batch: usize, n: usize, steps: usize, drop_prob: f64) -> Self {
        let mut d = Self {
            ts: Vec::with_capacity(batch),
            dropped: Vec::with_capacity(batch),
            eps: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            d.ts.push(rng.random_range(1..=steps));
            d.dropped.push(rng.random_bool(drop_prob));
            d.eps.push(gaussian_points(rng, n));
        }
        d
    }
}

/// One training example: a clean cloud and its image embedding. For the
/// upsampler the first `K` points are the low-resolution conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub x0: Vec<Point>,
    pub embedding: Vec<f64>,
}

pub struct LossParts {
    pub total: Var,
    pub l_eps: f64,
    pub l_reg: f64,
    pub l_theta: f64,
    pub lambdas: Vec<f64>,
    pub nn_queries: usize,
}

/// `L_eps + rho * L_reg` for one batch. With `pinned > 0` the first
/// `pinned` positions of `x_t` are replaced by the clean points and the
/// noise loss covers only the remaining positions.
pub fn diffusion_loss(
    model: &Denoiser,
    tape: &mut Tape,
    bound: &buildiff_tensor::BoundParams,
    batch: &[TrainSample],
    draws: &StepDraws,
    pinned: usize,
    schedule: &NoiseSchedule,
    rho: f64,
) -> Result<LossParts> {
    let b = batch.len();
    if b == 0 {
        return Err(invalid("empty training batch"));
    }
    let n = batch[0].x0.len();
    if batch.iter().any(|s| s.x0.len() != n) || draws.ts.len() != b || draws.eps.iter().any(|e| e.len() != n) {
        return Err(invalid("training batch clouds and noise must share one size"));
    }
    if pinned >= n {
        return Err(invalid(format!("{pinned} pinned points leave nothing to denoise in {n}")));
    }
    let mut xt_flat = Vec::with_capacity(b * n * 3);
    let mut eps_flat = Vec::with_capacity(b * (n - pinned) * 3);
    for (s, sample) in batch.iter().enumerate() {
        let mut xt = forward_noise(&sample.x0, draws.ts[s], &draws.eps[s], schedule)?;
        xt[..pinned].copy_from_slice(&sample.x0[..pinned]);
        xt_flat.extend(xt.iter().flatten());
        eps_flat.extend(draws.eps[s][pinned..].iter().flatten());
    }
    let conds: Vec<Condition<'_>> = batch
        .iter()
        .zip(&draws.dropped)
        .map(|(s, &drop)| if drop { Condition::Null } else { Condition::Embedding(&s.embedding) })
        .collect();
    let x = tape.constant(Tensor::new(vec![b, n, 3], xt_flat)?);
    let eps_hat = model.forward(tape, bound, x, &draws.ts, &conds)?;
    let eps_target = tape.constant(Tensor::new(vec![b, n - pinned, 3], eps_flat)?);
    let eps_used = if pinned == 0 {
        eps_hat
    } else {
        let rows: Vec<usize> = (0..b).flat_map(|s| (s * n + pinned)..((s + 1) * n)).collect();
        let flat = tape.reshape(eps_hat, &[b * n, 3])?;
        let picked = tape.gather_rows(flat, rows)?;
        tape.reshape(picked, &[b, n - pinned, 3])?
    };
    let l_eps_var = tape.mse(eps_used, eps_target)?;
    let x0_hat = reconstruct_x0_tape(tape, x, eps_hat, &draws.ts, schedule)?;
    let x0s: Vec<&[Point]> = batch.iter().map(|s| s.x0.as_slice()).collect();
    let reg = regularization_loss(tape, &x0s, x0_hat, &draws.ts, schedule.steps())?;
    let l_eps = tape.scalar(l_eps_var);
    let total = match reg.loss {
        Some(r) if rho != 0.0 => {
            let scaled = tape.scale(r, rho)?;
            tape.add(l_eps_var, scaled)?
        }
        _ => l_eps_var,
    };
    Ok(LossParts {
        total,
        l_eps,
        l_reg: reg.value,
        l_theta: l_eps + rho * reg.value,
        lambdas: reg.lambdas,
        nn_queries: reg.nn_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(x0: &[Point], hat: &[Point], t: usize, steps: usize) -> RegLoss {
        let mut tape = Tape::new();
        let flat: Vec<f64> = hat.iter().flatten().copied().collect();
        let v = tape.leaf(Tensor::new(vec![1, hat.len(), 3], flat).unwrap(), true);
        regularization_loss(&mut tape, &[x0], v, &[t], steps).unwrap()
    }

    #[test]
    fn single_point_offset() {
        let r = reg(&[[0.0, 0.0, 0.5]], &[[1.0, 0.0, -3.0]], 1, 1000);
        assert_eq!(r.value, 2.0);
        assert_eq!(r.nn_queries, 2);
    }

    #[test]
    fn late_steps_skip_everything() {
        let r = reg(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], 751, 1000);
        assert!(r.loss.is_none());
        assert_eq!((r.value, r.nn_queries), (0.0, 0));
    }

    #[test]
    fn identical_footprints_are_free() {
        let pts = [[0.1, 0.2, 0.3], [-0.4, 0.5, 0.0], [0.9, -0.9, 1.0]];
        let lifted: Vec<Point> = pts.iter().map(|p| [p[0], p[1], p[2] + 2.0]).collect();
        for t in [1, 2, 300, 600] {
            assert_eq!(reg(&pts, &lifted, t, 1000).value, 0.0);
        }
    }

    #[test]
    fn weight_follows_lambda() {
        let a = reg(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], 2, 1000).value;
        let b = reg(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], 600, 1000).value;
        assert_eq!((a, b), (1.5, 0.5));
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![1, 2, 3], vec![0.0; 6]).unwrap(), true);
        assert!(regularization_loss(&mut tape, &[&[[0.0; 3]]], v, &[1], 10).is_err());
    }
}
