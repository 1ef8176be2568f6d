use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dist2, Point, PointCloud};
use crate::error::{invalid, Result};

/// Farthest point sampling whose first pick is drawn from `seed`.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud> {
    let idx = fps_indices(cloud.points(), k, seed)?;
    cloud.select(&idx)
}

pub fn fps_indices(points: &[Point], k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(invalid("farthest point sampling on an empty cloud"));
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
    fps_indices_from(points, k, first)
}

/// Greedy selection starting at `first`; each later pick maximises the
/// distance to the already-selected set, lowest index on ties.
pub fn fps_indices_from(points: &[Point], k: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(invalid(format!("cannot pick {k} of {n} points")));
    }
    if first >= n {
        return Err(invalid(format!("first index {first} out of range ({n} points)")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = first;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == k {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}
