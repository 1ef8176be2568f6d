//! Point-set evaluation: Chamfer distance, Earth Mover's Distance and
//! F1 at a squared-distance threshold.

pub mod assignment;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{normalize_unit_cube, KdTree, Point, PointCloud};
use assignment::{assignment_cost, auction, distance_matrix, hungarian};

pub const DEFAULT_TAU: f64 = 0.001;
/// Largest instance the exact solver accepts.
pub const EXACT_EMD_LIMIT: usize = 512;

fn mean_nn_sq(from: &[Point], tree: &KdTree) -> f64 {
    from.iter().map(|p| tree.nearest(p).1).sum::<f64>() / from.len() as f64
}

/// Mean squared nearest-neighbour distance, summed over both directions.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance needs two non-empty clouds"));
    }
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    Ok(mean_nn_sq(a, &tb) + mean_nn_sq(b, &ta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmdMode {
    Exact,
    Approx,
    /// Exact up to [`EXACT_EMD_LIMIT`] points, auction beyond.
    Auto,
}

impl std::str::FromStr for EmdMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" => Ok(Self::Approx),
            "auto" => Ok(Self::Auto),
            other => Err(invalid(format!("unknown EMD mode `{other}` (exact|approx|auto)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmdOutcome {
    pub value: f64,
    /// Set when the larger cloud was subsampled to the smaller count.
    pub subsampled_to: Option<usize>,
}

/// Relative accuracy targeted by the auction solver.
const AUCTION_REL_TOL: f64 = 0.005;

/// Mean Euclidean distance under the optimal bijection. Clouds of unequal
/// size are reduced to the smaller count by seeded uniform subsampling.
pub fn emd(a: &[Point], b: &[Point], mode: EmdMode, seed: u64) -> Result<EmdOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("EMD needs two non-empty clouds"));
    }
    let n = a.len().min(b.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shrink = |pts: &[Point]| -> Vec<Point> {
        if pts.len() == n {
            return pts.to_vec();
        }
        let mut idx = sample(&mut rng, pts.len(), n).into_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| pts[i]).collect()
    };
    let subsampled_to = (a.len() != b.len()).then_some(n);
    let a = shrink(a);
    let b = shrink(b);
    let exact = match mode {
        EmdMode::Exact => {
            if n > EXACT_EMD_LIMIT {
                return Err(invalid(format!(
                    "exact EMD is limited to {EXACT_EMD_LIMIT} points, got {n}; use approx"
                )));
            }
            true
        }
        EmdMode::Approx => false,
        EmdMode::Auto => n <= EXACT_EMD_LIMIT,
    };
    let total = if exact {
        assignment_cost(&a, &b, &hungarian(&distance_matrix(&a, &b), n))
    } else {
        assignment_cost(&a, &b, &auction(&a, &b, auction_eps(&a, &b)))
    };
    Ok(EmdOutcome {
        value: total / n as f64,
        subsampled_to,
    })
}

/// Every matched distance is at least the nearest-neighbour distance, so
/// the larger one-sided mean NN distance bounds the EMD from below. The
/// auction's additive error per point is `eps`; tying it to that bound
/// keeps the relative error under `AUCTION_REL_TOL`.
fn auction_eps(a: &[Point], b: &[Point]) -> f64 {
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    let mean_nn = |from: &[Point], tree: &KdTree| {
        from.iter().map(|p| tree.nearest(p).1.sqrt()).sum::<f64>() / from.len() as f64
    };
    let lower = mean_nn(a, &tb).max(mean_nn(b, &ta));
    let (lo, hi) = bounds(a.iter().chain(b));
    let diameter = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    (lower * AUCTION_REL_TOL).max(diameter * 1e-9)
}

fn bounds<'a>(pts: impl Iterator<Item = &'a Point>) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// F1 in percent. A point hits when its squared distance to the nearest
/// point of the other cloud is at most `tau`.
pub fn fscore(pred: &[Point], reference: &[Point], tau: f64) -> Result<f64> {
    if pred.is_empty() || reference.is_empty() {
        return Err(invalid("F1 needs two non-empty clouds"));
    }
    if !(tau > 0.0) {
        return Err(invalid(format!("F1 threshold must be positive, got {tau}")));
    }
    let hit_rate = |from: &[Point], to: &[Point]| {
        let tree = KdTree::new(to);
        let hits = from.iter().filter(|p| tree.nearest(p).1 <= tau).count();
        100.0 * hits as f64 / from.len() as f64
    };
    let precision = hit_rate(pred, reference);
    let recall = hit_rate(reference, pred);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizePolicy {
    /// Normalize clouds not already marked as normalized.
    IfNeeded,
    Never,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub tau: f64,
    pub emd_mode: EmdMode,
    pub normalize: NormalizePolicy,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            emd_mode: EmdMode::Auto,
            normalize: NormalizePolicy::IfNeeded,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub cd_scaled: f64,
    pub emd_scaled: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_ref: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub emd_subsampled_to: Option<usize>,
}

/// CD and EMD scaled by 10^2, F1 in percent.
pub fn evaluate_pair(pred: &PointCloud, reference: &PointCloud, opts: &EvalOptions) -> Result<PairReport> {
    let prep = |c: &PointCloud| -> Result<PointCloud> {
        match opts.normalize {
            NormalizePolicy::IfNeeded if !c.is_normalized() => Ok(normalize_unit_cube(c)?.0),
            _ => Ok(c.clone()),
        }
    };
    let p = prep(pred)?;
    let r = prep(reference)?;
    let cd = chamfer(p.points(), r.points())?;
    let e = emd(p.points(), r.points(), opts.emd_mode, opts.seed)?;
    let f1 = fscore(p.points(), r.points(), opts.tau)?;
    Ok(PairReport {
        cd_scaled: cd * 100.0,
        emd_scaled: e.value * 100.0,
        f1,
        n_pred: p.len(),
        n_ref: r.len(),
        emd_subsampled_to: e.subsampled_to,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(flatten)]
    pub report: PairReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub cd_scaled: f64,
    pub emd_scaled: f64,
    pub f1: f64,
}

/// Means in row order, so the result does not depend on how rows were
/// produced.
pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    let mut s = EvalSummary {
        pairs: rows.len(),
        cd_scaled: 0.0,
        emd_scaled: 0.0,
        f1: 0.0,
    };
    for r in rows {
        s.cd_scaled += r.report.cd_scaled;
        s.emd_scaled += r.report.emd_scaled;
        s.f1 += r.report.f1;
    }
    s.cd_scaled /= n;
    s.emd_scaled /= n;
    s.f1 /= n;
    s
}
