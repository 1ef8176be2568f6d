//! Linear assignment between two equal-size point sets under Euclidean cost.

use crate::geometry::{dist2, Point};

/// Exact minimum-cost assignment over a dense row-major `n x n` cost
/// matrix. Returns `assign[row] = col`. O(n^3) shortest augmenting path
/// with potentials.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Euclidean cost matrix between two point lists.
pub fn distance_matrix(a: &[Point], b: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for p in a {
        out.extend(b.iter().map(|q| dist2(p, q).sqrt()));
    }
    out
}

/// Forward auction with epsilon scaling (Bertsekas). The returned bijection
/// costs at most `n * eps_final` more than the optimum in total. Costs are
/// recomputed on the fly so memory stays O(n).
pub fn auction(a: &[Point], b: &[Point], eps_final: f64) -> Vec<usize> {
    let n = a.len();
    assert_eq!(n, b.len(), "auction needs equal-size sets");
    if n <= 1 {
        return (0..n).collect();
    }
    let cost = |i: usize, j: usize| dist2(&a[i], &b[j]).sqrt();
    let max_cost = (0..n)
        .flat_map(|i| (0..n).step_by(n.div_ceil(64)).map(move |j| (i, j)))
        .map(|(i, j)| cost(i, j))
        .fold(0.0, f64::max);
    let eps_final = eps_final.max(f64::MIN_POSITIVE);
    let mut eps = (max_cost / 4.0).max(eps_final);

    let mut price = vec![0.0; n];
    let mut owner = vec![usize::MAX; n];
    let mut assigned = vec![usize::MAX; n];
    loop {
        owner.fill(usize::MAX);
        assigned.fill(usize::MAX);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for j in 0..n {
                let v = cost(i, j) + price[j];
                if v < best.1 {
                    second = best.1;
                    best = (j, v);
                } else if v < second {
                    second = v;
                }
            }
            let j = best.0;
            price[j] += second - best.1 + eps;
            if owner[j] != usize::MAX {
                assigned[owner[j]] = usize::MAX;
                queue.push(owner[j]);
            }
            owner[j] = i;
            assigned[i] = j;
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    assigned
}

pub fn assignment_cost(a: &[Point], b: &[Point], assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| dist2(&a[i], &b[j]).sqrt())
        .sum()
}
