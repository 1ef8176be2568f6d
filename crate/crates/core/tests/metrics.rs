use buildiff::geometry::{Point, PointCloud};
use buildiff::metrics::{chamfer, emd, evaluate_pair, fscore, EmdMode, EvalOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn brute_chamfer(a: &[Point], b: &[Point]) -> f64 {
    let dir = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    dir(a, b) + dir(b, a)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_emd(a: &[Point], b: &[Point]) -> f64 {
    permutations(a.len())
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| d2(&a[i], &b[j]).sqrt()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / a.len() as f64
}

#[test]
fn chamfer_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let na = rng.random_range(1..=16);
        let nb = rng.random_range(1..=16);
        let a = random_cloud(&mut rng, na);
        let b = random_cloud(&mut rng, nb);
        assert!((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn exact_emd_equals_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let n = rng.random_range(1..=8);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, n);
        let got = emd(&a, &b, EmdMode::Exact, 0).unwrap().value;
        assert!((got - brute_emd(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn approx_emd_within_two_percent_at_256() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let a = random_cloud(&mut rng, 256);
        let b = random_cloud(&mut rng, 256);
        let exact = emd(&a, &b, EmdMode::Exact, 0).unwrap().value;
        let approx = emd(&a, &b, EmdMode::Approx, 0).unwrap().value;
        assert!(approx >= exact - 1e-12);
        assert!((approx - exact) / exact < 0.02, "exact {exact} approx {approx}");
    }
}

#[test]
fn fscore_matches_direct_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let a = random_cloud(&mut rng, 40);
        let b: Vec<Point> = a
            .iter()
            .map(|p| [p[0] + rng.random_range(-0.05..0.05), p[1], p[2]])
            .collect();
        let tau = 0.001;
        let hits = |x: &[Point], y: &[Point]| {
            x.iter().filter(|p| y.iter().any(|q| d2(p, q) <= tau)).count() as f64 * 100.0 / x.len() as f64
        };
        let (p, r) = (hits(&a, &b), hits(&b, &a));
        let expected = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!((fscore(&a, &b, tau).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn pair_report_regression_fixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = PointCloud::new(random_cloud(&mut rng, 128)).unwrap();
    let b = PointCloud::new(random_cloud(&mut rng, 96)).unwrap();
    let rep = evaluate_pair(&a, &b, &EvalOptions::default()).unwrap();
    let again = evaluate_pair(&a, &b, &EvalOptions::default()).unwrap();
    assert_eq!(rep, again);
    assert_eq!(rep.emd_subsampled_to, Some(96));
    // Pinned from the first run.
    assert!((rep.cd_scaled - 15.196846764193921).abs() < 1e-9);
    assert!((rep.emd_scaled - 36.15825233659602).abs() < 1e-9);
    assert_eq!(rep.f1, 0.0);
}

fn small_cloud() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..12)
}

proptest! {
    #[test]
    fn chamfer_symmetric_nonnegative(a in small_cloud(), b in small_cloud()) {
        let ab = chamfer(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn emd_symmetric_and_zero_on_self(a in small_cloud(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_cloud(&mut rng, a.len());
        let ab = emd(&a, &b, EmdMode::Exact, 0).unwrap().value;
        let ba = emd(&b, &a, EmdMode::Exact, 0).unwrap().value;
        prop_assert!(ab > 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert!(emd(&a, &shuffled, EmdMode::Exact, 0).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn fscore_monotone_in_tau(a in small_cloud(), b in small_cloud(), t1 in 1e-4f64..1.0, t2 in 1e-4f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let f_lo = fscore(&a, &b, lo).unwrap();
        let f_hi = fscore(&a, &b, hi).unwrap();
        prop_assert!(f_lo <= f_hi + 1e-12);
        prop_assert!((0.0..=100.0).contains(&f_hi));
    }
}
