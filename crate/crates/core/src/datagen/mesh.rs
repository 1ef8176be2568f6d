use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BuildingSpec, Outline, RoofType};
use crate::error::{invalid, Result};
use crate::geometry::{normalize_unit_cube, NormalizeTransform, Point, PointCloud};

/// Indexed triangle mesh with outward (counter-clockwise) winding.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Mesh {
    pub fn triangle(&self, i: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        0.5 * dot(&n, &n).sqrt()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.area(i)).sum()
    }

    /// Signed volume; positive for a closed mesh with outward winding.
    pub fn volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                dot(&a, &cross(&b, &c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(usize, usize), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = edges.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        !edges.is_empty() && edges.values().all(|&c| c == (1, 1))
    }

    /// Uniform surface samples with the index of the face each came from.
    pub fn sample_with_faces(&self, n: usize, seed: u64) -> Result<Vec<(Point, usize)>> {
        if n == 0 {
            return Err(invalid("need at least one sample"));
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for i in 0..self.triangles.len() {
            acc += self.area(i);
            cumulative.push(acc);
        }
        if !(acc > 0.0) {
            return Err(invalid("mesh has zero surface area"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.random::<f64>() * acc;
            let face = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
            let [a, b, c] = self.triangle(face);
            let s = rng.random::<f64>().sqrt();
            let u = rng.random::<f64>();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - u), s * u);
            let p = [
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ];
            out.push((p, face));
        }
        Ok(out)
    }
}

/// Area-weighted uniform surface sample, normalized into `[-1, 1]^3`.
/// The transform maps raw mesh coordinates to the returned cloud.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<(PointCloud, NormalizeTransform)> {
    let raw: Vec<Point> = mesh.sample_with_faces(n, seed)?.into_iter().map(|(p, _)| p).collect();
    normalize_unit_cube(&PointCloud::new(raw)?)
}

/// Watertight building mesh: floor, walls and roof, ground at `z = 0`,
/// footprint centred on the origin.
pub fn generate_building(spec: &BuildingSpec) -> Result<Mesh> {
    spec.validate()?;
    match (&spec.outline, spec.roof) {
        (Outline::Rect { width, depth }, RoofType::Flat) => {
            let (a, b) = (width / 2.0, depth / 2.0);
            Ok(extrude(&[[-a, -b], [a, -b], [a, b], [-a, b]], spec.wall_height))
        }
        (Outline::LShape { .. }, RoofType::Flat) => Ok(extrude(&spec.outline.polygon(), spec.wall_height)),
        (Outline::Rect { width, depth }, RoofType::Gable) => {
            Ok(gable(width / 2.0, depth / 2.0, spec.wall_height, spec.pitch))
        }
        (Outline::Rect { width, depth }, RoofType::Hip) => Ok(hip(width / 2.0, depth / 2.0, spec.wall_height, spec.pitch)),
        (Outline::LShape { .. }, _) => Err(invalid("L-shaped footprints only support flat roofs")),
    }
}

struct Builder {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
}

impl Builder {
    fn new() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
        }
    }

    fn v(&mut self, p: Point) -> usize {
        self.vertices.push(p);
        self.vertices.len() - 1
    }

    fn tri(&mut self, a: usize, b: usize, c: usize) {
        self.triangles.push([a, b, c]);
    }

    /// Convex polygon `ids` in counter-clockwise order seen from outside.
    fn fan(&mut self, ids: &[usize]) {
        for k in 1..ids.len() - 1 {
            self.tri(ids[0], ids[k], ids[k + 1]);
        }
    }

    fn finish(self) -> Mesh {
        Mesh {
            vertices: self.vertices,
            triangles: self.triangles,
        }
    }
}

/// Prism over a simple counter-clockwise polygon.
fn extrude(poly: &[[f64; 2]], height: f64) -> Mesh {
    let mut m = Builder::new();
    let n = poly.len();
    let bottom: Vec<usize> = poly.iter().map(|p| m.v([p[0], p[1], 0.0])).collect();
    let top: Vec<usize> = poly.iter().map(|p| m.v([p[0], p[1], height])).collect();
    for [i, j, k] in ear_clip(poly) {
        m.tri(top[i], top[j], top[k]);
        m.tri(bottom[i], bottom[k], bottom[j]);
    }
    for i in 0..n {
        let j = (i + 1) % n;
        m.fan(&[bottom[i], bottom[j], top[j], top[i]]);
    }
    m.finish()
}

/// Ear clipping for a simple counter-clockwise polygon.
fn ear_clip(poly: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let cross2 = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::with_capacity(poly.len().saturating_sub(2));
    while idx.len() > 3 {
        let m = idx.len();
        let ear = (0..m).find(|&k| {
            let (a, b, c) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            if cross2(poly[a], poly[b], poly[c]) <= 0.0 {
                return false;
            }
            idx.iter().all(|&p| {
                if p == a || p == b || p == c {
                    return true;
                }
                let q = poly[p];
                !(cross2(poly[a], poly[b], q) >= 0.0
                    && cross2(poly[b], poly[c], q) >= 0.0
                    && cross2(poly[c], poly[a], q) >= 0.0)
            })
        });
        let k = ear.expect("a simple polygon always has an ear");
        out.push([idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]]);
        idx.remove(k);
    }
    out.push([idx[0], idx[1], idx[2]]);
    out
}

/// Ridge along x at height `h + pitch * b`.
fn gable(a: f64, b: f64, h: f64, pitch: f64) -> Mesh {
    let top = h + pitch * b;
    let mut m = Builder::new();
    let b0 = m.v([-a, -b, 0.0]);
    let b1 = m.v([a, -b, 0.0]);
    let b2 = m.v([a, b, 0.0]);
    let b3 = m.v([-a, b, 0.0]);
    let t0 = m.v([-a, -b, h]);
    let t1 = m.v([a, -b, h]);
    let t2 = m.v([a, b, h]);
    let t3 = m.v([-a, b, h]);
    let r0 = m.v([-a, 0.0, top]);
    let r1 = m.v([a, 0.0, top]);
    m.fan(&[b0, b3, b2, b1]);
    m.fan(&[b0, b1, t1, t0]);
    m.fan(&[b2, b3, t3, t2]);
    m.fan(&[b1, b2, t2, r1, t1]);
    m.fan(&[b3, b0, t0, r0, t3]);
    m.fan(&[t0, t1, r1, r0]);
    m.fan(&[t2, t3, r0, r1]);
    m.finish()
}

/// Four sloped faces of equal pitch; the ridge runs along the longer axis
/// and collapses to an apex on a square footprint.
fn hip(a: f64, b: f64, h: f64, pitch: f64) -> Mesh {
    let short = a.min(b);
    let top = h + pitch * short;
    let mut m = Builder::new();
    let b0 = m.v([-a, -b, 0.0]);
    let b1 = m.v([a, -b, 0.0]);
    let b2 = m.v([a, b, 0.0]);
    let b3 = m.v([-a, b, 0.0]);
    let t0 = m.v([-a, -b, h]);
    let t1 = m.v([a, -b, h]);
    let t2 = m.v([a, b, h]);
    let t3 = m.v([-a, b, h]);
    m.fan(&[b0, b3, b2, b1]);
    m.fan(&[b0, b1, t1, t0]);
    m.fan(&[b1, b2, t2, t1]);
    m.fan(&[b2, b3, t3, t2]);
    m.fan(&[b3, b0, t0, t3]);
    if a == b {
        let apex = m.v([0.0, 0.0, top]);
        for (p, q) in [(t0, t1), (t1, t2), (t2, t3), (t3, t0)] {
            m.tri(p, q, apex);
        }
    } else if a > b {
        let r0 = m.v([-(a - b), 0.0, top]);
        let r1 = m.v([a - b, 0.0, top]);
        m.fan(&[t0, t1, r1, r0]);
        m.tri(t1, t2, r1);
        m.fan(&[t2, t3, r0, r1]);
        m.tri(t3, t0, r0);
    } else {
        let r0 = m.v([0.0, -(b - a), top]);
        let r1 = m.v([0.0, b - a, top]);
        m.tri(t0, t1, r0);
        m.fan(&[t1, t2, r1, r0]);
        m.tri(t2, t3, r1);
        m.fan(&[t3, t0, r0, r1]);
    }
    m.finish()
}
