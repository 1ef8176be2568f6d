//! Point-cloud containers and the geometric primitives built on them.

mod fps;
pub mod io;
mod kdtree;

pub use fps::{farthest_point_sample, fps_indices, fps_indices_from};
pub use kdtree::{nearest_linear, KdTree};

use crate::error::{invalid, Result};

pub type Point = [f64; 3];

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Ordered, non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    normalized: bool,
    pub meta: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normalized: false,
            meta: None,
        })
    }

    /// Rows of three coordinates.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(invalid(format!("{} values do not form xyz triples", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn with_meta(mut self, meta: impl Into<String>) -> Self {
        self.meta = Some(meta.into());
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether the cloud went through [`normalize_unit_cube`] and lies in
    /// `[-1, 1]^3`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Sub-cloud by index, keeping metadata.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| invalid(format!("index {i} out of range ({} points)", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(points)?;
        out.normalized = self.normalized;
        out.meta = self.meta.clone();
        Ok(out)
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Mapping applied by [`normalize_unit_cube`]: `p' = (p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizeTransform {
    pub center: Point,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.center[0]) * self.scale,
            (p[1] - self.center[1]) * self.scale,
            (p[2] - self.center[2]) * self.scale,
        ]
    }

    pub fn invert(&self, p: &Point) -> Point {
        [
            p[0] / self.scale + self.center[0],
            p[1] / self.scale + self.center[1],
            p[2] / self.scale + self.center[2],
        ]
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        PointCloud::new(cloud.points.iter().map(|p| self.invert(p)).collect())
    }
}

/// Centre on the bounding-box centre and scale uniformly so the widest
/// axis spans exactly `[-1, 1]`. Aspect ratio is preserved.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let (lo, hi) = cloud.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(invalid("cannot normalize a cloud whose points are all identical"));
    }
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let transform = NormalizeTransform {
        center,
        scale: 2.0 / extent,
    };
    let points = cloud
        .points
        .iter()
        .map(|p| transform.apply(p).map(|v| v.clamp(-1.0, 1.0)))
        .collect();
    let mut out = PointCloud::new(points)?;
    out.normalized = true;
    out.meta = cloud.meta.clone();
    Ok((out, transform))
}

/// Ground-plane projection of a cloud: every point with `z = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    points: Vec<Point>,
}

impl Footprint {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_cloud(self) -> PointCloud {
        PointCloud {
            points: self.points,
            normalized: false,
            meta: None,
        }
    }
}

pub fn project_footprint(cloud: &PointCloud) -> Footprint {
    Footprint {
        points: cloud.points.iter().map(|p| [p[0], p[1], 0.0]).collect(),
    }
}
