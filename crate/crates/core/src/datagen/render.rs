use super::{Mesh, View};
use crate::conditioner::SilhouetteImage;
use crate::error::{invalid, Result};
use crate::geometry::Point;

const SUPERSAMPLE: usize = 4;
const FILL: f64 = 0.9;

/// Image-plane basis `(right, up)` for a camera looking from `view`.
pub(super) fn view_basis(view: &View) -> (Point, Point) {
    let (sa, ca) = view.azimuth.to_radians().sin_cos();
    let (se, ce) = view.elevation.to_radians().sin_cos();
    ([-sa, ca, 0.0], [-se * ca, -se * sa, ce])
}

/// Orthographic soft silhouette: each pixel holds the covered fraction of a
/// 4x4 grid of sub-samples. The projected bounding box is centred and its
/// longer side spans 90% of the frame.
pub fn render_silhouette(mesh: &Mesh, view: &View, resolution: usize) -> Result<SilhouetteImage> {
    if resolution < 8 {
        return Err(invalid(format!("resolution must be >= 8, got {resolution}")));
    }
    if mesh.triangles.is_empty() {
        return Err(invalid("cannot render an empty mesh"));
    }
    let (right, up) = view_basis(view);
    let proj: Vec<[f64; 2]> = mesh
        .vertices
        .iter()
        .map(|p| {
            [
                p[0] * right[0] + p[1] * right[1] + p[2] * right[2],
                p[0] * up[0] + p[1] * up[1] + p[2] * up[2],
            ]
        })
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for t in &mesh.triangles {
        for &i in t {
            for k in 0..2 {
                lo[k] = lo[k].min(proj[i][k]);
                hi[k] = hi[k].max(proj[i][k]);
            }
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(extent > 0.0) {
        return Err(invalid("mesh projects to a single point"));
    }
    let scale = FILL * resolution as f64 / extent;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = resolution as f64 / 2.0;

    // Triangles in pixel coordinates (y down), with their bounding boxes.
    let tris: Vec<([[f64; 2]; 3], [f64; 4])> = mesh
        .triangles
        .iter()
        .filter_map(|t| {
            let q = t.map(|i| {
                [
                    half + (proj[i][0] - center[0]) * scale,
                    half - (proj[i][1] - center[1]) * scale,
                ]
            });
            let area = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[1][1] - q[0][1]) * (q[2][0] - q[0][0]);
            (area.abs() > 1e-12).then(|| {
                let bb = [
                    q[0][0].min(q[1][0]).min(q[2][0]),
                    q[0][1].min(q[1][1]).min(q[2][1]),
                    q[0][0].max(q[1][0]).max(q[2][0]),
                    q[0][1].max(q[1][1]).max(q[2][1]),
                ];
                (q, bb)
            })
        })
        .collect();

    let mut pixels = vec![0.0; resolution * resolution];
    let per = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut hits = 0usize;
            for j in 0..SUPERSAMPLE {
                for i in 0..SUPERSAMPLE {
                    let s = [
                        x as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64,
                        y as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64,
                    ];
                    if tris.iter().any(|(q, bb)| {
                        s[0] >= bb[0] && s[0] <= bb[2] && s[1] >= bb[1] && s[1] <= bb[3] && inside(q, s)
                    }) {
                        hits += 1;
                    }
                }
            }
            pixels[y * resolution + x] = hits as f64 * per;
        }
    }
    SilhouetteImage::new(resolution, resolution, pixels)
}

fn inside(q: &[[f64; 2]; 3], p: [f64; 2]) -> bool {
    let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let (d0, d1, d2) = (edge(q[0], q[1]), edge(q[1], q[2]), edge(q[2], q[0]));
    (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
}
