//! Procedural buildings: parametric meshes, surface point sampling,
//! silhouette rendering, dataset manifests and a geometric roof classifier.

mod dataset;
mod mesh;
mod render;

pub use dataset::{build_dataset, load_manifest, DatasetConfig, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use mesh::{generate_building, sample_surface, Mesh};
pub use render::render_silhouette;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{normalize_unit_cube, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoofType {
    Flat,
    Gable,
    Hip,
}

impl std::fmt::Display for RoofType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flat => "flat",
            Self::Gable => "gable",
            Self::Hip => "hip",
        })
    }
}

impl std::str::FromStr for RoofType {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "gable" => Ok(Self::Gable),
            "hip" => Ok(Self::Hip),
            other => Err(invalid(format!("unknown roof type `{other}` (flat|gable|hip)"))),
        }
    }
}

/// Building footprint, centred on the origin. The L-shape is the
/// `width x depth` rectangle with its `+x, +y` corner removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Outline {
    Rect {
        width: f64,
        depth: f64,
    },
    #[serde(rename = "lshape")]
    LShape {
        width: f64,
        depth: f64,
        cut_width: f64,
        cut_depth: f64,
    },
}

impl Outline {
    /// Counter-clockwise footprint polygon.
    pub fn polygon(&self) -> Vec<[f64; 2]> {
        match *self {
            Outline::Rect { width, depth } => {
                let (a, b) = (width / 2.0, depth / 2.0);
                vec![[-a, -b], [a, -b], [a, b], [-a, b]]
            }
            Outline::LShape {
                width,
                depth,
                cut_width,
                cut_depth,
            } => {
                let (a, b) = (width / 2.0, depth / 2.0);
                vec![
                    [-a, -b],
                    [a, -b],
                    [a, b - cut_depth],
                    [a - cut_width, b - cut_depth],
                    [a - cut_width, b],
                    [-a, b],
                ]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Outline::Rect { width, depth } if ok(width) && ok(depth) => Ok(()),
            Outline::LShape {
                width,
                depth,
                cut_width,
                cut_depth,
            } if ok(width) && ok(depth) && ok(cut_width) && ok(cut_depth) && cut_width < width && cut_depth < depth => {
                Ok(())
            }
            _ => Err(invalid(format!("degenerate footprint {self:?}"))),
        }
    }
}

/// Camera direction in degrees. Azimuth 0 looks along the ridge (the x
/// axis); elevation 90 is a nadir view.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct View {
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub outline: Outline,
    pub wall_height: f64,
    pub roof: RoofType,
    /// Rise over run of the roof planes.
    pub pitch: f64,
    pub view: View,
    pub seed: u64,
}

impl BuildingSpec {
    pub fn validate(&self) -> Result<()> {
        self.outline.validate()?;
        if !(self.wall_height.is_finite() && self.wall_height > 0.0) {
            return Err(invalid(format!("wall height must be positive, got {}", self.wall_height)));
        }
        if !(self.pitch.is_finite() && self.pitch >= 0.0) {
            return Err(invalid(format!("pitch must be >= 0, got {}", self.pitch)));
        }
        if self.roof == RoofType::Flat && self.pitch != 0.0 {
            return Err(invalid("flat roofs have pitch 0"));
        }
        if !(self.view.azimuth.is_finite() && self.view.elevation.is_finite()) {
            return Err(invalid("view angles must be finite"));
        }
        Ok(())
    }
}

/// Fraction of the highest points inspected by [`roof_oracle`].
pub const ORACLE_TOP_FRACTION: f64 = 0.2;
/// Height spread, in normalized units, below which a roof counts as flat.
pub const ORACLE_FLAT_STD: f64 = 0.05;
pub const ORACLE_MIN_POINTS: usize = 20;

/// Classifies a cloud as flat- or gable-roofed from the height spread of
/// its top 20% of points. Unnormalized clouds are normalized first.
pub fn roof_oracle(cloud: &PointCloud) -> Result<RoofType> {
    if cloud.len() < ORACLE_MIN_POINTS {
        return Err(invalid(format!(
            "roof oracle needs at least {ORACLE_MIN_POINTS} points, got {}",
            cloud.len()
        )));
    }
    let normalized;
    let cloud = if cloud.is_normalized() {
        cloud
    } else {
        normalized = normalize_unit_cube(cloud)?.0;
        &normalized
    };
    let mut z: Vec<f64> = cloud.points().iter().map(|p| p[2]).collect();
    z.sort_by(|a, b| b.total_cmp(a));
    let top = &z[..(z.len() as f64 * ORACLE_TOP_FRACTION).ceil() as usize];
    let mean = top.iter().sum::<f64>() / top.len() as f64;
    let var = top.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / top.len() as f64;
    Ok(if var.sqrt() < ORACLE_FLAT_STD {
        RoofType::Flat
    } else {
        RoofType::Gable
    })
}
