use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_building, render_silhouette, sample_surface, BuildingSpec, Outline, RoofType, View};
use crate::error::{invalid, Error, Result};
use crate::geometry::io::save_bpc;

pub const MANIFEST_FILE: &str = "manifest.json";

const WIDTH: (f64, f64) = (0.8, 1.6);
const DEPTH: (f64, f64) = (0.8, 1.2);
const WALL: (f64, f64) = (0.4, 0.8);
const PITCH: (f64, f64) = (0.6, 1.0);
const AZIMUTH: (f64, f64) = (-45.0, 45.0);
const ELEVATION: (f64, f64) = (0.0, 30.0);
const CUT: (f64, f64) = (0.3, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    /// Roof classes, split evenly within each split.
    pub classes: Vec<RoofType>,
    /// Points sampled per building.
    pub points: usize,
    pub resolution: usize,
    /// Probability that a flat-roofed building gets an L-shaped footprint.
    pub lshape_prob: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 50,
            classes: vec![RoofType::Flat, RoofType::Gable],
            points: 2048,
            resolution: 32,
            lshape_prob: 0.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(invalid("train and test counts must be >= 1"));
        }
        if self.classes.is_empty() {
            return Err(invalid("need at least one roof class"));
        }
        if self.points == 0 {
            return Err(invalid("points per building must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lshape_prob) {
            return Err(invalid(format!("lshape_prob must be in [0, 1], got {}", self.lshape_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub spec: BuildingSpec,
    /// Paths relative to the dataset root.
    pub cloud: PathBuf,
    pub silhouette: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

fn draw_spec(rng: &mut ChaCha8Rng, roof: RoofType, lshape_prob: f64) -> BuildingSpec {
    let width = uniform(rng, WIDTH);
    let depth = uniform(rng, DEPTH);
    let wall_height = uniform(rng, WALL);
    let pitch = if roof == RoofType::Flat { 0.0 } else { uniform(rng, PITCH) };
    let outline = if roof == RoofType::Flat && rng.random_bool(lshape_prob) {
        Outline::LShape {
            width,
            depth,
            cut_width: width * uniform(rng, CUT),
            cut_depth: depth * uniform(rng, CUT),
        }
    } else {
        Outline::Rect { width, depth }
    };
    let view = View {
        azimuth: uniform(rng, AZIMUTH),
        elevation: uniform(rng, ELEVATION),
    };
    BuildingSpec {
        outline,
        wall_height,
        roof,
        pitch,
        view,
        seed: rng.random(),
    }
}

fn class_plan(n: usize, classes: &[RoofType], rng: &mut ChaCha8Rng) -> Vec<RoofType> {
    let c = classes.len();
    let mut plan: Vec<RoofType> = (0..n).map(|i| classes[i % c]).collect();
    plan.shuffle(rng);
    plan
}

/// Draws building specs from seeded distributions, writes one cloud and one
/// silhouette per building under `root`, and persists the manifest.
/// Class counts are exact: each split divides evenly over the classes, with
/// any remainder going to the first classes.
pub fn build_dataset(root: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(config.train + config.test);
    for (split, n) in [(Split::Train, config.train), (Split::Test, config.test)] {
        for roof in class_plan(n, &config.classes, &mut rng) {
            let id = format!("b{:05}", entries.len());
            entries.push(ManifestEntry {
                cloud: PathBuf::from("clouds").join(format!("{id}.bpc")),
                silhouette: PathBuf::from("silhouettes").join(format!("{id}.pgm")),
                id,
                split,
                spec: draw_spec(&mut rng, roof, config.lshape_prob),
            });
        }
    }

    fs::create_dir_all(root.join("clouds"))?;
    fs::create_dir_all(root.join("silhouettes"))?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(entries.len());
    let chunk = entries.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().try_for_each(|e| write_building(root, e, config))))
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().unwrap_or_else(|_| Err(invalid("dataset worker panicked"))))
    })?;

    let manifest = DatasetManifest {
        config: config.clone(),
        entries,
    };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn write_building(root: &Path, entry: &ManifestEntry, config: &DatasetConfig) -> Result<()> {
    let mesh = generate_building(&entry.spec)?;
    let (cloud, _) = sample_surface(&mesh, config.points, entry.spec.seed)?;
    save_bpc(&root.join(&entry.cloud), cloud.points())?;
    render_silhouette(&mesh, &entry.spec.view, config.resolution)?.save_pgm(&root.join(&entry.silhouette))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: format!("cannot read dataset manifest: {e}"),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            train: 6,
            test: 3,
            points: 64,
            resolution: 16,
            seed,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn default_counts_and_mix() {
        let c = DatasetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [c.train, c.test] {
            let plan = class_plan(n, &c.classes, &mut rng);
            let flat = plan.iter().filter(|r| **r == RoofType::Flat).count();
            assert_eq!(flat * 2, n);
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = build_dataset(a.path(), &small(5)).unwrap();
        build_dataset(b.path(), &small(5)).unwrap();
        for rel in ["manifest.json", "clouds/b00000.bpc", "silhouettes/b00008.pgm"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let train: HashSet<_> = ma.split(Split::Train).map(|e| &e.id).collect();
        let test: HashSet<_> = ma.split(Split::Test).map(|e| &e.id).collect();
        assert_eq!((train.len(), test.len()), (6, 3));
        assert!(train.is_disjoint(&test));
        assert_eq!(load_manifest(a.path()).unwrap(), ma);
    }

    #[test]
    fn lshapes_only_on_flat_roofs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = draw_spec(&mut rng, RoofType::Flat, 1.0);
            assert!(matches!(s.outline, Outline::LShape { .. }));
            generate_building(&s).unwrap();
            let g = draw_spec(&mut rng, RoofType::Gable, 1.0);
            assert!(matches!(g.outline, Outline::Rect { .. }));
        }
    }

    #[test]
    fn bad_config_and_unwritable_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(0);
        c.test = 0;
        assert!(build_dataset(dir.path(), &c).is_err());
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(build_dataset(&file, &small(0)).is_err());
    }
}
