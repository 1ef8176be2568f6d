use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use buildiff_tensor::checkpoint;
use buildiff_tensor::{AdamState, ParamStore, Tape, Tensor};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LowresSource, TrainConfig};
use super::loss::{diffusion_loss, StepDraws, TrainSample};
use crate::conditioner::{train_autoencoder, AeConfig, AeTrainOptions, AutoEncoder, SilhouetteImage};
use crate::datagen::{load_manifest, DatasetManifest, Split};
use crate::denoiser::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::geometry::io::load_bpc;
use crate::geometry::{fps_indices_from, Point};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Autoencoder,
    Base,
    Upsampler,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Base => "base",
            Stage::Upsampler => "upsampler",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Autoencoder => 0xae,
            Stage::Base => 0xba5e,
            Stage::Upsampler => 0x0b5a,
        }
    }
}

/// File names inside a checkpoint directory.
pub mod files {
    use std::path::{Path, PathBuf};

    use super::Stage;

    pub const EMBEDDINGS: &str = "embeddings.bdif";
    pub const LOCK: &str = "train.lock";

    /// Model parameters.
    pub fn params(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.bdif", stage.name()))
    }

    /// Optimiser moments for resuming.
    pub fn optimizer(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.adam.bdif", stage.name()))
    }

    /// Progress, RNG state and configuration echo.
    pub fn meta(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.json", stage.name()))
    }

    /// One JSON object per step (per epoch for the auto-encoder).
    pub fn log(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.log.jsonl", stage.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub l_eps: f64,
    pub l_reg: f64,
    pub l_theta: f64,
    /// Per-sample draws of the batch.
    pub t: Vec<usize>,
    pub lambda: Vec<f64>,
    pub dropped: Vec<bool>,
    pub nn_queries: usize,
}

/// One optimisation step on fixed draws.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Denoiser,
    adam: &mut AdamState,
    batch: &[TrainSample],
    draws: &StepDraws,
    pinned: usize,
    schedule: &NoiseSchedule,
    rho: f64,
    epoch: usize,
    step: u64,
) -> Result<StepLog> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let parts = diffusion_loss(model, &mut tape, &bound, batch, draws, pinned, schedule, rho)?;
    if !(parts.l_eps.is_finite() && parts.l_reg.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("training loss (l_eps={}, l_reg={}, t={:?})", parts.l_eps, parts.l_reg, draws.ts),
            step: step as usize,
        });
    }
    tape.backward(parts.total)?;
    adam.update(&mut model.params, &bound.grads(&tape))?;
    Ok(StepLog {
        epoch,
        step,
        l_eps: parts.l_eps,
        l_reg: parts.l_reg,
        l_theta: parts.l_theta,
        t: draws.ts.clone(),
        lambda: parts.lambdas,
        dropped: draws.dropped.clone(),
        nn_queries: parts.nn_queries,
    })
}

/// Base-stage step: draws `t`, the drop coin and the noise per sample.
#[allow(clippy::too_many_arguments)]
pub fn train_step_base(
    model: &mut Denoiser,
    adam: &mut AdamState,
    batch: &[TrainSample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: u64,
) -> Result<StepLog> {
    let n = batch.first().ok_or_else(|| invalid("empty training batch"))?.x0.len();
    let draws = StepDraws::sample(rng, batch.len(), n, schedule.steps(), config.drop_prob);
    train_step(model, adam, batch, &draws, 0, schedule, config.rho, epoch, step)
}

/// Upsampler step: each sample's first `K` points are its low-resolution
/// conditioning, kept clean in `x_t` and excluded from the noise loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step_upsampler(
    model: &mut Denoiser,
    adam: &mut AdamState,
    batch: &[TrainSample],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: u64,
) -> Result<StepLog> {
    let n = batch.first().ok_or_else(|| invalid("empty training batch"))?.x0.len();
    let draws = StepDraws::sample(rng, batch.len(), n, schedule.steps(), config.drop_prob);
    train_step(model, adam, batch, &draws, config.k, schedule, config.rho, epoch, step)
}

/// Reorders a random `n`-point subset of `cloud` so that its first `k`
/// points are the low-resolution conditioning.
pub fn upsampler_example(cloud: &[Point], k: usize, n: usize, source: LowresSource, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    if cloud.len() < n || k >= n || k == 0 {
        return Err(invalid(format!("cannot take {k} of {n} points from a {}-point cloud", cloud.len())));
    }
    let subset: Vec<Point> = index::sample(rng, cloud.len(), n).iter().map(|i| cloud[i]).collect();
    let low = match source {
        LowresSource::Fps => {
            let first = rng.random_range(0..n);
            fps_indices_from(&subset, k, first)?
        }
        LowresSource::Random => index::sample(rng, n, k).into_vec(),
    };
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(n);
    for &i in &low {
        taken[i] = true;
        out.push(subset[i]);
    }
    out.extend(subset.iter().zip(&taken).filter(|(_, t)| !**t).map(|(p, _)| *p));
    Ok(out)
}

fn base_example(cloud: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    if cloud.len() < k {
        return Err(invalid(format!("cannot take {k} points from a {}-point cloud", cloud.len())));
    }
    Ok(index::sample(rng, cloud.len(), k).iter().map(|i| cloud[i]).collect())
}

/// Exclusive claim on a checkpoint directory, released on drop.
pub struct TrainingLock {
    path: PathBuf,
}

impl TrainingLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(files::LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for TrainingLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || invalid("corrupt RNG state in checkpoint");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub epochs_done: usize,
    pub steps_done: u64,
    pub complete: bool,
    pub adam_step: u64,
    pub rng: RngState,
    pub param_checksum: u64,
    pub config: TrainConfig,
}

pub fn read_meta(dir: &Path, stage: Stage) -> Result<CheckpointMeta> {
    let path = files::meta(dir, stage);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingStage {
        required: stage.name(),
        path: path.display().to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&mut buf, params)?;
    write_atomic(path, &buf)
}

fn load_params(path: &Path, stage: Stage) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::MissingStage {
            required: stage.name(),
            path: path.display().to_string(),
        });
    }
    Ok(checkpoint::load(path)?)
}

fn moments_store(adam: &AdamState, params: &ParamStore) -> Result<ParamStore> {
    let (m, v) = adam.moments();
    let mut store = ParamStore::new();
    for (i, (name, t)) in params.iter().enumerate() {
        store.insert(format!("m.{name}"), Tensor::new(t.shape().to_vec(), m[i].clone())?)?;
        store.insert(format!("v.{name}"), Tensor::new(t.shape().to_vec(), v[i].clone())?)?;
    }
    Ok(store)
}

fn restore_adam(store: &ParamStore, lr: f64, step: u64, params: &ParamStore) -> Result<AdamState> {
    let take = |prefix: &str| -> Result<Vec<Vec<f64>>> {
        params
            .iter()
            .map(|(name, _)| {
                store
                    .get(&format!("{prefix}.{name}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| invalid(format!("optimizer state lacks {prefix}.{name}")))
            })
            .collect()
    };
    Ok(AdamState::restore(lr, step, take("m")?, take("v")?, params)?)
}

/// Embeddings keyed by building id.
pub fn load_embeddings(dir: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let path = dir.join(files::EMBEDDINGS);
    let store = load_params(&path, Stage::Autoencoder)?;
    Ok(store.iter().map(|(k, t)| (k.to_string(), t.data().to_vec())).collect())
}

pub fn load_autoencoder(dir: &Path) -> Result<(AutoEncoder, TrainConfig)> {
    let meta = read_meta(dir, Stage::Autoencoder)?;
    let params = load_params(&files::params(dir, Stage::Autoencoder), Stage::Autoencoder)?;
    let model = AutoEncoder::from_params(ae_config(&meta.config), params)?;
    Ok((model, meta.config))
}

/// A trained (or partially trained) diffusion stage with its configuration.
pub fn load_denoiser(dir: &Path, stage: Stage) -> Result<(Denoiser, TrainConfig)> {
    if stage == Stage::Autoencoder {
        return Err(invalid("the auto-encoder is not a denoiser"));
    }
    let meta = read_meta(dir, stage)?;
    let params = load_params(&files::params(dir, stage), stage)?;
    Ok((Denoiser::from_params(meta.config.denoiser(), params)?, meta.config))
}

fn ae_config(c: &TrainConfig) -> AeConfig {
    AeConfig {
        size: c.image_size,
        d: c.d,
    }
}

/// Progress reported by [`run_training`].
#[derive(Debug)]
pub enum Progress<'a> {
    AeEpoch { epoch: usize, loss: f64 },
    Step(&'a StepLog),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from an unfinished checkpoint of the same stage.
    pub resume: bool,
    /// Stop after this many completed epochs, leaving a resumable
    /// checkpoint.
    pub stop_after: Option<usize>,
}

/// Trains one stage from the dataset at `data`, writing checkpoints into
/// `dir`. Diffusion stages need the auto-encoder stage first. Returns the
/// parameter file.
pub fn run_training(
    data: &Path,
    dir: &Path,
    config: &TrainConfig,
    stage: Stage,
    opts: &RunOptions,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<PathBuf> {
    config.validate()?;
    if stage != Stage::Autoencoder {
        for path in [files::params(dir, Stage::Autoencoder), dir.join(files::EMBEDDINGS)] {
            if !path.exists() {
                return Err(Error::MissingStage {
                    required: Stage::Autoencoder.name(),
                    path: path.display().to_string(),
                });
            }
        }
    }
    let manifest = load_manifest(data)?;
    let _lock = TrainingLock::acquire(dir)?;
    match stage {
        Stage::Autoencoder => train_ae_stage(data, dir, config, &manifest, &mut progress),
        _ => train_diffusion_stage(data, dir, config, stage, &manifest, opts, &mut progress),
    }
}

fn train_ae_stage(
    data: &Path,
    dir: &Path,
    config: &TrainConfig,
    manifest: &DatasetManifest,
    progress: &mut impl FnMut(Progress<'_>),
) -> Result<PathBuf> {
    let load = |e: &crate::datagen::ManifestEntry| SilhouetteImage::load_pgm(&data.join(&e.silhouette));
    let train: Vec<SilhouetteImage> = manifest.split(Split::Train).map(load).collect::<Result<_>>()?;
    let opts = AeTrainOptions {
        epochs: config.epochs_ae,
        lr: config.ae_lr,
        batch: config.batch,
        seed: config.seed ^ Stage::Autoencoder.salt(),
        stop_grad_aug: false,
    };
    let mut log = File::create(files::log(dir, Stage::Autoencoder))?;
    let mut lines = Vec::new();
    let (model, _) = train_autoencoder(&train, ae_config(config), &opts, |epoch, loss| {
        lines.push(serde_json::json!({ "epoch": epoch, "loss": loss }).to_string());
        progress(Progress::AeEpoch { epoch, loss });
    })?;
    for l in lines {
        writeln!(log, "{l}")?;
    }

    let mut embeddings = ParamStore::new();
    for e in &manifest.entries {
        let z = model.encode(&load(e)?)?;
        embeddings.insert(e.id.clone(), Tensor::vector(z.values))?;
    }
    save_params(&dir.join(files::EMBEDDINGS), &embeddings)?;
    let path = files::params(dir, Stage::Autoencoder);
    save_params(&path, &model.params)?;
    let meta = CheckpointMeta {
        stage: Stage::Autoencoder,
        epochs_done: config.epochs_ae,
        steps_done: 0,
        complete: true,
        adam_step: 0,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(opts.seed)),
        param_checksum: model.params.checksum(),
        config: config.clone(),
    };
    write_atomic(&files::meta(dir, Stage::Autoencoder), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(path)
}

/// Fields a resumed run must share with its checkpoint; epoch counts and
/// the checkpoint interval may change.
fn resumable_with(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        epochs_ae: 0,
        epochs_base: 0,
        epochs_upsampler: 0,
        checkpoint_every: 0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

fn train_diffusion_stage(
    data: &Path,
    dir: &Path,
    config: &TrainConfig,
    stage: Stage,
    manifest: &DatasetManifest,
    opts: &RunOptions,
    progress: &mut impl FnMut(Progress<'_>),
) -> Result<PathBuf> {
    let (schedule, epochs, points) = match stage {
        Stage::Base => (config.base_schedule()?, config.epochs_base, config.k),
        _ => (config.upsampler_schedule()?, config.epochs_upsampler, config.n),
    };
    let embeddings = load_embeddings(dir)?;
    let mut examples: Vec<(Vec<Point>, Vec<f64>)> = Vec::new();
    for e in manifest.split(Split::Train) {
        let z = embeddings
            .get(&e.id)
            .ok_or_else(|| Error::DataMismatch(format!("no cached embedding for `{}`", e.id)))?;
        if z.len() != config.d {
            return Err(Error::ShapeMismatch {
                what: "cached embedding",
                expected: config.d,
                actual: z.len(),
            });
        }
        let cloud = load_bpc(&data.join(&e.cloud))?.into_points();
        if cloud.len() < points {
            return Err(Error::DataMismatch(format!(
                "`{}` has {} points, the {} stage needs {points}",
                e.id,
                cloud.len(),
                stage.name()
            )));
        }
        examples.push((cloud, z.clone()));
    }
    if examples.is_empty() {
        return Err(invalid("the dataset has no training entries"));
    }

    let meta_path = files::meta(dir, stage);
    let log_path = files::log(dir, stage);
    let (mut model, mut adam, mut rng, start_epoch, mut step) = if opts.resume && meta_path.exists() {
        let meta = read_meta(dir, stage)?;
        if !resumable_with(&meta.config, config) {
            return Err(invalid(format!(
                "configuration differs from the {} checkpoint being resumed",
                stage.name()
            )));
        }
        let params = load_params(&files::params(dir, stage), stage)?;
        if params.checksum() != meta.param_checksum {
            return Err(invalid(format!("{} checkpoint does not match its metadata", stage.name())));
        }
        let model = Denoiser::from_params(config.denoiser(), params)?;
        let moments = load_params(&files::optimizer(dir, stage), stage)?;
        let adam = restore_adam(&moments, config.lr, meta.adam_step, &model.params)?;
        // Drop log lines written after the checkpoint.
        if let Ok(text) = fs::read_to_string(&log_path) {
            let kept: String = text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<StepLog>(l).is_ok_and(|s| s.step < meta.steps_done)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&log_path, kept)?;
        }
        (model, adam, meta.rng.restore()?, meta.epochs_done, meta.steps_done)
    } else {
        let model = Denoiser::new(config.denoiser(), config.seed ^ stage.salt())?;
        let adam = AdamState::new(config.lr, &model.params);
        fs::write(&log_path, "")?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ stage.salt().rotate_left(32));
        (model, adam, rng, 0, 0)
    };

    let mut log = OpenOptions::new().append(true).create(true).open(&log_path)?;
    let save = |model: &Denoiser, adam: &AdamState, rng: &ChaCha8Rng, epochs_done: usize, step: u64| -> Result<()> {
        save_params(&files::params(dir, stage), &model.params)?;
        save_params(&files::optimizer(dir, stage), &moments_store(adam, &model.params)?)?;
        let meta = CheckpointMeta {
            stage,
            epochs_done,
            steps_done: step,
            complete: epochs_done >= epochs,
            adam_step: adam.step_count(),
            rng: RngState::capture(rng),
            param_checksum: model.params.checksum(),
            config: config.clone(),
        };
        write_atomic(&files::meta(dir, stage), serde_json::to_string_pretty(&meta)?.as_bytes())
    };

    let end = opts.stop_after.map_or(epochs, |s| s.min(epochs));
    if start_epoch >= end {
        save(&model, &adam, &rng, start_epoch, step)?;
    }
    for epoch in start_epoch..end {
        // Each epoch shuffles from scratch so a resumed run sees the same order.
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let (cloud, z) = &examples[i];
                    let x0 = match stage {
                        Stage::Base => base_example(cloud, config.k, &mut rng)?,
                        _ => upsampler_example(cloud, config.k, config.n, config.lowres, &mut rng)?,
                    };
                    Ok(TrainSample {
                        x0,
                        embedding: z.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let entry = match stage {
                Stage::Base => train_step_base(&mut model, &mut adam, &batch, config, &schedule, &mut rng, epoch, step)?,
                _ => train_step_upsampler(&mut model, &mut adam, &batch, config, &schedule, &mut rng, epoch, step)?,
            };
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            progress(Progress::Step(&entry));
            step += 1;
        }
        let done = epoch + 1;
        if done == end || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            save(&model, &adam, &rng, done, step)?;
        }
    }
    Ok(files::params(dir, stage))
}
