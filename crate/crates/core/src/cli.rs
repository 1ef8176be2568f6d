//! Command-line front end. Exit codes: 0 ok, 1 internal, 2 missing stage or
//! busy checkpoint directory, 3 bad input, 4 mismatched data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::conditioner::SilhouetteImage;
use crate::datagen::{build_dataset, load_manifest, DatasetConfig, RoofType, Split};
use crate::diffusion::{SampleOptions, SampleTrace};
use crate::error::{invalid, Error, Result};
use crate::geometry::io::{load_bpc, load_cloud, save_ply};
use crate::metrics::{evaluate_pair, summarize, EmdMode, EvalOptions, EvalRow, DEFAULT_TAU};
use crate::pipeline::{
    generate, load_autoencoder, load_denoiser, run_training, Preset, Progress, RunOptions, Stage,
    TrainConfig, CONFIG_KEYS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_DEPENDENCY: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingStage { .. } | Error::Locked(_) => EXIT_DEPENDENCY,
        Error::Invalid(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::ShapeMismatch { .. } => {
            EXIT_INPUT
        }
        Error::DataMismatch(_) => EXIT_MISMATCH,
        Error::NonFinite { .. } | Error::NonFiniteLayer(_) | Error::Tensor(_) => EXIT_INTERNAL,
    }
}

fn config_help() -> String {
    let paper = TrainConfig::preset(Preset::Paper);
    let toy = TrainConfig::preset(Preset::Toy);
    let mut s = String::from("Configuration keys (paper default / toy default):\n");
    for (key, help) in CONFIG_KEYS {
        s.push_str(&format!(
            "  {key:<17} {} / {}  {help}\n",
            paper.get(key).unwrap_or_default(),
            toy.get(key).unwrap_or_default()
        ));
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "buildiff", version, about = "Image-conditioned point-cloud diffusion for building shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural building dataset.
    GenData(GenDataArgs),
    /// Train the silhouette auto-encoder and cache embeddings.
    #[command(after_help = config_help())]
    TrainAe(TrainArgs),
    /// Train the base diffusion stage.
    #[command(after_help = config_help())]
    TrainBase(TrainArgs),
    /// Train the upsampler diffusion stage.
    #[command(after_help = config_help())]
    TrainUpsampler(TrainArgs),
    /// Generate a point cloud from a silhouette.
    Sample(SampleArgs),
    /// Compare predicted clouds with references.
    Eval(EvalArgs),
    /// Generate predictions, or write references, for a dataset split.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    /// Points sampled per building.
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    /// Silhouette side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Comma-separated roof classes.
    #[arg(long, default_value = "flat,gable", value_delimiter = ',')]
    pub classes: Vec<RoofType>,
    /// Probability of an L-shaped footprint for flat roofs.
    #[arg(long, default_value_t = 0.0)]
    pub lshape_prob: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory shared by all stages.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults the config file and --set entries apply to.
    #[arg(long, default_value = "paper", value_parser = parse_preset)]
    pub preset: Preset,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set epochs_base=10; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for --set seed=S.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue an unfinished run of this stage.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(self.preset);
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: format!("cannot read config: {e}"),
            })?;
            c.apply_text(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{o}`")))?;
            c.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SampleOpts {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also run the upsampler.
    #[arg(long)]
    pub high_res: bool,
    /// Guidance scale; defaults to the trained configuration's value.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub opts: SampleOpts,
    /// Input silhouette (PGM).
    #[arg(long)]
    pub image: PathBuf,
    /// Output PLY.
    #[arg(long)]
    pub out: PathBuf,
    /// Write intermediate states as PLY files into this directory.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Steps between trace snapshots.
    #[arg(long, default_value_t = 10)]
    pub trace_stride: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted clouds (.ply, .bpc or .xyz, named by id).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference clouds.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Per-pair JSON lines; the summary goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub emd_mode: EmdMode,
    /// F1 threshold on squared distance.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Output directory; one `<id>.ply` per entry.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the dataset's reference clouds instead of generating.
    #[arg(long)]
    pub references: bool,
    /// Checkpoint directory (required unless --references).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub high_res: bool,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (train|test)")),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::TrainAe(a) => cmd_train(&a, Stage::Autoencoder),
        Command::TrainBase(a) => cmd_train(&a, Stage::Base),
        Command::TrainUpsampler(a) => cmd_train(&a, Stage::Upsampler),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let config = DatasetConfig {
        train: a.train,
        test: a.test,
        classes: a.classes.clone(),
        points: a.points,
        resolution: a.resolution,
        lshape_prob: a.lshape_prob,
        seed: a.seed,
    };
    let m = build_dataset(&a.out, &config)?;
    println!("wrote {} buildings to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, stage: Stage) -> Result<()> {
    let config = a.config()?;
    let opts = RunOptions {
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let quiet = a.quiet;
    let path = run_training(&a.data, &a.ckpt, &config, stage, &opts, |p| {
        if quiet {
            return;
        }
        match p {
            Progress::AeEpoch { epoch, loss } => eprintln!("epoch {epoch}: loss {loss:.6}"),
            Progress::Step(s) if s.step % 25 == 0 => eprintln!(
                "epoch {} step {}: l_eps {:.6} l_reg {:.6} l_theta {:.6}",
                s.epoch, s.step, s.l_eps, s.l_reg, s.l_theta
            ),
            Progress::Step(_) => {}
        }
    })?;
    println!("{} checkpoint: {}", stage.name(), path.display());
    Ok(())
}

struct Sampler {
    ae: crate::conditioner::AutoEncoder,
    base: crate::denoiser::Denoiser,
    base_schedule: crate::schedule::NoiseSchedule,
    upsampler: Option<(crate::denoiser::Denoiser, crate::schedule::NoiseSchedule, usize)>,
    config: TrainConfig,
}

impl Sampler {
    fn load(dir: &Path, high_res: bool) -> Result<Self> {
        let (ae, _) = load_autoencoder(dir)?;
        let (base, config) = load_denoiser(dir, Stage::Base)?;
        let base_schedule = config.base_schedule()?;
        let upsampler = if high_res {
            let (m, c) = load_denoiser(dir, Stage::Upsampler)?;
            if c.k != config.k {
                return Err(Error::DataMismatch(format!(
                    "upsampler trained for K={}, base produces K={}",
                    c.k, config.k
                )));
            }
            Some((m, c.upsampler_schedule()?, c.n))
        } else {
            None
        };
        Ok(Self {
            ae,
            base,
            base_schedule,
            upsampler,
            config,
        })
    }

    fn steps(&self) -> usize {
        self.base_schedule.steps() + self.upsampler.as_ref().map_or(0, |(_, s, _)| s.steps())
    }

    fn run(&self, image: &SilhouetteImage, opts: &SampleOptions) -> Result<crate::pipeline::Generated> {
        generate(
            &self.ae,
            (&self.base, &self.base_schedule),
            self.upsampler.as_ref().map(|(m, s, n)| (m, s, *n)),
            image,
            self.config.k,
            opts,
        )
    }
}

fn write_trace(dir: &Path, prefix: &str, trace: &SampleTrace) -> Result<()> {
    for (t, x) in &trace.snapshots {
        save_ply(&dir.join(format!("{prefix}_t{t:04}.ply")), x)?;
    }
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let image = SilhouetteImage::load_pgm(&a.image)?;
    let sampler = Sampler::load(&a.opts.ckpt, a.opts.high_res)?;
    let gamma = a.opts.gamma.unwrap_or(sampler.config.gamma);
    let opts = SampleOptions {
        gamma,
        seed: a.opts.seed,
        chain: 0,
        trace_stride: if a.trace_dir.is_some() { a.trace_stride.max(1) } else { 0 },
    };
    let g = sampler.run(&image, &opts)?;
    let points = g.highres.as_ref().unwrap_or(&g.lowres);
    save_ply(&a.out, points)?;
    if let Some(dir) = &a.trace_dir {
        fs::create_dir_all(dir)?;
        write_trace(dir, "base", &g.base_trace)?;
        if let Some(t) = &g.upsampler_trace {
            write_trace(dir, "upsampler", t)?;
        }
    }
    println!(
        "seed {} gamma {} steps {} points {}",
        a.opts.seed,
        gamma,
        sampler.steps(),
        points.len()
    );
    Ok(())
}

fn cloud_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "ply" | "bpc" | "xyz") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        if let Some(prev) = out.insert(id.clone(), path) {
            return Err(invalid(format!("two clouds for id `{id}`, including {}", prev.display())));
        }
    }
    Ok(out)
}

fn eval_threads() -> usize {
    std::env::var("BUILDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = cloud_files(&a.pred)?;
    let reference = cloud_files(&a.reference)?;
    let unmatched: Vec<&String> = pred
        .keys()
        .filter(|k| !reference.contains_key(*k))
        .chain(reference.keys().filter(|k| !pred.contains_key(*k)))
        .collect();
    if !unmatched.is_empty() {
        let names: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
        return Err(Error::DataMismatch(format!("unmatched ids: {}", names.join(", "))));
    }
    if pred.is_empty() {
        return Err(invalid("no clouds to evaluate"));
    }
    let opts = EvalOptions {
        tau: a.tau,
        emd_mode: a.emd_mode,
        seed: a.seed,
        ..EvalOptions::default()
    };
    let ids: Vec<&String> = pred.keys().collect();
    let threads = eval_threads().min(ids.len());
    let chunk = ids.len().div_ceil(threads);
    // Each worker keeps its slice's order, so the joined rows are sorted by id.
    let rows: Vec<EvalRow> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                let (pred, reference, opts) = (&pred, &reference, &opts);
                s.spawn(move || {
                    part.iter()
                        .map(|id| {
                            let p = load_cloud(&pred[*id])?;
                            let r = load_cloud(&reference[*id])?;
                            Ok(EvalRow {
                                id: (*id).clone(),
                                report: evaluate_pair(&p, &r, opts)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut rows = Vec::new();
        for h in handles {
            rows.extend(h.join().map_err(|_| invalid("evaluation worker panicked"))??);
        }
        Ok::<_, Error>(rows)
    })?;
    if let Some(out) = &a.out {
        let mut f = std::io::BufWriter::new(fs::File::create(out)?);
        for r in &rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
    }
    let s = summarize(&rows);
    println!("{:>6}  {:>10}  {:>11}  {:>7}", "pairs", "CD(x10^2)", "EMD(x10^2)", "F1");
    println!("{:>6}  {:>10.4}  {:>11.4}  {:>7.2}", s.pairs, s.cd_scaled, s.emd_scaled, s.f1);
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let entries: Vec<_> = manifest.split(a.split).collect();
    if a.references {
        for e in &entries {
            let cloud = load_bpc(&a.data.join(&e.cloud))?;
            save_ply(&a.out.join(format!("{}.ply", e.id)), cloud.points())?;
        }
        println!("wrote {} reference clouds", entries.len());
        return Ok(());
    }
    let ckpt = a
        .ckpt
        .as_ref()
        .ok_or_else(|| invalid("--ckpt is required unless --references is given"))?;
    let sampler = Sampler::load(ckpt, a.high_res)?;
    let gamma = a.gamma.unwrap_or(sampler.config.gamma);
    for (i, e) in entries.iter().enumerate() {
        let image = SilhouetteImage::load_pgm(&a.data.join(&e.silhouette))?;
        let opts = SampleOptions {
            gamma,
            seed: a.seed,
            chain: i as u64,
            trace_stride: 0,
        };
        let g = sampler.run(&image, &opts)?;
        let points = g.highres.unwrap_or(g.lowres);
        save_ply(&a.out.join(format!("{}.ply", e.id)), &points)?;
    }
    println!("wrote {} generated clouds", entries.len());
    Ok(())
}
