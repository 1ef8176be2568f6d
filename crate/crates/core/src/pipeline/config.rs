use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{invalid, Error, Result};
use crate::schedule::{NoiseSchedule, SigmaChoice};

/// How the upsampler's low-resolution conditioning is taken from `x0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowresSource {
    /// Farthest point sampling of the full cloud.
    Fps,
    /// A uniform random subset.
    Random,
}

impl std::str::FromStr for LowresSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(Self::Fps),
            "random" => Ok(Self::Random),
            other => Err(invalid(format!("unknown low-res source `{other}` (fps|random)"))),
        }
    }
}

impl std::fmt::Display for LowresSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fps => "fps",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "toy" => Ok(Self::Toy),
            other => Err(invalid(format!("unknown preset `{other}` (paper|toy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Diffusion steps of the base stage.
    pub steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub sigma: SigmaChoice,
    /// Diffusion steps of the upsampler stage.
    pub upsampler_steps: usize,
    /// Points produced by the base stage.
    pub k: usize,
    /// Points produced by the upsampler.
    pub n: usize,
    /// Width of the image and time embeddings.
    pub d: usize,
    pub rho: f64,
    pub drop_prob: f64,
    pub gamma: f64,
    pub lr: f64,
    pub ae_lr: f64,
    pub batch: usize,
    pub epochs_ae: usize,
    pub epochs_base: usize,
    pub epochs_upsampler: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub image_size: usize,
    pub lowres: LowresSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

/// Every configuration key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("steps", "diffusion steps T of the base stage"),
    ("beta_1", "first noise variance of the linear schedule"),
    ("beta_T", "last noise variance of the linear schedule"),
    ("sigma", "sampling noise scale: large | posterior"),
    ("upsampler_steps", "diffusion steps of the upsampler stage"),
    ("K", "points in a base-stage sample"),
    ("N", "points in an upsampled sample"),
    ("d", "width of the image and time embeddings"),
    ("rho", "weight of the footprint regularizer"),
    ("drop_prob", "probability of replacing the image embedding with the null embedding"),
    ("gamma", "classifier-free guidance scale at sampling time"),
    ("lr", "Adam learning rate of the diffusion stages"),
    ("ae_lr", "Adam learning rate of the auto-encoder"),
    ("batch", "training batch size"),
    ("epochs_ae", "auto-encoder epochs"),
    ("epochs_base", "base diffusion epochs"),
    ("epochs_upsampler", "upsampler epochs"),
    ("checkpoint_every", "epochs between checkpoints (0 = final only)"),
    ("image_size", "silhouette side length in pixels"),
    ("lowres", "upsampler conditioning during training: fps | random"),
    ("seed", "master seed"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = Self {
            steps: 1000,
            beta_1: 1e-4,
            beta_t: 0.02,
            sigma: SigmaChoice::Large,
            upsampler_steps: 500,
            k: 1024,
            n: 4096,
            d: 128,
            rho: 0.001,
            drop_prob: 0.1,
            gamma: 4.0,
            lr: 2e-4,
            ae_lr: 2e-4,
            batch: 8,
            epochs_ae: 30,
            epochs_base: 700,
            epochs_upsampler: 200,
            checkpoint_every: 10,
            image_size: 32,
            lowres: LowresSource::Fps,
            seed: 0,
        };
        match preset {
            Preset::Paper => paper,
            // Betas scaled by 1000 / T keep the final signal level of the
            // 1000-step schedule.
            Preset::Toy => Self {
                steps: 100,
                beta_1: 1e-3,
                beta_t: 0.2,
                upsampler_steps: 100,
                k: 256,
                n: 1024,
                d: 32,
                lr: 1e-3,
                ae_lr: 1e-3,
                sigma: SigmaChoice::Posterior,
                epochs_base: 400,
                epochs_upsampler: 20,
                checkpoint_every: 0,
                ..paper
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "steps" => self.steps = parse(key, v)?,
            "beta_1" => self.beta_1 = parse(key, v)?,
            "beta_T" => self.beta_t = parse(key, v)?,
            "sigma" => self.sigma = v.parse()?,
            "upsampler_steps" => self.upsampler_steps = parse(key, v)?,
            "K" => self.k = parse(key, v)?,
            "N" => self.n = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "drop_prob" => self.drop_prob = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "ae_lr" => self.ae_lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs_ae" => self.epochs_ae = parse(key, v)?,
            "epochs_base" => self.epochs_base = parse(key, v)?,
            "epochs_upsampler" => self.epochs_upsampler = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "lowres" => self.lowres = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: format!("cannot read config: {e}"),
        })?;
        let mut c = Self::preset(base);
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "steps" => self.steps.to_string(),
            "beta_1" => self.beta_1.to_string(),
            "beta_T" => self.beta_t.to_string(),
            "sigma" => self.sigma.to_string(),
            "upsampler_steps" => self.upsampler_steps.to_string(),
            "K" => self.k.to_string(),
            "N" => self.n.to_string(),
            "d" => self.d.to_string(),
            "rho" => self.rho.to_string(),
            "drop_prob" => self.drop_prob.to_string(),
            "gamma" => self.gamma.to_string(),
            "lr" => self.lr.to_string(),
            "ae_lr" => self.ae_lr.to_string(),
            "batch" => self.batch.to_string(),
            "epochs_ae" => self.epochs_ae.to_string(),
            "epochs_base" => self.epochs_base.to_string(),
            "epochs_upsampler" => self.epochs_upsampler.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "image_size" => self.image_size.to_string(),
            "lowres" => self.lowres.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// The configuration as `key=value` text that `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("upsampler_steps", self.upsampler_steps),
            ("K", self.k),
            ("N", self.n),
            ("d", self.d),
            ("batch", self.batch),
            ("image_size", self.image_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(format!("`{k}` must be positive")));
            }
        }
        if self.n <= self.k {
            return Err(invalid(format!("N ({}) must exceed K ({})", self.n, self.k)));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(invalid(format!("drop_prob must be in [0, 1], got {}", self.drop_prob)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(invalid(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lr > 0.0 && self.ae_lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        self.base_schedule()?;
        self.upsampler_schedule()?;
        if self.d % 2 != 0 {
            return Err(invalid(format!("d must be even, got {}", self.d)));
        }
        Ok(())
    }

    pub fn base_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_1, self.beta_t, self.sigma)
    }

    pub fn upsampler_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.upsampler_steps, self.beta_1, self.beta_t, self.sigma)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig::with_dim(self.d)
    }
}
