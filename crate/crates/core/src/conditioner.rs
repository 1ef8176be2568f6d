//! Silhouette auto-encoder producing the condition embedding.
//!
//! Feature maps live on the tape as `(B * H * W, C)` matrices, one row per
//! pixel. Convolutions are an im2col gather (`PAD_ROW` for padding)
//! followed by a matmul.

use std::fs;
use std::io::Write;
use std::path::Path;

use buildiff_tensor::{AdamState, BoundParams, ParamStore, Tape, Tensor, Var, PAD_ROW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::linear;
use crate::diffusion::Condition;
use crate::error::{invalid, Error, Result};

/// Single-channel raster with pixels in `[0, 1]`, row-major from the top.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                what: "image pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Quarter turn counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                // (x, y) moves to (y, w - 1 - x) in an h-wide image.
                out[(w - 1 - x) * h + y] = self.pixels[y * w + x];
            }
        }
        Self {
            width: h,
            height: w,
            pixels: out,
        }
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        parse_pgm(&bytes).map_err(|msg| Error::Format {
            path: path.display().to_string(),
            msg,
        })
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<SilhouetteImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header value `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data = &bytes[pos + 1..];
    if data.len() < width * height {
        return Err(format!("expected {} pixels, found {}", width * height, data.len()));
    }
    let pixels = data[..width * height]
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    SilhouetteImage::new(width, height, pixels).map_err(|e| e.to_string())
}

/// One random augmentation: optional quarter turn and optional additive
/// intensity offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotate: bool,
    pub jitter: Option<f64>,
}

impl AugmentDraw {
    pub const JITTER: f64 = 0.2;

    /// Rotation and jitter each fire with probability 1/2; the jitter is
    /// uniform in `[-0.2, 0.2]`.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let rotate = rng.random_bool(0.5);
        let jitter = rng
            .random_bool(0.5)
            .then(|| rng.random_range(-Self::JITTER..=Self::JITTER));
        Self { rotate, jitter }
    }

    pub fn apply(&self, img: &SilhouetteImage) -> Result<SilhouetteImage> {
        let mut out = if self.rotate {
            if img.width != img.height {
                return Err(invalid(format!(
                    "cannot rotate a non-square {}x{} image",
                    img.width, img.height
                )));
            }
            img.rotate90()
        } else {
            img.clone()
        };
        if let Some(j) = self.jitter {
            for v in &mut out.pixels {
                *v = (*v + j).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

pub fn augment(img: &SilhouetteImage, seed: u64) -> Result<SilhouetteImage> {
    AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(img)
}

/// Condition vector handed to the diffusion stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub values: Vec<f64>,
    pub dropped: bool,
}

impl ConditionEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            dropped: false,
        }
    }

    pub fn as_condition(&self) -> Condition<'_> {
        if self.dropped {
            Condition::Null
        } else {
            Condition::Embedding(&self.values)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AeConfig {
    /// Square input side; must be a multiple of 8.
    pub size: usize,
    pub d: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self { size: 32, d: 128 }
    }
}

const SLOPE: f64 = 0.1;
const ENC: [usize; 3] = [16, 32, 64];
const PROJ: usize = 16;
const DEC: [usize; 3] = [32, 16, 8];

#[derive(Clone, Copy)]
enum Kind {
    Strided,
    Same,
    Dilated,
    Upsample,
}

/// im2col indices for a 3x3 kernel over a `(b, h, w)` grid of rows.
/// Returns the indices and the output side lengths.
fn conv_rows(b: usize, h: usize, w: usize, kind: Kind) -> (Vec<usize>, usize, usize) {
    let (oh, ow) = match kind {
        Kind::Strided => (h / 2, w / 2),
        Kind::Same | Kind::Dilated => (h, w),
        Kind::Upsample => (h * 2, w * 2),
    };
    let mut idx = Vec::with_capacity(b * oh * ow * 9);
    for s in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let src = match kind {
                            Kind::Strided => {
                                let iy = (2 * oy) as isize + ky - 1;
                                let ix = (2 * ox) as isize + kx - 1;
                                (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                                    .then(|| iy as usize * w + ix as usize)
                            }
                            Kind::Same | Kind::Dilated => {
                                let dil = if matches!(kind, Kind::Dilated) { 2 } else { 1 };
                                let iy = oy as isize + dil * (ky - 1);
                                let ix = ox as isize + dil * (kx - 1);
                                (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                                    .then(|| iy as usize * w + ix as usize)
                            }
                            Kind::Upsample => {
                                // Zero-inserted grid: only even positions carry input.
                                let iy = oy as isize + ky - 1;
                                let ix = ox as isize + kx - 1;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < 2 * h && (ix as usize) < 2 * w;
                                (inside && iy % 2 == 0 && ix % 2 == 0)
                                    .then(|| (iy as usize / 2) * w + ix as usize / 2)
                            }
                        };
                        idx.push(src.map_or(PAD_ROW, |r| s * h * w + r));
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub config: AeConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (1.0 + SLOPE * SLOPE) / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

struct Layer(usize, usize);

impl AutoEncoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        if config.size < 8 || config.size % 8 != 0 {
            return Err(invalid(format!("image size must be a multiple of 8, got {}", config.size)));
        }
        if config.d == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        let cells = (config.size / 8).pow(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut add = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<()> {
            p.insert(format!("{name}.w"), uniform(&mut rng, fan_in, fan_out))?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
            Ok(())
        };
        add(&mut p, "enc.c1", 9, ENC[0])?;
        add(&mut p, "enc.c2", 9 * ENC[0], ENC[1])?;
        add(&mut p, "enc.c3", 9 * ENC[1], ENC[2])?;
        add(&mut p, "enc.res", 9 * ENC[2], ENC[2])?;
        add(&mut p, "enc.proj", ENC[2], PROJ)?;
        add(&mut p, "enc.fc", cells * PROJ, config.d)?;
        add(&mut p, "dec.fc", config.d, cells * ENC[2])?;
        add(&mut p, "dec.u1", 9 * ENC[2], DEC[0])?;
        add(&mut p, "dec.u2", 9 * DEC[0], DEC[1])?;
        add(&mut p, "dec.u3", 9 * DEC[1], DEC[2])?;
        add(&mut p, "dec.out", 9 * DEC[2], 1)?;
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: AeConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        let same = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(invalid("auto-encoder parameters do not match the configuration"));
        }
        Ok(Self { config, params })
    }

    fn layer(name: &str) -> Layer {
        let order = [
            "enc.c1", "enc.c2", "enc.c3", "enc.res", "enc.proj", "enc.fc", "dec.fc", "dec.u1", "dec.u2", "dec.u3",
            "dec.out",
        ];
        let i = order.iter().position(|n| *n == name).expect("known layer");
        Layer(2 * i, 2 * i + 1)
    }

    fn dense(tape: &mut Tape, bound: &BoundParams, x: Var, name: &str) -> Result<Var> {
        let Layer(w, b) = Self::layer(name);
        linear(tape, x, bound.var(w), bound.var(b))
    }

    fn conv(tape: &mut Tape, bound: &BoundParams, x: Var, name: &str, grid: (usize, usize, usize), kind: Kind) -> Result<(Var, usize, usize)> {
        let (b, h, w) = grid;
        let cin = tape.shape(x)[1];
        let (idx, oh, ow) = conv_rows(b, h, w, kind);
        let cols = tape.gather_rows(x, idx)?;
        let cols = tape.reshape(cols, &[b * oh * ow, 9 * cin])?;
        Ok((Self::dense(tape, bound, cols, name)?, oh, ow))
    }

    /// `(B, size * size)` images to `(B, d)` embeddings.
    pub fn encode_var(&self, tape: &mut Tape, bound: &BoundParams, images: Var) -> Result<Var> {
        let s = self.config.size;
        let b = tape.shape(images)[0];
        let mut x = tape.reshape(images, &[b * s * s, 1])?;
        let (mut h, mut w) = (s, s);
        for name in ["enc.c1", "enc.c2", "enc.c3"] {
            let (y, oh, ow) = Self::conv(tape, bound, x, name, (b, h, w), Kind::Strided)?;
            x = tape.leaky_relu(y, SLOPE)?;
            (h, w) = (oh, ow);
        }
        let (r, _, _) = Self::conv(tape, bound, x, "enc.res", (b, h, w), Kind::Dilated)?;
        let r = tape.leaky_relu(r, SLOPE)?;
        x = tape.add(x, r)?;
        let p = Self::dense(tape, bound, x, "enc.proj")?;
        let p = tape.leaky_relu(p, SLOPE)?;
        let flat = tape.reshape(p, &[b, h * w * PROJ])?;
        Self::dense(tape, bound, flat, "enc.fc")
    }

    /// `(B, d)` embeddings to `(B, size * size)` images in `(0, 1)`.
    pub fn decode_var(&self, tape: &mut Tape, bound: &BoundParams, z: Var) -> Result<Var> {
        let s = self.config.size;
        let b = tape.shape(z)[0];
        let (mut h, mut w) = (s / 8, s / 8);
        let x = Self::dense(tape, bound, z, "dec.fc")?;
        let x = tape.leaky_relu(x, SLOPE)?;
        let mut x = tape.reshape(x, &[b * h * w, ENC[2]])?;
        for name in ["dec.u1", "dec.u2", "dec.u3"] {
            let (y, oh, ow) = Self::conv(tape, bound, x, name, (b, h, w), Kind::Upsample)?;
            x = tape.leaky_relu(y, SLOPE)?;
            (h, w) = (oh, ow);
        }
        let (y, _, _) = Self::conv(tape, bound, x, "dec.out", (b, h, w), Kind::Same)?;
        let y = tape.sigmoid(y)?;
        Ok(tape.reshape(y, &[b, s * s])?)
    }

    fn check_image(&self, img: &SilhouetteImage) -> Result<()> {
        let s = self.config.size;
        if img.width != s || img.height != s {
            return Err(invalid(format!(
                "expected a {s}x{s} image, got {}x{}",
                img.width, img.height
            )));
        }
        Ok(())
    }

    fn image_batch(&self, tape: &mut Tape, imgs: &[&SilhouetteImage]) -> Result<Var> {
        for img in imgs {
            self.check_image(img)?;
        }
        let s = self.config.size;
        let data = imgs.iter().flat_map(|i| i.pixels.iter().copied()).collect();
        Ok(tape.constant(Tensor::new(vec![imgs.len(), s * s], data)?))
    }

    pub fn encode(&self, img: &SilhouetteImage) -> Result<ConditionEmbedding> {
        Ok(self.encode_batch(&[img])?.remove(0))
    }

    pub fn encode_batch(&self, imgs: &[&SilhouetteImage]) -> Result<Vec<ConditionEmbedding>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = self.image_batch(&mut tape, imgs)?;
        let z = self.encode_var(&mut tape, &bound, x)?;
        let values = tape.value(z);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLayer("encoder output".into()));
        }
        Ok(values
            .chunks_exact(self.config.d)
            .map(|c| ConditionEmbedding::new(c.to_vec()))
            .collect())
    }

    pub fn decode(&self, z: &ConditionEmbedding) -> Result<SilhouetteImage> {
        if z.values.len() != self.config.d {
            return Err(Error::ShapeMismatch {
                what: "embedding",
                expected: self.config.d,
                actual: z.values.len(),
            });
        }
        if !z.values.iter().all(|v| v.is_finite()) {
            return Err(invalid("embedding has non-finite values"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new(vec![1, self.config.d], z.values.clone())?);
        let y = self.decode_var(&mut tape, &bound, zv)?;
        let pixels = tape.value(y).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        SilhouetteImage::new(self.config.size, self.config.size, pixels)
    }

    /// `mse(I, I_hat) + mse(z, z_aug)` for a batch and its augmented twin.
    /// With `stop_grad_aug` the augmented branch enters as a constant.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        imgs: &[&SilhouetteImage],
        augmented: &[&SilhouetteImage],
        stop_grad_aug: bool,
    ) -> Result<Var> {
        if imgs.len() != augmented.len() {
            return Err(invalid("every image needs an augmented twin"));
        }
        let x = self.image_batch(tape, imgs)?;
        let z = self.encode_var(tape, bound, x)?;
        let x_hat = self.decode_var(tape, bound, z)?;
        let z_aug = if stop_grad_aug {
            let values = self
                .encode_batch(augmented)?
                .into_iter()
                .flat_map(|e| e.values)
                .collect();
            tape.constant(Tensor::new(vec![imgs.len(), self.config.d], values)?)
        } else {
            let xa = self.image_batch(tape, augmented)?;
            self.encode_var(tape, bound, xa)?
        };
        ae_loss(tape, x, x_hat, z, z_aug)
    }
}

/// Reconstruction MSE plus embedding-consistency MSE.
pub fn ae_loss(tape: &mut Tape, image: Var, recon: Var, z: Var, z_aug: Var) -> Result<Var> {
    let rec = tape.mse(image, recon)?;
    let con = tape.mse(z, z_aug)?;
    Ok(tape.add(rec, con)?)
}

#[derive(Clone, Debug)]
pub struct AeTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub stop_grad_aug: bool,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-4,
            batch: 8,
            seed: 0,
            stop_grad_aug: false,
        }
    }
}

/// Train on `images`; returns the model and the mean loss of each epoch.
/// `on_epoch` sees `(epoch, mean_loss)` after every epoch.
pub fn train_autoencoder(
    images: &[SilhouetteImage],
    config: AeConfig,
    opts: &AeTrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(AutoEncoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(invalid("cannot train the auto-encoder on an empty dataset"));
    }
    if opts.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut model = AutoEncoder::new(config, opts.seed)?;
    let mut adam = AdamState::new(opts.lr, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_ae);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch) {
            let augmented = chunk
                .iter()
                .map(|&i| AugmentDraw::sample(&mut rng).apply(&images[i]))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<&SilhouetteImage> = chunk.iter().map(|&i| &images[i]).collect();
            let aug: Vec<&SilhouetteImage> = augmented.iter().collect();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let loss = model.loss_var(&mut tape, &bound, &batch, &aug, opts.stop_grad_aug)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "auto-encoder loss".into(),
                    step: epoch,
                });
            }
            tape.backward(loss)?;
            adam.update(&mut model.params, &bound.grads(&tape))?;
            total += value * chunk.len() as f64;
        }
        let mean = total / images.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok((model, history))
}
