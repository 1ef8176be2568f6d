use crate::conditioner::{AutoEncoder, SilhouetteImage};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_base, sample_upsampled, SampleOptions, SampleTrace};
use crate::error::Result;
use crate::geometry::Point;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub lowres: Vec<Point>,
    pub highres: Option<Vec<Point>>,
    pub base_trace: SampleTrace,
    pub upsampler_trace: Option<SampleTrace>,
}

/// Silhouette to point cloud: encode, sample `k` points with the base
/// stage, then optionally grow them to `n` with the upsampler. The
/// upsampler chain uses its own RNG stream under the same seed.
pub fn generate(
    ae: &AutoEncoder,
    base: (&Denoiser, &NoiseSchedule),
    upsampler: Option<(&Denoiser, &NoiseSchedule, usize)>,
    image: &SilhouetteImage,
    k: usize,
    opts: &SampleOptions,
) -> Result<Generated> {
    let z = ae.encode(image)?;
    let (lowres, base_trace) = sample_base(base.0, &z.values, k, base.1, opts)?;
    let (highres, upsampler_trace) = match upsampler {
        Some((model, schedule, n)) => {
            let up_opts = SampleOptions {
                chain: opts.chain ^ (1 << 63),
                ..opts.clone()
            };
            let (x, trace) = sample_upsampled(model, &z.values, &lowres, n, schedule, &up_opts)?;
            (Some(x), Some(trace))
        }
        None => (None, None),
    };
    Ok(Generated {
        lowres,
        highres,
        base_trace,
        upsampler_trace,
    })
}
