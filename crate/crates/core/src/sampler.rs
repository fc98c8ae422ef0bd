//! Ancestral sampling for clean-sample predicting backbones.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Conditioning};
use crate::error::{Error, Result};
use crate::imaging::latent_to_image;
use crate::schedule::{LatentSample, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Number of denoising steps, spread evenly over the schedule.
    pub steps: usize,
    /// Output side length in pixels.
    pub image_size: u32,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            image_size: 256,
        }
    }
}

/// Descending timesteps from the last schedule index down to 0.
fn timestep_ladder(num_steps: usize, steps: usize) -> Vec<usize> {
    let last = num_steps - 1;
    let steps = steps.clamp(1, last);
    let mut ladder: Vec<usize> = (0..=steps)
        .map(|i| ((last as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect();
    ladder.dedup();
    ladder
}

/// Draws a latent by repeatedly predicting the clean sample and stepping to
/// the posterior at the next (smaller) timestep.
pub fn sample_latent<B: Backbone>(
    backbone: &B,
    conditioning: &Conditioning,
    schedule: &NoiseSchedule,
    seed: u64,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = backbone.latent_shape();
    let ladder = timestep_ladder(schedule.num_steps(), steps);
    let mut x = Tensor::randn(&shape, &mut rng);
    for pair in ladder.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let noisy = LatentSample::new(x, t)?;
        let x0 = backbone
            .denoise(&noisy, conditioning)?
            .map(|v| v.clamp(-1.0, 1.0));
        if s == 0 {
            x = x0;
            break;
        }
        let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
        let (a_s, s_s) = (schedule.alpha(s), schedule.sigma(s));
        let a_ts = a_t / a_s;
        let var_ts = (s_t * s_t - a_ts * a_ts * s_s * s_s).max(0.0);
        let c_x = a_ts * s_s * s_s / (s_t * s_t);
        let c_0 = a_s * var_ts / (s_t * s_t);
        let std = (var_ts * s_s * s_s / (s_t * s_t)).sqrt();
        let z = Tensor::randn(&shape, &mut rng);
        let data = noisy
            .data
            .data()
            .iter()
            .zip(x0.data())
            .zip(z.data())
            .map(|((xt, x0v), zv)| c_x * xt + c_0 * x0v + std * zv)
            .collect();
        x = Tensor::new(shape.to_vec(), data)?;
    }
    Ok(x)
}

/// Samples and renders an RGB image of `options.image_size` pixels per side.
pub fn sample<B: Backbone>(
    backbone: &B,
    conditioning: &Conditioning,
    schedule: &NoiseSchedule,
    seed: u64,
    options: SampleOptions,
) -> Result<RgbImage> {
    let latent = sample_latent(backbone, conditioning, schedule, seed, options.steps)?;
    latent_to_image(&latent, options.image_size)
}
