//! Noise schedules, forward noising and the quadratic reconstruction losses.
//!
//! Schedules follow the variance-preserving convention: `alpha_t^2 + sigma_t^2 = 1`
//! with `alpha_0 = 1`. The denoiser predicts the clean sample, so every loss
//! here compares a prediction against a clean target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleProfile {
    /// `alpha_t^2` decreases linearly from 1 to 0.
    #[default]
    Linear,
    /// `alpha_t = cos(pi/2 * t/(T-1))`.
    Cosine,
}

impl std::str::FromStr for ScheduleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(num_steps: usize, profile: ScheduleProfile) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(format!(
                "a schedule needs at least 2 steps, got {num_steps}"
            )));
        }
        let last = (num_steps - 1) as f64;
        let (alphas, sigmas) = (0..num_steps)
            .map(|t| {
                let u = t as f64 / last;
                match profile {
                    ScheduleProfile::Linear => ((1.0 - u).sqrt(), u.sqrt()),
                    ScheduleProfile::Cosine => {
                        let angle = u * std::f64::consts::FRAC_PI_2;
                        (angle.cos(), angle.sin())
                    }
                }
            })
            .unzip();
        Ok(Self {
            alphas,
            sigmas,
            weights: vec![1.0; num_steps],
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {})",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

/// A latent tensor of shape `(channels, height, width)` tagged with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub data: Tensor,
    pub timestep: usize,
}

impl LatentSample {
    pub fn new(data: Tensor, timestep: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "latent must be (channels, height, width), got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid("latent contains non-finite entries"));
        }
        Ok(Self { data, timestep })
    }

    pub fn clean(data: Tensor) -> Result<Self> {
        Self::new(data, 0)
    }
}

/// Forward noising: `alpha_t * x0 + sigma_t * epsilon`.
pub fn add_noise(
    x0: &LatentSample,
    epsilon: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentSample> {
    x0.data.ensure_same_shape(epsilon)?;
    schedule.check_timestep(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let data = x0
        .data
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    LatentSample::new(Tensor::from_parts(x0.data.shape().to_vec(), data), t)
}

pub(crate) fn sum_squared_diff(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// `w * ||prediction - target||^2`, summed over elements.
pub fn weighted_reconstruction_loss(prediction: &Tensor, target: &Tensor, w: f64) -> Result<f64> {
    prediction.ensure_same_shape(target)?;
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("loss weight must be positive, got {w}")));
    }
    Ok(w * sum_squared_diff(prediction.data(), target.data()))
}

/// Gradient of [`weighted_reconstruction_loss`] with respect to `prediction`.
pub fn weighted_reconstruction_grad(prediction: &Tensor, target: &Tensor, w: f64) -> Result<Tensor> {
    prediction.ensure_same_shape(target)?;
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| 2.0 * w * (p - t))
        .collect();
    Ok(Tensor::from_parts(prediction.shape().to_vec(), data))
}

/// The content-preservation term: the same quadratic form, applied to a content
/// reference generated by the frozen base model.
pub fn content_loss(prediction: &Tensor, content_reference: &Tensor, w: f64) -> Result<f64> {
    weighted_reconstruction_loss(prediction, content_reference, w)
}

/// `lambda1 * l_ldm + lambda2 * l_content`.
pub fn total_loss(l_ldm: f64, l_content: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [
        ("l_ldm", l_ldm),
        ("l_content", l_content),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(lambda1 * l_ldm + lambda2 * l_content)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn two_step_linear_hits_endpoints() {
        let s = NoiseSchedule::build(2, ScheduleProfile::Linear).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.0]);
        assert_eq!(s.sigmas(), &[0.0, 1.0]);
    }

    #[test]
    fn cosine_starts_clean() {
        let s = NoiseSchedule::build(1000, ScheduleProfile::Cosine).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(999).abs() < 1e-12);
    }

    #[test]
    fn linear_midpoint_closed_form() {
        // alpha_t^2 = 1 - t/9 for ten steps.
        let s = NoiseSchedule::build(10, ScheduleProfile::Linear).unwrap();
        let a = s.alpha(5);
        let sg = s.sigma(5);
        assert!((a * a - 4.0 / 9.0).abs() < 1e-15);
        assert!((sg * sg - 5.0 / 9.0).abs() < 1e-15);
        assert!((a * a + sg * sg - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(matches!(
            NoiseSchedule::build(1, ScheduleProfile::Linear),
            Err(Error::InvalidArgument(_))
        ));
        assert!(NoiseSchedule::build(0, ScheduleProfile::Cosine).is_err());
    }

    #[test]
    fn invariants_for_all_profiles() {
        for profile in [ScheduleProfile::Linear, ScheduleProfile::Cosine] {
            for n in [2usize, 10, 50, 1000] {
                let s = NoiseSchedule::build(n, profile).unwrap();
                assert_eq!(s.alphas().len(), n);
                assert_eq!(s.sigmas().len(), n);
                assert_eq!(s.weights().len(), n);
                assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
                for i in 0..n {
                    let v = s.alpha(i).powi(2) + s.sigma(i).powi(2);
                    assert!((v - 1.0).abs() <= 1e-6, "{profile:?} n={n} t={i}");
                    assert!((0.0..=1.0).contains(&s.alpha(i)));
                    assert!((0.0..=1.0).contains(&s.sigma(i)));
                    assert!(s.weight(i) > 0.0);
                }
                for w in s.alphas().windows(2) {
                    assert!(w[1] <= w[0]);
                }
                for w in s.sigmas().windows(2) {
                    assert!(w[1] >= w[0]);
                }
            }
        }
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::build(10, ScheduleProfile::Cosine).unwrap();
        let x0 = LatentSample::clean(t(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.25])).unwrap();
        let eps = t(&[1, 2, 2], &[1.0, 2.0, -3.0, 0.5]);
        assert_eq!(add_noise(&x0, &eps, 0, &s).unwrap().data, x0.data);

        let zero = LatentSample::clean(Tensor::zeros(&[1, 2, 2])).unwrap();
        let noised = add_noise(&zero, &eps, 9, &s).unwrap();
        let expected = eps.map(|e| s.sigma(9) * e);
        assert_eq!(noised.data, expected);
        assert_eq!(noised.timestep, 9);

        assert!(matches!(add_noise(&x0, &eps, 10, &s), Err(Error::Range(_))));
        let wrong = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            add_noise(&x0, &wrong, 1, &s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn add_noise_hand_evaluated() {
        // A 3-step schedule whose middle step is (0.8, 0.6).
        let s = NoiseSchedule {
            alphas: vec![1.0, 0.8, 0.0],
            sigmas: vec![0.0, 0.6, 1.0],
            weights: vec![1.0; 3],
        };
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let x0 = LatentSample::clean(ones.clone()).unwrap();
        let out = add_noise(&x0, &ones, 1, &s).unwrap();
        for v in out.data.data() {
            assert!((v - 1.4).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_loss_values() {
        let p = t(&[2], &[1.0, 1.0]);
        assert_eq!(weighted_reconstruction_loss(&p, &p, 3.0).unwrap(), 0.0);
        let z = Tensor::zeros(&[2]);
        assert_eq!(weighted_reconstruction_loss(&p, &z, 0.5).unwrap(), 1.0);
        assert_eq!(
            weighted_reconstruction_loss(&t(&[1], &[3.0]), &t(&[1], &[1.0]), 1.0).unwrap(),
            4.0
        );
        assert!(weighted_reconstruction_loss(&p, &t(&[1], &[0.0]), 1.0).is_err());
        assert!(weighted_reconstruction_loss(&p, &z, 0.0).is_err());
    }

    #[test]
    fn content_loss_values() {
        let r = t(&[2], &[0.0, 0.0]);
        assert_eq!(content_loss(&r, &r, 1.0).unwrap(), 0.0);
        assert_eq!(content_loss(&t(&[2], &[2.0, 0.0]), &r, 1.0).unwrap(), 4.0);
        assert_eq!(
            content_loss(&Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 2.0).unwrap(),
            6.0
        );
    }

    #[test]
    fn total_loss_values() {
        assert_eq!(total_loss(1.0, 2.0, 1.0, 1.0).unwrap(), 3.0);
        assert_eq!(total_loss(5.0, 9.9, 1.0, 0.0).unwrap(), 5.0);
        assert_eq!(total_loss(0.0, 0.0, 3.5, 0.25).unwrap(), 0.0);
        assert!(total_loss(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(total_loss(1.0, 0.0, 1.0, -0.5).is_err());
        assert!(total_loss(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn weight_scales_loss_exactly() {
        let p = t(&[4], &[0.3, -1.2, 2.5, 0.7]);
        let q = t(&[4], &[1.0, 0.1, -0.4, 0.0]);
        let base = weighted_reconstruction_loss(&p, &q, 1.0).unwrap();
        for w in [0.5, 2.0, 7.0] {
            assert_eq!(weighted_reconstruction_loss(&p, &q, w).unwrap(), w * base);
        }
    }
}
