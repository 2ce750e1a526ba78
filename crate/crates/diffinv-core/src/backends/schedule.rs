//! Diffusion noise schedule: cumulative signal fractions and forward noising.

use crate::backends::latent::{Latent, check_same_shape};
use crate::error::{Error, Result};

/// Cumulative products of the per-step signal fractions, one entry per
/// timestep. Entries must lie in `(0, 1]` and decrease strictly, so clean
/// data sits at low indices and pure-noise territory at high ones.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::InvalidSchedule { reason: "empty schedule".into() });
        }
        for (t, a) in alphas_cumprod.iter().enumerate() {
            if !(a.is_finite() && *a > 0.0 && *a <= 1.0) {
                return Err(Error::InvalidSchedule {
                    reason: format!("alpha_bar[{t}] = {a} outside (0, 1]"),
                });
            }
            if t > 0 && *a >= alphas_cumprod[t - 1] {
                return Err(Error::InvalidSchedule {
                    reason: format!(
                        "alpha_bar[{t}] = {a} does not decrease from {}",
                        alphas_cumprod[t - 1]
                    ),
                });
            }
        }
        Ok(NoiseSchedule { alphas_cumprod })
    }

    /// The schedule used by the mock: `alpha_bar[t] = 1 - t / t_max`, which
    /// starts at exactly 1 (timestep 0 keeps data untouched) and stays
    /// strictly positive.
    pub fn linear_decay(t_max: usize) -> Self {
        assert!(t_max >= 1, "schedule needs at least one timestep");
        let alphas = (0..t_max).map(|t| 1.0 - t as f64 / t_max as f64).collect();
        NoiseSchedule::new(alphas).expect("linear decay satisfies the schedule contract")
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, len: self.alphas_cumprod.len() })
    }

    /// Forward noising: `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise(&self, z0: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
        check_same_shape(z0, eps)?;
        let a = self.alpha_bar(t)?;
        let signal = a.sqrt();
        let noise = (1.0 - a).sqrt();
        Ok(Latent::new(&z0.values * signal + &eps.values * noise))
    }
}
