//! Deterministic latent transport: reverse sampling and its inverse, both in
//! the deterministic (eta = 0) regime, generic over any backend bundle.

use ndarray::Array2;

use crate::backends::latent::Latent;
use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::limits::GUIDANCE_NEUTRAL_EPS;

/// Evenly spaced descending timesteps covering `[0, t_max)`: `steps`
/// de-duplicated indices from `t_max - 1` down to 0.
pub fn timestep_descent(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(t_max >= 1 && steps >= 1, "need at least one timestep and one step");
    if steps == 1 {
        return vec![t_max - 1];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            ((1.0 - frac) * (t_max - 1) as f64).round() as usize
        })
        .collect();
    ts.dedup();
    ts
}

/// Noise prediction with classifier-free guidance: weights near 1 use the
/// conditional branch alone, anything else blends in an unconditional
/// (empty-condition) prediction.
fn guided_noise(
    bundle: &BackendBundle,
    z: &Latent,
    t: usize,
    cond: &Array2<f64>,
    guidance: f64,
) -> Result<Latent> {
    let eps_cond = bundle.predict_noise(z, t, cond)?;
    if (guidance - 1.0).abs() < GUIDANCE_NEUTRAL_EPS {
        return Ok(eps_cond);
    }
    let uncond = Array2::zeros((0, cond.ncols()));
    let eps_uncond = bundle.predict_noise(z, t, &uncond)?;
    Ok(Latent::new(
        &eps_uncond.values + guidance * (&eps_cond.values - &eps_uncond.values),
    ))
}

/// One deterministic reverse step from signal level `a_from` to `a_to` given
/// the noise estimate at the current state.
fn ddim_step(z: &Latent, eps: &Latent, a_from: f64, a_to: f64) -> Latent {
    let x0 = (&z.values - (1.0 - a_from).sqrt() * &eps.values) / a_from.sqrt();
    Latent::new(a_to.sqrt() * &x0 + (1.0 - a_to).sqrt() * &eps.values)
}

/// Run the reverse (denoising) trajectory along a descending timestep list,
/// finishing at the clean signal level 1.
pub fn ddim_denoise(
    bundle: &BackendBundle,
    z_start: &Latent,
    cond: &Array2<f64>,
    ts: &[usize],
    guidance: f64,
) -> Result<Latent> {
    let schedule = bundle.schedule();
    let mut z = z_start.clone();
    for (i, &t) in ts.iter().enumerate() {
        let a_from = schedule.alpha_bar(t)?;
        let a_to = match ts.get(i + 1) {
            Some(&next) => {
                if next >= t {
                    return Err(Error::InvalidConfig(format!(
                        "denoise timesteps must descend, got {t} -> {next}"
                    )));
                }
                schedule.alpha_bar(next)?
            }
            None => 1.0,
        };
        let eps = guided_noise(bundle, &z, t, cond, guidance)?;
        z = ddim_step(&z, &eps, a_from, a_to);
    }
    Ok(z)
}

/// Run the forward (inverting) trajectory from a clean latent up an
/// ascending timestep list, producing the noised latent a subsequent
/// [`ddim_denoise`] over the reversed list would start from.
pub fn ddim_invert(
    bundle: &BackendBundle,
    z_clean: &Latent,
    cond: &Array2<f64>,
    ts: &[usize],
    guidance: f64,
) -> Result<Latent> {
    let schedule = bundle.schedule();
    let mut z = z_clean.clone();
    let mut a_prev = 1.0f64;
    for (i, &t) in ts.iter().enumerate() {
        if i > 0 && ts[i - 1] >= t {
            return Err(Error::InvalidConfig(format!(
                "invert timesteps must ascend, got {} -> {t}",
                ts[i - 1]
            )));
        }
        let a_next = schedule.alpha_bar(t)?;
        let eps = guided_noise(bundle, &z, t, cond, guidance)?;
        // Reverse of ddim_step: estimate the clean signal at the current
        // level, then re-noise to the higher level using the same estimate.
        let x0 = (&z.values - (1.0 - a_prev).sqrt() * &eps.values) / a_prev.sqrt();
        z = Latent::new(a_next.sqrt() * &x0 + (1.0 - a_next).sqrt() * &eps.values);
        a_prev = a_next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use crate::backends::mock::MockBundleBuilder;
    use crate::backends::SampleInit;

    use super::*;

    #[test]
    fn timestep_descent_spans_the_schedule() {
        let ts = timestep_descent(100, 50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 99);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn timestep_descent_handles_tiny_budgets() {
        assert_eq!(timestep_descent(100, 1), vec![99]);
        assert_eq!(timestep_descent(2, 2), vec![1, 0]);
        // More steps than timesteps collapses duplicates.
        let ts = timestep_descent(4, 9);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn sample_is_deterministic_and_fast() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let cond = bundle.vocab().rows_for(&[1, 2, 3]).unwrap();
        let start = std::time::Instant::now();
        let a = bundle.sample(&cond, SampleInit::Noise { seed: 5 }, 50, 7.5).unwrap();
        let b = bundle.sample(&cond, SampleInit::Noise { seed: 5 }, 50, 7.5).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0, "mock sampling must stay fast");
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = bundle.sample(&cond, SampleInit::Noise { seed: 6 }, 50, 7.5).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn guidance_one_skips_the_unconditional_branch() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let cond = bundle.vocab().rows_for(&[1, 2]).unwrap();
        let before = bundle.call_counts().predict_noise;
        bundle.sample(&cond, SampleInit::Noise { seed: 1 }, 10, 1.0).unwrap();
        let unguided_calls = bundle.call_counts().predict_noise - before;
        let before = bundle.call_counts().predict_noise;
        bundle.sample(&cond, SampleInit::Noise { seed: 1 }, 10, 7.5).unwrap();
        let guided_calls = bundle.call_counts().predict_noise - before;
        assert_eq!(unguided_calls, 10);
        assert_eq!(guided_calls, 20);
    }

    #[test]
    fn denoise_rejects_non_descending_timesteps() {
        let bundle = MockBundleBuilder::new(0).build().unwrap();
        let cond = bundle.vocab().rows_for(&[1]).unwrap();
        let z = Latent::zeros(&[4, 4]);
        assert!(ddim_denoise(&bundle, &z, &cond, &[5, 9], 1.0).is_err());
        assert!(ddim_invert(&bundle, &z, &cond, &[9, 5], 1.0).is_err());
    }
}
