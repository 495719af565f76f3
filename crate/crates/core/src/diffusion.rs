//! Linear-beta noise schedule, forward noising, the reverse kernel and the
//! denoising objective.
//!
//! Diffusion steps are 1-based: `tau` runs over `1..=steps`. The convention
//! `alpha_bar(0) = 1` makes the posterior variance of step 1 exactly zero, so
//! the last reverse step is noiseless.

use crate::error::{invalid, Result};
use crate::numerics::{no_grad, Rng, Tensor};

/// Anything that predicts the injected noise from a noisy batch and one
/// diffusion step per batch element.
pub trait Denoiser {
    fn predict_noise(&self, x_tau: &Tensor, taus: &[usize]) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x_tau: &Tensor, taus: &[usize]) -> Result<Tensor> {
        self(x_tau, taus)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(invalid("diffusion needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(NoiseSchedule::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> NoiseSchedule {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, tau: usize) -> Result<usize> {
        if tau == 0 || tau > self.steps() {
            return Err(invalid(format!("diffusion step {tau} outside 1..={}", self.steps())));
        }
        Ok(tau - 1)
    }

    pub fn beta(&self, tau: usize) -> Result<f64> {
        Ok(self.betas[self.index(tau)?])
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        Ok(self.alphas[self.index(tau)?])
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(tau)?])
    }

    /// Posterior variance `(1 - abar_{tau-1}) / (1 - abar_tau) * beta_tau`.
    pub fn posterior_var(&self, tau: usize) -> Result<f64> {
        Ok(self.posterior_vars[self.index(tau)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Per-sample coefficient column of shape `(B, 1, .., 1)` matching `x`.
    fn coefficients(&self, x: &Tensor, taus: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
        if x.rank() == 0 {
            return Err(invalid("diffusion input must have a batch axis"));
        }
        let b = x.shape()[0];
        let values: Vec<f64> = match taus.len() {
            1 => {
                let i = self.index(taus[0])?;
                vec![f(i); b]
            }
            n if n == b => taus.iter().map(|&t| self.index(t).map(&f)).collect::<Result<_>>()?,
            n => return Err(invalid(format!("{n} diffusion steps for a batch of {b}"))),
        };
        let mut shape = vec![1; x.rank()];
        shape[0] = b;
        Tensor::new(values, &shape)
    }

    /// `sqrt(abar) * x0 + sqrt(1 - abar) * eps`. `taus` holds one step, or
    /// one per batch element.
    pub fn q_sample(&self, x0: &Tensor, taus: &[usize], eps: &Tensor) -> Result<Tensor> {
        let signal = self.coefficients(x0, taus, |i| self.alpha_bars[i].sqrt())?;
        let noise = self.coefficients(x0, taus, |i| (1.0 - self.alpha_bars[i]).sqrt())?;
        x0.mul(&signal)?.add(&eps.mul(&noise)?)
    }

    /// One-step estimate of the clean signal: `q_sample` solved for `x0`.
    pub fn predict_x0_from_eps(&self, x_tau: &Tensor, taus: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
        let noise = self.coefficients(x_tau, taus, |i| (1.0 - self.alpha_bars[i]).sqrt())?;
        let inv_signal = self.coefficients(x_tau, taus, |i| 1.0 / self.alpha_bars[i].sqrt())?;
        x_tau.sub(&eps_hat.mul(&noise)?)?.mul(&inv_signal)
    }

    /// Mean of the reverse kernel in noise-prediction form.
    pub fn reverse_mean(&self, x_tau: &Tensor, taus: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
        let eps_coef = self.coefficients(x_tau, taus, |i| self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt())?;
        let scale = self.coefficients(x_tau, taus, |i| 1.0 / (1.0 - self.betas[i]).sqrt())?;
        x_tau.sub(&eps_hat.mul(&eps_coef)?)?.mul(&scale)
    }

    /// Draw `x_{tau-1}` given `x_tau` and the predicted noise. No noise is
    /// drawn at `tau = 1`.
    pub fn p_sample_step(&self, x_tau: &Tensor, tau: usize, eps_hat: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mean = self.reverse_mean(x_tau, &[tau], eps_hat)?;
        let var = self.posterior_var(tau)?;
        if tau == 1 || var == 0.0 {
            return Ok(mean);
        }
        let z = rng.normal_tensor(mean.shape());
        mean.add(&z.scale(var.sqrt())?)
    }

    /// Ancestral sampling from pure noise down to step 1.
    pub fn sample_loop(&self, denoiser: &dyn Denoiser, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let _ng = no_grad();
        let mut x = rng.normal_tensor(shape);
        for tau in (1..=self.steps()).rev() {
            let eps_hat = denoiser.predict_noise(&x, &[tau])?;
            x = self.p_sample_step(&x, tau, &eps_hat, rng)?;
        }
        Ok(x)
    }

    /// Noise-prediction loss with its intermediates.
    ///
    /// Draws one step per batch element uniformly from `1..=steps`, then the
    /// noise, in that order.
    pub fn ddpm_terms(&self, denoiser: &dyn Denoiser, x0: &Tensor, rng: &mut Rng) -> Result<DdpmTerms> {
        if x0.rank() == 0 || x0.shape()[0] == 0 {
            return Err(invalid("ddpm loss needs a nonempty batch"));
        }
        let b = x0.shape()[0];
        let taus: Vec<usize> = (0..b).map(|_| 1 + rng.below(self.steps())).collect();
        let eps = rng.normal_tensor(x0.shape());
        let x_tau = self.q_sample(x0, &taus, &eps)?;
        let eps_hat = denoiser.predict_noise(&x_tau, &taus)?;
        let loss = eps.sub(&eps_hat)?.square()?.mean()?;
        Ok(DdpmTerms {
            loss,
            x_tau,
            taus,
            eps_hat,
        })
    }

    pub fn ddpm_loss(&self, denoiser: &dyn Denoiser, x0: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.ddpm_terms(denoiser, x0, rng)?.loss)
    }
}

pub struct DdpmTerms {
    pub loss: Tensor,
    pub x_tau: Tensor,
    pub taus: Vec<usize>,
    pub eps_hat: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_mode;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = NoiseSchedule::linear(500, 1e-4, 1e-1).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!(close(s.beta(500).unwrap(), 1e-1, 1e-15));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));

        let one = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert!(close(one.alpha_bar(1).unwrap(), 0.7, 1e-15));

        let two = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!(close(two.alpha_bar(1).unwrap(), 0.9, 1e-15));
        assert!(close(two.alpha_bar(2).unwrap(), 0.81, 1e-15));
        assert_eq!(two.posterior_var(1).unwrap(), 0.0);
    }

    #[test]
    fn schedule_bounds_are_checked() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn step_range_is_checked() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let x = Tensor::zeros(&[1, 2, 1]);
        assert!(s.q_sample(&x, &[0], &x).is_err());
        assert!(s.q_sample(&x, &[5], &x).is_err());
        assert!(s.predict_x0_from_eps(&x, &[5], &x).is_err());
        assert!(s.reverse_mean(&x, &[0], &x).is_err());
    }

    #[test]
    fn telescoping_recomputation() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut prod = 1.0;
        for tau in 1..=100 {
            let beta = s.beta(tau).unwrap();
            let prev = prod;
            prod *= 1.0 - beta;
            assert!(close(s.alpha_bar(tau).unwrap(), prod, 1e-6));
            assert!(close(s.posterior_var(tau).unwrap(), (1.0 - prev) / (1.0 - prod) * beta, 1e-6));
        }
    }

    /// Schedule whose step 2 has beta = 0.1 and abar = 0.81.
    fn two_step() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.1).unwrap()
    }

    #[test]
    fn q_sample_scalar_cases() {
        let _g = check_mode();
        let s = two_step();
        let x0 = Tensor::new(vec![1.0], &[1, 1, 1]).unwrap();
        let eps = Tensor::new(vec![0.5], &[1, 1, 1]).unwrap();
        let zero = Tensor::zeros(&[1, 1, 1]);
        let y = s.q_sample(&x0, &[2], &eps).unwrap().item();
        assert!(close(y, 0.9 + 0.19f64.sqrt() * 0.5, 1e-12));
        assert!(close(y, 1.11795, 1e-5));
        assert!(close(s.q_sample(&x0, &[2], &zero).unwrap().item(), 0.9, 1e-12));
        assert!(close(s.q_sample(&zero, &[2], &eps).unwrap().item(), 0.19f64.sqrt() * 0.5, 1e-12));

        let x_tau = Tensor::new(vec![y], &[1, 1, 1]).unwrap();
        assert!(close(s.predict_x0_from_eps(&x_tau, &[2], &eps).unwrap().item(), 1.0, 1e-12));
        assert!(close(s.predict_x0_from_eps(&x_tau, &[2], &zero).unwrap().item(), y / 0.9, 1e-12));
    }

    #[test]
    fn reverse_mean_scalar_cases() {
        let _g = check_mode();
        let s = two_step();
        let one = Tensor::ones(&[1, 1, 1]);
        let m = s.reverse_mean(&one, &[2], &one).unwrap().item();
        assert!(close(m, (1.0 - 0.1 / 0.19f64.sqrt()) / 0.9f64.sqrt(), 1e-12));
        assert!(close(m, 0.812267, 1e-6));
        let m0 = s.reverse_mean(&one, &[2], &Tensor::zeros(&[1, 1, 1])).unwrap().item();
        assert!(close(m0, 1.0 / 0.9f64.sqrt(), 1e-12));

        let tiny = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let m = tiny.reverse_mean(&one, &[1], &one).unwrap().item();
        assert!(close(m, 1.0, 1e-5));
    }

    #[test]
    fn last_step_is_noiseless() {
        let _g = check_mode();
        let s = two_step();
        let x = Tensor::new(vec![0.3, -0.2], &[1, 2, 1]).unwrap();
        let e = Tensor::new(vec![0.1, 0.4], &[1, 2, 1]).unwrap();
        let mut rng = Rng::new(0);
        let step = s.p_sample_step(&x, 1, &e, &mut rng).unwrap();
        assert_eq!(step.data(), s.reverse_mean(&x, &[1], &e).unwrap().data());
    }

    #[test]
    fn per_sample_steps_broadcast_over_time_and_features() {
        let _g = check_mode();
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        let x0 = Tensor::ones(&[2, 2, 1]);
        let eps = Tensor::zeros(&[2, 2, 1]);
        let y = s.q_sample(&x0, &[1, 3], &eps).unwrap();
        let a1 = s.alpha_bar(1).unwrap().sqrt();
        let a3 = s.alpha_bar(3).unwrap().sqrt();
        assert_eq!(y.data(), &[a1, a1, a3, a3]);
        assert!(s.q_sample(&x0, &[1, 2, 3], &eps).is_err());
    }

    #[test]
    fn single_step_loop_with_zero_denoiser() {
        let _g = check_mode();
        let s = NoiseSchedule::linear(1, 0.2, 0.2).unwrap();
        let zero = |x: &Tensor, _: &[usize]| -> Result<Tensor> { Ok(x.zeros_like()) };
        let out = s.sample_loop(&zero, &[3, 4, 2], &mut Rng::new(5)).unwrap();
        assert_eq!(out.shape(), &[3, 4, 2]);
        let start = Rng::new(5).normal_tensor(&[3, 4, 2]);
        for (o, x) in out.data().iter().zip(start.data()) {
            assert!(close(*o, x / 0.8f64.sqrt(), 1e-12));
        }
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let _g = check_mode();
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut rng = Rng::new(9);
        let x0 = rng.normal_tensor(&[4, 5, 2]);
        // recovers the injected noise from the clean batch it closes over
        let oracle = |x_tau: &Tensor, taus: &[usize]| -> Result<Tensor> {
            let signal = x0.mul(&s.coefficients(&x0, taus, |i| s.alpha_bars[i].sqrt())?)?;
            x_tau.sub(&signal)?.mul(&s.coefficients(&x0, taus, |i| 1.0 / (1.0 - s.alpha_bars[i]).sqrt())?)
        };
        let loss = s.ddpm_loss(&oracle, &x0, &mut rng).unwrap().item();
        assert!(loss.abs() < 1e-20, "{loss}");
    }
}
