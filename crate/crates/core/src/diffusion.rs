//! Forward noising, the analytic posterior, and ancestral sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::LatentZ;
use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::schedule::NoiseSchedule;

/// Gaussian `q(x_{t-1} | x_t, x_0)`: mean image and scalar variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: GlyphImage,
    pub variance: f64,
}

/// Noise predictor `eps(x_t, t, z)` evaluated for a batch sharing one step.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &[GlyphImage], t: usize, z: &[LatentZ]) -> Result<Vec<GlyphImage>>;
}

/// Predicts zero noise everywhere. Useful for tracing the sampler by hand.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, x_t: &[GlyphImage], _t: usize, _z: &[LatentZ]) -> Result<Vec<GlyphImage>> {
        Ok(x_t.iter().map(|x| GlyphImage::filled(x.side(), 0.0)).collect())
    }
}

pub fn standard_normal_image(side: usize, rng: &mut impl Rng) -> GlyphImage {
    let pixels = (0..side * side).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    GlyphImage::new(side, pixels).expect("side*side pixels")
}

fn axpby(a: f64, x: &GlyphImage, b: f64, y: &GlyphImage) -> GlyphImage {
    let pixels = x.pixels().iter().zip(y.pixels()).map(|(&x, &y)| a * x + b * y).collect();
    GlyphImage::new(x.side(), pixels).expect("same shape")
}

/// One step of the forward chain with caller-supplied noise.
pub fn forward_step_with_noise(
    x_prev: &GlyphImage,
    eps: &GlyphImage,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GlyphImage> {
    let beta = sched.beta(t)?;
    x_prev.check_same_shape(eps)?;
    Ok(axpby((1.0 - beta).sqrt(), x_prev, beta.sqrt(), eps))
}

/// `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(x_prev: &GlyphImage, t: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<GlyphImage> {
    sched.check_step(t)?;
    let eps = standard_normal_image(x_prev.side(), rng);
    forward_step_with_noise(x_prev, &eps, t, sched)
}

/// Closed-form marginal with caller-supplied noise.
pub fn forward_marginal_with_noise(
    x0: &GlyphImage,
    eps: &GlyphImage,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GlyphImage> {
    sched.check_step(t)?;
    x0.check_same_shape(eps)?;
    Ok(axpby(sched.alpha_bars()[t].sqrt(), x0, sched.one_minus_alpha_bars()[t].sqrt(), eps))
}

/// Samples `x_t ~ q(x_t | x_0)` and returns it together with the noise used.
pub fn forward_marginal(
    x0: &GlyphImage,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(GlyphImage, GlyphImage)> {
    sched.check_step(t)?;
    let eps = standard_normal_image(x0.side(), rng);
    let x_t = forward_marginal_with_noise(x0, &eps, t, sched)?;
    Ok((x_t, eps))
}

/// Coefficients `(c_x0, c_xt, variance)` of the posterior at step `t`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    let beta = sched.beta(t)?;
    let ab_prev = sched.alpha_bars()[t - 1];
    let om_prev = sched.one_minus_alpha_bars()[t - 1];
    let om = sched.one_minus_alpha_bars()[t];
    let c_x0 = ab_prev.sqrt() * beta / om;
    // The x_t weight uses the per-step sqrt(1 - beta_t), not the cumulative product.
    let c_xt = (1.0 - beta).sqrt() * om_prev / om;
    let variance = om_prev / om * beta;
    Ok((c_x0, c_xt, variance))
}

pub fn posterior_params(x_t: &GlyphImage, x0: &GlyphImage, t: usize, sched: &NoiseSchedule) -> Result<PosteriorParams> {
    let (c_x0, c_xt, variance) = posterior_coefficients(t, sched)?;
    x_t.check_same_shape(x0)?;
    Ok(PosteriorParams { mean: axpby(c_x0, x0, c_xt, x_t), variance })
}

/// Inverts the closed-form marginal: `x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &GlyphImage, eps_pred: &GlyphImage, t: usize, sched: &NoiseSchedule) -> Result<GlyphImage> {
    sched.check_step(t)?;
    x_t.check_same_shape(eps_pred)?;
    let ab = sched.alpha_bars()[t];
    if !ab.is_normal() {
        return Err(Error::DegenerateStep(t));
    }
    let inv = 1.0 / ab.sqrt();
    Ok(axpby(inv, x_t, -sched.one_minus_alpha_bars()[t].sqrt() * inv, eps_pred))
}

fn reverse_from_eps(
    x_t: &GlyphImage,
    eps_pred: &GlyphImage,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<GlyphImage> {
    let x0_hat = predict_x0(x_t, eps_pred, t, sched)?.map(|v| v.clamp(-1.0, 1.0));
    let post = posterior_params(x_t, &x0_hat, t, sched)?;
    if t == 1 {
        return Ok(post.mean);
    }
    let eta = standard_normal_image(x_t.side(), rng);
    Ok(axpby(1.0, &post.mean, post.variance.sqrt(), &eta))
}

/// One ancestral step `x_t -> x_{t-1}`; adds no noise at `t = 1`.
pub fn reverse_step(
    x_t: &GlyphImage,
    t: usize,
    denoiser: &impl Denoiser,
    z: &LatentZ,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<GlyphImage> {
    sched.check_step(t)?;
    let eps = single(denoiser.predict_noise(std::slice::from_ref(x_t), t, std::slice::from_ref(z))?)?;
    reverse_from_eps(x_t, &eps, t, sched, rng)
}

fn single(mut out: Vec<GlyphImage>) -> Result<GlyphImage> {
    match out.len() {
        1 => Ok(out.pop().unwrap()),
        n => Err(Error::BadImageShape { expected: "1 denoiser output".into(), got: format!("{n} outputs") }),
    }
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample(
    denoiser: &impl Denoiser,
    z: &LatentZ,
    sched: &NoiseSchedule,
    side: usize,
    rng: &mut impl Rng,
) -> Result<GlyphImage> {
    let mut out = sample_batch(denoiser, std::slice::from_ref(z), sched, side, std::slice::from_mut(rng))?;
    Ok(out.pop().unwrap())
}

/// Runs one chain per latent, batching the denoiser calls. Chain `i` draws all
/// its noise from `rngs[i]`, so results do not depend on the batch composition.
pub fn sample_batch<R: Rng>(
    denoiser: &impl Denoiser,
    zs: &[LatentZ],
    sched: &NoiseSchedule,
    side: usize,
    rngs: &mut [R],
) -> Result<Vec<GlyphImage>> {
    if zs.len() != rngs.len() {
        return Err(Error::InvalidConfig(format!("{} latents but {} random streams", zs.len(), rngs.len())));
    }
    let mut xs: Vec<GlyphImage> = rngs.iter_mut().map(|rng| standard_normal_image(side, rng)).collect();
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict_noise(&xs, t, zs)?;
        if eps.len() != xs.len() {
            return Err(Error::BadImageShape {
                expected: format!("{} denoiser outputs", xs.len()),
                got: format!("{}", eps.len()),
            });
        }
        xs = xs
            .iter()
            .zip(&eps)
            .zip(rngs.iter_mut())
            .map(|((x, e), rng)| reverse_from_eps(x, e, t, sched, rng))
            .collect::<Result<_>>()?;
    }
    Ok(xs.into_iter().map(|x| x.map(|v| v.clamp(-1.0, 1.0))).collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::schedule::linear_schedule;

    fn scalar(v: f64) -> GlyphImage {
        GlyphImage::new(1, vec![v]).unwrap()
    }

    #[test]
    fn zero_beta_step_is_identity() {
        // A schedule cannot hold beta = 0, so drive the noise term to zero instead
        // and check the smallest representable beta leaves x untouched at f64 precision.
        let sched = linear_schedule(1, 1e-300, 1e-300).unwrap();
        let x = GlyphImage::new(2, vec![0.1, -0.4, 0.9, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(forward_step(&x, 1, &sched, &mut rng).unwrap(), x);
    }

    #[test]
    fn step_range_is_checked() {
        let sched = linear_schedule(2, 0.1, 0.2).unwrap();
        let x = scalar(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(forward_step(&x, 0, &sched, &mut rng), Err(Error::StepOutOfRange { t: 0, steps: 2 })));
        assert!(forward_marginal(&x, 3, &sched, &mut rng).is_err());
        assert!(posterior_params(&x, &x, 3, &sched).is_err());
        assert!(predict_x0(&x, &x, 0, &sched).is_err());
    }

    #[test]
    fn posterior_at_first_step_is_exact() {
        let sched = linear_schedule(2, 0.1, 0.2).unwrap();
        let x0 = GlyphImage::new(2, vec![0.3, -0.7, 1.0, 0.0]).unwrap();
        let xt = GlyphImage::new(2, vec![5.0, 2.0, -1.0, 0.5]).unwrap();
        let p = posterior_params(&xt, &x0, 1, &sched).unwrap();
        assert_eq!(p.mean, x0);
        assert_eq!(p.variance, 0.0);
        let zero = GlyphImage::filled(2, 0.0);
        assert_eq!(posterior_params(&zero, &zero, 2, &sched).unwrap().mean, zero);
        assert!(posterior_params(&zero, &zero, 2, &sched).unwrap().variance > 0.0);
    }

    #[test]
    fn predict_x0_cases() {
        let sched = linear_schedule(2, 0.1, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xt, eps) = forward_marginal(&scalar(0.3), 1, &sched, &mut rng).unwrap();
        assert!((predict_x0(&xt, &eps, 1, &sched).unwrap().pixels()[0] - 0.3).abs() < 1e-9);
        let xt = scalar(0.45);
        let got = predict_x0(&xt, &scalar(0.0), 2, &sched).unwrap().pixels()[0];
        assert!((got - 0.45 / 0.72f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn noiseless_marginal() {
        let sched = linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = GlyphImage::new(2, vec![0.5, -1.0, 1.0, 0.2]).unwrap();
        let xt = forward_marginal_with_noise(&x0, &GlyphImage::filled(2, 0.0), 7, &sched).unwrap();
        assert_eq!(xt, x0.map(|v| sched.alpha_bars()[7].sqrt() * v));
    }

    #[test]
    fn zero_denoiser_reverse_step_traces_by_hand() {
        let sched = linear_schedule(2, 0.1, 0.2).unwrap();
        let xt = GlyphImage::new(2, vec![0.5, -2.0, 0.1, 0.9]).unwrap();
        let z = LatentZ::new(vec![0.0]);
        let x0_hat = xt.map(|v| (v / 0.72f64.sqrt()).clamp(-1.0, 1.0));
        let mean = posterior_params(&xt, &x0_hat, 2, &sched).unwrap().mean;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(1);
        let got = reverse_step(&xt, 2, &ZeroDenoiser, &z, &sched, &mut rng).unwrap();
        let eta = standard_normal_image(2, &mut noise_rng);
        let var = posterior_params(&xt, &x0_hat, 2, &sched).unwrap().variance;
        for i in 0..4 {
            assert!((got.pixels()[i] - (mean.pixels()[i] + var.sqrt() * eta.pixels()[i])).abs() < 1e-15);
        }
        let a = reverse_step(&xt, 1, &ZeroDenoiser, &z, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = reverse_step(&xt, 1, &ZeroDenoiser, &z, &sched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_sample_trace() {
        let sched = linear_schedule(1, 0.5, 0.5).unwrap();
        let z = LatentZ::new(vec![0.0]);
        let got = sample(&ZeroDenoiser, &z, &sched, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x1 = standard_normal_image(3, &mut ChaCha8Rng::seed_from_u64(4));
        // At t = 1 the posterior mean is x0_hat itself.
        assert_eq!(got, x1.map(|v| (v / 0.5f64.sqrt()).clamp(-1.0, 1.0)));
    }

    #[test]
    fn batch_chains_match_single_chains() {
        let sched = linear_schedule(5, 0.05, 0.3).unwrap();
        let zs = vec![LatentZ::new(vec![0.0]); 3];
        let mut rngs: Vec<_> = (0..3).map(ChaCha8Rng::seed_from_u64).collect();
        let batch = sample_batch(&ZeroDenoiser, &zs, &sched, 4, &mut rngs).unwrap();
        for (i, img) in batch.iter().enumerate() {
            let one = sample(&ZeroDenoiser, &zs[0], &sched, 4, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
            assert_eq!(&one, img);
            assert!(img.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
