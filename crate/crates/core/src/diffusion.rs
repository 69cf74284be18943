//! Noise schedule and the forward/reverse diffusion updates.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBatch;
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default training schedule.
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// Inference defaults.
pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// Per-step variances and their cumulative products. Steps are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear schedule `beta_t = beta_min + (t / T) (beta_max - beta_min)`.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0) || !(beta_max < 1.0) || beta_min > beta_max {
        return Err(Error::Range(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta = (1..=steps)
        .map(|t| beta_min + (t as f64 / steps as f64) * (beta_max - beta_min))
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    /// Schedule over a subset of timesteps: step `i` of the result jumps from
    /// `timesteps[i-1]` to `timesteps[i]` of `self`, so its cumulative
    /// products equal `alpha_bar(timesteps[i])`.
    pub fn respaced(&self, timesteps: &[usize]) -> Result<NoiseSchedule> {
        let mut prev = 1.0;
        let mut last = 0;
        let mut beta = Vec::with_capacity(timesteps.len());
        let mut alpha = Vec::with_capacity(timesteps.len());
        let mut alpha_bar = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            if t <= last {
                return Err(Error::InvalidArgument("respacing timesteps must increase".into()));
            }
            let ab = self.alpha_bar(t)?;
            let a = ab / prev;
            alpha.push(a);
            beta.push(1.0 - a);
            alpha_bar.push(ab);
            prev = ab;
            last = t;
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.beta.len() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.beta.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// `abar_{t-1}` with `abar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.check(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bar[i - 1] })
    }

    /// Posterior standard deviation, zero at the final step.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let i = self.check(t)?;
        if i == 0 {
            return Ok(0.0);
        }
        let var = self.beta[i] * (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i]);
        Ok(var.sqrt())
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// A single latent code `[channels, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err("latent dimensions must be positive"));
        }
        if values.len() != channels * height * width {
            return Err(shape_err(format!(
                "{channels}x{height}x{width} latent needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("latent values must be finite".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![T::zero(); channels * height * width] }
    }

    /// Standard-normal grid.
    pub fn random<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let values = (0..channels * height * width)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { channels, height, width, values }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cast<U: Real>(&self) -> LatentGrid<U> {
        LatentGrid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T = f32> {
    items: Vec<LatentGrid<T>>,
}

impl<T: Real> LatentBatch<T> {
    pub fn new(items: Vec<LatentGrid<T>>) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err("latent batch must be non-empty"))?;
        if items.iter().any(|g| g.shape() != first.shape()) {
            return Err(shape_err("latent batch shapes are not homogeneous"));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[LatentGrid<T>] {
        &self.items
    }

    pub fn into_items(self) -> Vec<LatentGrid<T>> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        self.items[0].shape()
    }

    /// `[B, C, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor<T> {
        let (c, h, w) = self.grid_shape();
        let data = self.items.iter().flat_map(|g| g.values.iter().copied()).collect();
        Tensor::new(vec![self.items.len(), c, h, w], data).expect("consistent batch")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("expected [B, C, H, W], got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        let items = t
            .data()
            .chunks(per)
            .map(|c| LatentGrid::new(s[1], s[2], s[3], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }
}

/// Closed-form corruption `sqrt(abar_t) z0 + sqrt(1 - abar_t) noise`.
pub fn forward_sample<T: Real>(
    s: &NoiseSchedule,
    z0: &LatentGrid<T>,
    t: usize,
    noise: &LatentGrid<T>,
) -> Result<LatentGrid<T>> {
    z0.same_shape(noise, "forward_sample noise")?;
    let ab = s.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(z0.zip_map(noise, |z, e| a * z + b * e))
}

/// Mean squared error over every element of the batch.
pub fn denoising_loss<T: Real>(eps_pred: &LatentBatch<T>, eps_true: &LatentBatch<T>) -> Result<f64> {
    if eps_pred.len() != eps_true.len() || eps_pred.grid_shape() != eps_true.grid_shape() {
        return Err(shape_err("denoising loss operands differ in shape"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, q) in eps_pred.items.iter().zip(&eps_true.items) {
        for (&a, &b) in p.values.iter().zip(&q.values) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// One ancestral step from `z_t` to `z_{t-1}`.
pub fn reverse_step<T: Real>(
    s: &NoiseSchedule,
    z_t: &LatentGrid<T>,
    t: usize,
    eps_pred: &LatentGrid<T>,
    injected_noise: &LatentGrid<T>,
) -> Result<LatentGrid<T>> {
    z_t.same_shape(eps_pred, "reverse_step prediction")?;
    z_t.same_shape(injected_noise, "reverse_step noise")?;
    let alpha = s.alpha(t)?;
    let coef = s.beta(t)? / (1.0 - s.alpha_bar(t)?).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = s.sigma(t)?;
    let (c, k, sg) = (T::lit(coef), T::lit(inv_sqrt_alpha), T::lit(sigma));
    let mean = z_t.zip_map(eps_pred, |z, e| k * (z - c * e));
    if t == 1 {
        return Ok(mean);
    }
    Ok(mean.zip_map(injected_noise, |m, n| m + sg * n))
}

/// Replaces `eps_pred` by the noise implied by the clean-latent estimate
/// `(z_t - sqrt(1 - abar) eps) / sqrt(abar)` clamped to `[lo, hi]`. Where
/// the estimate is already inside the range the value is unchanged up to
/// rounding.
pub fn clip_prediction<T: Real>(
    s: &NoiseSchedule,
    z_t: &LatentGrid<T>,
    t: usize,
    eps_pred: &LatentGrid<T>,
    lo: f64,
    hi: f64,
) -> Result<LatentGrid<T>> {
    z_t.same_shape(eps_pred, "clip_prediction")?;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("clip range [{lo}, {hi}] is empty")));
    }
    let ab = s.alpha_bar(t)?;
    let (ra, rb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps_pred, |z, e| {
        let (z, e) = (z.as_f64(), e.as_f64());
        let x0 = (z - rb * e) / ra;
        if x0 >= lo && x0 <= hi {
            return T::lit(e);
        }
        T::lit((z - ra * x0.clamp(lo, hi)) / rb)
    }))
}

/// Classifier-free guidance `uncond + g (cond - uncond)`.
pub fn cfg_combine<T: Real>(
    eps_cond: &LatentGrid<T>,
    eps_uncond: &LatentGrid<T>,
    guidance: f64,
) -> Result<LatentGrid<T>> {
    eps_cond.same_shape(eps_uncond, "cfg_combine")?;
    if !(guidance >= 0.0) || !guidance.is_finite() {
        return Err(Error::Range(format!("guidance scale must be >= 0, got {guidance}")));
    }
    if guidance == 1.0 {
        return Ok(eps_cond.clone());
    }
    if guidance == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let g = T::lit(guidance);
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + g * (c - u)))
}

/// Evenly strided inference timesteps, ascending, ending at `total`.
pub fn inference_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// A conditional noise predictor usable by [`sample`].
pub trait NoisePredictor {
    fn latent_shape(&self) -> (usize, usize, usize);

    fn predict_noise(
        &self,
        z_t: &LatentBatch<f32>,
        t: &[usize],
        cond: &ConditioningBatch<f32>,
    ) -> Result<LatentBatch<f32>>;

    /// Conditioning for the caption-dropped pathway.
    fn unconditional(&self, batch: usize) -> Result<ConditioningBatch<f32>>;
}

/// Ancestral sampling with classifier-free guidance over `steps` evenly
/// strided timesteps. All randomness is drawn from a ChaCha8 stream seeded by
/// `seed`: first the initial latents in batch order, then one injected-noise
/// grid per sample per step. With `clip = Some((lo, hi))` every guided
/// prediction goes through [`clip_prediction`] before the step.
pub fn sample<P: NoisePredictor>(
    denoiser: &P,
    s: &NoiseSchedule,
    cond: &ConditioningBatch<f32>,
    steps: usize,
    guidance: f64,
    clip: Option<(f64, f64)>,
    seed: u64,
) -> Result<LatentBatch<f32>> {
    let timesteps = inference_timesteps(s.steps(), steps)?;
    let sched = if steps == s.steps() { s.clone() } else { s.respaced(&timesteps)? };
    let b = cond.len();
    let (c, h, w) = denoiser.latent_shape();
    let uncond = if guidance != 1.0 { Some(denoiser.unconditional(b)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<LatentGrid<f32>> = (0..b).map(|_| LatentGrid::random(c, h, w, &mut rng)).collect();
    for i in (1..=timesteps.len()).rev() {
        let t = timesteps[i - 1];
        let batch = LatentBatch::new(z)?;
        let tv = vec![t; b];
        let eps_c = denoiser.predict_noise(&batch, &tv, cond)?;
        let eps_u = match &uncond {
            Some(u) => Some(denoiser.predict_noise(&batch, &tv, u)?),
            None => None,
        };
        let mut next = Vec::with_capacity(b);
        for (k, zk) in batch.items.iter().enumerate() {
            let eps = match &eps_u {
                Some(u) => cfg_combine(&eps_c.items[k], &u.items[k], guidance)?,
                None => eps_c.items[k].clone(),
            };
            let eps = match clip {
                Some((lo, hi)) => clip_prediction(&sched, zk, i, &eps, lo, hi)?,
                None => eps,
            };
            let noise = if i > 1 { LatentGrid::random(c, h, w, &mut rng) } else { LatentGrid::zeros(c, h, w) };
            next.push(reverse_step(&sched, zk, i, &eps, &noise)?);
        }
        z = next;
    }
    LatentBatch::new(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1000).unwrap(), 0.02);
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.beta(1).unwrap() - 0.15).abs() < 1e-15);
        assert!((s.beta(2).unwrap() - 0.2).abs() < 1e-15);
        assert!((s.alpha_bar(1).unwrap() - 0.85).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.68).abs() < 1e-15);
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        for t in 2..=s.steps() {
            let (b, a, ab, abp) = (
                s.beta(t).unwrap(),
                s.alpha(t).unwrap(),
                s.alpha_bar(t).unwrap(),
                s.alpha_bar_prev(t).unwrap(),
            );
            assert!(b > s.beta(t - 1).unwrap());
            assert!(ab < abp);
            assert!((ab - a * abp).abs() <= 1e-12);
            assert!(((1.0 - ab - b) - a * (1.0 - abp)).abs() <= 1e-12);
        }
        let last = s.alpha_bar(s.steps()).unwrap();
        assert!(last > 0.0 && s.alpha_bar(1).unwrap() < 1.0);
    }

    #[test]
    fn forward_sample_examples() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let z0 = LatentGrid::new(1, 1, 2, vec![1.0f64, -2.0]).unwrap();
        let zeros = LatentGrid::<f64>::zeros(1, 1, 2);
        let out = forward_sample(&s, &z0, 2, &zeros).unwrap();
        assert_eq!(out.values(), &[0.68f64.sqrt(), -2.0 * 0.68f64.sqrt()]);
        let out = forward_sample(&s, &zeros, 2, &z0).unwrap();
        let k = (1.0 - s.alpha_bar(2).unwrap()).sqrt();
        assert_eq!(out.values(), &[k, -2.0 * k]);
        let one = LatentGrid::new(1, 1, 1, vec![1.0f64]).unwrap();
        let out = forward_sample(&s, &one, 2, &one).unwrap();
        assert_eq!(out.values()[0], 0.68f64.sqrt() + (1.0 - 0.68f64).sqrt());
        // quoted to five places as 1.390325; the exact value is 1.3903066
        assert!((out.values()[0] - 1.390325).abs() < 1e-4);
        assert!(forward_sample(&s, &one, 3, &one).is_err());
        assert!(forward_sample(&s, &one, 0, &one).is_err());
        assert!(forward_sample(&s, &one, 1, &zeros).is_err());
    }

    #[test]
    fn denoising_loss_examples() {
        let a = LatentBatch::new(vec![LatentGrid::new(1, 2, 2, vec![0.1f32, 0.2, -0.3, 0.4]).unwrap()]).unwrap();
        assert_eq!(denoising_loss(&a, &a).unwrap(), 0.0);
        let shifted = LatentBatch::new(vec![LatentGrid::new(1, 2, 2, vec![1.1f32, 1.2, 0.7, 1.4]).unwrap()]).unwrap();
        assert!((denoising_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-6);
        let p = LatentBatch::new(vec![LatentGrid::new(1, 1, 1, vec![0.5f64]).unwrap()]).unwrap();
        let q = LatentBatch::new(vec![LatentGrid::new(1, 1, 1, vec![-0.5f64]).unwrap()]).unwrap();
        assert_eq!(denoising_loss(&p, &q).unwrap(), 1.0);
        let a64 = LatentBatch::new(vec![LatentGrid::<f64>::zeros(1, 2, 2)]).unwrap();
        assert!(denoising_loss(&p, &a64).is_err());
    }

    #[test]
    fn reverse_step_examples() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let z = LatentGrid::new(1, 1, 1, vec![1.0f64]).unwrap();
        let e = LatentGrid::new(1, 1, 1, vec![1.0f64]).unwrap();
        let n0 = LatentGrid::<f64>::zeros(1, 1, 1);
        let out = reverse_step(&s, &z, 2, &e, &n0).unwrap();
        // quoted as 0.72268; the exact value is 0.7227521
        assert!((out.values()[0] - 0.72268).abs() < 1e-4);
        assert!((out.values()[0] - (1.0 - 0.2 / 0.32f64.sqrt()) / 0.8f64.sqrt()).abs() < 1e-12);

        let big = LatentGrid::new(1, 1, 1, vec![123.0f64]).unwrap();
        assert_eq!(reverse_step(&s, &z, 1, &e, &n0).unwrap(), reverse_step(&s, &z, 1, &e, &big).unwrap());

        let out = reverse_step(&s, &z, 2, &n0, &n0).unwrap();
        assert_eq!(out.values()[0], 1.0 / 0.8f64.sqrt());
        assert!(reverse_step(&s, &z, 3, &e, &n0).is_err());
    }

    #[test]
    fn reverse_step_with_true_noise_gives_posterior_mean() {
        use rand::SeedableRng;
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &t in &[2usize, 17, 500, 1000] {
            let z0 = LatentGrid::<f64>::random(2, 3, 3, &mut rng);
            let eps = LatentGrid::<f64>::random(2, 3, 3, &mut rng);
            let zt = forward_sample(&s, &z0, t, &eps).unwrap();
            let out = reverse_step(&s, &zt, t, &eps, &LatentGrid::zeros(2, 3, 3)).unwrap();
            let (a, ab, abp) = (s.alpha(t).unwrap(), s.alpha_bar(t).unwrap(), s.alpha_bar_prev(t).unwrap());
            for i in 0..out.values().len() {
                let expect = abp.sqrt() * z0.values()[i]
                    + a.sqrt() * (1.0 - abp) / (1.0 - ab).sqrt() * eps.values()[i];
                assert!((out.values()[i] - expect).abs() <= 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let c = LatentGrid::new(1, 1, 2, vec![0.1f32, 0.3]).unwrap();
        let u = LatentGrid::new(1, 1, 2, vec![0.7f32, -0.2]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let c1 = LatentGrid::new(1, 1, 1, vec![0.1f64]).unwrap();
        let u1 = LatentGrid::new(1, 1, 1, vec![0.0f64]).unwrap();
        assert!((cfg_combine(&c1, &u1, DEFAULT_GUIDANCE).unwrap().values()[0] - 0.75).abs() < 1e-12);
        assert!(cfg_combine(&c1, &u1, -1.0).is_err());
        assert!(cfg_combine(&c, &c1.cast(), 2.0).is_err());
    }

    #[test]
    fn timestep_subsets() {
        assert_eq!(inference_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        let ts = inference_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 20);
        assert_eq!(*ts.last().unwrap(), 1000);
        assert!(ts.windows(2).all(|w| w[1] - w[0] == 20));
        let ts = inference_timesteps(1000, 7).unwrap();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert!(inference_timesteps(10, 11).is_err());
        assert!(inference_timesteps(10, 0).is_err());
    }

    #[test]
    fn respaced_schedule_matches_cumulative_products() {
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        let ts = inference_timesteps(1000, 50).unwrap();
        let r = s.respaced(&ts).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            assert!((r.alpha_bar(i + 1).unwrap() - s.alpha_bar(t).unwrap()).abs() < 1e-15);
        }
        assert_eq!(r.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn clipped_step_is_the_posterior_mean_of_the_clamped_estimate() {
        use rand::SeedableRng;
        let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero = LatentGrid::<f64>::zeros(2, 3, 3);
        for &t in &[2usize, 40, 700] {
            let zt = LatentGrid::<f64>::random(2, 3, 3, &mut rng);
            let eps = LatentGrid::<f64>::random(2, 3, 3, &mut rng);
            let clipped = clip_prediction(&s, &zt, t, &eps, -0.5, 0.5).unwrap();
            let out = reverse_step(&s, &zt, t, &clipped, &zero).unwrap();
            let (a, ab, abp, b) =
                (s.alpha(t).unwrap(), s.alpha_bar(t).unwrap(), s.alpha_bar_prev(t).unwrap(), s.beta(t).unwrap());
            for i in 0..out.values().len() {
                let (z, e) = (zt.values()[i], eps.values()[i]);
                let x0 = ((z - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-0.5, 0.5);
                let expect = abp.sqrt() * b / (1.0 - ab) * x0 + a.sqrt() * (1.0 - abp) / (1.0 - ab) * z;
                assert!((out.values()[i] - expect).abs() <= 1e-10, "t={t}");
            }
        }
        assert!(clip_prediction(&s, &zero, 2, &zero, 1.0, 1.0).is_err());
    }

    struct Constant(f32);

    impl NoisePredictor for Constant {
        fn latent_shape(&self) -> (usize, usize, usize) {
            (1, 2, 2)
        }

        fn predict_noise(
            &self,
            z_t: &LatentBatch<f32>,
            _t: &[usize],
            _cond: &ConditioningBatch<f32>,
        ) -> Result<LatentBatch<f32>> {
            LatentBatch::new(z_t.items().iter().map(|z| z.zip_map(z, |_, _| self.0)).collect())
        }

        fn unconditional(&self, batch: usize) -> Result<ConditioningBatch<f32>> {
            conditioning(batch)
        }
    }

    fn conditioning(batch: usize) -> Result<ConditioningBatch<f32>> {
        use crate::conditioning::TokenBatch;
        ConditioningBatch::new(
            TokenBatch::new(vec![vec![2]; batch])?,
            Tensor::zeros(&[batch, 1, 1]),
            Tensor::new(vec![batch, 1], vec![1.0; batch])?,
        )
    }

    #[test]
    fn clipped_sampling_ends_inside_the_range() {
        let s = build_schedule(100, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
        let cond = conditioning(3).unwrap();
        let wild = Constant(-40.0);
        let free = sample(&wild, &s, &cond, 10, DEFAULT_GUIDANCE, None, 5).unwrap();
        assert!(free.items().iter().flat_map(|z| z.values()).any(|v| v.abs() > 1.0));
        let clipped = sample(&wild, &s, &cond, 10, DEFAULT_GUIDANCE, Some((-1.0, 1.0)), 5).unwrap();
        assert!(clipped.items().iter().flat_map(|z| z.values()).all(|v| v.abs() <= 1.0 + 1e-5));
        assert_eq!(clipped, sample(&wild, &s, &cond, 10, DEFAULT_GUIDANCE, Some((-1.0, 1.0)), 5).unwrap());
    }

    proptest! {
        #[test]
        fn forward_sample_is_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            z in prop::collection::vec(-2.0f64..2.0, 4),
            e in prop::collection::vec(-2.0f64..2.0, 4),
            t in 1usize..=1000,
        ) {
            let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
            let za = LatentGrid::new(1, 2, 2, z.iter().map(|v| a * v).collect()).unwrap();
            let eb = LatentGrid::new(1, 2, 2, e.iter().map(|v| b * v).collect()).unwrap();
            let out = forward_sample(&s, &za, t, &eb).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for i in 0..4 {
                let expect = a * ab.sqrt() * z[i] + b * (1.0 - ab).sqrt() * e[i];
                prop_assert!((out.values()[i] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn clipping_keeps_in_range_predictions_and_clamps_the_rest(
            z in prop::collection::vec(-3.0f64..3.0, 4),
            e in prop::collection::vec(-3.0f64..3.0, 4),
            t in 1usize..=1000,
        ) {
            let s = build_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap();
            let zt = LatentGrid::new(1, 2, 2, z.clone()).unwrap();
            let eps = LatentGrid::new(1, 2, 2, e.clone()).unwrap();
            let out = clip_prediction(&s, &zt, t, &eps, -1.0, 1.0).unwrap();
            let (ra, rb) = (s.alpha_bar(t).unwrap().sqrt(), (1.0 - s.alpha_bar(t).unwrap()).sqrt());
            for i in 0..4 {
                let raw = (z[i] - rb * e[i]) / ra;
                let back = (z[i] - rb * out.values()[i]) / ra;
                if raw.abs() <= 1.0 {
                    prop_assert_eq!(out.values()[i], e[i]);
                } else {
                    prop_assert!((back - raw.clamp(-1.0, 1.0)).abs() <= 1e-9 * (1.0 + z[i].abs() / ra));
                }
            }
        }

        #[test]
        fn schedule_identity_holds_for_any_valid_schedule(
            steps in 2usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5,
        ) {
            let s = build_schedule(steps, lo, (lo + span).min(0.999)).unwrap();
            for t in 2..=steps {
                let lhs = 1.0 - s.alpha_bar(t).unwrap() - s.beta(t).unwrap();
                let rhs = s.alpha(t).unwrap() * (1.0 - s.alpha_bar_prev(t).unwrap());
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }
}
