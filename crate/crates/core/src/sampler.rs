//! Reverse-chain sampling of segmentation masks.
//!
//! Chain `i` owns the stream `SAMPLING_BASE + i` of the request seed, so a
//! mask depends on `(params, b, seed, i)` and not on `n` or on how chains are
//! batched.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise_forward, interpolate_variance};
use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, MaskRole, MaskSet};
use crate::model::Model;
use crate::seeding;
use crate::tensor::Tensor;

/// Chains evaluated per forward pass.
const CHUNK: usize = 32;

/// Default trajectory memory cap, in bytes.
pub const DEFAULT_TRAJECTORY_CAP: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    Stochastic,
    /// `z = 0` at every step; with fixed `x_T` the chain is a deterministic map.
    Zero,
}

/// How the reverse-step mean is formed from the predicted noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanForm {
    /// `(x_t − β_t/√(1−γ_t)·ε̂)/√α_t`, the form the variational bound uses.
    #[default]
    Epsilon,
    /// Posterior mean around `x̂₀` clipped to `[-1, 1]`.
    ClippedX0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    /// `[1, C, H, W]` prior image.
    pub b: Tensor,
    pub n: usize,
    pub seed: u64,
    pub binarize_threshold: f64,
    pub noise: NoiseMode,
    pub mean_form: MeanForm,
}

impl SampleRequest {
    pub fn new(b: Tensor, n: usize, seed: u64) -> Self {
        SampleRequest {
            b,
            n,
            seed,
            binarize_threshold: 0.0,
            noise: NoiseMode::Stochastic,
            mean_form: MeanForm::Epsilon,
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(self.binarize_threshold > -1.0 && self.binarize_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "binarize_threshold {} is outside (-1, 1)",
                self.binarize_threshold
            )));
        }
        let cfg = &model.config().denoiser;
        let expect = [1, cfg.prior_channels, cfg.image_size, cfg.image_size];
        if self.b.shape() != expect {
            return Err(Error::invalid(format!(
                "prior image has shape {:?}, the model expects {:?}",
                self.b.shape(),
                expect
            )));
        }
        Ok(())
    }
}

/// A batch of chains advancing together. Rows of `x` are chains.
struct Chains {
    x: Tensor,
    rngs: Vec<ChaCha8Rng>,
}

impl Chains {
    fn start(req: &SampleRequest, first: usize, count: usize, hw: (usize, usize)) -> Self {
        let mut rngs: Vec<ChaCha8Rng> = (first..first + count)
            .map(|i| seeding::stream(req.seed, seeding::SAMPLING_BASE + i as u64))
            .collect();
        let parts: Vec<Tensor> = rngs
            .iter_mut()
            .map(|r| Tensor::randn([1, 1, hw.0, hw.1], r))
            .collect();
        Chains {
            x: Tensor::stack(&parts).expect("uniform chain shapes"),
            rngs,
        }
    }

    /// `x_t -> x_{t-1}` for every chain.
    fn step(&mut self, model: &Model, b: &Tensor, t: usize, req: &SampleRequest) -> Result<()> {
        let s = model.schedule();
        let count = self.rngs.len();
        let ts = vec![t; count];
        let out = denoise_forward(model.denoiser(), &model.params, b, &self.x, &ts, s.steps())?;
        let logvar = interpolate_variance(&out.v, t, s);
        let (_, _, h, w) = self.x.dims4();
        let per = h * w;
        let inv_sqrt_a = 1.0 / s.alpha(t).sqrt();
        let coef = s.beta(t) / (1.0 - s.gamma(t)).sqrt();
        let (g, (c0, ct)) = (s.gamma(t), s.posterior_mean_coefs(t));
        let mean_of = |x: f64, e: f64| match req.mean_form {
            MeanForm::Epsilon => (x - coef * e) * inv_sqrt_a,
            MeanForm::ClippedX0 => {
                let x0 = ((x - (1.0 - g).sqrt() * e) / g.sqrt()).clamp(-1.0, 1.0);
                c0 * x0 + ct * x
            }
        };
        let x = self.x.data_mut();
        for (i, rng) in self.rngs.iter_mut().enumerate() {
            let z = match req.noise {
                NoiseMode::Stochastic if t > 1 => Some(Tensor::randn([per], rng)),
                _ => None,
            };
            for k in 0..per {
                let j = i * per + k;
                let mean = mean_of(x[j], out.eps_hat.data()[j]);
                let sd = (0.5 * logvar.data()[j]).exp();
                x[j] = mean + z.as_ref().map_or(0.0, |z| sd * z.data()[k]);
            }
        }
        if !self.x.all_finite() {
            return Err(Error::SamplingDiverged { t });
        }
        Ok(())
    }
}

fn repeat_prior(b: &Tensor, count: usize) -> Tensor {
    Tensor::stack(&vec![b.clone(); count]).expect("uniform prior shapes")
}

/// Final continuous states `x_0`, one `[1, 1, H, W]` tensor per chain.
pub fn sample_continuous(model: &Model, req: &SampleRequest) -> Result<Vec<Tensor>> {
    req.validate(model)?;
    let size = model.config().denoiser.image_size;
    let steps = model.schedule().steps();
    let mut finals = Vec::with_capacity(req.n);
    for first in (0..req.n).step_by(CHUNK) {
        let count = CHUNK.min(req.n - first);
        let b = repeat_prior(&req.b, count);
        let mut chains = Chains::start(req, first, count, (size, size));
        for t in (1..=steps).rev() {
            chains.step(model, &b, t, req)?;
        }
        finals.extend((0..count).map(|i| chains.x.select(i)));
    }
    Ok(finals)
}

/// Draws `req.n` masks for one prior image.
pub fn sample_masks(model: &Model, req: &SampleRequest) -> Result<MaskSet> {
    let size = model.config().denoiser.image_size;
    let masks = sample_continuous(model, req)?
        .iter()
        .map(|x| BinaryMask::threshold(size, size, x.data(), req.binarize_threshold))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(masks, MaskRole::Prediction)
}

/// Retained states of every chain, `[n, 1, H, W]` each, with their timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    pub states: Vec<Tensor>,
}

/// Runs the chains keeping `x_T`, every `every`-th state after it and `x_0`,
/// for `ceil(T / every) + 1` states. Refuses if they would exceed `cap` bytes.
pub fn sample_trajectory(model: &Model, req: &SampleRequest, every: usize, cap: usize) -> Result<Trajectory> {
    req.validate(model)?;
    let steps = model.schedule().steps();
    if every == 0 || every > steps {
        return Err(Error::invalid(format!("stride {every} outside 1..={steps}")));
    }
    let size = model.config().denoiser.image_size;
    let kept = steps.div_ceil(every) + 1;
    let requested = kept
        .saturating_mul(req.n)
        .saturating_mul(size * size * std::mem::size_of::<f64>());
    if requested > cap {
        return Err(Error::MemoryCap { requested, cap });
    }
    let b = repeat_prior(&req.b, req.n);
    let mut chains = Chains::start(req, 0, req.n, (size, size));
    let mut timesteps = vec![steps];
    let mut states = vec![chains.x.clone()];
    for t in (1..=steps).rev() {
        chains.step(model, &b, t, req)?;
        let now = t - 1;
        if now == 0 || (steps - now).is_multiple_of(every) {
            timesteps.push(now);
            states.push(chains.x.clone());
        }
    }
    Ok(Trajectory { timesteps, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use rand::SeedableRng;

    fn setup() -> (Model, Tensor) {
        let model = Model::init(tiny_config(None), 3).unwrap();
        let b = Tensor::randn([1, 1, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
        (model, b)
    }

    #[test]
    fn count_shape_and_determinism() {
        let (model, b) = setup();
        let req = SampleRequest::new(b, 4, 9);
        let a = sample_masks(&model, &req).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.masks().iter().all(|m| (m.height(), m.width()) == (8, 8)));
        assert_eq!(a, sample_masks(&model, &req).unwrap());
    }

    #[test]
    fn chains_do_not_depend_on_n() {
        let (model, b) = setup();
        let few = sample_continuous(&model, &SampleRequest::new(b.clone(), 2, 5)).unwrap();
        let many = sample_continuous(&model, &SampleRequest::new(b, CHUNK + 3, 5)).unwrap();
        assert_eq!(few[..], many[..2]);
        assert_ne!(many[0], many[1]);
    }

    #[test]
    fn zero_noise_depends_only_on_start() {
        let (model, b) = setup();
        let mut req = SampleRequest::new(b, 3, 5);
        req.noise = NoiseMode::Zero;
        let a = sample_continuous(&model, &req).unwrap();
        assert_eq!(a, sample_continuous(&model, &req).unwrap());
        // Same x_T as the stochastic run, so the two differ only through z.
        req.noise = NoiseMode::Stochastic;
        assert_ne!(a, sample_continuous(&model, &req).unwrap());
    }

    #[test]
    fn clipped_x0_ends_inside_mask_range() {
        let (model, b) = setup();
        let mut req = SampleRequest::new(b, 3, 6);
        req.mean_form = MeanForm::ClippedX0;
        // At t = 1 the posterior mean is x̂₀ itself and no noise is added.
        for x in sample_continuous(&model, &req).unwrap() {
            assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn trajectory_layout() {
        let (model, b) = setup();
        let steps = model.schedule().steps();
        let req = SampleRequest::new(b, 2, 4);
        for every in [1, 7, steps] {
            let tr = sample_trajectory(&model, &req, every, DEFAULT_TRAJECTORY_CAP).unwrap();
            assert_eq!(tr.states.len(), steps.div_ceil(every) + 1);
            assert_eq!(tr.timesteps[0], steps);
            assert_eq!(*tr.timesteps.last().unwrap(), 0);
        }
        let full = sample_trajectory(&model, &req, steps, DEFAULT_TRAJECTORY_CAP).unwrap();
        let fin = sample_continuous(&model, &req).unwrap();
        let last = full.states.last().unwrap();
        assert_eq!(last.select(0), fin[0]);
        assert_eq!(last.select(1), fin[1]);
    }

    #[test]
    fn trajectory_memory_guard() {
        let (model, b) = setup();
        let err = sample_trajectory(&model, &SampleRequest::new(b, 2, 0), 1, 1024).unwrap_err();
        assert!(matches!(err, Error::MemoryCap { .. }));
    }

    #[test]
    fn bad_requests_rejected() {
        let (model, b) = setup();
        assert!(sample_masks(&model, &SampleRequest::new(b.clone(), 0, 0)).is_err());
        let mut req = SampleRequest::new(b, 1, 0);
        req.binarize_threshold = 1.0;
        assert!(sample_masks(&model, &req).is_err());
        let wrong = Tensor::zeros([1, 1, 4, 4]);
        assert!(sample_masks(&model, &SampleRequest::new(wrong, 1, 0)).is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let (mut model, b) = setup();
        let name = "denoiser.out.b";
        model.params.get_mut(name).unwrap().data_mut().fill(f64::NAN);
        let err = sample_masks(&model, &SampleRequest::new(b, 1, 0)).unwrap_err();
        let steps = model.schedule().steps();
        assert!(matches!(err, Error::SamplingDiverged { t } if t == steps), "{err}");
    }
}
