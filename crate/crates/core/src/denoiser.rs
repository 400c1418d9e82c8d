//! The conditional noise-prediction network.
//!
//! A small U-shaped encoder–decoder: residual blocks with group norm and a
//! sinusoidal timestep embedding added inside every block, average-pool
//! downsampling, nearest-neighbour upsampling and skip concatenation. The
//! input is the image prior stacked on top of the noisy mask along the
//! channel axis; the output has two channels, the predicted noise `ε̂` and
//! the variance-interpolation logit `v`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv, init_linear, init_norm, linear, norm};
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const PREFIX: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub prior_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            prior_channels: 1,
            time_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.base_channels == 0 || self.prior_channels == 0 {
            return Err(Error::invalid(
                "denoiser needs at least one level, one base channel and one prior channel",
            ));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even and at least 2"));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by {factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }
}

/// Network output for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Tensor,
    pub v: Tensor,
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t * freq).sin());
        }
    }
    Tensor::new([ts.len(), dim], out).expect("embedding shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
}

impl Denoiser {
    /// Registers freshly initialised parameters under `denoiser.` in `store`.
    pub fn init<R: Rng + ?Sized>(
        config: DenoiserConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.time_embed_dim;
        init_linear(store, &format!("{PREFIX}.time1"), d, d, rng)?;
        init_linear(store, &format!("{PREFIX}.time2"), d, d, rng)?;
        init_conv(store, &format!("{PREFIX}.in"), c.channels(0), c.prior_channels + 1, 3, rng)?;
        let levels = c.channel_multipliers.len();
        let mut ch = c.channels(0);
        for i in 0..levels {
            init_res_block(store, &format!("{PREFIX}.down{i}"), ch, c.channels(i), d, rng)?;
            ch = c.channels(i);
        }
        init_res_block(store, &format!("{PREFIX}.mid"), ch, ch, d, rng)?;
        for i in (0..levels - 1).rev() {
            init_res_block(store, &format!("{PREFIX}.up{i}"), ch + c.channels(i), c.channels(i), d, rng)?;
            ch = c.channels(i);
        }
        init_norm(store, &format!("{PREFIX}.out_norm"), ch)?;
        init_conv(store, &format!("{PREFIX}.out"), 2, ch, 3, rng)?;
        Ok(Denoiser { config })
    }

    pub fn from_config(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Denoiser { config })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Tape forward. `x` is the conditioned input `[B, prior+1, H, W]`,
    /// `temb` the sinusoidal embedding `[B, D]`. Returns `(ε̂, v)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        temb: Var,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let t1 = linear(g, store, &format!("{PREFIX}.time1"), temb)?;
        let t1 = g.silu(t1);
        let t2 = linear(g, store, &format!("{PREFIX}.time2"), t1)?;
        let temb = g.silu(t2);

        let levels = c.channel_multipliers.len();
        let mut h = conv(g, store, &format!("{PREFIX}.in"), x)?;
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = res_block(g, store, &format!("{PREFIX}.down{i}"), h, temb)?;
            if i + 1 < levels {
                skips.push(h);
                h = g.avg_pool2(h);
            }
        }
        h = res_block(g, store, &format!("{PREFIX}.mid"), h, temb)?;
        for i in (0..levels - 1).rev() {
            h = g.upsample2(h);
            h = g.concat(h, skips[i]);
            h = res_block(g, store, &format!("{PREFIX}.up{i}"), h, temb)?;
        }
        let h = norm(g, store, &format!("{PREFIX}.out_norm"), h)?;
        let h = g.silu(h);
        let out = conv(g, store, &format!("{PREFIX}.out"), h)?;
        Ok((g.slice_channels(out, 0, 1), g.slice_channels(out, 1, 1)))
    }

    /// Builds the conditioned input `b ⊕ x_t`.
    pub fn condition(&self, b: &Tensor, x_bt: &Tensor) -> Result<Tensor> {
        let (bb, cb, hb, wb) = b.dims4();
        let (bx, cx, hx, wx) = x_bt.dims4();
        if cb != self.config.prior_channels || cx != 1 {
            return Err(Error::invalid(format!(
                "expected {} prior channel(s) and 1 mask channel, got {cb} and {cx}",
                self.config.prior_channels
            )));
        }
        if (bb, hb, wb) != (bx, hx, wx) {
            return Err(Error::invalid(format!(
                "prior {:?} and noisy mask {:?} are not aligned",
                b.shape(),
                x_bt.shape()
            )));
        }
        if hb != self.config.image_size || wb != self.config.image_size {
            return Err(Error::invalid(format!(
                "network expects {0}x{0} inputs, got {hb}x{wb}",
                self.config.image_size
            )));
        }
        Tensor::concat_channels(b, x_bt)
    }
}

fn init_res_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    temb: usize,
    rng: &mut R,
) -> Result<()> {
    init_norm(store, &format!("{name}.norm1"), c_in)?;
    init_conv(store, &format!("{name}.conv1"), c_out, c_in, 3, rng)?;
    init_linear(store, &format!("{name}.temb"), c_out, temb, rng)?;
    init_norm(store, &format!("{name}.norm2"), c_out)?;
    init_conv(store, &format!("{name}.conv2"), c_out, c_out, 3, rng)?;
    if c_in != c_out {
        init_conv(store, &format!("{name}.skip"), c_out, c_in, 1, rng)?;
    }
    Ok(())
}

fn res_block(g: &mut Graph, store: &ParamStore, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = norm(g, store, &format!("{name}.norm1"), x)?;
    let h = g.silu(h);
    let h = conv(g, store, &format!("{name}.conv1"), h)?;
    let e = linear(g, store, &format!("{name}.temb"), temb)?;
    let h = g.add_channel(h, e);
    let h = norm(g, store, &format!("{name}.norm2"), h)?;
    let h = g.silu(h);
    let h = conv(g, store, &format!("{name}.conv2"), h)?;
    let skip_name = format!("{name}.skip.w");
    let skip = if store.get(&skip_name).is_some() {
        conv(g, store, &format!("{name}.skip"), x)?
    } else {
        x
    };
    Ok(g.add(skip, h))
}

/// Evaluates the network on a batch. `b: [B, C_prior, H, W]`,
/// `x_bt: [B, 1, H, W]`, one timestep per batch element.
pub fn denoise_forward(
    net: &Denoiser,
    store: &ParamStore,
    b: &Tensor,
    x_bt: &Tensor,
    ts: &[usize],
    schedule_steps: usize,
) -> Result<DenoiserOutput> {
    let input = net.condition(b, x_bt)?;
    if ts.len() != input.dims4().0 {
        return Err(Error::invalid(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            input.dims4().0
        )));
    }
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > schedule_steps) {
        return Err(Error::invalid(format!("timestep {t} outside 1..={schedule_steps}")));
    }
    let mut g = Graph::inference();
    let x = g.input(input);
    let temb = g.input(timestep_embedding(ts, net.config.time_embed_dim));
    let (eps, v) = net.forward(&mut g, store, x, temb)?;
    Ok(DenoiserOutput {
        eps_hat: g.value(eps).clone(),
        v: g.value(v).clone(),
    })
}

/// Per-pixel model log-variance: `log σ²_post + sigmoid(v)·(log β_t − log σ²_post)`,
/// with the `t = 1` posterior variance clipped as in
/// [`NoiseSchedule::posterior_log_variance_clipped`].
pub fn interpolate_variance(v: &Tensor, t: usize, s: &NoiseSchedule) -> Tensor {
    let lo = s.posterior_log_variance_clipped(t);
    let hi = s.beta(t).ln();
    v.map(|x| {
        let f = sigmoid(x);
        f * hi + (1.0 - f) * lo
    })
}
