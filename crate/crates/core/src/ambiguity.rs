//! Latent Gaussians and the two ambiguity encoders.
//!
//! The modeling network (AMN) reads the prior image and a ground-truth mask
//! and produces `Q`; the controlling network (ACN) reads the prior image,
//! the clipped `x̂₀` reconstruction and a constant `t/T` channel and produces
//! `P`. `KL(Q ‖ P)` is a training-time regulariser only: no latent sample is
//! ever injected into the denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{conv, init_conv, init_linear, init_zero_linear, linear};
use crate::linalg;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Floor added after the softplus so scales stay strictly positive.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    #[default]
    AxisAligned,
    Full,
}

impl std::str::FromStr for CovarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axis-aligned" => Ok(CovarianceMode::AxisAligned),
            "full" => Ok(CovarianceMode::Full),
            _ => Err(Error::invalid(format!(
                "covariance mode must be axis-aligned or full, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityNetConfig {
    pub filters: Vec<usize>,
    pub latent_dim: usize,
    pub covariance_mode: CovarianceMode,
    /// Full mode only: keep the off-diagonal Cholesky entries at zero.
    #[serde(default)]
    pub freeze_offdiag: bool,
}

impl Default for AmbiguityNetConfig {
    fn default() -> Self {
        AmbiguityNetConfig {
            filters: vec![32, 64, 128, 192],
            latent_dim: 6,
            covariance_mode: CovarianceMode::AxisAligned,
            freeze_offdiag: false,
        }
    }
}

impl AmbiguityNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::invalid("ambiguity filters must be nonempty and positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be positive"));
        }
        Ok(())
    }
}

/// Scale parameterisation of a [`LatentGaussian`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Per-dimension standard deviations.
    Diagonal(Vec<f64>),
    /// Row-major `N×N` lower-triangular Cholesky factor.
    Cholesky(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub scale: Scale,
}

impl LatentGaussian {
    pub fn diagonal(mean: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mean.len() != sigma.len() || mean.is_empty() {
            return Err(Error::invalid("mean and sigma must have the same nonzero length"));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("standard deviation {s} is not positive")));
        }
        Ok(LatentGaussian {
            mean,
            scale: Scale::Diagonal(sigma),
        })
    }

    pub fn full(mean: Vec<f64>, factor: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 || factor.len() != n * n {
            return Err(Error::invalid(format!(
                "a {n}-dimensional Gaussian needs a {n}x{n} factor, got {} entries",
                factor.len()
            )));
        }
        check_factor(&factor, n)?;
        Ok(LatentGaussian {
            mean,
            scale: Scale::Cholesky(factor),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mode(&self) -> CovarianceMode {
        match self.scale {
            Scale::Diagonal(_) => CovarianceMode::AxisAligned,
            Scale::Cholesky(_) => CovarianceMode::Full,
        }
    }

    /// Dense lower-triangular factor `L`, also for the diagonal form.
    pub fn factor(&self) -> Vec<f64> {
        match &self.scale {
            Scale::Cholesky(l) => l.clone(),
            Scale::Diagonal(s) => {
                let n = s.len();
                let mut l = vec![0.0; n * n];
                for (i, &v) in s.iter().enumerate() {
                    l[i * n + i] = v;
                }
                l
            }
        }
    }

    pub fn covariance(&self) -> Vec<f64> {
        linalg::outer_self(&self.factor(), self.dim())
    }
}

fn check_factor(l: &[f64], n: usize) -> Result<()> {
    for r in 0..n {
        let d = l[r * n + r];
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::invalid(format!(
                "Cholesky diagonal entry {r} is {d}, not positive"
            )));
        }
        if let Some(c) = (r + 1..n).find(|&c| l[r * n + c] != 0.0) {
            return Err(Error::invalid(format!("factor is not lower-triangular at ({r}, {c})")));
        }
    }
    if !l.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("factor has non-finite entries"));
    }
    Ok(())
}

/// `Σ = L·Lᵀ` for a row-major lower-triangular `L` with positive diagonal.
pub fn build_covariance(l: &[f64], n: usize) -> Result<Vec<f64>> {
    if l.len() != n * n {
        return Err(Error::invalid(format!("expected {} entries, got {}", n * n, l.len())));
    }
    check_factor(l, n)?;
    Ok(linalg::outer_self(l, n))
}

/// Closed-form `KL(q ‖ p)`.
pub fn kl_divergence(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid(format!(
            "latent dimensions differ: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    if q.mode() != p.mode() {
        return Err(Error::invalid("covariance modes differ"));
    }
    match (&q.scale, &p.scale) {
        (Scale::Diagonal(sq), Scale::Diagonal(sp)) => {
            check_diag(sq)?;
            check_diag(sp)?;
            let kl = (0..q.dim())
                .map(|i| {
                    let d = q.mean[i] - p.mean[i];
                    (sp[i] / sq[i]).ln() + (sq[i] * sq[i] + d * d) / (2.0 * sp[i] * sp[i]) - 0.5
                })
                .sum();
            Ok(kl)
        }
        (Scale::Cholesky(lq), Scale::Cholesky(lp)) => {
            let n = q.dim();
            check_factor(lq, n)?;
            check_factor(lp, n)?;
            Ok(linalg::gaussian_kl(&q.mean, lq, &p.mean, lp, n))
        }
        _ => unreachable!("modes checked above"),
    }
}

fn check_diag(s: &[f64]) -> Result<()> {
    match s.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        Some(v) => Err(Error::invalid(format!("standard deviation {v} is not positive"))),
        None => Ok(()),
    }
}

/// `z = μ + L·ε` (or `μ + σ⊙ε`).
pub fn reparam_sample(g: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    let n = g.dim();
    if eps.len() != n {
        return Err(Error::invalid(format!("eps has {} entries, expected {n}", eps.len())));
    }
    Ok(match &g.scale {
        Scale::Diagonal(s) => (0..n).map(|i| g.mean[i] + s[i] * eps[i]).collect(),
        Scale::Cholesky(l) => (0..n)
            .map(|r| g.mean[r] + (0..=r).map(|c| l[r * n + c] * eps[c]).sum::<f64>())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Amn,
    Acn,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Amn => "amn",
            Role::Acn => "acn",
        }
    }
}

/// Tape handles for a batch of latent Gaussians.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// `[B, N]`
    pub mean: Var,
    /// Positive diagonal of the factor, `[B, N]`.
    pub diag: Var,
    /// Strictly-lower entries `[B, N(N-1)/2]`, full mode only.
    pub off: Option<Var>,
    /// Assembled factors `[B, N, N]`.
    pub factor: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityNet {
    role: Role,
    config: AmbiguityNetConfig,
    in_channels: usize,
}

impl AmbiguityNet {
    /// Input channels: the prior plus one mask channel, plus the `t/T`
    /// channel for ACN.
    pub fn input_channels(role: Role, prior_channels: usize) -> usize {
        match role {
            Role::Amn => prior_channels + 1,
            Role::Acn => prior_channels + 2,
        }
    }

    pub fn from_config(role: Role, config: AmbiguityNetConfig, prior_channels: usize) -> Result<Self> {
        config.validate()?;
        Ok(AmbiguityNet {
            role,
            in_channels: Self::input_channels(role, prior_channels),
            config,
        })
    }

    /// Registers parameters under `amn.` or `acn.`. In full mode the
    /// off-diagonal head is created last, so the other heads draw the same
    /// random numbers as in axis-aligned mode.
    pub fn init<R: Rng + ?Sized>(
        role: Role,
        config: AmbiguityNetConfig,
        prior_channels: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Self::from_config(role, config, prior_channels)?;
        let p = role.prefix();
        let mut c_in = net.in_channels;
        for (i, &f) in net.config.filters.iter().enumerate() {
            init_conv(store, &format!("{p}.conv{i}"), f, c_in, 3, rng)?;
            c_in = f;
        }
        let n = net.config.latent_dim;
        init_linear(store, &format!("{p}.mean"), n, c_in, rng)?;
        init_linear(store, &format!("{p}.scale"), n, c_in, rng)?;
        if net.config.covariance_mode == CovarianceMode::Full {
            let m = n * (n - 1) / 2;
            let name = format!("{p}.offdiag");
            if net.config.freeze_offdiag {
                init_zero_linear(store, &name, m, c_in)?;
                store.set_frozen(&format!("{name}.w"), true)?;
                store.set_frozen(&format!("{name}.b"), true)?;
            } else {
                init_linear(store, &name, m, c_in, rng)?;
            }
        }
        Ok(net)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &AmbiguityNetConfig {
        &self.config
    }

    /// Tape forward on a stacked input `[B, in_channels, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LatentVars> {
        let p = self.role.prefix();
        let c = g.value(x).dims4().1;
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "{p} expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut h = x;
        for i in 0..self.config.filters.len() {
            h = conv(g, store, &format!("{p}.conv{i}"), h)?;
            h = g.relu(h);
            let (_, _, hh, ww) = g.value(h).dims4();
            // Inputs smaller than 2^stages stop pooling once 1 pixel wide.
            if hh >= 2 && ww >= 2 && hh % 2 == 0 && ww % 2 == 0 {
                h = g.avg_pool2(h);
            }
        }
        let pooled = g.global_avg_pool(h);
        let mean = linear(g, store, &format!("{p}.mean"), pooled)?;
        let raw = linear(g, store, &format!("{p}.scale"), pooled)?;
        let sp = g.softplus(raw);
        let floor = Tensor::full(g.value(sp).shape().to_vec(), SCALE_FLOOR);
        let diag = g.add_const(sp, &floor);
        let off = match self.config.covariance_mode {
            CovarianceMode::Full => Some(linear(g, store, &format!("{p}.offdiag"), pooled)?),
            CovarianceMode::AxisAligned => None,
        };
        let factor = g.cholesky(diag, off);
        for (v, what) in [(mean, "mean"), (factor, "scale")] {
            if !g.value(v).all_finite() {
                return Err(Error::NonFinite {
                    term: format!("{p} {what} activations"),
                    step: 0,
                });
            }
        }
        Ok(LatentVars {
            mean,
            diag,
            off,
            factor,
        })
    }

    /// Extracts per-sample Gaussians from evaluated tape handles.
    pub fn gaussians(&self, g: &Graph, vars: &LatentVars) -> Result<Vec<LatentGaussian>> {
        let n = self.config.latent_dim;
        let mean = g.value(vars.mean).data();
        let diag = g.value(vars.diag).data();
        let factor = g.value(vars.factor).data();
        let batch = mean.len() / n;
        (0..batch)
            .map(|i| {
                let mu = mean[i * n..(i + 1) * n].to_vec();
                match self.config.covariance_mode {
                    CovarianceMode::AxisAligned => {
                        LatentGaussian::diagonal(mu, diag[i * n..(i + 1) * n].to_vec())
                    }
                    CovarianceMode::Full => {
                        LatentGaussian::full(mu, factor[i * n * n..(i + 1) * n * n].to_vec())
                    }
                }
            })
            .collect()
    }
}

/// AMN input `b ⊕ x_b`.
pub fn amn_input(b: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    check_aligned(b, x_b)?;
    Tensor::concat_channels(b, x_b)
}

/// ACN input `b ⊕ x̂_b ⊕ (t/T)`, one timestep per batch element.
pub fn acn_input(b: &Tensor, x_hat: &Tensor, ts: &[usize], steps: usize) -> Result<Tensor> {
    check_aligned(b, x_hat)?;
    let (bn, _, h, w) = x_hat.dims4();
    if ts.len() != bn {
        return Err(Error::invalid(format!("{} timesteps for a batch of {bn}", ts.len())));
    }
    if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > steps) {
        return Err(Error::invalid(format!("timestep {t} outside 1..={steps}")));
    }
    let mut tchan = Vec::with_capacity(bn * h * w);
    for &t in ts {
        tchan.extend(std::iter::repeat_n(t as f64 / steps as f64, h * w));
    }
    let tchan = Tensor::new([bn, 1, h, w], tchan)?;
    Tensor::concat_channels(&Tensor::concat_channels(b, x_hat)?, &tchan)
}

fn check_aligned(b: &Tensor, m: &Tensor) -> Result<()> {
    if b.shape().len() != 4 || m.shape().len() != 4 {
        return Err(Error::invalid("expected [B, C, H, W] tensors"));
    }
    let (bb, _, hb, wb) = b.dims4();
    let (bm, cm, hm, wm) = m.dims4();
    if (bb, hb, wb) != (bm, hm, wm) || cm != 1 {
        return Err(Error::invalid(format!(
            "prior {:?} and mask {:?} are not aligned",
            b.shape(),
            m.shape()
        )));
    }
    Ok(())
}

/// Evaluates `Q = AMN(b, x_b)` for every batch element.
pub fn amn_forward(
    net: &AmbiguityNet,
    store: &ParamStore,
    b: &Tensor,
    x_b: &Tensor,
) -> Result<Vec<LatentGaussian>> {
    let mut g = Graph::inference();
    let x = g.input(amn_input(b, x_b)?);
    let vars = net.forward(&mut g, store, x)?;
    net.gaussians(&g, &vars)
}

/// Evaluates `P = ACN(b, x̂_b, t)` for every batch element.
pub fn acn_forward(
    net: &AmbiguityNet,
    store: &ParamStore,
    b: &Tensor,
    x_hat: &Tensor,
    ts: &[usize],
    steps: usize,
) -> Result<Vec<LatentGaussian>> {
    let mut g = Graph::inference();
    let x = g.input(acn_input(b, x_hat, ts, steps)?);
    let vars = net.forward(&mut g, store, x)?;
    net.gaussians(&g, &vars)
}
