//! Training losses: the simple noise-regression loss, the variational bound
//! terms, the latent KL regulariser, and their weighted sum.
//!
//! Every loss exists twice: as a plain function on tensors (used for
//! evaluation and as a test oracle) and as a tape builder used in training.
//! The two must agree to rounding.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::ambiguity::{kl_divergence, LatentGaussian};
use crate::autograd::{discretized_log_prob, Graph, Var};
use crate::denoiser::{denoise_forward, interpolate_variance, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::schedule::{posterior_params, q_sample, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.001,
            beta: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_simple: f64,
    pub l_vlb: f64,
    pub l_amb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteFlags {
    pub l_simple: bool,
    pub l_vlb: bool,
    pub l_amb: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_simple: f64,
    pub l_vlb: f64,
    pub l_amb: f64,
    pub total: f64,
    pub finite: FiniteFlags,
}

/// Mean squared error over every element.
pub fn l_simple(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    eps.check_same_shape(eps_hat)?;
    let n = eps.len() as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / n)
}

/// `KL(N(m1, e^lv1) ‖ N(m2, e^lv2))` in nats for scalar Gaussians.
pub fn normal_kl(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    0.5 * (-1.0 + lv2 - lv1 + (lv1 - lv2).exp() + (m1 - m2) * (m1 - m2) * (-lv2).exp())
}

/// Mean of the reverse-step Gaussian implied by `ε̂`:
/// `(x_t − β_t/√(1−γ_t)·ε̂)/√α_t`.
pub fn model_mean(x_t: &Tensor, t: usize, eps_hat: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let coef = s.beta(t) / (1.0 - s.gamma(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    x_t.zip_map(eps_hat, |x, e| (x - coef * e) * inv)
}

/// One variational-bound term in bits per dimension, averaged over every
/// element of the batch. All batch elements share `t`.
///
/// For `t > 1` this is the KL from the true posterior to the model step;
/// for `t = 1` the discretised Gaussian negative log-likelihood of `x0`.
pub fn l_vlb_term(
    x0: &Tensor,
    x_t: &Tensor,
    t: usize,
    out: &DenoiserOutput,
    s: &NoiseSchedule,
) -> Result<f64> {
    x0.check_same_shape(x_t)?;
    x0.check_same_shape(&out.eps_hat)?;
    x0.check_same_shape(&out.v)?;
    let mean = model_mean(x_t, t, &out.eps_hat, s)?;
    let logvar = interpolate_variance(&out.v, t, s);
    let n = x0.len() as f64;
    let nats: f64 = if t == 1 {
        (0..x0.len())
            .map(|i| -discretized_log_prob(x0.data()[i], mean.data()[i], 0.5 * logvar.data()[i]).0)
            .sum()
    } else {
        let post = posterior_params(x0, x_t, t, s)?;
        let lv1 = s.posterior_log_variance_clipped(t);
        (0..x0.len())
            .map(|i| normal_kl(post.mean.data()[i], lv1, mean.data()[i], logvar.data()[i]))
            .sum()
    };
    Ok(nats / n / LN_2)
}

/// Prior term `KL(q(x_T | x0) ‖ N(0, I))` in bits per dimension. Constant in
/// the model parameters.
pub fn prior_term(x0: &Tensor, s: &NoiseSchedule) -> f64 {
    let g = s.gamma(s.steps());
    let lv = (1.0 - g).ln();
    let nats: f64 = x0
        .data()
        .iter()
        .map(|&x| normal_kl(g.sqrt() * x, lv, 0.0, 0.0))
        .sum();
    nats / x0.len() as f64 / LN_2
}

/// Full bound decomposition for one batch, bits per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlbBreakdown {
    /// `terms[t-1]` is the term for timestep `t`.
    pub terms: Vec<f64>,
    pub prior: f64,
    pub total: f64,
}

/// Evaluates every term of the bound with fresh forward noise per `t`.
pub fn full_vlb<R: rand::Rng + ?Sized>(
    net: &Denoiser,
    store: &ParamStore,
    b: &Tensor,
    x0: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<VlbBreakdown> {
    let batch = x0.dims4().0;
    let mut terms = Vec::with_capacity(s.steps());
    for t in 1..=s.steps() {
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        let x_t = q_sample(x0, t, &eps, s)?;
        let out = denoise_forward(net, store, b, &x_t, &vec![t; batch], s.steps())?;
        terms.push(l_vlb_term(x0, &x_t, t, &out, s)?);
    }
    let prior = prior_term(x0, s);
    let total = terms.iter().sum::<f64>() + prior;
    Ok(VlbBreakdown { terms, prior, total })
}

pub fn l_amb(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    kl_divergence(q, p)
}

/// `l_simple + λ·l_vlb + β·l_amb`, refusing non-finite parts.
pub fn total_loss(parts: LossParts, w: LossWeights) -> Result<LossReport> {
    let finite = FiniteFlags {
        l_simple: parts.l_simple.is_finite(),
        l_vlb: parts.l_vlb.is_finite(),
        l_amb: parts.l_amb.is_finite(),
    };
    for (ok, term) in [
        (finite.l_simple, "l_simple"),
        (finite.l_vlb, "l_vlb"),
        (finite.l_amb, "l_amb"),
    ] {
        if !ok {
            return Err(Error::NonFinite {
                term: term.into(),
                step: 0,
            });
        }
    }
    Ok(LossReport {
        l_simple: parts.l_simple,
        l_vlb: parts.l_vlb,
        l_amb: parts.l_amb,
        total: weighted_sum(parts, w),
        finite,
    })
}

fn weighted_sum(parts: LossParts, w: LossWeights) -> f64 {
    parts.l_simple + w.lambda * parts.l_vlb + w.beta * parts.l_amb
}

/// Tape version of [`l_simple`].
pub fn l_simple_graph(g: &mut Graph, eps: &Tensor, eps_hat: Var) -> Var {
    let neg = eps.map(|e| -e);
    let d = g.add_const(eps_hat, &neg);
    let sq = g.square(d);
    g.mean(sq)
}

/// Tape version of [`l_vlb_term`] with one timestep per batch element.
///
/// `ε̂` enters only as a constant, so the bound trains the variance head and
/// leaves the mean to the simple loss.
pub fn l_vlb_graph(
    g: &mut Graph,
    x0: &Tensor,
    x_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
    v: Var,
    s: &NoiseSchedule,
) -> Result<Var> {
    let (bn, c, h, w) = x0.dims4();
    if ts.len() != bn {
        return Err(Error::invalid(format!("{} timesteps for a batch of {bn}", ts.len())));
    }
    let per = c * h * w;
    let eps_const = eps_hat;
    let shape = x0.shape().to_vec();
    let mut mean = vec![0.0; x0.len()];
    let mut post_mean = vec![0.0; x0.len()];
    let mut post_lv = vec![0.0; x0.len()];
    let mut lo = vec![0.0; x0.len()];
    let mut span = vec![0.0; x0.len()];
    let mut kl_mask = vec![0.0; x0.len()];
    for (i, &t) in ts.iter().enumerate() {
        let coef = s.beta(t) / (1.0 - s.gamma(t)).sqrt();
        let inv = 1.0 / s.alpha(t).sqrt();
        let (c0, ct) = s.posterior_mean_coefs(t);
        let lv_lo = s.posterior_log_variance_clipped(t);
        let lv_hi = s.beta(t).ln();
        for k in i * per..(i + 1) * per {
            mean[k] = (x_t.data()[k] - coef * eps_const.data()[k]) * inv;
            post_mean[k] = c0 * x0.data()[k] + ct * x_t.data()[k];
            post_lv[k] = lv_lo;
            lo[k] = lv_lo;
            span[k] = lv_hi - lv_lo;
            kl_mask[k] = if t > 1 { 1.0 } else { 0.0 };
        }
    }
    let tensor = |d: Vec<f64>| Tensor::new(shape.clone(), d).expect("vlb shape");
    let nll_mask = tensor(kl_mask.iter().map(|m| 1.0 - m).collect());
    let kl_mask = tensor(kl_mask);

    let frac = g.sigmoid(v);
    let scaled = g.mul_const(frac, tensor(span));
    let logvar = g.add_const(scaled, &tensor(lo));

    // 0.5·(−1 + lv2 − lv1 + e^{lv1−lv2} + (m1−m2)²·e^{−lv2})
    let neg_lv = g.scale(logvar, -1.0);
    let post_lv = tensor(post_lv);
    let ratio_arg = g.add_const(neg_lv, &post_lv);
    let ratio = g.exp(ratio_arg);
    let inv_var = g.exp(neg_lv);
    let d2 = tensor(
        post_mean
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b) * (a - b))
            .collect(),
    );
    let quad = g.mul_const(inv_var, d2);
    let lin = g.add_const(logvar, &post_lv.map(|l| -1.0 - l));
    let s1 = g.add(lin, ratio);
    let s2 = g.add(s1, quad);
    let kl = g.scale(s2, 0.5);

    let mean_var = g.input(tensor(mean));
    let log_scale = g.scale(logvar, 0.5);
    let nll = g.discretized_nll(x0, mean_var, log_scale);

    let kl = g.mul_const(kl, kl_mask);
    let nll = g.mul_const(nll, nll_mask);
    let both = g.add(kl, nll);
    let m = g.mean(both);
    Ok(g.scale(m, 1.0 / LN_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::randn([2, 1, 4, 4], &mut rng);
        assert_eq!(l_simple(&e, &e).unwrap(), 0.0);
        let z = Tensor::zeros([2, 1, 4, 4]);
        let o = Tensor::full([2, 1, 4, 4], 1.0);
        assert_eq!(l_simple(&z, &o).unwrap(), 1.0);
        let f = Tensor::randn([2, 1, 4, 4], &mut rng);
        let mut acc = 0.0;
        for i in 0..e.len() {
            let d = e.data()[i] - f.data()[i];
            acc += d * d;
        }
        assert!((l_simple(&e, &f).unwrap() - acc / 32.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_kl_matches_hand_formula() {
        let (mq, vq, mp, vp) = (0.3f64, 0.4f64, -0.2f64, 1.7f64);
        let hand = (vp.sqrt() / vq.sqrt()).ln() + (vq + (mq - mp).powi(2)) / (2.0 * vp) - 0.5;
        assert!((normal_kl(mq, vq.ln(), mp, vp.ln()) - hand).abs() < 1e-14);
        assert_eq!(normal_kl(0.7, -2.0, 0.7, -2.0), 0.0);
    }

    #[test]
    fn vlb_vanishes_when_model_matches_posterior() {
        let s = make_linear_schedule(100).unwrap();
        let t = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn([1, 1, 4, 4], &mut rng).map(f64::signum);
        let eps = Tensor::randn([1, 1, 4, 4], &mut rng);
        let x_t = q_sample(&x0, t, &eps, &s).unwrap();
        // The true noise gives the posterior mean; v → −∞ the posterior variance.
        let out = DenoiserOutput {
            eps_hat: eps,
            v: Tensor::full([1, 1, 4, 4], -800.0),
        };
        let l = l_vlb_term(&x0, &x_t, t, &out, &s).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    #[test]
    fn prior_term_is_small_at_default_schedule() {
        let s = make_linear_schedule(1000).unwrap();
        let x0 = Tensor::new([4], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let l = prior_term(&x0, &s);
        assert!(l > 0.0 && l < 1e-3, "{l}");
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let parts = LossParts {
            l_simple: 1.0,
            l_vlb: 2.0,
            l_amb: 3.0,
        };
        let r = total_loss(parts, w).unwrap();
        assert!((r.total - 1.005).abs() < 1e-15);
        assert_eq!(r.total, 1.0 + 0.001 * 2.0 + 0.001 * 3.0);
        let r = total_loss(parts, LossWeights { lambda: 0.0, beta: 0.0 }).unwrap();
        assert_eq!(r.total, 1.0);
        let bad = LossParts {
            l_vlb: f64::NAN,
            ..parts
        };
        let err = total_loss(bad, w).unwrap_err().to_string();
        assert!(err.contains("l_vlb"), "{err}");
    }

    #[test]
    fn graph_vlb_matches_plain_vlb() {
        let s = make_linear_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ts = [1usize, 7, 50];
        let x0 = Tensor::randn([3, 1, 4, 4], &mut rng).map(f64::signum);
        let x_t = Tensor::randn([3, 1, 4, 4], &mut rng);
        let eps_hat = Tensor::randn([3, 1, 4, 4], &mut rng);
        let v = Tensor::randn([3, 1, 4, 4], &mut rng);
        let mut g = Graph::new();
        let vv = g.variable(v.clone());
        let l = l_vlb_graph(&mut g, &x0, &x_t, &ts, &eps_hat, vv, &s).unwrap();
        let mut want = 0.0;
        for (i, &t) in ts.iter().enumerate() {
            let out = DenoiserOutput {
                eps_hat: eps_hat.select(i),
                v: v.select(i),
            };
            want += l_vlb_term(&x0.select(i), &x_t.select(i), t, &out, &s).unwrap() / 3.0;
        }
        let got = g.value(l).item();
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn graph_vlb_gradient_matches_finite_differences() {
        let s = make_linear_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ts = [1usize, 25];
        let x0 = Tensor::randn([2, 1, 2, 2], &mut rng).map(f64::signum);
        let x_t = Tensor::randn([2, 1, 2, 2], &mut rng);
        let eps_hat = Tensor::randn([2, 1, 2, 2], &mut rng);
        let v = Tensor::randn([2, 1, 2, 2], &mut rng);
        let eval = |v: &Tensor| {
            let mut g = Graph::new();
            let vv = g.variable(v.clone());
            let l = l_vlb_graph(&mut g, &x0, &x_t, &ts, &eps_hat, vv, &s).unwrap();
            let grads = g.backward(l);
            (g.value(l).item(), grads.get(vv).unwrap().clone())
        };
        let (_, grad) = eval(&v);
        let h = 1e-5;
        for k in 0..v.len() {
            let mut p = v.clone();
            p.data_mut()[k] += h;
            let mut m = v.clone();
            m.data_mut()[k] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "{k}: {fd} vs {an}");
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        let s = make_linear_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = rng.gen_range(1..=50);
            let x0 = Tensor::randn([1, 1, 3, 3], &mut rng).map(f64::signum);
            let x_t = Tensor::randn([1, 1, 3, 3], &mut rng);
            let out = DenoiserOutput {
                eps_hat: Tensor::randn([1, 1, 3, 3], &mut rng),
                v: Tensor::randn([1, 1, 3, 3], &mut rng),
            };
            assert!(l_vlb_term(&x0, &x_t, t, &out, &s).unwrap() >= 0.0);
        }
    }
}
