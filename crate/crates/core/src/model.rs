//! The trainable system: denoiser, optional ambiguity networks, schedule.

use serde::{Deserialize, Serialize};

use crate::ambiguity::{acn_input, amn_input, AmbiguityNet, AmbiguityNetConfig, Role};
use crate::autograd::{Graph, Var};
use crate::denoiser::{denoise_forward, timestep_embedding, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::objectives::{l_simple_graph, l_vlb_graph, total_loss, LossParts, LossReport, LossWeights};
use crate::params::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// `None` trains a plain conditional diffusion model.
    pub ambiguity: Option<AmbiguityNetConfig>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    amn: Option<AmbiguityNet>,
    acn: Option<AmbiguityNet>,
    pub params: ParamStore,
}

/// One training minibatch. `x0` is the mask target in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub b: Tensor,
    pub x0: Tensor,
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_simple: Var,
    pub l_vlb: Var,
    pub l_amb: Option<Var>,
    pub total: Var,
}

impl Model {
    /// Fresh parameters; each network draws from its own stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let mut params = ParamStore::new();
        let prior = config.denoiser.prior_channels;
        let denoiser = Denoiser::init(
            config.denoiser.clone(),
            &mut params,
            &mut seeding::stream(seed, seeding::DENOISER_INIT),
        )?;
        let (amn, acn) = match &config.ambiguity {
            Some(a) => (
                Some(AmbiguityNet::init(
                    Role::Amn,
                    a.clone(),
                    prior,
                    &mut params,
                    &mut seeding::stream(seed, seeding::AMN_INIT),
                )?),
                Some(AmbiguityNet::init(
                    Role::Acn,
                    a.clone(),
                    prior,
                    &mut params,
                    &mut seeding::stream(seed, seeding::ACN_INIT),
                )?),
            ),
            None => (None, None),
        };
        Ok(Model {
            config,
            schedule,
            denoiser,
            amn,
            acn,
            params,
        })
    }

    /// Rebuilds a model around loaded parameters, checking that names,
    /// order and shapes match what `config` would create.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Model::init(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "config implies {} tensors, archive holds {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((want, wt), (got, gt)) in template.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "expected {want} {:?}, found {got} {:?}",
                    wt.shape(),
                    gt.shape()
                )));
            }
        }
        let mut params = params;
        for id in 0..template.params.len() {
            if template.params.is_frozen(id) {
                params.set_frozen(template.params.name(id), true)?;
            }
        }
        Ok(Model { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn amn(&self) -> Option<&AmbiguityNet> {
        self.amn.as_ref()
    }

    pub fn acn(&self) -> Option<&AmbiguityNet> {
        self.acn.as_ref()
    }

    /// Records the full objective on `g`.
    pub fn loss_graph(&self, g: &mut Graph, batch: &TrainBatch, w: LossWeights) -> Result<LossVars> {
        self.loss_graph_with(g, batch, w, None)
    }

    /// As [`Model::loss_graph`], but the variational bound's mean path uses
    /// `vlb_eps` instead of the current `ε̂`. Because that path is detached,
    /// the recorded gradient is the exact derivative of this function with
    /// `vlb_eps` held at the unperturbed prediction.
    pub fn loss_graph_with(
        &self,
        g: &mut Graph,
        batch: &TrainBatch,
        w: LossWeights,
        vlb_eps: Option<&Tensor>,
    ) -> Result<LossVars> {
        let s = &self.schedule;
        let x_t = self.noisy_masks(batch)?;
        let per = x_t.len() / batch.ts.len();
        let mut rec_scale = vec![0.0; x_t.len()];
        let mut rec_shift = vec![0.0; x_t.len()];
        for (i, &t) in batch.ts.iter().enumerate() {
            let gm = s.gamma(t);
            let (a, c) = (gm.sqrt(), (1.0 - gm).sqrt());
            for k in i * per..(i + 1) * per {
                rec_scale[k] = -c / a;
                rec_shift[k] = x_t.data()[k] / a;
            }
        }

        let input = g.input(self.denoiser.condition(&batch.b, &x_t)?);
        let temb = g.input(timestep_embedding(&batch.ts, self.config.denoiser.time_embed_dim));
        let (eps_hat, v) = self.denoiser.forward(g, &self.params, input, temb)?;
        let l_simple = l_simple_graph(g, &batch.eps, eps_hat);
        let current = g.value(eps_hat).clone();
        let l_vlb = l_vlb_graph(g, &batch.x0, &x_t, &batch.ts, vlb_eps.unwrap_or(&current), v, s)?;

        let l_amb = match (&self.amn, &self.acn) {
            (Some(amn), Some(acn)) => {
                let q_in = g.input(amn_input(&batch.b, &batch.x0)?);
                let q = amn.forward(g, &self.params, q_in)?;
                let scaled = g.mul_const(eps_hat, Tensor::new(batch.x0.shape().to_vec(), rec_scale)?);
                let x_hat = g.add_const(scaled, &Tensor::new(batch.x0.shape().to_vec(), rec_shift)?);
                let x_hat = g.clamp(x_hat, -1.0, 1.0);
                // Prior and t channels are constants; only x̂₀ carries gradient.
                let consts = acn_input(&batch.b, &Tensor::zeros(batch.x0.shape().to_vec()), &batch.ts, s.steps())?;
                let c_prior = self.config.denoiser.prior_channels;
                let all = g.input(consts);
                let prior = g.slice_channels(all, 0, c_prior);
                let tchan = g.slice_channels(all, c_prior + 1, 1);
                let p_in = g.concat(prior, x_hat);
                let p_in = g.concat(p_in, tchan);
                let p = acn.forward(g, &self.params, p_in)?;
                let kl = g.latent_kl(q.mean, q.factor, p.mean, p.factor);
                Some(g.mean(kl))
            }
            _ => None,
        };

        let weighted_vlb = g.scale(l_vlb, w.lambda);
        let mut total = g.add(l_simple, weighted_vlb);
        if let Some(amb) = l_amb {
            let weighted_amb = g.scale(amb, w.beta);
            total = g.add(total, weighted_amb);
        }
        Ok(LossVars {
            l_simple,
            l_vlb,
            l_amb,
            total,
        })
    }

    /// Loss report and per-parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &TrainBatch,
        w: LossWeights,
    ) -> Result<(LossReport, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, batch, w)?;
        let report = self.report(&g, &vars, w)?;
        let grads = g.backward(vars.total);
        Ok((report, g.param_grads(&grads, &self.params)))
    }

    /// Loss report only, on an inference tape.
    pub fn loss(&self, batch: &TrainBatch, w: LossWeights) -> Result<LossReport> {
        let mut g = Graph::inference();
        let vars = self.loss_graph(&mut g, batch, w)?;
        self.report(&g, &vars, w)
    }

    /// Inference-tape loss with the bound's mean path pinned to `vlb_eps`.
    pub fn loss_pinned(&self, batch: &TrainBatch, w: LossWeights, vlb_eps: &Tensor) -> Result<LossReport> {
        let mut g = Graph::inference();
        let vars = self.loss_graph_with(&mut g, batch, w, Some(vlb_eps))?;
        self.report(&g, &vars, w)
    }

    /// Predicted noise for a batch, as seen by the loss.
    pub fn predict_eps(&self, batch: &TrainBatch) -> Result<Tensor> {
        let x_t = self.noisy_masks(batch)?;
        let s = &self.schedule;
        let out = denoise_forward(&self.denoiser, &self.params, &batch.b, &x_t, &batch.ts, s.steps())?;
        Ok(out.eps_hat)
    }

    /// `x_t` for every batch element, after validating the batch.
    fn noisy_masks(&self, batch: &TrainBatch) -> Result<Tensor> {
        let s = &self.schedule;
        let (bn, _, h, w) = batch.x0.dims4();
        if batch.ts.len() != bn || batch.eps.shape() != batch.x0.shape() {
            return Err(Error::invalid("batch timesteps or noise do not match the masks"));
        }
        let per = h * w;
        let mut x_t = batch.x0.clone();
        for (i, &t) in batch.ts.iter().enumerate() {
            if t == 0 || t > s.steps() {
                return Err(Error::invalid(format!("timestep {t} outside 1..={}", s.steps())));
            }
            let gm = s.gamma(t);
            let (a, c) = (gm.sqrt(), (1.0 - gm).sqrt());
            for k in i * per..(i + 1) * per {
                x_t.data_mut()[k] = a * batch.x0.data()[k] + c * batch.eps.data()[k];
            }
        }
        Ok(x_t)
    }

    fn report(&self, g: &Graph, vars: &LossVars, w: LossWeights) -> Result<LossReport> {
        let parts = LossParts {
            l_simple: g.value(vars.l_simple).item(),
            l_vlb: g.value(vars.l_vlb).item(),
            l_amb: vars.l_amb.map_or(0.0, |v| g.value(v).item()),
        };
        total_loss(parts, w)
    }
}
