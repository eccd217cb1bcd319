//! The full think-then-diffuse recommender: encoder, reasoner, diffusion
//! head and the per-example training objective.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::datasets::Example;
use crate::diffusion::{diffusion_loss, ChainMode, Diffusion, DiffusionConfig};
use crate::error::{Error, Result};
use crate::grpo::{
    align_loss, decode_top1, gaussian_logprob, gaussian_logprob_value, group_advantages,
    importance_ratio, kl_to_prior, reward, AlignConfig,
};
use crate::numerics::{ParamStore, Purpose, RandomSource, StreamRng, Tape, Tensor, Var};
use crate::reasoning::{Reasoner, ReasonerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub reasoner: ReasonerConfig,
    pub diffusion: DiffusionConfig,
    pub align: AlignConfig,
    /// When false the pooled condition is decoded directly and GRPO uses a
    /// fixed `fallback_sigma`.
    pub use_diffusion: bool,
    pub fallback_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            reasoner: ReasonerConfig::default(),
            diffusion: DiffusionConfig::default(),
            align: AlignConfig::default(),
            use_diffusion: true,
            fallback_sigma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.diffusion.validate()?;
        self.align.validate()?;
        if self.reasoner.steps == 0 {
            return Err(Error::invalid("reasoner.steps must be at least 1"));
        }
        if !(self.fallback_sigma > 0.0) {
            return Err(Error::invalid("fallback_sigma must be positive"));
        }
        Ok(())
    }
}

/// Parameter layout of the model; values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub n_items: usize,
    pub backbone: Backbone,
    pub reasoner: Reasoner,
    pub diffusion: Diffusion,
}

/// Architecture plus current parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Arch,
    pub store: ParamStore,
}

impl Model {
    pub fn new(cfg: &ModelConfig, n_items: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let src = RandomSource::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.backbone.d_model;
        let backbone = Backbone::new(&cfg.backbone, n_items, &mut store, &src)?;
        let reasoner = Reasoner::new(&cfg.reasoner, d, &mut store, &src)?;
        let diffusion = Diffusion::new(&cfg.diffusion, d, &mut store, &src)?;
        Ok(Self {
            arch: Arch {
                cfg: cfg.clone(),
                n_items,
                backbone,
                reasoner,
                diffusion,
            },
            store,
        })
    }
}

/// Loss weights for one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub prefix: f64,
    pub with_kl: bool,
}

/// Which random streams an example draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKeys {
    pub epoch: u64,
    pub user: u64,
}

/// Sampling-time quantities of the GRPO group. Passing a recorded rollout
/// back in freezes the old policy, which finite-difference checks need.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub z: Vec<Vec<f64>>,
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Detached `τ_R` the KL term is anchored to.
    pub prior: Vec<f64>,
}

/// Loss values for one example (and optionally its gradient).
#[derive(Debug, Clone, Default)]
pub struct ExampleOut {
    pub l_rec: f64,
    pub l_diff: f64,
    pub l_align: f64,
    pub l_prefix: f64,
    pub l_total: f64,
    pub reward_mean: Option<f64>,
    pub all_zero_group: bool,
    pub clip_frac: f64,
    pub clamp_hits: usize,
    /// Importance ratios of the group, as values.
    pub ratios: Vec<f64>,
    pub grads: Option<Vec<Option<Vec<f64>>>>,
    pub rollout: Option<Rollout>,
}

/// Anchor, trajectory tokens and condition of one sequence, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub tokens: Vec<Vec<f64>>,
    pub condition: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl Arch {
    pub fn d(&self) -> usize {
        self.cfg.backbone.d_model
    }

    /// Forward pass of the objective for one training example.
    ///
    /// Stages run in order: encode, think, pool, warm start, reverse chain,
    /// anchor losses, then the GRPO group. Terms with zero weight are left
    /// out of the graph.
    #[allow(clippy::too_many_arguments)]
    pub fn example_loss(
        &self,
        store: &ParamStore,
        ex: &Example,
        keys: NoiseKeys,
        w: &LossWeights,
        src: &RandomSource,
        frozen: Option<&Rollout>,
        want_grad: bool,
    ) -> Result<ExampleOut> {
        let k = [keys.epoch, keys.user];
        let mut drop_rng = src.stream(Purpose::Dropout, &k);
        let mut tape = Tape::with_params(store);
        if !want_grad {
            tape = tape.no_grad();
        }
        let bb = &self.backbone;
        let enc = bb.encode(&mut tape, &ex.input, Some(&mut drop_rng))?;
        let traj = self.reasoner.trajectory(
            &mut tape,
            bb,
            &enc,
            self.cfg.reasoner.steps,
            Some(&mut drop_rng),
        )?;
        let tau_r = *traj.tokens.last().expect("at least one token");

        let (anchor, sigma) = if self.cfg.use_diffusion {
            let x_t = self
                .diffusion
                .warm_start(&mut tape, tau_r, &mut src.stream(Purpose::WarmStart, &k))?;
            let r = self.diffusion.reverse_chain(
                &mut tape,
                x_t,
                traj.condition,
                ChainMode::Train,
                &mut src.stream(Purpose::ChainNoise, &k),
                Some(&mut drop_rng),
            )?;
            (r.mu, r.sigma)
        } else {
            let s = tape.constant(Tensor::filled(&[1, self.d()], self.cfg.fallback_sigma));
            (traj.condition, s)
        };

        let mut out = ExampleOut::default();
        let l_rec = bb.rec_loss(&mut tape, anchor, ex.target)?;
        out.l_rec = tape.scalar(l_rec);
        let mut total = l_rec;

        let tgt = bb.item_embedding(&mut tape, ex.target)?;
        let l_diff = diffusion_loss(&mut tape, anchor, tgt, self.cfg.diffusion.loss_reduction)?;
        out.l_diff = tape.scalar(l_diff);
        if w.alpha != 0.0 {
            let t = tape.scale(l_diff, w.alpha);
            total = tape.add(total, t)?;
        }

        if w.prefix != 0.0 {
            let rows = bb.real_rows(&mut tape, &enc)?;
            let logits = bb.score_items(&mut tape, rows)?;
            let targets: Vec<Option<usize>> =
                ex.next[enc.len - enc.n_real..].iter().map(|&v| Some(v)).collect();
            let lp = bb.rec_loss_rows(&mut tape, logits, &targets)?;
            out.l_prefix = tape.scalar(lp);
            let t = tape.scale(lp, w.prefix);
            total = tape.add(total, t)?;
        }

        if w.beta != 0.0 {
            let (l_align, stats) = self.align_term(
                &mut tape, store, anchor, sigma, tau_r, ex.target, keys, w, src, frozen,
            )?;
            out.l_align = tape.scalar(l_align);
            out.reward_mean = Some(stats.rollout.rewards.iter().sum::<f64>() / stats.rollout.rewards.len() as f64);
            out.all_zero_group = stats.rollout.rewards.iter().all(|&r| r == 0.0);
            out.clip_frac = stats.clip_frac;
            out.clamp_hits = stats.clamp_hits;
            out.ratios = stats.ratios;
            out.rollout = Some(stats.rollout);
            let t = tape.scale(l_align, w.beta);
            total = tape.add(total, t)?;
        }

        out.l_total = tape.scalar(total);
        if !out.l_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "L_total for user {} (epoch {})",
                keys.user, keys.epoch
            )));
        }
        if want_grad {
            let g = tape.backward(total)?;
            let mut acc = vec![None; store.len()];
            g.accumulate_into(&mut acc, 1.0);
            out.grads = Some(acc);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn align_term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mu: Var,
        sigma: Var,
        tau_r: Var,
        target: usize,
        keys: NoiseKeys,
        w: &LossWeights,
        src: &RandomSource,
        frozen: Option<&Rollout>,
    ) -> Result<(Var, AlignStats)> {
        let acfg = &self.cfg.align;
        let g = acfg.group_size;
        let rollout = match frozen {
            Some(r) => r.clone(),
            None => {
                let mu_v = tape.data(mu).to_vec();
                let sig_v = tape.data(sigma).to_vec();
                let mut rng = src.stream(Purpose::Candidates, &[keys.epoch, keys.user]);
                let mut z = Vec::with_capacity(g);
                let mut logp_old = Vec::with_capacity(g);
                let mut rewards = Vec::with_capacity(g);
                for _ in 0..g {
                    let eps = rng.normals(mu_v.len());
                    let zi: Vec<f64> = (0..mu_v.len()).map(|j| mu_v[j] + sig_v[j] * eps[j]).collect();
                    let pred = decode_top1(&self.backbone.score_values(store, &zi));
                    rewards.push(reward(pred, target));
                    logp_old.push(gaussian_logprob_value(&zi, &mu_v, &sig_v)?);
                    z.push(zi);
                }
                let advantages = group_advantages(&rewards, acfg.eps_adv)?;
                Rollout {
                    z,
                    logp_old,
                    rewards,
                    advantages,
                    prior: tape.data(tau_r).to_vec(),
                }
            }
        };
        let mut hits = 0;
        let mut rhos = Vec::with_capacity(g);
        for (zi, &old) in rollout.z.iter().zip(&rollout.logp_old) {
            // Candidates are actions: fixed samples scored under the live policy.
            let zc = tape.constant(Tensor::row(zi.clone()));
            let lp = gaussian_logprob(tape, zc, mu, sigma)?;
            let old = tape.constant(Tensor::scalar(old));
            rhos.push(importance_ratio(tape, lp, old, acfg.ratio_clamp, &mut hits)?);
        }
        let ratios = rhos.iter().map(|&r| tape.scalar(r)).collect();
        let (mut loss, clip_frac) = align_loss(tape, &rhos, &rollout.advantages, acfg.eps_clip)?;
        if w.with_kl {
            let prior = tape.constant(Tensor::row(rollout.prior.clone()));
            let kl = kl_to_prior(tape, mu, sigma, prior)?;
            let kl = tape.scale(kl, acfg.kl_weight);
            loss = tape.add(loss, kl)?;
        }
        Ok((
            loss,
            AlignStats {
                rollout,
                clip_frac,
                clamp_hits: hits,
                ratios,
            },
        ))
    }

    /// Deterministic inference: no dropout, mean-only reverse chain. The
    /// warm-start noise (if enabled) comes from a stream keyed by `key`.
    pub fn infer(
        &self,
        store: &ParamStore,
        input: &[usize],
        src: &RandomSource,
        key: u64,
    ) -> Result<Inference> {
        self.infer_with(store, input, src, key, self.cfg.reasoner.steps)
    }

    pub fn infer_with(
        &self,
        store: &ParamStore,
        input: &[usize],
        src: &RandomSource,
        key: u64,
        steps: usize,
    ) -> Result<Inference> {
        let mut tape = Tape::with_params(store).no_grad();
        let enc = self.backbone.encode(&mut tape, input, None)?;
        let traj = self.reasoner.trajectory(&mut tape, &self.backbone, &enc, steps, None)?;
        let tau_r = *traj.tokens.last().expect("at least one token");
        let anchor = if self.cfg.use_diffusion {
            let mut init = if self.cfg.diffusion.infer_init_noise {
                src.stream(Purpose::EvalNoise, &[key])
            } else {
                StreamRng::zero()
            };
            let x_t = self.diffusion.warm_start(&mut tape, tau_r, &mut init)?;
            let r = self.diffusion.reverse_chain(
                &mut tape,
                x_t,
                traj.condition,
                ChainMode::Infer,
                &mut StreamRng::zero(),
                None,
            )?;
            r.mu
        } else {
            traj.condition
        };
        Ok(Inference {
            tokens: traj.tokens.iter().map(|&t| tape.data(t).to_vec()).collect(),
            condition: tape.data(traj.condition).to_vec(),
            anchor: tape.data(anchor).to_vec(),
        })
    }

    /// Number of tape nodes used by one inference pass (a cost proxy).
    pub fn infer_node_count(&self, store: &ParamStore, input: &[usize]) -> Result<usize> {
        let mut tape = Tape::with_params(store).no_grad();
        let enc = self.backbone.encode(&mut tape, input, None)?;
        let traj = self
            .reasoner
            .trajectory(&mut tape, &self.backbone, &enc, self.cfg.reasoner.steps, None)?;
        if self.cfg.use_diffusion {
            let tau_r = *traj.tokens.last().expect("at least one token");
            let x_t = self.diffusion.warm_start(&mut tape, tau_r, &mut StreamRng::zero())?;
            self.diffusion.reverse_chain(
                &mut tape,
                x_t,
                traj.condition,
                ChainMode::Infer,
                &mut StreamRng::zero(),
                None,
            )?;
        }
        Ok(tape.len())
    }
}

struct AlignStats {
    rollout: Rollout,
    clip_frac: f64,
    clamp_hits: usize,
    ratios: Vec<f64>,
}
