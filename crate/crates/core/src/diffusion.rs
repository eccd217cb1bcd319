//! Warm-started reverse diffusion that refines the last thinking token into
//! a diagonal Gaussian `(mu, sigma)` over intent space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{gaussian_draw, ParamStore, RandomSource, StreamRng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule_offset: f64,
    pub hidden_mult: usize,
    pub dropout: f64,
    pub sigma_floor: f64,
    pub sigma_ceil: f64,
    pub softplus_eps: f64,
    /// Multiply train-mode transition noise by `sqrt(1 - abar_{t-1})`.
    pub schedule_scaling: bool,
    /// Draw the warm-start noise at inference too (from a per-user stream).
    pub infer_init_noise: bool,
    /// How the anchor/target squared error is reduced over dimensions.
    pub loss_reduction: Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            schedule_offset: 0.008,
            hidden_mult: 4,
            dropout: 0.1,
            sigma_floor: 1e-3,
            sigma_ceil: 1.0,
            softplus_eps: 1e-5,
            schedule_scaling: true,
            infer_init_noise: true,
            loss_reduction: Reduction::Mean,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("diffusion needs at least one denoising step"));
        }
        if !(0.0 < self.sigma_floor && self.sigma_floor < self.sigma_ceil) {
            return Err(Error::invalid("need 0 < sigma_floor < sigma_ceil"));
        }
        if self.schedule_offset <= 0.0 || self.hidden_mult == 0 {
            return Err(Error::invalid("schedule_offset and hidden_mult must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    Train,
    Infer,
}

/// `abar_t = cos^2(((t/T + s) / (1 + s)) * pi/2)`, exactly 0 at `t = T`.
pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> f64 {
    if t >= steps {
        return 0.0;
    }
    let f = ((t as f64 / steps as f64 + s) / (1.0 + s)) * PI / 2.0;
    let c = f.cos();
    (c * c).clamp(0.0, 1.0)
}

/// Sinusoidal features: `sin(t w_i)` in the first half, `cos(t w_i)` in the
/// second, `w_i = 10000^(-i / (d/2))`.
pub fn sinusoidal(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct Diffusion {
    pub cfg: DiffusionConfig,
    pub d: usize,
    time1: Linear,
    time2: Linear,
    layers: [Linear; 3],
}

/// Result of the reverse chain.
#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub mu: Var,
    pub sigma: Var,
    /// Number of denoiser evaluations.
    pub calls: usize,
}

impl Diffusion {
    pub fn new(
        cfg: &DiffusionConfig,
        d: usize,
        store: &mut ParamStore,
        src: &RandomSource,
    ) -> Result<Self> {
        cfg.validate()?;
        if d % 2 != 0 {
            return Err(Error::invalid("d_model must be even for the time embedding"));
        }
        let h = cfg.hidden_mult * d;
        Ok(Self {
            cfg: cfg.clone(),
            d,
            time1: Linear::new(store, "diffusion.time1", d, d, true, src),
            time2: Linear::new(store, "diffusion.time2", d, d, true, src),
            layers: [
                Linear::new(store, "diffusion.l1", 2 * d, h, true, src),
                Linear::new(store, "diffusion.l2", h, h, true, src),
                Linear::new(store, "diffusion.l3", h, 2 * d, true, src),
            ],
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        cosine_alpha_bar(t, self.cfg.steps, self.cfg.schedule_offset)
    }

    /// Multiplier on the transition noise when sampling `x^{t-1}`.
    pub fn noise_scale(&self, t: usize) -> f64 {
        if self.cfg.schedule_scaling {
            (1.0 - self.alpha_bar(t - 1)).sqrt()
        } else {
            1.0
        }
    }

    /// Sinusoidal features followed by a two-layer SiLU MLP, `[1, d]`.
    pub fn time_embedding(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let f = tape.constant(Tensor::row(sinusoidal(t, self.d)));
        let h = self.time1.forward(tape, f)?;
        let h = tape.silu(h);
        self.time2.forward(tape, h)
    }

    /// `x^T = tau_R + eps_init`.
    pub fn warm_start(&self, tape: &mut Tape, tau: Var, rng: &mut StreamRng) -> Result<Var> {
        let eps = tape.constant(gaussian_draw(rng, &[1, self.d]));
        tape.add(tau, eps)
    }

    /// One learned Gaussian transition, returning `(mu, sigma)`.
    pub fn denoise_step(
        &self,
        tape: &mut Tape,
        x: Var,
        t: usize,
        c: Var,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<(Var, Var)> {
        let te = self.time_embedding(tape, t)?;
        let xt = tape.add(x, te)?;
        let mut h = tape.concat(&[c, xt], 1)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < 2 {
                h = tape.silu(h);
                h = tape.dropout(h, self.cfg.dropout, rng.as_deref_mut());
            }
            if !tape.value(h).is_finite() {
                return Err(Error::NonFinite(format!("denoiser layer {}", i + 1)));
            }
        }
        let mu = tape.slice(h, 1, 0, self.d)?;
        let raw = tape.slice(h, 1, self.d, self.d)?;
        Ok((mu, self.sigma_head(tape, raw)))
    }

    /// `clamp(softplus(raw) + eps, floor, ceil)`.
    pub fn sigma_head(&self, tape: &mut Tape, raw: Var) -> Var {
        let s = tape.softplus(raw);
        let s = tape.offset(s, self.cfg.softplus_eps);
        let s = tape.clamp(s, self.cfg.sigma_floor, self.cfg.sigma_ceil);
        debug_assert!(tape
            .data(s)
            .iter()
            .all(|&v| (self.cfg.sigma_floor..=self.cfg.sigma_ceil).contains(&v)));
        s
    }

    /// Runs `t = T..1`. In train mode `x^{t-1} = mu + scale(t) sigma eps`
    /// with `eps` from `noise`; in infer mode `x^{t-1} = mu`. The last
    /// step's parameters are returned.
    pub fn reverse_chain(
        &self,
        tape: &mut Tape,
        x_t: Var,
        c: Var,
        mode: ChainMode,
        noise: &mut StreamRng,
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Refined> {
        let steps = self.cfg.steps;
        if steps == 0 {
            return Err(Error::invalid("diffusion needs at least one denoising step"));
        }
        let mut x = x_t;
        let mut out = None;
        for t in (1..=steps).rev() {
            let (mu, sigma) = self.denoise_step(tape, x, t, c, dropout.as_deref_mut())?;
            if t > 1 {
                x = match mode {
                    ChainMode::Infer => mu,
                    ChainMode::Train => {
                        let eps = gaussian_draw(noise, &[1, self.d]);
                        let eps = tape.constant(eps);
                        let n = tape.mul(sigma, eps)?;
                        let n = tape.scale(n, self.noise_scale(t));
                        tape.add(mu, n)?
                    }
                };
            }
            out = Some((mu, sigma));
        }
        let (mu, sigma) = out.expect("steps >= 1");
        Ok(Refined {
            mu,
            sigma,
            calls: steps,
        })
    }
}

/// Reparameterized draws `z_i = mu + sigma * eps_i`, with the noise kept.
pub fn sample_candidates(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    g: usize,
    rng: &mut StreamRng,
) -> Result<Vec<(Var, Vec<f64>)>> {
    let shape = tape.shape(mu).to_vec();
    (0..g)
        .map(|_| {
            let eps = gaussian_draw(rng, &shape);
            let e = tape.constant(eps.clone());
            let n = tape.mul(sigma, e)?;
            Ok((tape.add(mu, n)?, eps.data))
        })
        .collect()
}

/// Squared error between the anchor and the target embedding, summed or
/// averaged over dimensions.
pub fn diffusion_loss(tape: &mut Tape, mu: Var, target: Var, reduction: Reduction) -> Result<Var> {
    let d = tape.sub(mu, target)?;
    let sq = tape.square(d);
    Ok(match reduction {
        Reduction::Sum => tape.sum(sq),
        Reduction::Mean => tape.mean(sq),
    })
}
