//! Group-relative policy optimization over continuous latent candidates.
//!
//! The policy is the diagonal Gaussian `N(mu, diag(sigma^2))` emitted by the
//! diffusion head. A group of `G` candidates is decoded to top-1 items and
//! rewarded with Hit@1; rewards are standardized inside the group and fed to
//! a clipped importance-ratio surrogate. There is no KL penalty unless the
//! `with_kl` ablation asks for one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub group_size: usize,
    pub eps_adv: f64,
    pub eps_clip: f64,
    /// Bound on `|logp_new - logp_old|` before exponentiation.
    pub ratio_clamp: f64,
    /// Weight of the optional KL term (only used by the `with_kl` ablation).
    pub kl_weight: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_adv: 1e-8,
            eps_clip: 0.2,
            ratio_clamp: 60.0,
            kl_weight: 0.1,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be at least 2"));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::invalid("eps_clip must lie in (0, 1)"));
        }
        if self.eps_adv < 0.0 || self.ratio_clamp <= 0.0 {
            return Err(Error::invalid("eps_adv must be >= 0 and ratio_clamp > 0"));
        }
        Ok(())
    }
}

/// Arg-max item id over `scores` (column `j` is item `j + 1`); ties go to the
/// smallest id.
pub fn decode_top1(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    best + 1
}

/// Hit@1 indicator.
pub fn reward(pred: usize, target: usize) -> f64 {
    if pred == target {
        1.0
    } else {
        0.0
    }
}

/// `(r_i - mean) / (std + eps)` with the population standard deviation.
/// Groups with identical rewards get exactly zero advantages.
pub fn group_advantages(rewards: &[f64], eps_adv: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::invalid(format!("advantages need a group of at least 2, got {g}")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_adv)).collect())
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("Gaussian log-density needs sigma > 0, got {s}")));
    }
    Ok(())
}

/// Value-only diagonal Gaussian log-density.
pub fn gaussian_logprob_value(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_sigma(sigma)?;
    if z.len() != mu.len() || z.len() != sigma.len() {
        return Err(Error::Shape {
            op: "gaussian_logprob",
            lhs: vec![z.len()],
            rhs: vec![mu.len(), sigma.len()],
        });
    }
    let mut acc = 0.0;
    for ((z, m), s) in z.iter().zip(mu).zip(sigma) {
        let u = (z - m) / s;
        acc += u * u + 2.0 * s.ln();
    }
    Ok(-0.5 * acc - 0.5 * z.len() as f64 * (2.0 * PI).ln())
}

/// `-1/2 sum[(z - mu)^2 / sigma^2 + log sigma^2] - (d/2) log 2 pi`, as a
/// scalar node differentiable in all three arguments.
pub fn gaussian_logprob(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    check_sigma(tape.data(sigma))?;
    let d = tape.value(z).numel();
    let diff = tape.sub(z, mu)?;
    let u = tape.div(diff, sigma)?;
    let u2 = tape.square(u);
    let ls = tape.log(sigma);
    let ls2 = tape.scale(ls, 2.0);
    let inner = tape.add(u2, ls2)?;
    let s = tape.sum(inner);
    let s = tape.scale(s, -0.5);
    Ok(tape.offset(s, -0.5 * d as f64 * (2.0 * PI).ln()))
}

/// `exp(clamp(logp_new - sg(logp_old), -c, c))`; `hits` counts clamp
/// activations.
pub fn importance_ratio(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: Var,
    clamp: f64,
    hits: &mut usize,
) -> Result<Var> {
    let old = tape.stop_gradient(logp_old);
    let diff = tape.sub(logp_new, old)?;
    if tape.data(diff).iter().any(|v| v.abs() > clamp) {
        *hits += 1;
    }
    let diff = tape.clamp(diff, -clamp, clamp);
    Ok(tape.exp(diff))
}

/// Clipped surrogate `-(1/G) sum min(rho A, clip(rho, 1-e, 1+e) A)` and the
/// fraction of candidates where the clipped branch was strictly selected.
pub fn align_loss(
    tape: &mut Tape,
    rhos: &[Var],
    advantages: &[f64],
    eps_clip: f64,
) -> Result<(Var, f64)> {
    let g = rhos.len();
    if g == 0 || g != advantages.len() {
        return Err(Error::Shape {
            op: "align_loss",
            lhs: vec![g],
            rhs: vec![advantages.len()],
        });
    }
    let rho = if g == 1 { rhos[0] } else { tape.concat(rhos, 1)? };
    let rho = tape.reshape(rho, &[1, g])?;
    let a = tape.constant(Tensor::row(advantages.to_vec()));
    let unclipped = tape.mul(rho, a)?;
    let rc = tape.clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
    let clipped = tape.mul(rc, a)?;
    let m = tape.minimum(unclipped, clipped)?;
    let s = tape.sum(m);
    let loss = tape.scale(s, -1.0 / g as f64);
    let (u, c) = (tape.data(unclipped), tape.data(clipped));
    let active = u.iter().zip(c).filter(|(u, c)| c < u).count();
    Ok((loss, active as f64 / g as f64))
}

/// `KL(N(mu, sigma^2) || N(prior, I))`, with the prior detached.
pub fn kl_to_prior(tape: &mut Tape, mu: Var, sigma: Var, prior: Var) -> Result<Var> {
    let prior = tape.stop_gradient(prior);
    let d = tape.value(mu).numel();
    let diff = tape.sub(mu, prior)?;
    let d2 = tape.square(diff);
    let s2 = tape.square(sigma);
    let q = tape.add(d2, s2)?;
    let q = tape.scale(q, 0.5);
    let ls = tape.log(sigma);
    let inner = tape.sub(q, ls)?;
    let s = tape.sum(inner);
    Ok(tape.offset(s, -0.5 * d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Purpose, RandomSource};
    use proptest::prelude::*;

    #[test]
    fn decode_ties_and_sort_oracle() {
        let mut s = vec![0.0; 10];
        s[2] = 5.0;
        s[6] = 5.0;
        assert_eq!(decode_top1(&s), 3);
        let mut rng = RandomSource::new(1).stream(Purpose::Misc, &[]);
        for _ in 0..100 {
            let s = rng.normals(20);
            let mut idx: Vec<usize> = (0..20).collect();
            idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(decode_top1(&s), idx[0] + 1);
        }
    }

    #[test]
    fn rewards() {
        assert_eq!(reward(3, 3), 1.0);
        assert_eq!(reward(3, 4), 0.0);
        let preds = [1, 2, 2, 5];
        let r: Vec<f64> = preds.iter().map(|&p| reward(p, 2)).collect();
        assert_eq!(r, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn advantage_hand_values() {
        assert_eq!(group_advantages(&[1.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        assert!((a[0] - 1.73205).abs() < 1e-5);
        assert!(a[1..].iter().all(|v| (v + 0.57735).abs() < 1e-5));
        let a = group_advantages(&[1.0, 0.0], 1e-8).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
        assert!(group_advantages(&[1.0], 1e-8).is_err());
    }

    proptest! {
        #[test]
        fn advantage_moments(bits in prop::collection::vec(0u8..2, 2..16)) {
            let r: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let a = group_advantages(&r, 1e-8).unwrap();
            let g = a.len() as f64;
            let mean = a.iter().sum::<f64>() / g;
            prop_assert!(mean.abs() < 1e-12);
            let std = (a.iter().map(|v| v * v).sum::<f64>() / g).sqrt();
            if r.iter().all(|&x| x == r[0]) {
                prop_assert_eq!(std, 0.0);
            } else {
                prop_assert!(std > 0.0 && std <= 1.0);
                prop_assert!(1.0 - std < 1e-7);
            }
        }

        #[test]
        fn clip_envelope(rho in 0.01f64..20.0, a in -3.0f64..3.0) {
            let mut t = Tape::new();
            let r = t.constant(Tensor::scalar(rho));
            let (l, _) = align_loss(&mut t, &[r], &[a], 0.2).unwrap();
            prop_assert!(t.scalar(l).abs() <= rho.max(1.2) * a.abs() + 1e-12);
        }
    }

    #[test]
    fn logprob_known_values() {
        let v = gaussian_logprob_value(&[0.5], &[0.5], &[1.0]).unwrap();
        assert!((v + 0.918939).abs() < 1e-6);
        let v = gaussian_logprob_value(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v + 1.418939).abs() < 1e-6);
        assert!(gaussian_logprob_value(&[0.0], &[0.0], &[0.0]).is_err());
        let mut t = Tape::new();
        let z = t.constant(Tensor::row(vec![0.2, -0.4, 1.0]));
        let m = t.constant(Tensor::row(vec![0.0, 0.1, 0.9]));
        let s = t.constant(Tensor::row(vec![0.5, 1.5, 0.01]));
        let lp = gaussian_logprob(&mut t, z, m, s).unwrap();
        let direct = gaussian_logprob_value(&[0.2, -0.4, 1.0], &[0.0, 0.1, 0.9], &[0.5, 1.5, 0.01]).unwrap();
        assert!((t.scalar(lp) - direct).abs() < 1e-12);
        let bad = t.constant(Tensor::row(vec![0.5, -1.0, 1.0]));
        assert!(gaussian_logprob(&mut t, z, m, bad).is_err());
    }

    #[test]
    fn logprob_gradcheck() {
        let mut rng = RandomSource::new(12).stream(Purpose::Misc, &[]);
        for _ in 0..5 {
            let mut p = rng.normals(12);
            for s in &mut p[8..] {
                *s = 0.3 + s.abs();
            }
            let err = grad_check(
                |t, x| {
                    let z = t.slice(x, 1, 0, 4)?;
                    let m = t.slice(x, 1, 4, 4)?;
                    let s = t.slice(x, 1, 8, 4)?;
                    gaussian_logprob(t, z, m, s)
                },
                &Tensor::row(p),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn ratio_cases() {
        let mut t = Tape::new();
        let mut hits = 0;
        let new = t.input(Tensor::scalar(-3.0));
        let old = t.input(Tensor::scalar(-3.0));
        let r = importance_ratio(&mut t, new, old, 60.0, &mut hits).unwrap();
        assert_eq!(t.scalar(r), 1.0);
        let new2 = t.input(Tensor::scalar(-3.0 + 2f64.ln()));
        let r2 = importance_ratio(&mut t, new2, old, 60.0, &mut hits).unwrap();
        assert!((t.scalar(r2) - 2.0).abs() < 1e-12);
        let g = t.backward(r2).unwrap();
        assert!(g.wrt(old).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
        assert!(g.wrt(new2).is_some());
        assert_eq!(hits, 0);
        let big = t.input(Tensor::scalar(500.0));
        let r3 = importance_ratio(&mut t, big, old, 60.0, &mut hits).unwrap();
        assert_eq!(hits, 1);
        assert_eq!(t.scalar(r3), 60f64.exp());
    }

    #[test]
    fn surrogate_branches() {
        let mut t = Tape::new();
        let ones: Vec<Var> = (0..3).map(|_| t.constant(Tensor::scalar(1.0))).collect();
        let adv = [0.5, -1.0, 2.0];
        let (l, clip) = align_loss(&mut t, &ones, &adv, 0.2).unwrap();
        assert!((t.scalar(l) + 1.5 / 3.0).abs() < 1e-15);
        assert_eq!(clip, 0.0);
        let ten = t.constant(Tensor::scalar(10.0));
        let (l, clip) = align_loss(&mut t, &[ten], &[2.0], 0.2).unwrap();
        assert!((t.scalar(l) + 1.2 * 2.0).abs() < 1e-12);
        assert_eq!(clip, 1.0);
        let (l, clip) = align_loss(&mut t, &[ten], &[-2.0], 0.2).unwrap();
        assert!((t.scalar(l) - 10.0 * 2.0).abs() < 1e-12);
        assert_eq!(clip, 0.0);
    }

    #[test]
    fn kl_zero_at_prior() {
        let mut t = Tape::new();
        let mu = t.input(Tensor::row(vec![0.3, -0.2]));
        let s = t.input(Tensor::row(vec![1.0, 1.0]));
        let kl = kl_to_prior(&mut t, mu, s, mu).unwrap();
        assert!(t.scalar(kl).abs() < 1e-15);
        let s2 = t.input(Tensor::row(vec![0.5, 2.0]));
        let kl = kl_to_prior(&mut t, mu, s2, mu).unwrap();
        let want: f64 = [0.5f64, 2.0].iter().map(|s| 0.5 * s * s - s.ln() - 0.5).sum();
        assert!((t.scalar(kl) - want).abs() < 1e-12);
    }
}
