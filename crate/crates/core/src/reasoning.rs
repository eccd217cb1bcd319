//! Latent thinking tokens and attention pooling into a condition vector.
//!
//! The trajectory starts from the encoder's last hidden state. Each further
//! token is produced by a small transformer decoder that self-attends over
//! the tokens so far, cross-attends to the real encoder rows, and applies a
//! feed-forward block; the decoder's last output row is the new token.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Encoded};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, Norm};
use crate::numerics::{Init, ParamId, ParamStore, RandomSource, StreamRng, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerMode {
    /// Self-attention + cross-attention + FFN blocks with residuals.
    Decoder,
    /// `tau_r = MLP(CrossAttn(tau_{r-1}, H))`, using the first block's weights.
    Pure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    /// Number of thinking tokens, including the initial one.
    pub steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub mode: ReasonerMode,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            dropout: 0.1,
            mode: ReasonerMode::Decoder,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Reasoner {
    pub cfg: ReasonerConfig,
    blocks: Vec<DecoderBlock>,
    final_ln: Norm,
    /// Learned pooling query, `[1, d]`.
    pub pool_query: ParamId,
}

/// Tokens `tau_1..tau_R` (each `[1, d]`), the pooled condition and the
/// pooling weights.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tokens: Vec<Var>,
    pub condition: Var,
    pub weights: Var,
}

impl Reasoner {
    pub fn new(
        cfg: &ReasonerConfig,
        d: usize,
        store: &mut ParamStore,
        src: &RandomSource,
    ) -> Result<Self> {
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::invalid(format!(
                "reasoner heads {} must divide d_model {d}",
                cfg.heads
            )));
        }
        if cfg.layers == 0 {
            return Err(Error::invalid("reasoner needs at least one layer"));
        }
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("reasoner.block{l}");
                DecoderBlock {
                    ln_self: Norm::new(store, &format!("{p}.ln_self"), d, src),
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), d, cfg.heads, src),
                    ln_cross: Norm::new(store, &format!("{p}.ln_cross"), d, src),
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), d, cfg.heads, src),
                    ln_ffn: Norm::new(store, &format!("{p}.ln_ffn"), d, src),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, src),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            final_ln: Norm::new(store, "reasoner.final_ln", d, src),
            pool_query: store.add("reasoner.pool_query", &[1, d], Init::Normal(0.1), src),
        })
    }

    /// Runs `steps` thinking steps. `steps` overrides the config so that
    /// ablations can shorten the chain without rebuilding the model.
    pub fn think(
        &self,
        tape: &mut Tape,
        backbone: &Backbone,
        enc: &Encoded,
        steps: usize,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Vec<Var>> {
        if steps == 0 {
            return Err(Error::invalid("reasoning needs at least one step"));
        }
        let first = backbone.last_hidden(tape, enc)?;
        let mut tokens = vec![first];
        if steps == 1 {
            return Ok(tokens);
        }
        let memory = backbone.real_rows(tape, enc)?;
        let drop = self.cfg.dropout;
        for _ in 1..steps {
            let next = match self.cfg.mode {
                ReasonerMode::Pure => {
                    let b = &self.blocks[0];
                    let prev = *tokens.last().expect("non-empty");
                    let a = b.cross_attn.forward(tape, prev, memory, None)?;
                    b.ffn.forward(tape, a, drop, rng.as_deref_mut())?
                }
                ReasonerMode::Decoder => {
                    let n = tokens.len();
                    let mut x = if n == 1 { tokens[0] } else { tape.concat(&tokens, 0)? };
                    let mut causal = vec![false; n * n];
                    for i in 0..n {
                        for j in 0..=i {
                            causal[i * n + j] = true;
                        }
                    }
                    for b in &self.blocks {
                        let h = b.ln_self.forward(tape, x)?;
                        let a = b.self_attn.forward(tape, h, h, Some(&causal))?;
                        let a = tape.dropout(a, drop, rng.as_deref_mut());
                        x = tape.add(x, a)?;
                        let h = b.ln_cross.forward(tape, x)?;
                        let a = b.cross_attn.forward(tape, h, memory, None)?;
                        let a = tape.dropout(a, drop, rng.as_deref_mut());
                        x = tape.add(x, a)?;
                        let h = b.ln_ffn.forward(tape, x)?;
                        let f = b.ffn.forward(tape, h, drop, rng.as_deref_mut())?;
                        let f = tape.dropout(f, drop, rng.as_deref_mut());
                        x = tape.add(x, f)?;
                    }
                    let last = if n == 1 { x } else { tape.slice(x, 0, n - 1, 1)? };
                    self.final_ln.forward(tape, last)?
                }
            };
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// Attention pooling with the learned query: `c = softmax(q T^T / sqrt d) T`.
    pub fn pool(&self, tape: &mut Tape, tokens: &[Var]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(Error::invalid("pooling needs at least one token"));
        }
        let t = if tokens.len() == 1 {
            tokens[0]
        } else {
            tape.concat(tokens, 0)?
        };
        let d = tape.value(t).cols();
        let q = tape.param(self.pool_query);
        let s = tape.matmul_nt(q, t)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let w = tape.softmax(s, None)?;
        let c = tape.matmul(w, t)?;
        Ok((c, w))
    }

    pub fn trajectory(
        &self,
        tape: &mut Tape,
        backbone: &Backbone,
        enc: &Encoded,
        steps: usize,
        rng: Option<&mut StreamRng>,
    ) -> Result<Trajectory> {
        let tokens = self.think(tape, backbone, enc, steps, rng)?;
        let (condition, weights) = self.pool(tape, &tokens)?;
        Ok(Trajectory {
            tokens,
            condition,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numerics::{gaussian_draw, grad_check_params, Purpose, Tensor};

    fn setup(mode: ReasonerMode) -> (ParamStore, Backbone, Reasoner) {
        let src = RandomSource::new(9);
        let mut store = ParamStore::new();
        let bcfg = BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
            max_len: 6,
        };
        let bb = Backbone::new(&bcfg, 7, &mut store, &src).unwrap();
        let rcfg = ReasonerConfig {
            steps: 3,
            layers: 2,
            heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
            mode,
        };
        let r = Reasoner::new(&rcfg, 8, &mut store, &src).unwrap();
        (store, bb, r)
    }

    #[test]
    fn first_token_is_last_hidden() {
        let (store, bb, r) = setup(ReasonerMode::Decoder);
        let mut t = Tape::with_params(&store);
        let enc = bb.encode(&mut t, &[0, 0, 3, 1, 4], None).unwrap();
        let toks = r.think(&mut t, &bb, &enc, 1, None).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(t.data(toks[0]), &t.data(enc.h)[4 * 8..]);
        let toks = r.think(&mut t, &bb, &enc, 3, None).unwrap();
        assert_eq!(toks.len(), 3);
        assert_eq!(t.data(toks[0]), &t.data(enc.h)[4 * 8..]);
        let stacked = t.concat(&toks, 0).unwrap();
        assert_eq!(t.shape(stacked), &[3, 8]);
        assert!(r.think(&mut t, &bb, &enc, 0, None).is_err());
    }

    #[test]
    fn padding_changes_nothing() {
        for mode in [ReasonerMode::Decoder, ReasonerMode::Pure] {
            let (store, bb, r) = setup(mode);
            let run = |input: &[usize]| {
                let mut t = Tape::with_params(&store);
                let enc = bb.encode(&mut t, input, None).unwrap();
                let tr = r.trajectory(&mut t, &bb, &enc, 3, None).unwrap();
                (t.data(tr.tokens[2]).to_vec(), t.data(tr.condition).to_vec())
            };
            assert_eq!(run(&[0, 0, 0, 5, 2, 6]), run(&[5, 2, 6]));
        }
    }

    #[test]
    fn pooling_is_convex() {
        let (store, _, r) = setup(ReasonerMode::Decoder);
        let mut rng = RandomSource::new(2).stream(Purpose::Misc, &[]);
        let mut t = Tape::with_params(&store);
        let toks: Vec<Var> = (0..3)
            .map(|_| t.constant(gaussian_draw(&mut rng, &[1, 8])))
            .collect();
        let (c, w) = r.pool(&mut t, &toks).unwrap();
        // Explicit oracle: softmax of q.tau / sqrt(8).
        let q = store.get(r.pool_query).data.clone();
        let logits: Vec<f64> = toks
            .iter()
            .map(|&v| t.data(v).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let want: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let got = t.data(w).to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a >= 0.0);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..8 {
            let manual: f64 = (0..3).map(|i| want[i] * t.data(toks[i])[j]).sum();
            assert!((t.data(c)[j] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_degenerate_cases() {
        let (store, _, r) = setup(ReasonerMode::Decoder);
        let mut t = Tape::with_params(&store);
        let tau = t.constant(Tensor::row(vec![0.3, -1.0, 2.0, 0.0, 1.0, 5.0, -2.0, 0.25]));
        let (c, w) = r.pool(&mut t, &[tau]).unwrap();
        assert_eq!(t.data(w), &[1.0]);
        assert_eq!(t.data(c), t.data(tau));
        let (c, _) = r.pool(&mut t, &[tau, tau, tau]).unwrap();
        for (a, b) in t.data(c).iter().zip(t.data(tau)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_reasoner_and_check() {
        let (store, bb, r) = setup(ReasonerMode::Decoder);
        let loss = |s: &ParamStore, rec: bool| {
            let mut t = Tape::with_params(s);
            let enc = bb.encode(&mut t, &[0, 1, 2, 3], None)?;
            let tr = r.trajectory(&mut t, &bb, &enc, 3, None)?;
            let l = bb.rec_loss(&mut t, tr.condition, 4)?;
            let mut acc = vec![None; s.len()];
            if rec {
                t.backward(l)?.accumulate_into(&mut acc, 1.0);
            }
            Ok::<_, Error>((t.scalar(l), acc))
        };
        let (_, g) = loss(&store, true).unwrap();
        let touched = store
            .iter()
            .filter(|(id, n, _)| {
                n.starts_with("reasoner.")
                    && g[id.0].as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0))
            })
            .count();
        assert!(touched > 10, "only {touched} reasoner tensors got gradient");
        let rep = grad_check_params(&store, &g, |s| Ok(loss(s, false)?.0), 1e-5, 7).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}
