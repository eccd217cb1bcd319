//! Causal self-attention sequence encoder with a tied item-embedding head.
//!
//! Inputs are left-padded with item 0, so the most recent real item always
//! sits in the last row. Position embeddings are indexed by distance from
//! that last row, which makes the real rows of the output independent of how
//! much padding precedes them.

use serde::{Deserialize, Serialize};

use crate::datasets::PAD;
use crate::error::{Error, Result};
use crate::nn::{one_hot, Attention, FeedForward, Norm};
use crate::numerics::{Init, ParamId, ParamStore, RandomSource, StreamRng, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 128,
            dropout: 0.1,
            max_len: 20,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("max_len and ffn_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub n_items: usize,
    /// `[n_items + 1, d]`, row 0 is padding. Shared by input and output.
    pub item_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: Norm,
}

/// Encoder output for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[len, d]`, padded rows included.
    pub h: Var,
    pub len: usize,
    pub n_real: usize,
}

impl Backbone {
    pub fn new(
        cfg: &BackboneConfig,
        n_items: usize,
        store: &mut ParamStore,
        src: &RandomSource,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_items < 1 {
            return Err(Error::invalid("empty item vocabulary"));
        }
        let d = cfg.d_model;
        let item_emb = store.add("backbone.item_emb", &[n_items + 1, d], Init::Normal(0.1), src);
        let pos_emb = store.add("backbone.pos_emb", &[cfg.max_len, d], Init::Normal(0.1), src);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("backbone.block{l}");
                Block {
                    ln1: Norm::new(store, &format!("{p}.ln1"), d, src),
                    attn: Attention::new(store, &format!("{p}.attn"), d, cfg.n_heads, src),
                    ln2: Norm::new(store, &format!("{p}.ln2"), d, src),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, src),
                }
            })
            .collect();
        let final_ln = Norm::new(store, "backbone.final_ln", d, src);
        Ok(Self {
            cfg: cfg.clone(),
            n_items,
            item_emb,
            pos_emb,
            blocks,
            final_ln,
        })
    }

    /// Encodes a left-padded sequence of at most `max_len` ids. Dropout is
    /// applied only when `rng` is given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        input: &[usize],
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Encoded> {
        let len = input.len();
        if len == 0 || len > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence length {len} outside 1..={}",
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = input.iter().find(|&&v| v > self.n_items) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab: self.n_items,
            });
        }
        let first = input.iter().position(|&v| v != PAD).ok_or(Error::EmptySequence)?;
        if input[first..].contains(&PAD) {
            return Err(Error::invalid("padding must precede all real items"));
        }
        let n_real = len - first;

        let e = tape.param(self.item_emb);
        let p = tape.param(self.pos_emb);
        let x = tape.gather_rows(e, input)?;
        let pos: Vec<usize> = (0..len).map(|j| len - 1 - j).collect();
        let pe = tape.gather_rows(p, &pos)?;
        let mut x = tape.add(x, pe)?;
        let drop = self.cfg.dropout;
        x = tape.dropout(x, drop, rng.as_deref_mut());

        // Causal + key-padding mask.
        let mut mask = vec![false; len * len];
        for i in first..len {
            for j in first..=i {
                mask[i * len + j] = true;
            }
        }
        for b in &self.blocks {
            let n = b.ln1.forward(tape, x)?;
            let a = b.attn.forward(tape, n, n, Some(&mask))?;
            let a = tape.dropout(a, drop, rng.as_deref_mut());
            x = tape.add(x, a)?;
            let n = b.ln2.forward(tape, x)?;
            let f = b.ffn.forward(tape, n, drop, rng.as_deref_mut())?;
            let f = tape.dropout(f, drop, rng.as_deref_mut());
            x = tape.add(x, f)?;
        }
        let h = self.final_ln.forward(tape, x)?;
        Ok(Encoded { h, len, n_real })
    }

    /// Last row of `enc.h` (the most recent real item).
    pub fn last_hidden(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        tape.slice(enc.h, 0, enc.len - 1, 1)
    }

    /// The real rows of `enc.h`.
    pub fn real_rows(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        if enc.n_real == enc.len {
            return Ok(enc.h);
        }
        tape.slice(enc.h, 0, enc.len - enc.n_real, enc.n_real)
    }

    /// `z · E_v` for every real item, `[n, n_items]`; column `j` is item `j + 1`.
    pub fn score_items(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let e = tape.param(self.item_emb);
        let real = tape.slice(e, 0, 1, self.n_items)?;
        tape.matmul_nt(z, real)
    }

    /// Embedding row of `item` on the tape.
    pub fn item_embedding(&self, tape: &mut Tape, item: usize) -> Result<Var> {
        let e = tape.param(self.item_emb);
        tape.gather_rows(e, &[item])
    }

    /// Value-only scores of a plain vector against the current table.
    pub fn score_values(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        let e = store.get(self.item_emb);
        let d = self.cfg.d_model;
        (1..=self.n_items)
            .map(|v| {
                e.data[v * d..(v + 1) * d]
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Mean next-item cross-entropy over the rows of `logits` whose target is
    /// given.
    pub fn rec_loss_rows(
        &self,
        tape: &mut Tape,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let n = targets.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            return Err(Error::invalid("rec_loss: no targets"));
        }
        let mut cols = Vec::with_capacity(targets.len());
        for t in targets {
            cols.push(match *t {
                Some(PAD) => return Err(Error::invalid("rec_loss: target is the padding id")),
                Some(v) if v > self.n_items => {
                    return Err(Error::OutOfVocab {
                        id: v,
                        vocab: self.n_items,
                    })
                }
                Some(v) => Some(v - 1),
                None => None,
            });
        }
        let ls = tape.log_softmax(logits);
        let oh = tape.constant(one_hot(&cols, self.n_items));
        let picked = tape.mul(ls, oh)?;
        let s = tape.sum(picked);
        Ok(tape.scale(s, -1.0 / n as f64))
    }

    /// `-log softmax(score_items(z))[target]` for a single `[1, d]` state.
    pub fn rec_loss(&self, tape: &mut Tape, z: Var, target: usize) -> Result<Var> {
        let logits = self.score_items(tape, z)?;
        self.rec_loss_rows(tape, logits, &[Some(target)])
    }
}

/// Pessimistic 1-based rank of `target` (an item id, so column `target - 1`)
/// among `scores`: ties with other items count against the target.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let st = scores[target - 1];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target - 1 && s >= st)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Purpose, Tensor};
    use proptest::prelude::*;

    fn tiny(layers: usize) -> (ParamStore, Backbone) {
        let cfg = BackboneConfig {
            d_model: 8,
            n_layers: layers,
            n_heads: 2,
            ffn_dim: 12,
            dropout: 0.0,
            max_len: 6,
        };
        let mut store = ParamStore::new();
        let bb = Backbone::new(&cfg, 9, &mut store, &RandomSource::new(5)).unwrap();
        (store, bb)
    }

    fn encode_vals(store: &ParamStore, bb: &Backbone, input: &[usize]) -> Vec<f64> {
        let mut t = Tape::with_params(store);
        let enc = bb.encode(&mut t, input, None).unwrap();
        t.data(enc.h).to_vec()
    }

    #[test]
    fn causal_for_one_and_two_layers() {
        for layers in [1, 2] {
            let (store, bb) = tiny(layers);
            let a = encode_vals(&store, &bb, &[0, 1, 2, 3, 4, 5]);
            let b = encode_vals(&store, &bb, &[0, 1, 2, 3, 9, 7]);
            // rows up to position 3 only see positions <= 3
            assert_eq!(a[..4 * 8], b[..4 * 8]);
            assert_ne!(a[4 * 8..], b[4 * 8..]);
        }
    }

    #[test]
    fn padding_is_invisible() {
        let (store, bb) = tiny(2);
        let padded = encode_vals(&store, &bb, &[0, 0, 0, 4, 2, 7]);
        let bare = encode_vals(&store, &bb, &[4, 2, 7]);
        assert_eq!(padded[3 * 8..], bare[..]);
        // Changing the padding row of the table changes nothing either.
        let mut s2 = store.clone();
        s2.get_mut(bb.item_emb).data[..8].iter_mut().for_each(|v| *v = 123.0);
        assert_eq!(encode_vals(&s2, &bb, &[0, 0, 0, 4, 2, 7])[3 * 8..], padded[3 * 8..]);
    }

    #[test]
    fn all_padding_and_oov_rejected() {
        let (store, bb) = tiny(1);
        let mut t = Tape::with_params(&store);
        assert!(matches!(bb.encode(&mut t, &[0, 0, 0], None), Err(Error::EmptySequence)));
        assert!(matches!(
            bb.encode(&mut t, &[0, 10], None),
            Err(Error::OutOfVocab { id: 10, .. })
        ));
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let (store, bb) = tiny(2);
        assert_eq!(encode_vals(&store, &bb, &[1, 2, 3]), encode_vals(&store, &bb, &[1, 2, 3]));
    }

    #[test]
    fn tied_table_is_one_parameter() {
        let (store, bb) = tiny(1);
        let mut t = Tape::with_params(&store);
        let enc = bb.encode(&mut t, &[1, 2], None).unwrap();
        let z = bb.last_hidden(&mut t, &enc).unwrap();
        let logits = bb.score_items(&mut t, z).unwrap();
        let l = bb.rec_loss_rows(&mut t, logits, &[Some(3)]).unwrap();
        let g = t.backward(l).unwrap();
        let ids: Vec<_> = g.param_grads().map(|(id, _)| id).collect();
        assert_eq!(ids.iter().filter(|&&id| id == bb.item_emb).count(), 1);
        // Audit: exactly one [V+1, d] table, no separate output projection.
        let tables = store
            .iter()
            .filter(|(_, _, t)| t.shape == vec![bb.n_items + 1, 8])
            .count();
        assert_eq!(tables, 1);
        assert!(store.iter().all(|(_, n, _)| !n.contains("out_proj")));
    }

    #[test]
    fn score_hand_dot_products() {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            d_model: 2,
            n_heads: 1,
            n_layers: 0,
            ffn_dim: 2,
            dropout: 0.0,
            max_len: 2,
        };
        let bb = Backbone::new(&cfg, 3, &mut store, &RandomSource::new(0)).unwrap();
        store.get_mut(bb.item_emb).data = vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let mut t = Tape::with_params(&store);
        let z = t.constant(Tensor::row(vec![0.5, -1.0]));
        let s = bb.score_items(&mut t, z).unwrap();
        assert_eq!(t.data(s), &[0.5 - 2.0, -0.5 - 0.5, 1.5 + 2.0]);
        assert_eq!(bb.score_values(&store, &[0.5, -1.0]), t.data(s).to_vec());
        let zero = t.constant(Tensor::row(vec![0.0, 0.0]));
        let s0 = bb.score_items(&mut t, zero).unwrap();
        assert!(t.data(s0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_similarity_argmax() {
        let (mut store, bb) = tiny(1);
        let e = store.get_mut(bb.item_emb);
        for row in e.data.chunks_mut(8) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        for v in 1..=9 {
            let z = store.get(bb.item_emb).row_slice(v).to_vec();
            let s = bb.score_values(&store, &z);
            assert_eq!(rank_of_target(&s, v), 1);
        }
    }

    #[test]
    fn rec_loss_cases() {
        let (store, bb) = tiny(1);
        let mut t = Tape::with_params(&store);
        // two equal logits -> ln 2 (restrict to a 2-column problem)
        let logits = t.constant(Tensor::row(vec![0.3, 0.3]));
        let bb2 = Backbone { n_items: 2, ..bb.clone() };
        let l = bb2.rec_loss_rows(&mut t, logits, &[Some(1)]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
        // large gap toward target -> ~0
        let logits = t.constant(Tensor::row(vec![0.0, 800.0]));
        let l = bb2.rec_loss_rows(&mut t, logits, &[Some(2)]).unwrap();
        assert!(t.scalar(l).abs() < 1e-300);
        // 4-item brute force
        let x = [0.1, -2.0, 1.5, 0.7];
        let bb4 = Backbone { n_items: 4, ..bb.clone() };
        let logits = t.constant(Tensor::row(x.to_vec()));
        let l = bb4.rec_loss_rows(&mut t, logits, &[Some(3)]).unwrap();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        assert!((t.scalar(l) - (-(x[2].exp() / z).ln())).abs() < 1e-12);
        assert!(bb4.rec_loss_rows(&mut t, logits, &[Some(PAD)]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (store, bb) = tiny(2);
        let mut t = Tape::with_params(&store);
        let enc = bb.encode(&mut t, &[3, 1, 4], None).unwrap();
        let z = bb.last_hidden(&mut t, &enc).unwrap();
        let s = bb.score_items(&mut t, z).unwrap();
        let p = t.softmax(s, None).unwrap();
        assert_eq!(t.value(p).numel(), 9);
        assert!((t.data(p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_gradient_check() {
        let (store, bb) = tiny(2);
        let loss = |s: &ParamStore, rec: bool| {
            let mut t = Tape::with_params(s);
            let enc = bb.encode(&mut t, &[0, 2, 5, 1], None)?;
            let h = bb.real_rows(&mut t, &enc)?;
            let logits = bb.score_items(&mut t, h)?;
            let l = bb.rec_loss_rows(&mut t, logits, &[Some(5), None, Some(3)])?;
            let mut acc = vec![None; s.len()];
            if rec {
                t.backward(l)?.accumulate_into(&mut acc, 1.0);
            }
            Ok::<_, Error>((t.scalar(l), acc))
        };
        let (_, g) = loss(&store, true).unwrap();
        let rep = grad_check_params(&store, &g, |s| Ok(loss(s, false)?.0), 1e-5, 3).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        // padding row never receives gradient
        assert!(g[bb.item_emb.0].as_ref().unwrap()[..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_ties_are_pessimistic() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 2), 1);
        assert_eq!(rank_of_target(&[0.9, 0.9, 0.3], 2), 2);
        assert_eq!(rank_of_target(&[0.9, 0.9, 0.9], 1), 3);
    }

    proptest! {
        #[test]
        fn rank_matches_sort(scores in prop::collection::vec(-3i32..3, 50), t in 1usize..=50) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.5).collect();
            // Sort oracle: order by score desc, then put the target last among ties.
            let mut idx: Vec<usize> = (0..50).collect();
            idx.sort_by(|&a, &b| {
                s[b].partial_cmp(&s[a]).unwrap().then(((a == t - 1) as u8).cmp(&((b == t - 1) as u8)))
            });
            let want = idx.iter().position(|&i| i == t - 1).unwrap() + 1;
            prop_assert_eq!(rank_of_target(&s, t), want);
        }
    }

    #[test]
    fn dropout_reproducible_by_stream() {
        let (store, mut bb) = tiny(1);
        bb.cfg.dropout = 0.5;
        let run = |k: u64| {
            let mut t = Tape::with_params(&store);
            let mut r = RandomSource::new(1).stream(Purpose::Dropout, &[k]);
            let enc = bb.encode(&mut t, &[1, 2, 3], Some(&mut r)).unwrap();
            t.data(enc.h).to_vec()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
