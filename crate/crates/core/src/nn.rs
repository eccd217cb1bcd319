//! Small building blocks shared by the encoder, reasoner and tokenizer.

use crate::error::Result;
use crate::numerics::{Init, ParamId, ParamStore, RandomSource, StreamRng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        src: &RandomSource,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[d_in, d_out], Init::Glorot, src);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[d_out], Init::Zeros, src));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, src: &RandomSource) -> Self {
        Self {
            g: store.add(&format!("{name}.g"), &[d], Init::Ones, src),
            b: store.add(&format!("{name}.b"), &[d], Init::Zeros, src),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(self.g);
        let b = tape.param(self.b);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Multi-head scaled dot-product attention without biases.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        src: &RandomSource,
    ) -> Self {
        assert!(heads >= 1 && d % heads == 0, "d_model {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, src),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, src),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, src),
            o: Linear::new(store, &format!("{name}.o"), d, d, false, src),
            heads,
        }
    }

    /// `xq: [n, d]` attends over `xkv: [m, d]`; `mask[i * m + j]` keeps key
    /// `j` for query `i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        xq: Var,
        xkv: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = tape.value(xq).cols();
        let dh = d / self.heads;
        let q = self.q.forward(tape, xq)?;
        let k = self.k.forward(tape, xkv)?;
        let v = self.v.forward(tape, xkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, dh)?,
                    tape.slice(k, 1, h * dh, dh)?,
                    tape.slice(v, 1, h * dh, dh)?,
                )
            };
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax(s, mask)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        self.o.forward(tape, cat)
    }
}

/// Two-layer position-wise feed-forward with SiLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        src: &RandomSource,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, hidden, true, src),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d, true, src),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: f64,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.silu(h);
        let h = tape.dropout(h, dropout, rng);
        self.l2.forward(tape, h)
    }
}

/// Constant `[rows, cols]` one-hot matrix with `idx[r]` set in row `r`;
/// `None` rows stay zero.
pub fn one_hot(idx: &[Option<usize>], cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[idx.len(), cols]);
    for (r, i) in idx.iter().enumerate() {
        if let Some(i) = i {
            t.data[r * cols + i] = 1.0;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_params;

    #[test]
    fn attention_rows_ignore_masked_keys() {
        let src = RandomSource::new(1);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 4, 2, &src);
        let mut rng = src.stream(crate::numerics::Purpose::Misc, &[]);
        let x = crate::numerics::gaussian_draw(&mut rng, &[3, 4]);
        let mut y = x.clone();
        // Perturb key row 0, which query rows never see.
        y.data[..4].iter_mut().for_each(|v| *v += 5.0);
        let mask = [false, true, true, false, true, true, false, true, true];
        let run = |inp: &Tensor| {
            let mut t = Tape::with_params(&store);
            let q = t.constant(x.clone());
            let kv = t.constant(inp.clone());
            let o = att.forward(&mut t, q, kv, Some(&mask)).unwrap();
            t.data(o).to_vec()
        };
        assert_eq!(run(&x), run(&y));
    }

    #[test]
    fn block_gradients_check() {
        let src = RandomSource::new(4);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 4, 2, &src);
        let ff = FeedForward::new(&mut store, "f", 4, 6, &src);
        let norm = Norm::new(&mut store, "n", 4, &src);
        let x = crate::numerics::gaussian_draw(&mut src.stream(crate::numerics::Purpose::Misc, &[]), &[3, 4]);
        let mask = [true, false, false, true, true, false, true, true, true];
        let loss = |store: &ParamStore, record: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
            let mut t = Tape::with_params(store);
            let xv = t.constant(x.clone());
            let n = norm.forward(&mut t, xv)?;
            let a = att.forward(&mut t, n, n, Some(&mask))?;
            let f = ff.forward(&mut t, a, 0.0, None)?;
            let s = t.square(f);
            let s = t.tanh(s);
            let l = t.sum(s);
            let mut acc = vec![None; store.len()];
            if record {
                t.backward(l)?.accumulate_into(&mut acc, 1.0);
            }
            Ok((t.scalar(l), acc))
        };
        let (_, g) = loss(&store, true).unwrap();
        let rep = grad_check_params(&store, &g, |s| Ok(loss(s, false)?.0), 1e-5, 1).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }
}
