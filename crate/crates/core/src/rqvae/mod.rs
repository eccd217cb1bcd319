//! Residual-quantization tokenizer: item embeddings in, hierarchical
//! semantic ids out.

mod io;

pub use io::{read_embeddings, read_embeddings_binary, read_embeddings_text, write_embeddings_binary, EMB_MAGIC, EMB_VERSION};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamId, ParamStore, Purpose, RandomSource, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqvaeConfig {
    /// Codewords per level; its length is the number of levels.
    pub levels: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub commitment: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RqvaeConfig {
    fn default() -> Self {
        Self {
            levels: vec![256; 4],
            latent_dim: 32,
            hidden: 128,
            commitment: 0.25,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 1024,
            epochs: 200,
            seed: 7,
        }
    }
}

impl RqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|&k| k < 2) {
            return Err(Error::invalid("every level needs at least 2 codewords"));
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("latent_dim, hidden and batch_size must be positive"));
        }
        if !(self.commitment >= 0.0) || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("commitment, lr and weight_decay must be non-negative (lr positive)"));
        }
        Ok(())
    }
}

/// Result of quantizing one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    pub y_hat: Vec<f64>,
    /// `residuals[m]` is the input to level `m`; the last entry is what is
    /// left after every level.
    pub residuals: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy nearest-codeword quantization level by level (smallest index
/// wins ties). `books[m]` is a `[K_m, d]` matrix.
pub fn residual_quantize(y: &[f64], books: &[Tensor]) -> Result<Quantized> {
    let d = y.len();
    let mut rho = y.to_vec();
    let mut y_hat = vec![0.0; d];
    let mut codes = Vec::with_capacity(books.len());
    let mut residuals = Vec::with_capacity(books.len() + 1);
    for (m, b) in books.iter().enumerate() {
        if b.cols() != d {
            return Err(Error::Shape {
                op: "residual_quantize",
                lhs: vec![d],
                rhs: b.shape.clone(),
            });
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..b.rows() {
            let dist = sq_dist(&rho, b.row_slice(k));
            if dist < best_d {
                best = k;
                best_d = dist;
            }
        }
        if !best_d.is_finite() {
            return Err(Error::NonFinite(format!("quantizer level {m}")));
        }
        let q = b.row_slice(best);
        residuals.push(rho.clone());
        for j in 0..d {
            y_hat[j] += q[j];
            rho[j] -= q[j];
        }
        codes.push(best);
    }
    residuals.push(rho);
    Ok(Quantized {
        codes,
        y_hat,
        residuals,
    })
}

/// Encoder, decoder and codebooks, with values in `store`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: RqvaeConfig,
    pub d_in: usize,
    enc: [Linear; 2],
    dec: [Linear; 2],
    pub books: Vec<ParamId>,
    pub store: ParamStore,
}

/// Loss parts, batch means of per-row squared norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
}

/// Per-row squared norm, averaged over rows.
fn mean_sq(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.square(x);
    let s = tape.sum_axis(s, 1)?;
    Ok(tape.mean(s))
}

/// Quantization terms for a latent batch `y` (`[B, d]`) against codebook
/// variables. Returns `(codebook term, commitment term, straight-through
/// ŷ, codes)`; the commitment term is already scaled by `commitment`.
pub fn quant_terms(
    tape: &mut Tape,
    y: Var,
    books: &[Var],
    commitment: f64,
) -> Result<(Var, Var, Var, Vec<Vec<usize>>)> {
    let (b, d) = (tape.value(y).rows(), tape.value(y).cols());
    let book_vals: Vec<Tensor> = books.iter().map(|&v| tape.value(v).clone()).collect();
    let yv = tape.data(y).to_vec();
    let mut codes = Vec::with_capacity(b);
    let mut y_hat = Vec::with_capacity(b * d);
    let mut resid = vec![Vec::with_capacity(b * d); books.len()];
    for r in 0..b {
        let q = residual_quantize(&yv[r * d..(r + 1) * d], &book_vals)?;
        for (m, rho) in q.residuals.iter().take(books.len()).enumerate() {
            resid[m].extend_from_slice(rho);
        }
        y_hat.extend_from_slice(&q.y_hat);
        codes.push(q.codes);
    }
    let mut cb = None;
    let mut cm = None;
    // Residual seen by the encoder: y minus detached earlier codewords.
    let mut rho_enc = y;
    for (m, &book) in books.iter().enumerate() {
        let idx: Vec<usize> = codes.iter().map(|c| c[m]).collect();
        let q = tape.gather_rows(book, &idx)?;
        let rho_sg = tape.constant(Tensor::matrix(b, d, resid[m].clone())?);
        let diff = tape.sub(rho_sg, q)?;
        let term = mean_sq(tape, diff)?;
        cb = Some(match cb {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        let q_sg = tape.stop_gradient(q);
        let diff = tape.sub(rho_enc, q_sg)?;
        let term = mean_sq(tape, diff)?;
        cm = Some(match cm {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        rho_enc = tape.sub(rho_enc, q_sg)?;
    }
    let cb = cb.ok_or_else(|| Error::invalid("no codebooks"))?;
    let cm = cm.expect("same length as cb");
    let cm = tape.scale(cm, commitment);
    // Straight-through: value ŷ, gradient of y.
    let shift: Vec<f64> = y_hat.iter().zip(&yv).map(|(h, y)| h - y).collect();
    let shift = tape.constant(Tensor::matrix(b, d, shift)?);
    let y_st = tape.add(y, shift)?;
    Ok((cb, cm, y_st, codes))
}

/// Per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokEpoch {
    pub epoch: usize,
    pub recon_mse: f64,
    pub codebook: f64,
    pub commit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokReport {
    pub config: RqvaeConfig,
    pub n_items: usize,
    pub d_in: usize,
    /// Reconstruction MSE (per element) before any update.
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Fraction of codewords used by at least one item, per level.
    pub utilization: Vec<f64>,
    pub collisions: usize,
    pub epochs: Vec<TokEpoch>,
}

impl Tokenizer {
    pub fn new(cfg: &RqvaeConfig, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        if d_in == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let src = RandomSource::new(cfg.seed);
        let mut store = ParamStore::new();
        let (h, de) = (cfg.hidden, cfg.latent_dim);
        let enc = [
            Linear::new(&mut store, "enc.l1", d_in, h, true, &src),
            Linear::new(&mut store, "enc.l2", h, de, true, &src),
        ];
        let dec = [
            Linear::new(&mut store, "dec.l1", de, h, true, &src),
            Linear::new(&mut store, "dec.l2", h, d_in, true, &src),
        ];
        let books = cfg
            .levels
            .iter()
            .enumerate()
            .map(|(m, &k)| store.insert(&format!("codebook.{m}"), Tensor::zeros(&[k, de])))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            d_in,
            enc,
            dec,
            books,
            store,
        })
    }

    pub fn encode(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let h = self.enc[0].forward(tape, v)?;
        let h = tape.silu(h);
        self.enc[1].forward(tape, h)
    }

    pub fn decode(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let h = self.dec[0].forward(tape, y)?;
        let h = tape.silu(h);
        self.dec[1].forward(tape, h)
    }

    fn book_tensors(&self) -> Vec<Tensor> {
        self.books.iter().map(|&b| self.store.get(b).clone()).collect()
    }

    /// Full objective on a `[B, d_in]` batch.
    pub fn loss(&self, tape: &mut Tape, v: Var) -> Result<TokLoss> {
        let y = self.encode(tape, v)?;
        let books: Vec<Var> = self.books.iter().map(|&b| tape.param(b)).collect();
        let (codebook, commit, y_st, _) = quant_terms(tape, y, &books, self.cfg.commitment)?;
        let v_hat = self.decode(tape, y_st)?;
        let diff = tape.sub(v_hat, v)?;
        let recon = mean_sq(tape, diff)?;
        let t = tape.add(recon, codebook)?;
        let total = tape.add(t, commit)?;
        Ok(TokLoss {
            total,
            recon,
            codebook,
            commit,
        })
    }

    fn latents(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.store).no_grad();
        let v = tape.input(batch_tensor(rows, self.d_in)?);
        let y = self.encode(&mut tape, v)?;
        let t = tape.value(y);
        Ok((0..rows.len()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    /// Seeds each level with distinct residuals of `rows`.
    fn init_books(&mut self, rows: &[Vec<f64>], rng_src: &RandomSource) -> Result<()> {
        let mut resid = self.latents(rows)?;
        for m in 0..self.books.len() {
            let k = self.cfg.levels[m];
            if resid.len() < k {
                return Err(Error::invalid(format!(
                    "codebook level {m} needs {k} rows to initialize, got {}",
                    resid.len()
                )));
            }
            let mut idx: Vec<usize> = (0..resid.len()).collect();
            rng_src.stream(Purpose::Codebook, &[m as u64]).shuffle(&mut idx);
            let mut data = Vec::with_capacity(k * self.cfg.latent_dim);
            for &i in &idx[..k] {
                data.extend_from_slice(&resid[i]);
            }
            let book = Tensor::matrix(k, self.cfg.latent_dim, data)?;
            for r in resid.iter_mut() {
                let q = residual_quantize(r, std::slice::from_ref(&book))?;
                *r = q.residuals[1].clone();
            }
            self.store.get_mut(self.books[m]).data = book.data;
        }
        Ok(())
    }

    /// Semantic ids of every row, in row order.
    pub fn codes(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
        let books = self.book_tensors();
        self.latents(rows)?
            .iter()
            .map(|y| residual_quantize(y, &books).map(|q| q.codes))
            .collect()
    }

    /// Per-element reconstruction MSE through the quantizer.
    pub fn recon_mse(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::with_params(&self.store).no_grad();
        let v = tape.input(batch_tensor(rows, self.d_in)?);
        let l = self.loss(&mut tape, v)?;
        Ok(tape.scalar(l.recon) / self.d_in as f64)
    }
}

fn batch_tensor(rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape {
                op: "embedding batch",
                lhs: vec![d],
                rhs: vec![r.len()],
            });
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), d, data)
}

/// Fits the tokenizer to `rows` (one embedding per item) and returns it with
/// a training report.
pub fn train_tokenizer(rows: &[Vec<f64>], cfg: &RqvaeConfig) -> Result<(Tokenizer, TokReport)> {
    cfg.validate()?;
    let d_in = rows.first().map(|r| r.len()).ok_or_else(|| Error::invalid("no embedding rows"))?;
    if rows.len() < cfg.levels[0] {
        return Err(Error::invalid(format!(
            "{} embedding rows, but the first codebook has {} codewords",
            rows.len(),
            cfg.levels[0]
        )));
    }
    let mut tok = Tokenizer::new(cfg, d_in)?;
    let src = RandomSource::new(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    src.stream(Purpose::Shuffle, &[0]).shuffle(&mut order);
    let first: Vec<Vec<f64>> = order[..cfg.batch_size.min(rows.len())].iter().map(|&i| rows[i].clone()).collect();
    tok.init_books(&first, &src)?;
    let initial_mse = tok.recon_mse(rows)?;

    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &tok.store);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        src.stream(Purpose::Shuffle, &[epoch as u64]).shuffle(&mut order);
        let (mut rec, mut cb, mut cm, mut n) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let grads = {
                let mut tape = Tape::with_params(&tok.store);
                let v = tape.input(batch_tensor(&batch, d_in)?);
                let l = tok.loss(&mut tape, v)?;
                let w = chunk.len() as f64;
                rec += w * tape.scalar(l.recon);
                cb += w * tape.scalar(l.codebook);
                cm += w * tape.scalar(l.commit);
                n += w;
                let g = tape.backward(l.total)?;
                let mut acc = vec![None; tok.store.len()];
                g.accumulate_into(&mut acc, 1.0);
                acc
            };
            adam_step(&mut tok.store, &grads, &mut adam)?;
        }
        epochs.push(TokEpoch {
            epoch: epoch + 1,
            recon_mse: rec / n / d_in as f64,
            codebook: cb / n,
            commit: cm / n,
        });
    }
    let final_mse = tok.recon_mse(rows)?;
    let codes = tok.codes(rows)?;
    let utilization = cfg
        .levels
        .iter()
        .enumerate()
        .map(|(m, &k)| {
            let mut used = vec![false; k];
            codes.iter().for_each(|c| used[c[m]] = true);
            used.iter().filter(|&&u| u).count() as f64 / k as f64
        })
        .collect();
    let table = sid_table(&(1..=rows.len() as u64).collect::<Vec<_>>(), &codes);
    let collisions = table.rows.iter().filter(|r| r.suffix > 0).count();
    let report = TokReport {
        config: cfg.clone(),
        n_items: rows.len(),
        d_in,
        initial_mse,
        final_mse,
        utilization,
        collisions,
        epochs,
    };
    Ok((tok, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidRow {
    pub item_id: u64,
    pub codes: Vec<usize>,
    pub suffix: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidTable {
    pub rows: Vec<SidRow>,
}

impl SidTable {
    /// `item_id<TAB>j_1,...,j_M,suffix` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let codes: Vec<String> = r.codes.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}\t{},{}", r.item_id, codes.join(","), r.suffix);
        }
        s
    }
}

/// Gives items that share a code sequence suffixes `0, 1, ...` in ascending
/// item-id order; unique sequences get 0.
pub fn disambiguate(table: &SidTable) -> SidTable {
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.sort_by_key(|&i| table.rows[i].item_id);
    let mut seen: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut out = table.clone();
    for i in order {
        let n = seen.entry(table.rows[i].codes.as_slice()).or_insert(0);
        out.rows[i].suffix = *n;
        *n += 1;
    }
    out
}

/// Disambiguated table for `item_ids[i]` ↦ `codes[i]`.
pub fn sid_table(item_ids: &[u64], codes: &[Vec<usize>]) -> SidTable {
    let t = SidTable {
        rows: item_ids
            .iter()
            .zip(codes)
            .map(|(&item_id, c)| SidRow {
                item_id,
                codes: c.clone(),
                suffix: 0,
            })
            .collect(),
    };
    disambiguate(&t)
}
