//! Synthetic logs with planted, optionally multimodal, next-item structure.
//!
//! Every user follows one of `n_intents` latent intents. Each intent owns a
//! Markov transition over items; from a given state the next item is either
//! one dominant successor or, with probability `p_multi`, one of `modes`
//! equally likely successors. The leftover `1 - mode_mass` is spread evenly
//! over all items.

use serde::{Deserialize, Serialize};

use super::split::{leave_one_out_split, Corpus, DatasetSplit, InteractionSequence};
use crate::error::{Error, Result};
use crate::numerics::{Purpose, RandomSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_intents: usize,
    /// Fraction of states whose successor distribution is multimodal.
    pub p_multi: f64,
    /// Number of equal-mass successors at a multimodal state.
    pub modes: usize,
    /// Probability mass carried by the planted successor(s).
    pub mode_mass: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Explicit `[intent][from][to]` transition rows over items `1..=n_items`
    /// (index 0 = item 1). Replaces the generated structure when set.
    pub transitions: Option<Vec<Vec<Vec<f64>>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 200,
            n_intents: 4,
            p_multi: 0.5,
            modes: 2,
            mode_mass: 0.9,
            min_len: 8,
            max_len: 20,
            transitions: None,
        }
    }
}

/// A generated corpus, its split, and the planted ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Corpus,
    pub split: DatasetSplit,
    /// Intent of each user (same order as `corpus.sequences`).
    pub intents: Vec<usize>,
    /// `modes[k][v - 1]`: planted successors of item `v` under intent `k`.
    pub modes: Vec<Vec<Vec<usize>>>,
    /// `transitions[k][v - 1]`: successor distribution over items `1..=n`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl SynthData {
    /// The Bayes-optimal next item given the intent and current item
    /// (smallest id on ties).
    pub fn oracle_next(&self, intent: usize, current: usize) -> usize {
        let row = &self.transitions[intent][current - 1];
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best + 1
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_items < 2 {
        return Err(Error::invalid(format!(
            "synthetic vocabulary needs at least 2 items, got {}",
            cfg.n_items
        )));
    }
    if cfg.n_intents == 0 || cfg.n_users == 0 {
        return Err(Error::invalid("n_users and n_intents must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.p_multi) || !(0.0..=1.0).contains(&cfg.mode_mass) {
        return Err(Error::invalid("p_multi and mode_mass must lie in [0, 1]"));
    }
    if cfg.modes < 2 || cfg.modes > cfg.n_items {
        return Err(Error::invalid(format!(
            "modes must be in 2..={}, got {}",
            cfg.n_items, cfg.modes
        )));
    }
    if cfg.min_len < 3 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("need 3 <= min_len <= max_len"));
    }
    Ok(())
}

fn check_rows(t: &[Vec<Vec<f64>>], n_intents: usize, n: usize) -> Result<()> {
    if t.len() != n_intents {
        return Err(Error::invalid(format!(
            "expected {n_intents} transition matrices, got {}",
            t.len()
        )));
    }
    for (k, m) in t.iter().enumerate() {
        if m.len() != n {
            return Err(Error::invalid(format!("intent {k}: expected {n} rows")));
        }
        for (i, row) in m.iter().enumerate() {
            if row.len() != n || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!(
                    "intent {k} row {i}: need {n} non-negative entries"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "intent {k} row {i}: probabilities sum to {s}, not 1"
                )));
            }
        }
    }
    Ok(())
}

fn planted(cfg: &SynthConfig, src: &RandomSource) -> (Vec<Vec<Vec<usize>>>, Vec<Vec<Vec<f64>>>) {
    let n = cfg.n_items;
    let floor = (1.0 - cfg.mode_mass) / n as f64;
    let mut modes = Vec::with_capacity(cfg.n_intents);
    let mut trans = Vec::with_capacity(cfg.n_intents);
    for k in 0..cfg.n_intents {
        let mut rng = src.stream(Purpose::Synth, &[0, k as u64]);
        let mut mk = Vec::with_capacity(n);
        let mut tk = Vec::with_capacity(n);
        for _ in 0..n {
            let m = if rng.uniform() < cfg.p_multi { cfg.modes } else { 1 };
            let mut pool: Vec<usize> = (1..=n).collect();
            rng.shuffle(&mut pool);
            let mut succ = pool[..m].to_vec();
            succ.sort_unstable();
            let mut row = vec![floor; n];
            for &v in &succ {
                row[v - 1] += cfg.mode_mass / m as f64;
            }
            mk.push(succ);
            tk.push(row);
        }
        modes.push(mk);
        trans.push(tk);
    }
    (modes, trans)
}

fn modes_of(trans: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<usize>>> {
    // With explicit rows the planted successors are the arg-max set.
    trans
        .iter()
        .map(|m| {
            m.iter()
                .map(|row| {
                    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (0..row.len())
                        .filter(|&j| (row[j] - top).abs() <= 1e-12)
                        .map(|j| j + 1)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j + 1;
        }
    }
    // Round-off at the top end: last item with positive mass.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
}

/// Draws a synthetic corpus and splits it with `split_len` as the model's
/// input window.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, split_len: usize) -> Result<SynthData> {
    validate(cfg)?;
    let src = RandomSource::new(seed);
    let (modes, transitions) = match &cfg.transitions {
        Some(t) => {
            check_rows(t, cfg.n_intents, cfg.n_items)?;
            (modes_of(t), t.clone())
        }
        None => planted(cfg, &src),
    };
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut intents = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = src.stream(Purpose::Synth, &[1, u as u64]);
        let k = rng.below(cfg.n_intents);
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let mut items = Vec::with_capacity(len);
        let mut cur = 1 + rng.below(cfg.n_items);
        items.push(cur);
        while items.len() < len {
            cur = sample_row(&transitions[k][cur - 1], rng.uniform());
            items.push(cur);
        }
        intents.push(k);
        sequences.push(InteractionSequence {
            user_id: u as u64,
            items,
        });
    }
    let corpus = Corpus {
        sequences,
        item_ids: (1..=cfg.n_items as u64).collect(),
    };
    let split = leave_one_out_split(&corpus, split_len)?;
    Ok(SynthData {
        corpus,
        split,
        intents,
        modes,
        transitions,
    })
}
