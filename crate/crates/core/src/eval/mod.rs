//! Full-ranking evaluation, sparsity-group breakdowns and per-stage
//! trajectory diagnostics.

mod groups;
mod trajectory;

pub use groups::{item_groups, sparsity_groups, user_groups, GroupRow, GroupTable};
pub use trajectory::{
    cosine, stage_names, trajectory_report, write_similarity_csv, write_stage_ranks_csv,
    TrajectoryReport,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::rank_of_target;
use crate::datasets::{DatasetSplit, Example, PAD};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::numerics::par::map_indexed;
use crate::numerics::{Exec, ParamStore, RandomSource};

/// `(Recall@K, NDCG@K)` for single-target ranks.
pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to evaluate"));
    }
    let mut hits = 0usize;
    let mut gain = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, gain / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn example<'a>(&self, u: &'a crate::datasets::UserRecord) -> &'a Example {
        match self {
            EvalSplit::Valid => &u.valid,
            EvalSplit::Test => &u.test,
        }
    }

    /// Key for the per-user inference noise stream.
    pub fn noise_key(&self, user_index: usize) -> u64 {
        2 * user_index as u64 + matches!(self, EvalSplit::Test) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Exclude items already in the input history (the target is never
    /// excluded).
    pub mask_history: bool,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            mask_history: false,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: EvalSplit,
    pub n_users: usize,
    /// `"Recall@10"`, `"NDCG@5"`, ...
    pub metrics: BTreeMap<String, f64>,
    pub ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn from_ranks(split: EvalSplit, ranks: Vec<usize>, ks: &[usize]) -> Result<Self> {
        let mut metrics = BTreeMap::new();
        for &k in ks {
            let (r, n) = metrics_at_k(&ranks, k)?;
            metrics.insert(format!("Recall@{k}"), r);
            metrics.insert(format!("NDCG@{k}"), n);
        }
        Ok(Self {
            split,
            n_users: ranks.len(),
            metrics,
            ranks,
        })
    }

    pub fn get(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }
}

fn mask_scores(scores: &mut [f64], ex: &Example) {
    for &v in &ex.input {
        if v != PAD && v != ex.target {
            scores[v - 1] = f64::NEG_INFINITY;
        }
    }
}

/// Ranks every user's target under an arbitrary scorer. `score` returns one
/// score per item (column `j` = item `j + 1`).
pub fn rank_users<F>(
    split: &DatasetSplit,
    which: EvalSplit,
    opts: &EvalOptions,
    score: F,
) -> Result<MetricsReport>
where
    F: Fn(usize, &Example) -> Result<Vec<f64>> + Sync + Send,
{
    if split.users.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let ranks = map_indexed(opts.exec, &split.users, |i, u| {
        let ex = which.example(u);
        let mut s = score(i, ex)?;
        if s.len() != split.n_items || s.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("scores for user {}", u.user_id)));
        }
        if opts.mask_history {
            mask_scores(&mut s, ex);
        }
        Ok(rank_of_target(&s, ex.target))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_ranks(which, ranks, &opts.ks)
}

/// Scores all items with the model's deterministic anchor.
pub fn full_rank_eval(
    arch: &Arch,
    store: &ParamStore,
    split: &DatasetSplit,
    which: EvalSplit,
    src: &RandomSource,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    rank_users(split, which, opts, |i, ex| {
        let inf = arch.infer(store, &ex.input, src, which.noise_key(i))?;
        Ok(arch.backbone.score_values(store, &inf.anchor))
    })
}

/// One report per decoded stage (each thinking token, then the anchor),
/// all computed from a single inference pass per user.
pub fn stage_eval(
    arch: &Arch,
    store: &ParamStore,
    split: &DatasetSplit,
    which: EvalSplit,
    src: &RandomSource,
    opts: &EvalOptions,
) -> Result<Vec<(String, MetricsReport)>> {
    if split.users.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let names = stage_names(arch);
    let per_user = map_indexed(opts.exec, &split.users, |i, u| {
        let ex = which.example(u);
        let inf = arch.infer(store, &ex.input, src, which.noise_key(i))?;
        let mut ranks = Vec::with_capacity(names.len());
        for z in inf.tokens.iter().chain(std::iter::once(&inf.anchor)) {
            let mut s = arch.backbone.score_values(store, z);
            if opts.mask_history {
                mask_scores(&mut s, ex);
            }
            ranks.push(rank_of_target(&s, ex.target));
        }
        Ok(ranks)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let ranks = per_user.iter().map(|r| r[j]).collect();
            Ok((n.clone(), MetricsReport::from_ranks(which, ranks, &opts.ks)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{leave_one_out_split, Corpus, InteractionSequence};
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        assert_eq!(metrics_at_k(&[1, 1, 1], 5).unwrap(), (1.0, 1.0));
        let (r, n) = metrics_at_k(&[3], 10).unwrap();
        assert_eq!(r, 1.0);
        assert!((n - 0.5).abs() < 1e-15);
        assert!(metrics_at_k(&[1], 0).is_err());
        assert_eq!(metrics_at_k(&[11], 10).unwrap(), (0.0, 0.0));
    }

    fn naive(ranks: &[usize], k: usize) -> (f64, f64) {
        // Independent formulation: per-user indicator vectors over positions.
        let mut rec = 0.0;
        let mut ndcg = 0.0;
        for &r in ranks {
            let rel: Vec<f64> = (1..=k).map(|p| if p == r { 1.0 } else { 0.0 }).collect();
            rec += rel.iter().sum::<f64>();
            let dcg: f64 = rel.iter().enumerate().map(|(i, x)| x / (i as f64 + 2.0).log2()).sum();
            ndcg += dcg; // ideal DCG is 1 for a single relevant item
        }
        (rec / ranks.len() as f64, ndcg / ranks.len() as f64)
    }

    proptest! {
        #[test]
        fn matches_naive(ranks in prop::collection::vec(1usize..40, 1..60), k in 1usize..20) {
            let (r, n) = metrics_at_k(&ranks, k).unwrap();
            let (r2, n2) = naive(&ranks, k);
            prop_assert_eq!(r, r2);
            prop_assert!((n - n2).abs() < 1e-12);
            // monotone recall in K, and NDCG > 0 iff Recall > 0
            let (r3, _) = metrics_at_k(&ranks, k + 1).unwrap();
            prop_assert!(r3 >= r);
            prop_assert_eq!(n > 0.0, r > 0.0);
            prop_assert!(n <= 1.0);
        }
    }

    fn toy_split() -> DatasetSplit {
        let seqs = (0..6)
            .map(|u| InteractionSequence {
                user_id: u,
                items: (0..5).map(|j| 1 + ((u as usize + j) % 7)).collect(),
            })
            .collect();
        let c = Corpus {
            sequences: seqs,
            item_ids: (1..=7).collect(),
        };
        leave_one_out_split(&c, 4).unwrap()
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let s = toy_split();
        let rep = rank_users(&s, EvalSplit::Test, &EvalOptions::default(), |_, ex| {
            let mut v = vec![0.0; 7];
            v[ex.target - 1] = f64::INFINITY;
            Ok(v)
        })
        .unwrap();
        assert!(rep.metrics.values().all(|&m| m == 1.0));
    }

    #[test]
    fn history_mask_flag() {
        let s = toy_split();
        // Score = item id, so high ids in the history outrank the target
        // unless masked.
        let score = |_: usize, _: &Example| Ok((1..=7).map(|v| v as f64).collect());
        let plain = rank_users(&s, EvalSplit::Test, &EvalOptions::default(), score).unwrap();
        let opts = EvalOptions {
            mask_history: true,
            ..EvalOptions::default()
        };
        let masked = rank_users(&s, EvalSplit::Test, &opts, score).unwrap();
        assert!(masked.ranks.iter().zip(&plain.ranks).all(|(m, p)| m <= p));
        assert!(masked.ranks.iter().zip(&plain.ranks).any(|(m, p)| m < p));
    }

    #[test]
    fn empty_set_is_error() {
        let mut s = toy_split();
        s.users.clear();
        assert!(rank_users(&s, EvalSplit::Test, &EvalOptions::default(), |_, _| Ok(vec![])).is_err());
    }

    #[test]
    fn model_eval_is_repeatable() {
        use crate::model::{Model, ModelConfig};
        let mut cfg = ModelConfig::default();
        cfg.backbone.d_model = 8;
        cfg.backbone.max_len = 4;
        cfg.backbone.ffn_dim = 8;
        cfg.reasoner.ffn_dim = 8;
        cfg.diffusion.steps = 2;
        let m = Model::new(&cfg, 7, 3).unwrap();
        let s = toy_split();
        let src = RandomSource::new(3);
        let a = full_rank_eval(&m.arch, &m.store, &s, EvalSplit::Test, &src, &EvalOptions::default()).unwrap();
        let b = full_rank_eval(&m.arch, &m.store, &s, EvalSplit::Test, &src, &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
        let st = stage_eval(&m.arch, &m.store, &s, EvalSplit::Test, &src, &EvalOptions::default()).unwrap();
        assert_eq!(st.len(), 4);
        assert_eq!(st[3].1.ranks, a.ranks);
    }
}
