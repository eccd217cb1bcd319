//! Quartile breakdowns by user sequence length and by target-item
//! popularity.

use serde::{Deserialize, Serialize};

use super::{metrics_at_k, MetricsReport};
use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};

const N_GROUPS: usize = 4;

fn need_users(split: &DatasetSplit) -> Result<()> {
    if split.users.len() < N_GROUPS {
        return Err(Error::invalid(format!(
            "sparsity groups need at least {N_GROUPS} users, got {}",
            split.users.len()
        )));
    }
    Ok(())
}

/// Quartile per user by sequence length; group 0 holds the shortest.
pub fn user_groups(split: &DatasetSplit) -> Result<Vec<usize>> {
    need_users(split)?;
    let n = split.users.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split.users[i].length, split.users[i].user_id));
    let mut g = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        g[i] = pos * N_GROUPS / n;
    }
    Ok(g)
}

/// Quartile per user by the training frequency of their target item.
/// Items are split into four equal-count bins, least popular first, so
/// group 0 is the long tail.
pub fn item_groups(split: &DatasetSplit) -> Result<Vec<usize>> {
    need_users(split)?;
    let n = split.n_items;
    let mut order: Vec<usize> = (1..=n).collect();
    order.sort_by_key(|&v| (split.item_freq[v], v));
    let mut bin = vec![0; n + 1];
    for (pos, &v) in order.iter().enumerate() {
        bin[v] = pos * N_GROUPS / n;
    }
    Ok(split.users.iter().map(|u| bin[u.test.target]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// `"UG-0"` .. `"IG-3"`.
    pub group: String,
    pub n_users: usize,
    pub metric: String,
    pub baseline: f64,
    pub treatment: f64,
    /// Relative change in percent; `None` when the baseline is zero.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub rows: Vec<GroupRow>,
}

impl GroupTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,n_users,metric,baseline,treatment,improvement_pct\n");
        for r in &self.rows {
            let imp = r.improvement_pct.map(|v| format!("{v:.4}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                r.group, r.n_users, r.metric, r.baseline, r.treatment, imp
            ));
        }
        s
    }
}

fn relative(base: f64, treat: f64) -> Option<f64> {
    (base != 0.0).then(|| (treat - base) / base * 100.0)
}

/// Per-group Recall/NDCG of two reports over the same split (same user
/// order) and the relative improvement of `treatment` over `baseline`.
pub fn sparsity_groups(
    split: &DatasetSplit,
    baseline: &MetricsReport,
    treatment: &MetricsReport,
    ks: &[usize],
) -> Result<GroupTable> {
    let n = split.users.len();
    if baseline.ranks.len() != n || treatment.ranks.len() != n {
        return Err(Error::invalid("reports do not cover the split's users"));
    }
    let mut rows = Vec::new();
    for (prefix, groups) in [("UG", user_groups(split)?), ("IG", item_groups(split)?)] {
        for g in 0..N_GROUPS {
            let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
            if idx.is_empty() {
                continue;
            }
            let b: Vec<usize> = idx.iter().map(|&i| baseline.ranks[i]).collect();
            let t: Vec<usize> = idx.iter().map(|&i| treatment.ranks[i]).collect();
            for &k in ks {
                let (br, bn) = metrics_at_k(&b, k)?;
                let (tr, tn) = metrics_at_k(&t, k)?;
                for (name, bv, tv) in [("Recall", br, tr), ("NDCG", bn, tn)] {
                    rows.push(GroupRow {
                        group: format!("{prefix}-{g}"),
                        n_users: idx.len(),
                        metric: format!("{name}@{k}"),
                        baseline: bv,
                        treatment: tv,
                        improvement_pct: relative(bv, tv),
                    });
                }
            }
        }
    }
    Ok(GroupTable { rows })
}
