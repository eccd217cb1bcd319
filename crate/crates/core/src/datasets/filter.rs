use std::collections::HashMap;

use serde::Serialize;

use super::Interaction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub rounds: usize,
}

/// Keeps rows whose rating is strictly above `threshold`.
pub fn rating_positivity_filter(
    rows: &[Interaction],
    threshold: f64,
) -> Result<(Vec<Interaction>, FilterReport)> {
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let rating = r
            .rating
            .ok_or_else(|| Error::invalid(format!("row {i} has no rating; cannot filter")))?;
        if rating > threshold {
            out.push(r.clone());
        }
    }
    if out.is_empty() {
        log::warn!("rating filter (> {threshold}) removed every interaction");
    }
    let report = FilterReport {
        rows_in: rows.len(),
        rows_out: out.len(),
        rounds: 1,
    };
    Ok((out, report))
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor has at least `k`.
pub fn five_core_filter(rows: &[Interaction], k: usize) -> (Vec<Interaction>, FilterReport) {
    let mut cur: Vec<Interaction> = rows.to_vec();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for r in &cur {
            *users.entry(r.user_id).or_default() += 1;
            *items.entry(r.item_id).or_default() += 1;
        }
        let before = cur.len();
        cur.retain(|r| users[&r.user_id] >= k && items[&r.item_id] >= k);
        if cur.len() == before {
            break;
        }
    }
    if cur.is_empty() && !rows.is_empty() {
        log::warn!("{k}-core filtering removed every interaction");
    }
    let report = FilterReport {
        rows_in: rows.len(),
        rows_out: cur.len(),
        rounds,
    };
    (cur, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn row(u: u64, i: u64, t: i64) -> Interaction {
        Interaction {
            user_id: u,
            item_id: i,
            timestamp: t,
            rating: None,
        }
    }

    fn is_k_core(rows: &[Interaction], k: usize) -> bool {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for r in rows {
            *users.entry(r.user_id).or_default() += 1;
            *items.entry(r.item_id).or_default() += 1;
        }
        users.values().all(|&c| c >= k) && items.values().all(|&c| c >= k)
    }

    /// Largest k-core by exhaustive search over user subsets: the k-core is
    /// the unique maximal subset closed under the degree constraint, so it is
    /// the union of all valid subsets.
    fn brute_force_core(rows: &[Interaction], k: usize) -> BTreeSet<(u64, u64, i64)> {
        let users: Vec<u64> = rows
            .iter()
            .map(|r| r.user_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let items: Vec<u64> = rows
            .iter()
            .map(|r| r.item_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut best = BTreeSet::new();
        for umask in 0u32..(1 << users.len()) {
            for imask in 0u32..(1 << items.len()) {
                let sub: Vec<Interaction> = rows
                    .iter()
                    .filter(|r| {
                        let ui = users.iter().position(|&u| u == r.user_id).unwrap();
                        let ii = items.iter().position(|&i| i == r.item_id).unwrap();
                        umask & (1 << ui) != 0 && imask & (1 << ii) != 0
                    })
                    .cloned()
                    .collect();
                if is_k_core(&sub, k) && sub.len() > best.len() {
                    best = sub.iter().map(|r| (r.user_id, r.item_id, r.timestamp)).collect();
                }
            }
        }
        best
    }

    #[test]
    fn short_user_removed() {
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                rows.push(row(u, i, (u * 10 + i) as i64));
            }
        }
        rows.extend([row(9, 0, 0), row(9, 1, 1), row(9, 2, 2)]);
        let (out, _) = five_core_filter(&rows, 5);
        assert!(out.iter().all(|r| r.user_id != 9));
        assert_eq!(out.len(), 25);
    }

    #[test]
    fn already_core_is_fixed_point() {
        let mut rows = Vec::new();
        for u in 0..6 {
            for i in 0..5 {
                rows.push(row(u, i, i as i64));
            }
        }
        let (out, rep) = five_core_filter(&rows, 5);
        assert_eq!(out, rows);
        assert_eq!(rep.rounds, 1);
    }

    #[test]
    fn cascade_matches_brute_force() {
        // 10 users, 7 items. Items 0..4 form a dense core with users 0..4;
        // item 5 is held up by exactly five users, one of whom (user 5) is
        // too short and falls out first, which then drops item 5, which in
        // turn drops users 6..8 below five interactions.
        let mut rows = Vec::new();
        let mut t = 0;
        let mut push = |u, i| {
            t += 1;
            rows.push(row(u, i, t));
        };
        for u in 0..5 {
            for i in 0..5 {
                push(u, i);
            }
        }
        for u in 5..9 {
            push(u, 5);
        }
        push(4, 5);
        for u in 6..9 {
            for i in 0..4 {
                push(u, i);
            }
        }
        push(5, 6);
        push(9, 6);
        push(9, 0);
        let (out, rep) = five_core_filter(&rows, 5);
        let got: BTreeSet<_> = out.iter().map(|r| (r.user_id, r.item_id, r.timestamp)).collect();
        assert_eq!(got, brute_force_core(&rows, 5));
        assert!(rep.rounds > 2, "needs iteration, took {}", rep.rounds);
        assert!(is_k_core(&out, 5));
        assert!(out.iter().all(|r| r.item_id != 5 && !(6..=9).contains(&r.user_id)));
    }

    #[test]
    fn rating_filter_is_strict() {
        let mut rows = vec![row(0, 0, 0), row(0, 1, 1), row(0, 2, 2)];
        rows[0].rating = Some(3.0);
        rows[1].rating = Some(5.0);
        rows[2].rating = Some(3.5);
        let (out, _) = rating_positivity_filter(&rows, 3.0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.rating.unwrap() > 3.0));
    }

    #[test]
    fn rating_filter_needs_ratings() {
        let rows = vec![row(0, 0, 0)];
        assert!(rating_positivity_filter(&rows, 3.0).is_err());
    }

    #[test]
    fn rating_filter_may_empty() {
        let mut rows = vec![row(0, 0, 0), row(1, 1, 1)];
        rows[0].rating = Some(1.0);
        rows[1].rating = Some(3.0);
        let (out, rep) = rating_positivity_filter(&rows, 3.0).unwrap();
        assert!(out.is_empty());
        assert_eq!(rep.rows_out, 0);
    }
}
