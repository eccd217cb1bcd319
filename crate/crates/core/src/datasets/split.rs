use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};

/// Padding token; real items are `1..=n_items`.
pub const PAD: usize = 0;

/// One user's chronologically ordered items, as dense ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

/// All sequences plus the dense-id -> raw-id map (`item_ids[v - 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<InteractionSequence>,
    pub item_ids: Vec<u64>,
}

impl Corpus {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    /// Serializes back to the `user<TAB>item<TAB>timestamp` layout using raw
    /// ids and the position in the sequence as timestamp.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for seq in &self.sequences {
            for (t, &v) in seq.items.iter().enumerate() {
                s.push_str(&format!("{}\t{}\t{}\n", seq.user_id, self.item_ids[v - 1], t));
            }
        }
        s
    }
}

/// Groups rows per user, orders each user's rows by timestamp (ties keep
/// file order), and remaps item ids densely in ascending raw-id order.
pub fn build_sequences(rows: &[Interaction]) -> Corpus {
    let mut raw: Vec<u64> = rows.iter().map(|r| r.item_id).collect();
    raw.sort_unstable();
    raw.dedup();
    let dense: BTreeMap<u64, usize> = raw.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect();

    let mut per_user: BTreeMap<u64, Vec<(i64, usize)>> = BTreeMap::new();
    for r in rows {
        per_user
            .entry(r.user_id)
            .or_default()
            .push((r.timestamp, dense[&r.item_id]));
    }
    let sequences = per_user
        .into_iter()
        .map(|(user_id, mut evs)| {
            evs.sort_by_key(|e| e.0); // stable
            InteractionSequence {
                user_id,
                items: evs.into_iter().map(|e| e.1).collect(),
            }
        })
        .collect();
    Corpus {
        sequences,
        item_ids: raw,
    }
}

/// Keeps the most recent `max_len` items and left-pads with [`PAD`].
pub fn truncate_pad(items: &[usize], max_len: usize) -> Vec<usize> {
    let keep = &items[items.len().saturating_sub(max_len)..];
    let mut out = vec![PAD; max_len - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// A model input with its next-item target.
///
/// `next[j]` is the item following `input[j]` (or `PAD` where `input[j]` is
/// padding), so `next[max_len - 1] == target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub next: Vec<usize>,
    pub target: usize,
}

impl Example {
    /// `seq` must hold at least two items; the last one is the target.
    pub fn from_sequence(seq: &[usize], max_len: usize) -> Self {
        let n = seq.len();
        assert!(n >= 2, "example needs an input item and a target");
        Example {
            input: truncate_pad(&seq[..n - 1], max_len),
            next: truncate_pad(&seq[1..], max_len),
            target: seq[n - 1],
        }
    }

    pub fn n_real(&self) -> usize {
        self.input.iter().filter(|&&v| v != PAD).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    /// Untruncated training view: every item except the last two.
    pub train: Vec<usize>,
    /// `None` when the training view has fewer than two items.
    pub train_example: Option<Example>,
    pub valid: Example,
    pub test: Example,
    /// Sequence length before truncation.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub n_items: usize,
    pub max_len: usize,
    pub users: Vec<UserRecord>,
    /// Interaction count per item id, index 0 unused.
    pub item_freq: Vec<usize>,
    /// Users dropped for having fewer than three interactions.
    pub excluded: usize,
}

/// Dataset summary in the usual table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    #[serde(rename = "#Users")]
    pub users: usize,
    #[serde(rename = "#Items")]
    pub items: usize,
    #[serde(rename = "#Interactions")]
    pub interactions: usize,
    #[serde(rename = "AvgLen")]
    pub avg_len: f64,
    pub excluded_users: usize,
}

impl DatasetSplit {
    pub fn stats(&self) -> SplitStats {
        let interactions: usize = self.users.iter().map(|u| u.length).sum();
        SplitStats {
            users: self.users.len(),
            items: self.n_items,
            interactions,
            avg_len: if self.users.is_empty() {
                0.0
            } else {
                interactions as f64 / self.users.len() as f64
            },
            excluded_users: self.excluded,
        }
    }

    /// Users with a usable training example, in user order.
    pub fn train_examples(&self) -> Vec<(usize, &Example)> {
        self.users
            .iter()
            .enumerate()
            .filter_map(|(i, u)| u.train_example.as_ref().map(|e| (i, e)))
            .collect()
    }
}

/// Last item is the test target, second-to-last the validation target, the
/// rest is training data. Sequences shorter than three are excluded.
pub fn leave_one_out_split(corpus: &Corpus, max_len: usize) -> Result<DatasetSplit> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let n_items = corpus.n_items();
    let mut item_freq = vec![0usize; n_items + 1];
    let mut users = Vec::new();
    let mut excluded = 0;
    for seq in &corpus.sequences {
        if let Some(&bad) = seq.items.iter().find(|&&v| v == PAD || v > n_items) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab: n_items,
            });
        }
        let l = seq.items.len();
        if l < 3 {
            excluded += 1;
            continue;
        }
        for &v in &seq.items {
            item_freq[v] += 1;
        }
        let train = seq.items[..l - 2].to_vec();
        users.push(UserRecord {
            user_id: seq.user_id,
            train_example: (train.len() >= 2).then(|| Example::from_sequence(&train, max_len)),
            train,
            valid: Example::from_sequence(&seq.items[..l - 1], max_len),
            test: Example::from_sequence(&seq.items, max_len),
            length: l,
        });
    }
    if excluded > 0 {
        log::info!("excluded {excluded} users with fewer than 3 interactions");
    }
    Ok(DatasetSplit {
        n_items,
        max_len,
        users,
        item_freq,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(seqs: &[&[usize]], n_items: usize) -> Corpus {
        Corpus {
            sequences: seqs
                .iter()
                .enumerate()
                .map(|(u, s)| InteractionSequence {
                    user_id: u as u64,
                    items: s.to_vec(),
                })
                .collect(),
            item_ids: (1..=n_items as u64).collect(),
        }
    }

    #[test]
    fn four_item_history() {
        // a=1 b=2 c=3 d=4
        let s = leave_one_out_split(&corpus(&[&[1, 2, 3, 4]], 4), 5).unwrap();
        let u = &s.users[0];
        assert_eq!(u.train, vec![1, 2]);
        let tr = u.train_example.as_ref().unwrap();
        assert_eq!(tr.input, vec![0, 0, 0, 0, 1]);
        assert_eq!(tr.target, 2);
        assert_eq!(u.valid.input, vec![0, 0, 0, 1, 2]);
        assert_eq!(u.valid.target, 3);
        assert_eq!(u.test.input, vec![0, 0, 1, 2, 3]);
        assert_eq!(u.test.target, 4);
    }

    #[test]
    fn long_history_keeps_recent() {
        let items: Vec<usize> = (1..=25).collect();
        let s = leave_one_out_split(&corpus(&[&items], 25), 20).unwrap();
        let t = &s.users[0].test;
        assert_eq!(t.input, (5..=24).collect::<Vec<_>>());
        assert_eq!(t.target, 25);
        assert_eq!(s.users[0].length, 25);
    }

    #[test]
    fn short_history_excluded() {
        let s = leave_one_out_split(&corpus(&[&[1, 2], &[1, 2, 3]], 3), 4).unwrap();
        assert_eq!(s.excluded, 1);
        assert_eq!(s.users.len(), 1);
        assert!(s.users[0].train_example.is_none());
    }

    #[test]
    fn next_targets_align_with_inputs() {
        let e = Example::from_sequence(&[5, 6, 7], 4);
        assert_eq!(e.input, vec![0, 0, 5, 6]);
        assert_eq!(e.next, vec![0, 0, 6, 7]);
    }

    #[test]
    fn build_orders_and_remaps() {
        let row = |u, i, t| Interaction {
            user_id: u,
            item_id: i,
            timestamp: t,
            rating: None,
        };
        // Items 30, 10, 20 -> dense 3, 1, 2. User 5 has a timestamp tie that
        // must keep file order (30 before 10).
        let rows = vec![row(5, 30, 2), row(5, 10, 2), row(5, 20, 1), row(1, 10, 0)];
        let c = build_sequences(&rows);
        assert_eq!(c.item_ids, vec![10, 20, 30]);
        assert_eq!(c.sequences[0].user_id, 1);
        assert_eq!(c.sequences[1].items, vec![2, 3, 1]);
    }

    #[test]
    fn stats_fields() {
        let s = leave_one_out_split(&corpus(&[&[1, 2, 3], &[1, 2, 3, 1, 2]], 3), 4).unwrap();
        let json = serde_json::to_value(s.stats()).unwrap();
        assert_eq!(json["#Users"], 2);
        assert_eq!(json["#Interactions"], 8);
        assert_eq!(json["AvgLen"], 4.0);
    }

    proptest! {
        #[test]
        fn split_is_disjoint(items in prop::collection::vec(1usize..30, 3..40), max_len in 1usize..25) {
            let s = leave_one_out_split(&corpus(&[&items], 30), max_len).unwrap();
            let u = &s.users[0];
            let l = items.len();
            prop_assert_eq!(u.valid.target, items[l - 2]);
            prop_assert_eq!(u.test.target, items[l - 1]);
            prop_assert_eq!(u.train.len(), l - 2);
            prop_assert_eq!(u.test.input.len(), max_len);
            if let Some(tr) = &u.train_example {
                prop_assert_eq!(tr.target, items[l - 3]);
            }
        }

        #[test]
        fn pad_is_left_and_exact(items in prop::collection::vec(1usize..9, 0..30), max_len in 1usize..25) {
            let p = truncate_pad(&items, max_len);
            prop_assert_eq!(p.len(), max_len);
            let real: Vec<usize> = p.iter().copied().filter(|&v| v != PAD).collect();
            let want = &items[items.len().saturating_sub(max_len)..];
            prop_assert_eq!(&real[..], want);
            let first_real = p.iter().position(|&v| v != PAD).unwrap_or(max_len);
            prop_assert!(p[first_real..].iter().all(|&v| v != PAD));
        }
    }
}
