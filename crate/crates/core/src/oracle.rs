//! Exhaustive reference answers for small inputs. These share no code with
//! the FP-tree or the neighbor queues and are what results are verified
//! against.

use crate::dataset::{ItemId, Transaction};
use crate::fptree::Itemset;

/// Largest item universe the powerset oracle accepts.
pub const MAX_ITEMS: usize = 20;

/// Support of every itemset over `n_items <= 20` items by a superset-sum
/// transform over all `2^n_items` subsets; keeps those with support
/// `>= max(min_count, 1)`.
pub fn frequent_itemsets(db: &[Transaction], n_items: usize, min_count: u64) -> Vec<Itemset> {
    assert!(n_items <= MAX_ITEMS, "powerset oracle limited to {MAX_ITEMS} items");
    let min_count = min_count.max(1);
    let full = 1usize << n_items;
    let mut support = vec![0u64; full];
    for t in db {
        let mask = t.iter().fold(0usize, |m, &i| m | (1 << i));
        support[mask] += 1;
    }
    // support[s] = number of transactions whose item set contains s
    for bit in 0..n_items {
        for mask in 0..full {
            if mask & (1 << bit) == 0 {
                support[mask] += support[mask | (1 << bit)];
            }
        }
    }
    let mut out: Vec<Itemset> = (1..full)
        .filter(|&m| support[m] >= min_count)
        .map(|m| {
            let items: Vec<ItemId> = (0..n_items as ItemId).filter(|&i| m & (1 << i) != 0).collect();
            (items, support[m])
        })
        .collect();
    out.sort();
    out
}

/// The `k` nearest training points of every test point under the
/// (distance, id) order, by scanning all pairs.
pub fn nearest_neighbors(tests: &[Vec<f64>], train: &[Vec<f64>], k: usize) -> Vec<Vec<(u64, f64)>> {
    tests
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, u64)> = train
                .iter()
                .enumerate()
                .map(|(id, x)| {
                    let d2: f64 = q.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2.sqrt(), id as u64)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(k);
            all.into_iter().map(|(d, id)| (id, d)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powerset_counts_by_hand() {
        let db = vec![vec![0, 1], vec![1, 2], vec![0, 1, 2]];
        let all = frequent_itemsets(&db, 3, 1);
        assert_eq!(all.len(), 7);
        assert!(all.contains(&(vec![0, 1, 2], 1)));
        assert!(all.contains(&(vec![0, 2], 1)));
        assert!(all.contains(&(vec![1], 3)));
    }

    #[test]
    fn neighbors_by_hand() {
        let train = vec![vec![0.0], vec![10.0], vec![2.0]];
        let got = nearest_neighbors(&[vec![1.0]], &train, 2);
        // equal distance 1.0 to ids 0 and 2: lower id first
        assert_eq!(got, vec![vec![(0, 1.0), (2, 1.0)]]);
    }
}
