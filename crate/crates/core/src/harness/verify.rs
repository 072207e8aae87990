//! Check a result file against brute-force enumeration.

use std::fmt;
use std::fs;
use std::path::Path;

use super::Algorithm;
use crate::dataset::{knn_paths, DatasetFile};
use crate::error::{Error, Result};
use crate::fptree::{min_support_count, parse_itemsets, Itemset};
use crate::knn::{parse_neighbors, NeighborRow};
use crate::oracle;

pub const MAX_ORACLE_TRANSACTIONS: usize = 1000;
pub const MAX_ORACLE_PAIRS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VerifyParams {
    FpGrowth { theta: f64 },
    Knn { k: usize },
}

impl VerifyParams {
    pub fn algorithm(self) -> Algorithm {
        match self {
            VerifyParams::FpGrowth { .. } => Algorithm::FpGrowth,
            VerifyParams::Knn { .. } => Algorithm::Knn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    /// Entries (itemsets or neighbor rows) the oracle produced.
    pub expected: usize,
    pub matched: usize,
    pub divergences: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.divergences.is_empty()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            writeln!(f, "PASS: {} of {} matched", self.matched, self.expected)
        } else {
            writeln!(
                f,
                "FAIL: {} of {} matched, {} divergences",
                self.matched,
                self.expected,
                self.divergences.len()
            )?;
            for d in &self.divergences {
                writeln!(f, "  {d}")?;
            }
            Ok(())
        }
    }
}

/// `dataset` is the transaction file, or the KNN prefix.
pub fn verify(result: &Path, dataset: &Path, params: VerifyParams) -> Result<VerifyReport> {
    let text = fs::read_to_string(result)?;
    verify_text(&text, dataset, params)
}

pub fn verify_text(text: &str, dataset: &Path, params: VerifyParams) -> Result<VerifyReport> {
    match params {
        VerifyParams::FpGrowth { theta } => {
            let file = DatasetFile::open(dataset)?;
            if file.len() > MAX_ORACLE_TRANSACTIONS || file.width() > oracle::MAX_ITEMS {
                return Err(Error::TooLargeForOracle(format!(
                    "{} transactions over {} items (limits {MAX_ORACLE_TRANSACTIONS} and {})",
                    file.len(),
                    file.width(),
                    oracle::MAX_ITEMS
                )));
            }
            let db = file.read_all()?;
            let expected = oracle::frequent_itemsets(&db, file.width(), min_support_count(theta, db.len()));
            let got = parse_itemsets(text).map_err(|e| Error::Usage(format!("result file: {e}")))?;
            Ok(compare_itemsets(&expected, &got))
        }
        VerifyParams::Knn { k } => {
            let (train_path, test_path) = knn_paths(dataset);
            let train = DatasetFile::open(train_path)?;
            let test = DatasetFile::open(test_path)?;
            if train.len().saturating_mul(test.len()) > MAX_ORACLE_PAIRS {
                return Err(Error::TooLargeForOracle(format!(
                    "{} x {} pairs (limit {MAX_ORACLE_PAIRS})",
                    test.len(),
                    train.len()
                )));
            }
            let tests = test.read_points(0, test.len())?;
            let trains = train.read_points(0, train.len())?;
            let expected = oracle::nearest_neighbors(&tests, &trains, k);
            let got = parse_neighbors(text).map_err(|e| Error::Usage(format!("result file: {e}")))?;
            Ok(compare_neighbors(&expected, &got))
        }
    }
}

fn itemset_name(items: &[u32]) -> String {
    let parts: Vec<String> = items.iter().map(ToString::to_string).collect();
    format!("{{{}}}", parts.join(","))
}

pub fn compare_itemsets(expected: &[Itemset], got: &[Itemset]) -> VerifyReport {
    let mut divergences = Vec::new();
    let mut matched = 0;
    let (mut i, mut j) = (0, 0);
    let mut got_sorted = got.to_vec();
    got_sorted.sort();
    while i < expected.len() || j < got_sorted.len() {
        match (expected.get(i), got_sorted.get(j)) {
            (Some(e), Some(g)) if e.0 == g.0 => {
                if e.1 == g.1 {
                    matched += 1;
                } else {
                    divergences.push(format!("itemset {} support {} expected {}", itemset_name(&g.0), g.1, e.1));
                }
                i += 1;
                j += 1;
            }
            (Some(e), g) if g.is_none_or(|g| e.0 < g.0) => {
                divergences.push(format!("itemset {} missing (support {})", itemset_name(&e.0), e.1));
                i += 1;
            }
            (_, Some(g)) => {
                divergences.push(format!("itemset {} unexpected (support {})", itemset_name(&g.0), g.1));
                j += 1;
            }
            (_, None) => break,
        }
    }
    VerifyReport {
        expected: expected.len(),
        matched,
        divergences,
    }
}

pub fn compare_neighbors(expected: &[Vec<(u64, f64)>], got: &[NeighborRow]) -> VerifyReport {
    let mut divergences = Vec::new();
    let mut matched = 0;
    let mut seen = vec![false; expected.len()];
    for (test, ns) in got {
        let Some(want) = expected.get(*test as usize) else {
            divergences.push(format!("row {test}: no such test sample"));
            continue;
        };
        if std::mem::replace(&mut seen[*test as usize], true) {
            divergences.push(format!("row {test}: duplicated"));
            continue;
        }
        if ns == want {
            matched += 1;
        } else {
            divergences.push(format!("row {test}: got {} expected {}", cells(ns), cells(want)));
        }
    }
    for (t, s) in seen.iter().enumerate() {
        if !s {
            divergences.push(format!("row {t}: missing"));
        }
    }
    VerifyReport {
        expected: expected.len(),
        matched,
        divergences,
    }
}

fn cells(ns: &[(u64, f64)]) -> String {
    let c: Vec<String> = ns.iter().map(|(id, d)| format!("{id}:{d}")).collect();
    c.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_transactions;
    use crate::fptree::format_itemsets;

    #[test]
    fn three_transaction_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_transactions(&path, 3, &[vec![0, 1], vec![1, 2], vec![0, 1, 2]]).unwrap();
        let good = format_itemsets(&[
            (vec![0], 2),
            (vec![0, 1], 2),
            (vec![1], 3),
            (vec![1, 2], 2),
            (vec![2], 2),
        ]);
        let rep = verify_text(&good, &path, VerifyParams::FpGrowth { theta: 0.5 }).unwrap();
        assert!(rep.passed(), "{rep}");
        assert_eq!(rep.matched, 5);

        let tampered = good.replace("1\t3", "1\t2");
        let rep = verify_text(&tampered, &path, VerifyParams::FpGrowth { theta: 0.5 }).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.divergences.len(), 1);
        assert!(rep.divergences[0].contains("{1}"), "{}", rep.divergences[0]);
    }

    #[test]
    fn missing_and_extra_itemsets() {
        let e = vec![(vec![0], 2), (vec![1], 2)];
        let g = vec![(vec![1], 2), (vec![2], 2)];
        let rep = compare_itemsets(&e, &g);
        assert_eq!(rep.matched, 1);
        assert!(rep.divergences[0].contains("{0} missing"));
        assert!(rep.divergences[1].contains("{2} unexpected"));
    }

    #[test]
    fn neighbor_rows() {
        let e = vec![vec![(1, 0.5)], vec![(0, 1.0)]];
        assert!(compare_neighbors(&e, &[(0, vec![(1, 0.5)]), (1, vec![(0, 1.0)])]).passed());
        let rep = compare_neighbors(&e, &[(0, vec![(2, 0.5)])]);
        assert_eq!(rep.divergences.len(), 2);
        assert!(rep.divergences[1].contains("row 1: missing"));
    }

    #[test]
    fn oracle_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_transactions(&path, 21, &[vec![20]]).unwrap();
        let err = verify_text("", &path, VerifyParams::FpGrowth { theta: 0.5 }).unwrap_err();
        assert!(matches!(err, Error::TooLargeForOracle(_)));
    }
}
