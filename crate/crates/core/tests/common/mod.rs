#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ftmine::dataset::{knn_paths, synth_points, synth_transactions, write_points, write_transactions, TransactionSpec};
use ftmine::fptree::{format_itemsets, min_support_count};
use ftmine::knn::format_neighbors;
use ftmine::oracle;

pub struct FpData {
    pub path: PathBuf,
    pub trans: Vec<Vec<u32>>,
    pub n_items: usize,
}

impl FpData {
    pub fn expected(&self, theta: f64) -> String {
        let min = min_support_count(theta, self.trans.len());
        format_itemsets(&oracle::frequent_itemsets(&self.trans, self.n_items, min))
    }
}

pub fn fp_data(dir: &Path, name: &str, spec: TransactionSpec, seed: u64) -> FpData {
    let path = dir.join(name);
    let trans = synth_transactions(&spec, seed).unwrap();
    write_transactions(&path, spec.n_items, &trans).unwrap();
    FpData {
        path,
        trans,
        n_items: spec.n_items,
    }
}

/// Few items and long transactions: the FP-tree stays small next to its shard.
pub fn dense_fp(dir: &Path, n: usize, seed: u64) -> FpData {
    fp_data(dir, &format!("dense-{n}-{seed}.bin"), TransactionSpec::new(n, 10, 4, 8), seed)
}

pub struct KnnData {
    pub prefix: PathBuf,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

impl KnnData {
    pub fn expected(&self, k: usize) -> String {
        let rows: Vec<_> = oracle::nearest_neighbors(&self.test, &self.train, k)
            .into_iter()
            .enumerate()
            .map(|(i, ns)| (i as u64, ns))
            .collect();
        format_neighbors(&rows)
    }
}

pub fn knn_data(dir: &Path, name: &str, n_train: usize, n_test: usize, dims: usize, seed: u64) -> KnnData {
    let prefix = dir.join(name);
    let (tr, te) = knn_paths(&prefix);
    let train = synth_points(n_train, dims, seed).unwrap();
    let test = synth_points(n_test, dims, seed ^ 0x5eed).unwrap();
    write_points(&tr, dims, &train).unwrap();
    write_points(&te, dims, &test).unwrap();
    KnnData { prefix, train, test }
}
