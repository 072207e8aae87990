use std::collections::HashMap;
use std::fmt::Write as _;

use super::{FpTree, ItemOrder};
use crate::dataset::ItemId;

/// Items ascending, with absolute support.
pub type Itemset = (Vec<ItemId>, u64);

/// All itemsets with support `>= min_count` (at least 1), canonically sorted.
pub fn mine(tree: &FpTree, min_count: u64) -> Vec<Itemset> {
    let min_count = min_count.max(1);
    let mut out = Vec::new();
    let mut suffix = Vec::new();
    grow(tree, &mut suffix, min_count, &mut out);
    for (items, _) in &mut out {
        items.sort_unstable();
    }
    out.sort();
    out
}

fn grow(tree: &FpTree, suffix: &mut Vec<ItemId>, min_count: u64, out: &mut Vec<Itemset>) {
    for (item, support) in tree.item_supports() {
        if support < min_count {
            continue;
        }
        suffix.push(item);
        out.push((suffix.clone(), support));

        let base: Vec<(Vec<ItemId>, u64)> = tree
            .header_nodes(item)
            .iter()
            .map(|&n| (tree.prefix_path(n), tree.node_count_of(n)))
            .filter(|(path, _)| !path.is_empty())
            .collect();
        let mut counts: HashMap<ItemId, u64> = HashMap::new();
        for (path, c) in &base {
            for &i in path {
                *counts.entry(i).or_default() += c;
            }
        }
        let order = ItemOrder::from_pairs(counts, min_count);
        if !order.is_empty() {
            let mut cond = FpTree::new(&order);
            for (path, c) in &base {
                cond.insert_path(&order.project(path), *c);
            }
            grow(&cond, suffix, min_count, out);
        }
        suffix.pop();
    }
}

/// Result-file text: one `item,item<TAB>support` line per itemset.
pub fn format_itemsets(sets: &[Itemset]) -> String {
    let mut s = String::new();
    for (items, support) in sets {
        let joined: Vec<String> = items.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "{}\t{}", joined.join(","), support);
    }
    s
}

pub fn parse_itemsets(text: &str) -> Result<Vec<Itemset>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let (items, support) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: missing tab", n + 1))?;
            let items = items
                .split(',')
                .map(|i| i.trim().parse::<ItemId>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("line {}: {e}", n + 1))?;
            let support = support
                .trim()
                .parse()
                .map_err(|e| format!("line {}: {e}", n + 1))?;
            Ok((items, support))
        })
        .collect()
}
