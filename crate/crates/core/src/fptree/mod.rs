//! FP-tree construction, merging and the wire format used for checkpoints.

mod mine;

use std::collections::HashMap;

use crate::dataset::{ItemId, Transaction};
use crate::fabric::{FabricError, RankCtx};

pub use mine::{format_itemsets, mine, parse_itemsets, Itemset};

const TREE_MAGIC: u32 = 0x4654_5245; // "FTRE"
const NO_PARENT: u32 = u32::MAX;
const ROOT_ITEM: u32 = u32::MAX;

pub const HEADER_BYTES: usize = 24;
pub const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("trees were built under different item orders")]
    OrderMismatch,
    #[error("corrupt serialized tree: {0}")]
    CorruptBuffer(&'static str),
}

/// Per-item transaction counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn zeros(n_items: usize) -> Self {
        Self {
            counts: vec![0; n_items],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, t: &[ItemId]) {
        for &i in t {
            self.counts[i as usize] += 1;
        }
    }
}

pub fn count_local(trans: &[Transaction], n_items: usize) -> FrequencyTable {
    let mut table = FrequencyTable::zeros(n_items);
    for t in trans {
        table.add(t);
    }
    table
}

/// Smallest transaction count that meets support fraction `theta`.
///
/// The product is nudged down before rounding so that e.g. `0.3 * 10` counts
/// as exactly 3 rather than 3.0000000000000004.
pub fn min_support_count(theta: f64, total: usize) -> u64 {
    let raw = theta * total as f64 - 1e-9;
    if raw <= 0.0 {
        0
    } else {
        raw.ceil() as u64
    }
}

/// Frequent items ranked by descending count, ties by ascending id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemOrder {
    items: Vec<ItemId>,
    counts: Vec<u64>,
    position: HashMap<ItemId, u32>,
    fingerprint: u64,
}

impl ItemOrder {
    /// Keep `(item, count)` pairs with `count >= min_count` and rank them.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ItemId, u64)>, min_count: u64) -> Self {
        let mut ranked: Vec<(ItemId, u64)> = pairs.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let position = ranked
            .iter()
            .enumerate()
            .map(|(pos, &(item, _))| (item, pos as u32))
            .collect();
        // FNV-1a over the ranked item ids
        let mut fingerprint: u64 = 0xcbf2_9ce4_8422_2325;
        for &(item, _) in &ranked {
            for b in item.to_le_bytes() {
                fingerprint ^= u64::from(b);
                fingerprint = fingerprint.wrapping_mul(0x0100_0000_01b3);
            }
        }
        Self {
            items: ranked.iter().map(|r| r.0).collect(),
            counts: ranked.iter().map(|r| r.1).collect(),
            position,
            fingerprint,
        }
    }

    pub fn from_table(table: &FrequencyTable, min_count: u64) -> Self {
        Self::from_pairs(
            table.counts.iter().enumerate().map(|(i, &c)| (i as ItemId, c)),
            min_count,
        )
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn count_of(&self, item: ItemId) -> Option<u64> {
        self.position.get(&item).map(|&p| self.counts[p as usize])
    }

    pub fn position(&self, item: ItemId) -> Option<u32> {
        self.position.get(&item).copied()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Frequent items of `t` in rank order.
    pub fn project(&self, t: &[ItemId]) -> Vec<ItemId> {
        let mut kept: Vec<(u32, ItemId)> = t
            .iter()
            .filter_map(|&i| self.position(i).map(|p| (p, i)))
            .collect();
        kept.sort_unstable();
        kept.into_iter().map(|(_, i)| i).collect()
    }
}

/// Sum local tables over the alive ranks and rank the globally frequent items.
pub fn global_frequent(
    ctx: &mut RankCtx,
    local: &FrequencyTable,
    theta: f64,
    total_trans: usize,
) -> Result<ItemOrder, FabricError> {
    let global = ctx.allreduce_sum(local.counts())?;
    Ok(ItemOrder::from_table(
        &FrequencyTable::from_counts(global),
        min_support_count(theta, total_trans),
    ))
}

#[derive(Clone, Debug)]
struct Node {
    item: ItemId,
    count: u64,
    parent: u32,
    children: Vec<u32>,
}

/// Prefix tree over order-projected transactions. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct FpTree {
    nodes: Vec<Node>,
    header: HashMap<ItemId, Vec<u32>>,
    fingerprint: u64,
    absorbed: u64,
}

impl FpTree {
    pub fn new(order: &ItemOrder) -> Self {
        Self::with_fingerprint(order.fingerprint())
    }

    fn with_fingerprint(fingerprint: u64) -> Self {
        Self {
            nodes: vec![Node {
                item: ROOT_ITEM,
                count: 0,
                parent: NO_PARENT,
                children: Vec::new(),
            }],
            header: HashMap::new(),
            fingerprint,
            absorbed: 0,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Transactions inserted into this tree (directly or through merges).
    pub fn absorbed(&self) -> u64 {
        self.absorbed
    }

    /// Node count including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn serialized_size(&self) -> usize {
        HEADER_BYTES + RECORD_BYTES * self.nodes.len()
    }

    fn child(&mut self, parent: u32, item: ItemId) -> u32 {
        if let Some(&c) = self.nodes[parent as usize]
            .children
            .iter()
            .find(|&&c| self.nodes[c as usize].item == item)
        {
            return c;
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            item,
            count: 0,
            parent,
            children: Vec::new(),
        });
        self.nodes[parent as usize].children.push(idx);
        self.header.entry(item).or_default().push(idx);
        idx
    }

    /// Add a path whose items are already in tree order.
    pub fn insert_path(&mut self, path: &[ItemId], count: u64) {
        let mut at = 0u32;
        for &item in path {
            at = self.child(at, item);
            self.nodes[at as usize].count += count;
        }
    }

    pub fn insert(&mut self, t: &[ItemId], order: &ItemOrder) {
        debug_assert_eq!(order.fingerprint(), self.fingerprint);
        let path = order.project(t);
        self.insert_path(&path, 1);
        self.absorbed += 1;
    }

    /// Path-additive merge of `src` into `self`.
    pub fn merge(&mut self, src: &FpTree) -> Result<(), TreeError> {
        if src.fingerprint != self.fingerprint {
            return Err(TreeError::OrderMismatch);
        }
        let mut mapped = vec![0u32; src.nodes.len()];
        let mut stack = vec![0u32];
        while let Some(s) = stack.pop() {
            for &c in &src.nodes[s as usize].children {
                let node = &src.nodes[c as usize];
                let d = self.child(mapped[s as usize], node.item);
                self.nodes[d as usize].count += node.count;
                mapped[c as usize] = d;
                stack.push(c);
            }
        }
        self.absorbed += src.absorbed;
        Ok(())
    }

    /// Items present in the tree with their total counts.
    pub fn item_supports(&self) -> Vec<(ItemId, u64)> {
        let mut v: Vec<_> = self
            .header
            .iter()
            .map(|(&item, nodes)| (item, nodes.iter().map(|&n| self.nodes[n as usize].count).sum()))
            .collect();
        v.sort_unstable();
        v
    }

    pub(crate) fn header_nodes(&self, item: ItemId) -> &[u32] {
        self.header.get(&item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub(crate) fn node_count_of(&self, n: u32) -> u64 {
        self.nodes[n as usize].count
    }

    /// Items on the path from the root down to `n`'s parent.
    pub(crate) fn prefix_path(&self, n: u32) -> Vec<ItemId> {
        let mut path = Vec::new();
        let mut at = self.nodes[n as usize].parent;
        while at != 0 && at != NO_PARENT {
            path.push(self.nodes[at as usize].item);
            at = self.nodes[at as usize].parent;
        }
        path.reverse();
        path
    }

    /// Every non-root node as (root path, count), sorted. Two trees are
    /// structurally identical iff their canonical forms match.
    pub fn canonical(&self) -> Vec<(Vec<ItemId>, u64)> {
        let mut out: Vec<_> = (1..self.nodes.len() as u32)
            .map(|n| {
                let mut path = self.prefix_path(n);
                path.push(self.nodes[n as usize].item);
                (path, self.nodes[n as usize].count)
            })
            .collect();
        out.sort();
        out
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_size());
        out.extend_from_slice(&TREE_MAGIC.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.absorbed.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        // preorder, parents referenced by preorder position
        let mut pre = vec![0u32; self.nodes.len()];
        let mut next = 0u32;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            pre[n as usize] = next;
            next += 1;
            let node = &self.nodes[n as usize];
            let parent = if node.parent == NO_PARENT {
                NO_PARENT
            } else {
                pre[node.parent as usize]
            };
            out.extend_from_slice(&node.item.to_le_bytes());
            out.extend_from_slice(&node.count.to_le_bytes());
            out.extend_from_slice(&parent.to_le_bytes());
            stack.extend(node.children.iter().rev());
        }
        out
    }

    pub fn deserialize(buf: &[u8]) -> Result<Self, TreeError> {
        if buf.len() < HEADER_BYTES {
            return Err(TreeError::CorruptBuffer("short header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u32_at(0) != TREE_MAGIC {
            return Err(TreeError::CorruptBuffer("bad magic"));
        }
        let n = u32_at(20) as usize;
        if n == 0 || buf.len() != HEADER_BYTES + n * RECORD_BYTES {
            return Err(TreeError::CorruptBuffer("length does not match node count"));
        }
        let mut tree = Self::with_fingerprint(u64_at(4));
        tree.absorbed = u64_at(12);
        let rec = |i: usize| {
            let o = HEADER_BYTES + i * RECORD_BYTES;
            (u32_at(o), u64_at(o + 4), u32_at(o + 12))
        };
        if rec(0) != (ROOT_ITEM, 0, NO_PARENT) {
            return Err(TreeError::CorruptBuffer("first record is not the root"));
        }
        for i in 1..n {
            let (item, count, parent) = rec(i);
            if parent as usize >= i || count == 0 {
                return Err(TreeError::CorruptBuffer("bad node record"));
            }
            tree.nodes.push(Node {
                item,
                count,
                parent,
                children: Vec::new(),
            });
            tree.nodes[parent as usize].children.push(i as u32);
            tree.header.entry(item).or_default().push(i as u32);
        }
        Ok(tree)
    }
}

/// Structural identity: same order, same absorbed count, same paths and counts.
impl PartialEq for FpTree {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.absorbed == other.absorbed && self.canonical() == other.canonical()
    }
}

impl Eq for FpTree {}

pub fn build_tree(trans: &[Transaction], order: &ItemOrder) -> FpTree {
    let mut tree = FpTree::new(order);
    for t in trans {
        tree.insert(t, order);
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: ItemId = 0;
    const B: ItemId = 1;
    const C: ItemId = 2;

    fn abc() -> Vec<Transaction> {
        vec![vec![A, B], vec![B, C], vec![A, B, C]]
    }

    #[test]
    fn counts_per_item() {
        assert_eq!(count_local(&abc(), 3).counts(), &[2, 3, 2]);
        assert_eq!(count_local(&[], 3).counts(), &[0, 0, 0]);
        assert_eq!(count_local(&vec![vec![A]; 5], 1).counts(), &[5]);
    }

    #[test]
    fn min_count_rounds_up() {
        assert_eq!(min_support_count(0.5, 4), 2);
        assert_eq!(min_support_count(0.3, 10), 3);
        assert_eq!(min_support_count(0.05, 30), 2);
        assert_eq!(min_support_count(0.0, 30), 0);
        assert_eq!(min_support_count(1.0, 7), 7);
    }

    #[test]
    fn order_ties_by_id() {
        // a:2, b:2 with min 2: tie broken by ascending id
        let o = ItemOrder::from_table(&FrequencyTable::from_counts(vec![2, 2]), 2);
        assert_eq!(o.items(), &[A, B]);
        let o = ItemOrder::from_table(&FrequencyTable::from_counts(vec![1, 3, 0]), 0);
        assert_eq!(o.items(), &[B, A, C]);
        let o = ItemOrder::from_table(&FrequencyTable::from_counts(vec![4, 4]), min_support_count(1.0 + 1e-6, 4));
        assert!(o.is_empty());
    }

    #[test]
    fn global_order_over_two_ranks() {
        use crate::fabric::{FaultSchedule, World};
        // rank 0: {a,b},{b}; rank 1: {a},{c}
        let shards = [vec![vec![A, B], vec![B]], vec![vec![A], vec![C]]];
        let w = World::spawn(2, FaultSchedule::none(), 0).unwrap();
        let outs = w.run(|ctx| {
            let local = count_local(&shards[ctx.rank().index()], 3);
            global_frequent(ctx, &local, 0.5, 4)
        });
        for o in outs {
            let order = o.finished().unwrap().clone();
            assert_eq!(order.items(), &[A, B]);
            assert_eq!(order.count_of(A), Some(2));
            assert_eq!(order.count_of(C), None);
        }
    }

    fn ab_order() -> ItemOrder {
        ItemOrder::from_pairs([(A, 2), (B, 2)], 1)
    }

    #[test]
    fn insert_shares_prefixes() {
        let o = ab_order();
        let mut t = FpTree::new(&o);
        t.insert(&[A, B], &o);
        t.insert(&[A, B], &o);
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.canonical(), vec![(vec![A], 2), (vec![A, B], 2)]);
        assert_eq!(t.absorbed(), 2);
    }

    #[test]
    fn infrequent_only_transaction_changes_absorbed() {
        let o = ab_order();
        let mut t = FpTree::new(&o);
        t.insert(&[7, 9], &o);
        assert!(t.is_empty());
        assert_eq!(t.absorbed(), 1);
    }

    #[test]
    fn insert_normalizes_item_order() {
        let o = ItemOrder::from_pairs([(A, 1), (B, 5)], 1);
        let mut x = FpTree::new(&o);
        x.insert(&[B, A], &o);
        let mut y = FpTree::new(&o);
        y.insert(&[A, B], &o);
        assert_eq!(x, y);
        assert_eq!(x.canonical()[0], (vec![B], 1));
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let o = ab_order();
        let t = build_tree(&abc(), &o);
        let mut m = t.clone();
        m.merge(&FpTree::new(&o)).unwrap();
        assert_eq!(m, t);
        let mut e = FpTree::new(&o);
        e.merge(&t).unwrap();
        assert_eq!(e, t);
        let other = ItemOrder::from_pairs([(C, 9)], 1);
        assert_eq!(FpTree::new(&other).merge(&t), Err(TreeError::OrderMismatch));
    }

    #[test]
    fn serialization_size_and_roundtrip() {
        let o = ab_order();
        let empty = FpTree::new(&o);
        assert_eq!(FpTree::deserialize(&empty.serialize()).unwrap(), empty);
        let mut t = FpTree::new(&o);
        t.insert(&[A, B], &o);
        t.insert(&[A, B], &o);
        let bytes = t.serialize();
        assert_eq!(bytes.len(), HEADER_BYTES + 3 * RECORD_BYTES);
        assert_eq!(bytes.len(), t.serialized_size());
        assert_eq!(FpTree::deserialize(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_buffers_are_rejected() {
        let o = ab_order();
        let bytes = build_tree(&abc(), &o).serialize();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(FpTree::deserialize(&bad), Err(TreeError::CorruptBuffer(_))));
        assert!(FpTree::deserialize(&bytes[..bytes.len() - 1]).is_err());
        assert!(FpTree::deserialize(&[]).is_err());
    }

    fn small_db() -> impl Strategy<Value = Vec<Transaction>> {
        proptest::collection::vec(
            proptest::collection::btree_set(0u32..8, 1..6).prop_map(|s| s.into_iter().collect()),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn merge_equals_build_from_union(a in small_db(), b in small_db()) {
            let mut all = a.clone();
            all.extend(b.iter().cloned());
            let order = ItemOrder::from_table(&count_local(&all, 8), 2);
            let mut ta = build_tree(&a, &order);
            let tb = build_tree(&b, &order);
            let mut tb2 = tb.clone();
            tb2.merge(&ta).unwrap();
            ta.merge(&tb).unwrap();
            let whole = build_tree(&all, &order);
            prop_assert_eq!(&ta, &whole);
            prop_assert_eq!(&tb2, &whole);
        }

        #[test]
        fn serialization_is_lossless(db in small_db()) {
            let order = ItemOrder::from_table(&count_local(&db, 8), 1);
            let t = build_tree(&db, &order);
            let bytes = t.serialize();
            prop_assert_eq!(bytes.len(), t.serialized_size());
            prop_assert_eq!(FpTree::deserialize(&bytes).unwrap(), t);
        }
    }
}
