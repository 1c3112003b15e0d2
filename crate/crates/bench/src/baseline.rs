//! Extent indexes to measure FlexTree against, plus a common trait.
//!
//! Both baselines store absolute logical offsets, so inserting a range has
//! to rewrite the offset of every extent (and pivot) after it.

use flexstore::flextree::{FlexTree, TreeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Ext {
    pub off: u64,
    pub len: u64,
    pub phys: u64,
}

/// Work done by the last mutating call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    /// Distinct nodes written.
    pub dirtied_nodes: usize,
    /// Stored offsets or pivots rewritten to account for the shift.
    pub shifted_entries: usize,
}

pub trait ExtentIndex {
    fn name(&self) -> &'static str;
    /// Maps `len` bytes at `phys` into `offset`, shifting later bytes right.
    fn insert_range(&mut self, offset: u64, len: u64, phys: u64);
    /// The extent containing `offset`.
    fn lookup(&self, offset: u64) -> Option<Ext>;
    /// Up to `n` extents, starting with the one containing `offset`.
    fn range(&self, offset: u64, n: usize) -> Vec<Ext>;
    fn total_size(&self) -> u64;
    fn last_cost(&self) -> OpCost;

    fn append(&mut self, len: u64, phys: u64) {
        let end = self.total_size();
        self.insert_range(end, len, phys);
    }
}

/// Splits `e` so that one piece starts at `at`; returns (left, right).
fn split_ext(e: Ext, at: u64) -> (Ext, Ext) {
    let d = at - e.off;
    (
        Ext {
            off: e.off,
            len: d,
            phys: e.phys,
        },
        Ext {
            off: at,
            len: e.len - d,
            phys: e.phys + d,
        },
    )
}

// -------------------------------------------------------------------------
// FlexTree adapter
// -------------------------------------------------------------------------

pub struct FlexIndex {
    tree: FlexTree,
}

impl FlexIndex {
    pub fn new(node_capacity: usize) -> Self {
        FlexIndex {
            tree: FlexTree::new(TreeConfig::with_capacity(node_capacity)).expect("valid config"),
        }
    }

    pub fn tree(&self) -> &FlexTree {
        &self.tree
    }
}

impl ExtentIndex for FlexIndex {
    fn name(&self) -> &'static str {
        "flextree"
    }

    fn insert_range(&mut self, offset: u64, len: u64, phys: u64) {
        self.tree.insert_range(offset, len, phys).expect("in-range insert");
    }

    fn lookup(&self, offset: u64) -> Option<Ext> {
        let e = self.tree.find_extent(offset).ok()?;
        Some(Ext {
            off: e.start,
            len: e.len as u64,
            phys: e.phys,
        })
    }

    fn range(&self, offset: u64, n: usize) -> Vec<Ext> {
        if offset >= self.tree.total_size() {
            return Vec::new();
        }
        self.tree
            .extents_from(offset)
            .take(n)
            .map(|(start, e)| Ext {
                off: start,
                len: e.len as u64,
                phys: e.phys,
            })
            .collect()
    }

    fn total_size(&self) -> u64 {
        self.tree.total_size()
    }

    fn last_cost(&self) -> OpCost {
        let d = self.tree.last_op_dirtied();
        OpCost {
            dirtied_nodes: d,
            shifted_entries: d,
        }
    }
}

// -------------------------------------------------------------------------
// Sorted array
// -------------------------------------------------------------------------

#[derive(Default)]
pub struct SortedArray {
    v: Vec<Ext>,
    total: u64,
    cost: OpCost,
}

impl SortedArray {
    pub fn new() -> Self {
        Self::default()
    }

    fn find(&self, offset: u64) -> Option<usize> {
        if offset >= self.total {
            return None;
        }
        Some(self.v.partition_point(|e| e.off <= offset) - 1)
    }
}

impl ExtentIndex for SortedArray {
    fn name(&self) -> &'static str {
        "sorted-array"
    }

    fn insert_range(&mut self, offset: u64, len: u64, phys: u64) {
        assert!(offset <= self.total && len > 0);
        let mut at = self.v.partition_point(|e| e.off < offset);
        if let Some(i) = self.find(offset) {
            if self.v[i].off < offset {
                let (l, r) = split_ext(self.v[i], offset);
                self.v[i] = l;
                self.v.insert(i + 1, r);
                at = i + 1;
            }
        }
        self.v.insert(at, Ext { off: offset, len, phys });
        for e in &mut self.v[at + 1..] {
            e.off += len;
        }
        self.total += len;
        self.cost = OpCost {
            dirtied_nodes: 1,
            shifted_entries: self.v.len() - at - 1,
        };
    }

    fn lookup(&self, offset: u64) -> Option<Ext> {
        self.find(offset).map(|i| self.v[i])
    }

    fn range(&self, offset: u64, n: usize) -> Vec<Ext> {
        match self.find(offset) {
            Some(i) => self.v[i..i.saturating_add(n).min(self.v.len())].to_vec(),
            None => Vec::new(),
        }
    }

    fn total_size(&self) -> u64 {
        self.total
    }

    fn last_cost(&self) -> OpCost {
        self.cost
    }
}

// -------------------------------------------------------------------------
// B+-tree with absolute offsets
// -------------------------------------------------------------------------

enum BNode {
    Leaf {
        entries: Vec<Ext>,
        next: Option<usize>,
    },
    /// `pivots[i]` is the first offset under `children[i + 1]`.
    Internal {
        pivots: Vec<u64>,
        children: Vec<usize>,
    },
}

pub struct BPlusTree {
    nodes: Vec<BNode>,
    root: usize,
    cap: usize,
    total: u64,
    cost: OpCost,
}

impl BPlusTree {
    pub fn new(node_capacity: usize) -> Self {
        assert!(node_capacity >= 4);
        BPlusTree {
            nodes: vec![BNode::Leaf {
                entries: Vec::new(),
                next: None,
            }],
            root: 0,
            cap: node_capacity,
            total: 0,
            cost: OpCost::default(),
        }
    }

    /// Path of (internal node, child index) and the leaf for `offset`.
    fn descend(&self, offset: u64) -> (Vec<(usize, usize)>, usize) {
        let mut path = Vec::new();
        let mut id = self.root;
        while let BNode::Internal { pivots, children } = &self.nodes[id] {
            let i = pivots.partition_point(|&p| p <= offset);
            path.push((id, i));
            id = children[i];
        }
        (path, id)
    }

    /// Adds `delta` to every offset and pivot in a subtree.
    fn shift_subtree(&mut self, id: usize, delta: u64) {
        let mut stack = vec![id];
        while let Some(id) = stack.pop() {
            self.cost.dirtied_nodes += 1;
            match &mut self.nodes[id] {
                BNode::Leaf { entries, .. } => {
                    for e in entries.iter_mut() {
                        e.off += delta;
                    }
                    self.cost.shifted_entries += entries.len();
                }
                BNode::Internal { pivots, children } => {
                    for p in pivots.iter_mut() {
                        *p += delta;
                    }
                    self.cost.shifted_entries += pivots.len();
                    stack.extend(children.iter().copied());
                }
            }
        }
    }

    fn split_overflow(&mut self, path: &[(usize, usize)], leaf: usize) {
        let mut id = leaf;
        let mut depth = path.len();
        loop {
            let (right, pivot) = match &mut self.nodes[id] {
                BNode::Leaf { entries, next } => {
                    if entries.len() <= self.cap {
                        return;
                    }
                    let r = entries.split_off(entries.len() / 2);
                    let pivot = r[0].off;
                    (
                        BNode::Leaf {
                            entries: r,
                            next: next.take(),
                        },
                        pivot,
                    )
                }
                BNode::Internal { pivots, children } => {
                    if children.len() <= self.cap {
                        return;
                    }
                    let mid = children.len() / 2;
                    let rc = children.split_off(mid);
                    let mut rp = pivots.split_off(mid - 1);
                    let pivot = rp.remove(0);
                    (
                        BNode::Internal {
                            pivots: rp,
                            children: rc,
                        },
                        pivot,
                    )
                }
            };
            self.nodes.push(right);
            let rid = self.nodes.len() - 1;
            if let BNode::Leaf { next, .. } = &mut self.nodes[id] {
                *next = Some(rid);
            }
            if depth == 0 {
                self.nodes.push(BNode::Internal {
                    pivots: vec![pivot],
                    children: vec![id, rid],
                });
                self.root = self.nodes.len() - 1;
                return;
            }
            let (parent, i) = path[depth - 1];
            let BNode::Internal { pivots, children } = &mut self.nodes[parent] else {
                unreachable!()
            };
            children.insert(i + 1, rid);
            pivots.insert(i, pivot);
            id = parent;
            depth -= 1;
        }
    }

    fn locate(&self, offset: u64) -> Option<(usize, usize)> {
        if offset >= self.total {
            return None;
        }
        let (_, leaf) = self.descend(offset);
        let BNode::Leaf { entries, .. } = &self.nodes[leaf] else {
            unreachable!()
        };
        Some((leaf, entries.partition_point(|e| e.off <= offset) - 1))
    }
}

impl ExtentIndex for BPlusTree {
    fn name(&self) -> &'static str {
        "bplus-tree"
    }

    fn insert_range(&mut self, offset: u64, len: u64, phys: u64) {
        assert!(offset <= self.total && len > 0);
        self.cost = OpCost::default();
        let (path, leaf) = self.descend(offset);
        let BNode::Leaf { entries, .. } = &mut self.nodes[leaf] else {
            unreachable!()
        };
        let mut at = entries.partition_point(|e| e.off < offset);
        if at > 0 && entries[at - 1].off + entries[at - 1].len > offset {
            let (l, r) = split_ext(entries[at - 1], offset);
            entries[at - 1] = l;
            entries.insert(at, r);
        }
        entries.insert(at, Ext { off: offset, len, phys });
        at += 1;
        for e in &mut entries[at..] {
            e.off += len;
        }
        self.cost.dirtied_nodes += 1;
        self.cost.shifted_entries += entries.len() - at;
        // Pivots right of the path, and every subtree to the right.
        for &(id, i) in path.iter().rev() {
            let BNode::Internal { pivots, children } = &mut self.nodes[id] else {
                unreachable!()
            };
            let right: Vec<usize> = children[i + 1..].to_vec();
            if !right.is_empty() {
                for p in &mut pivots[i..] {
                    *p += len;
                }
                self.cost.shifted_entries += pivots.len() - i;
                self.cost.dirtied_nodes += 1;
            }
            for c in right {
                self.shift_subtree(c, len);
            }
        }
        self.total += len;
        self.split_overflow(&path, leaf);
    }

    fn lookup(&self, offset: u64) -> Option<Ext> {
        let (leaf, i) = self.locate(offset)?;
        let BNode::Leaf { entries, .. } = &self.nodes[leaf] else {
            unreachable!()
        };
        Some(entries[i])
    }

    fn range(&self, offset: u64, n: usize) -> Vec<Ext> {
        let mut out = Vec::with_capacity(n.min(1024));
        let Some((mut leaf, mut i)) = self.locate(offset) else {
            return out;
        };
        while out.len() < n {
            let BNode::Leaf { entries, next } = &self.nodes[leaf] else {
                unreachable!()
            };
            let take = (n - out.len()).min(entries.len() - i);
            out.extend_from_slice(&entries[i..i + take]);
            match next {
                Some(nx) => {
                    leaf = *nx;
                    i = 0;
                }
                None => break,
            }
        }
        out
    }

    fn total_size(&self) -> u64 {
        self.total
    }

    fn last_cost(&self) -> OpCost {
        self.cost
    }
}
