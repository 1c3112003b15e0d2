use super::node::{NodeId, NodeKind};
use super::{route, Extent, FlexTree};

/// Forward iterator over leaf entries, yielding `(effective start, extent)`.
///
/// Keeps the internal-node stack so crossing into the next leaf only walks
/// up to the nearest ancestor with a right sibling.
pub struct Extents<'a> {
    tree: &'a FlexTree,
    /// `(internal node, child index taken, shift sum at that node)`.
    stack: Vec<(NodeId, usize, i64)>,
    leaf: NodeId,
    sum: i64,
    idx: usize,
}

impl<'a> Extents<'a> {
    pub(super) fn seek(tree: &'a FlexTree, offset: u64) -> Self {
        let mut stack = Vec::with_capacity(tree.height);
        let mut id = tree.root.child;
        let mut sum = tree.root.shift;
        loop {
            match &tree.arena.get(id).kind {
                NodeKind::Leaf(entries) => {
                    let rel = offset as i64 - sum;
                    let idx = entries.partition_point(|e| (e.poff as i64) <= rel).saturating_sub(1);
                    return Extents {
                        tree,
                        stack,
                        leaf: id,
                        sum,
                        idx,
                    };
                }
                NodeKind::Internal { children, pivots } => {
                    let idx = route(pivots, sum, offset);
                    stack.push((id, idx, sum));
                    sum += children[idx].shift;
                    id = children[idx].child;
                }
            }
        }
    }

    fn next_leaf(&mut self) -> bool {
        while let Some((id, idx, base)) = self.stack.pop() {
            let children = self.tree.arena.get(id).children();
            if idx + 1 < children.len() {
                self.stack.push((id, idx + 1, base));
                let mut sum = base + children[idx + 1].shift;
                let mut node = children[idx + 1].child;
                loop {
                    match &self.tree.arena.get(node).kind {
                        NodeKind::Leaf(_) => break,
                        NodeKind::Internal { children, .. } => {
                            self.stack.push((node, 0, sum));
                            sum += children[0].shift;
                            node = children[0].child;
                        }
                    }
                }
                self.leaf = node;
                self.sum = sum;
                self.idx = 0;
                return true;
            }
        }
        false
    }
}

impl Iterator for Extents<'_> {
    type Item = (u64, Extent);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let entries = self.tree.arena.get(self.leaf).entries();
            if let Some(e) = entries.get(self.idx) {
                self.idx += 1;
                return Some(((self.sum + e.poff as i64) as u64, *e));
            }
            if !self.next_leaf() {
                return None;
            }
        }
    }
}
