//! Node split, merge and leaf rebase. None of these change any effective
//! offset.

use super::node::{ChildRef, Node, NodeId, NodeKind};
use super::{FlexTree, Path, TreeError};

impl FlexTree {
    /// Puts a new internal root above the current one.
    pub(super) fn grow_root(&mut self) {
        let old = self.root;
        let new_root = self.arena.alloc(Node::internal(vec![old], Vec::new()));
        self.root = ChildRef {
            shift: 0,
            child: new_root,
        };
        self.height += 1;
    }

    /// Moves the upper half of `parent.children[idx]` into a new right
    /// sibling. The new pointer inherits the old pointer's shift and the new
    /// pivot is the median's partial offset plus that shift.
    pub(super) fn split_child(&mut self, parent: NodeId, idx: usize) {
        let cref = self.arena.get(parent).children()[idx];
        let child = self.arena.get_mut(cref.child);
        child.dirty = true;
        let (right, median) = match &mut child.kind {
            NodeKind::Leaf(entries) => {
                let right = entries.split_off(entries.len() / 2);
                let median = right[0].poff as i64;
                (Node::leaf(right), median)
            }
            NodeKind::Internal { children, pivots } => {
                let mid = children.len() / 2;
                let rc = children.split_off(mid);
                let rp = pivots.split_off(mid);
                let median = pivots.pop().expect("internal node has a median pivot");
                (Node::internal(rc, rp), median)
            }
        };
        let right_id = self.arena.alloc(right);
        let p = self.arena.get_mut(parent);
        p.dirty = true;
        let (children, pivots) = p.internal_mut();
        children.insert(
            idx + 1,
            ChildRef {
                shift: cref.shift,
                child: right_id,
            },
        );
        pivots.insert(idx, median + cref.shift);
        self.counters.splits += 1;
    }

    /// Walks the path bottom-up after a removal: drops emptied nodes and
    /// merges a node into a sibling when their combined entry count is at
    /// most half the capacity.
    pub(super) fn fix_underflow(&mut self, path: &Path) {
        let mut child = path.leaf;
        for step in path.steps.iter().rev() {
            let parent = step.node;
            let i = step.idx;
            debug_assert_eq!(self.arena.get(parent).children()[i].child, child);
            if self.arena.get(child).len() == 0 {
                let p = self.arena.get_mut(parent);
                p.dirty = true;
                let (children, pivots) = p.internal_mut();
                children.remove(i);
                if !pivots.is_empty() {
                    pivots.remove(i.saturating_sub(1));
                }
                self.release_node(child);
            } else {
                let siblings = self.arena.get(parent).children().len();
                let half = self.config.node_capacity / 2;
                let fits = |t: &Self, a: usize, b: usize| {
                    let ca = t.arena.get(parent).children()[a].child;
                    let cb = t.arena.get(parent).children()[b].child;
                    t.arena.get(ca).len() + t.arena.get(cb).len() <= half
                };
                if i + 1 < siblings && fits(self, i, i + 1) {
                    self.merge_children(parent, i);
                } else if i > 0 && fits(self, i - 1, i) {
                    self.merge_children(parent, i - 1);
                }
            }
            child = parent;
        }
        self.shrink_root();
    }

    /// Merges `children[i + 1]` into `children[i]`. Moved entries are
    /// re-expressed relative to the survivor's shift. Returns false (and
    /// leaves the tree unchanged) if a merged leaf could not hold the
    /// resulting partial offsets.
    pub(super) fn merge_children(&mut self, parent: NodeId, i: usize) -> bool {
        let (left, right) = {
            let children = self.arena.get(parent).children();
            (children[i], children[i + 1])
        };
        let delta = right.shift - left.shift;
        let separator = self.arena.get(parent).pivots()[i];

        if self.arena.get(left.child).is_leaf() {
            let limit = self.config.partial_limit as i64;
            let lmin = self.arena.get(left.child).entries().first().map(|e| e.poff as i64);
            let rmax = self
                .arena
                .get(right.child)
                .entries()
                .last()
                .map(|e| e.poff as i64 + delta);
            let lmax = self.arena.get(left.child).entries().last().map(|e| e.poff as i64);
            let rmin = self
                .arena
                .get(right.child)
                .entries()
                .first()
                .map(|e| e.poff as i64 + delta);
            let min = lmin.or(rmin).unwrap_or(0);
            let max = rmax.or(lmax).unwrap_or(0);
            if max - min >= limit || min < 0 {
                return false;
            }
            let rebase = if max >= limit { min } else { 0 };
            let moved = self.release_node(right.child);
            let NodeKind::Leaf(moved) = moved.kind else {
                unreachable!()
            };
            let l = self.arena.get_mut(left.child);
            l.dirty = true;
            let entries = l.entries_mut();
            for e in entries.iter_mut() {
                e.poff = (e.poff as i64 - rebase) as u64;
            }
            entries.extend(moved.into_iter().map(|mut e| {
                e.poff = (e.poff as i64 + delta - rebase) as u64;
                e
            }));
            if rebase != 0 {
                self.arena.get_mut(parent).internal_mut().0[i].shift += rebase;
                self.counters.rebases += 1;
            }
        } else {
            let moved = self.release_node(right.child);
            let NodeKind::Internal {
                children: rc,
                pivots: rp,
            } = moved.kind
            else {
                unreachable!()
            };
            let l = self.arena.get_mut(left.child);
            l.dirty = true;
            let (children, pivots) = l.internal_mut();
            pivots.push(separator - left.shift);
            pivots.extend(rp.into_iter().map(|p| p + delta));
            children.extend(rc.into_iter().map(|c| ChildRef {
                shift: c.shift + delta,
                child: c.child,
            }));
        }
        let p = self.arena.get_mut(parent);
        p.dirty = true;
        let (children, pivots) = p.internal_mut();
        children.remove(i + 1);
        pivots.remove(i);
        self.counters.merges += 1;
        true
    }

    /// Removes single-child internal roots, folding their shift into the
    /// root pointer.
    pub(super) fn shrink_root(&mut self) {
        loop {
            let root = self.root.child;
            let node = self.arena.get(root);
            match &node.kind {
                NodeKind::Internal { children, .. } if children.len() == 1 => {
                    let only = children[0];
                    self.release_node(root);
                    self.root = ChildRef {
                        shift: self.root.shift + only.shift,
                        child: only.child,
                    };
                    self.height -= 1;
                }
                NodeKind::Internal { children, .. } if children.is_empty() => {
                    self.release_node(root);
                    self.root = ChildRef {
                        shift: 0,
                        child: self.arena.alloc(Node::leaf(Vec::new())),
                    };
                    self.height = 1;
                }
                _ => break,
            }
        }
    }

    pub(super) fn rebase_if_needed(&mut self, path: &Path) {
        let threshold = self.config.rebase_threshold;
        let over = self
            .arena
            .get(path.leaf)
            .entries()
            .last()
            .is_some_and(|e| e.poff > threshold);
        if over {
            self.rebase_leaf(path);
        }
        debug_assert!(
            self.arena
                .get(path.leaf)
                .entries()
                .last()
                .is_none_or(|e| e.poff < self.config.partial_limit),
            "leaf spans more than the partial offset range"
        );
    }

    /// Subtracts the leaf's minimum partial offset from all of its entries
    /// and adds it to the pointer that leads to the leaf.
    fn rebase_leaf(&mut self, path: &Path) {
        let leaf = self.arena.get_mut(path.leaf);
        let entries = leaf.entries_mut();
        let Some(min) = entries.first().map(|e| e.poff) else {
            return;
        };
        if min == 0 {
            return;
        }
        for e in entries.iter_mut() {
            e.poff -= min;
        }
        leaf.dirty = true;
        match path.steps.last() {
            Some(step) => {
                let p = self.arena.get_mut(step.node);
                p.dirty = true;
                p.internal_mut().0[step.idx].shift += min as i64;
            }
            None => self.root.shift += min as i64,
        }
        self.counters.rebases += 1;
    }

    /// Rebases the leaf holding `offset` regardless of the threshold.
    pub fn rebase_leaf_at(&mut self, offset: u64) -> Result<(), TreeError> {
        if offset >= self.total {
            return Err(TreeError::OutOfRange {
                offset,
                len: 1,
                size: self.total,
            });
        }
        let path = self.descend_mut(offset, false);
        self.rebase_leaf(&path);
        Ok(())
    }
}
