//! Deterministic structural dump of a tree, the inverse constructor, and the
//! structural invariant checker used throughout the tests.

use std::fmt;

use super::node::{ChildRef, Node, NodeId, NodeKind};
use super::{Extent, FlexTree, TreeConfig, TreeError, UNMAPPED};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayoutNode {
    Leaf(Vec<Extent>),
    Internal {
        /// `(shift, child)` pairs.
        children: Vec<(i64, LayoutNode)>,
        pivots: Vec<i64>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeLayout {
    pub root_shift: i64,
    pub root: LayoutNode,
}

impl LayoutNode {
    pub fn leaf(entries: &[(u64, u32, u64)]) -> Self {
        LayoutNode::Leaf(entries.iter().map(|&(p, l, a)| Extent::new(p, l, a)).collect())
    }

    pub fn internal(children: Vec<(i64, LayoutNode)>, pivots: Vec<i64>) -> Self {
        LayoutNode::Internal { children, pivots }
    }

    /// Leaf entries as `(partial offset, length, phys)` triples.
    pub fn triples(&self) -> Vec<(u64, u32, u64)> {
        match self {
            LayoutNode::Leaf(e) => e.iter().map(|e| (e.poff, e.len, e.phys)).collect(),
            LayoutNode::Internal { .. } => Vec::new(),
        }
    }
}

impl fmt::Display for TreeLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn walk(f: &mut fmt::Formatter<'_>, node: &LayoutNode, shift: i64, depth: usize) -> fmt::Result {
            let pad = "  ".repeat(depth);
            match node {
                LayoutNode::Leaf(entries) => {
                    write!(f, "{pad}[{shift:+}] leaf")?;
                    for e in entries {
                        if e.phys == UNMAPPED {
                            write!(f, " ({},{},-)", e.poff, e.len)?;
                        } else {
                            write!(f, " ({},{},{})", e.poff, e.len, e.phys)?;
                        }
                    }
                    writeln!(f)
                }
                LayoutNode::Internal { children, pivots } => {
                    writeln!(f, "{pad}[{shift:+}] internal pivots={pivots:?}")?;
                    for (s, c) in children {
                        walk(f, c, *s, depth + 1)?;
                    }
                    Ok(())
                }
            }
        }
        walk(f, &self.root, self.root_shift, 0)
    }
}

impl FlexTree {
    pub fn to_layout(&self) -> TreeLayout {
        fn build(tree: &FlexTree, id: NodeId) -> LayoutNode {
            match &tree.arena.get(id).kind {
                NodeKind::Leaf(e) => LayoutNode::Leaf(e.clone()),
                NodeKind::Internal { children, pivots } => LayoutNode::Internal {
                    children: children.iter().map(|c| (c.shift, build(tree, c.child))).collect(),
                    pivots: pivots.clone(),
                },
            }
        }
        TreeLayout {
            root_shift: self.root.shift,
            root: build(self, self.root.child),
        }
    }

    /// Builds a tree with exactly the given structure. Nodes are allocated
    /// in pre-order and all start dirty.
    pub fn from_layout(config: TreeConfig, layout: &TreeLayout) -> Result<Self, TreeError> {
        fn build(
            tree: &mut FlexTree,
            node: &LayoutNode,
            depth: usize,
            leaf_depth: &mut Option<usize>,
        ) -> Result<NodeId, TreeError> {
            match node {
                LayoutNode::Leaf(entries) => {
                    match leaf_depth {
                        Some(d) if *d != depth => {
                            return Err(TreeError::InvalidLayout("leaves at different depths".into()))
                        }
                        _ => *leaf_depth = Some(depth),
                    }
                    tree.total += entries.iter().map(|e| e.len as u64).sum::<u64>();
                    Ok(tree.arena.alloc(Node::leaf(entries.clone())))
                }
                LayoutNode::Internal { children, pivots } => {
                    let id = tree.arena.alloc(Node::internal(Vec::new(), pivots.clone()));
                    let mut refs = Vec::with_capacity(children.len());
                    for (shift, c) in children {
                        let child = build(tree, c, depth + 1, leaf_depth)?;
                        refs.push(ChildRef { shift: *shift, child });
                    }
                    *tree.arena.get_mut(id).internal_mut().0 = refs;
                    Ok(id)
                }
            }
        }

        let mut tree = FlexTree::new(config)?;
        let placeholder = tree.root.child;
        tree.arena.release(placeholder);
        let mut leaf_depth = None;
        let root = build(&mut tree, &layout.root, 1, &mut leaf_depth)?;
        tree.root = ChildRef {
            shift: layout.root_shift,
            child: root,
        };
        tree.height = leaf_depth.unwrap_or(1);
        tree.check_invariants().map_err(TreeError::InvalidLayout)?;
        Ok(tree)
    }

    /// Verifies every structural invariant: node capacities, uniform leaf
    /// depth, in-leaf tiling, pivot consistency, partial offset bounds and
    /// that the leaves tile `[0, total_size())`.
    pub fn check_invariants(&self) -> Result<(), String> {
        struct Walk<'a> {
            tree: &'a FlexTree,
            leaf_depth: Option<usize>,
            next: u64,
            total: u64,
        }

        impl Walk<'_> {
            /// Returns the effective start of the subtree (None if empty).
            fn node(&mut self, id: NodeId, sum: i64, depth: usize, is_root: bool) -> Result<Option<u64>, String> {
                let cap = self.tree.config.node_capacity;
                let node = self.tree.arena.get(id);
                if node.len() > cap {
                    return Err(format!("node {id} holds {} entries, capacity {cap}", node.len()));
                }
                if node.len() == 0 && !is_root {
                    return Err(format!("non-root node {id} is empty"));
                }
                match &node.kind {
                    NodeKind::Leaf(entries) => {
                        if let Some(d) = self.leaf_depth {
                            if d != depth {
                                return Err(format!("leaf {id} at depth {depth}, expected {d}"));
                            }
                        }
                        self.leaf_depth = Some(depth);
                        let first = entries.first().map(|e| (sum + e.poff as i64) as u64);
                        for e in entries {
                            if e.len == 0 {
                                return Err(format!("zero-length extent in leaf {id}"));
                            }
                            if e.poff >= self.tree.config.partial_limit {
                                return Err(format!("partial offset {} overflows in leaf {id}", e.poff));
                            }
                            if e.phys != UNMAPPED && e.phys + e.len as u64 > UNMAPPED {
                                return Err(format!("physical run overflows in leaf {id}"));
                            }
                            let eff = sum + e.poff as i64;
                            if eff != self.next as i64 {
                                return Err(format!("leaf {id}: extent at effective {eff}, expected {}", self.next));
                            }
                            self.next += e.len as u64;
                            self.total += e.len as u64;
                        }
                        Ok(first)
                    }
                    NodeKind::Internal { children, pivots } => {
                        if pivots.len() + 1 != children.len() {
                            return Err(format!(
                                "internal node {id}: {} pivots for {} children",
                                pivots.len(),
                                children.len()
                            ));
                        }
                        let mut first = None;
                        for (i, c) in children.iter().enumerate() {
                            let before = self.next;
                            let start = self.node(c.child, sum + c.shift, depth + 1, false)?;
                            if i == 0 {
                                first = start;
                            } else {
                                let pivot = sum + pivots[i - 1];
                                if pivot != before as i64 || start != Some(before) {
                                    return Err(format!(
                                        "internal node {id}: pivot {i} is {pivot}, child starts at {start:?}, expected {before}"
                                    ));
                                }
                            }
                        }
                        Ok(first)
                    }
                }
            }
        }

        let mut walk = Walk {
            tree: self,
            leaf_depth: None,
            next: 0,
            total: 0,
        };
        walk.node(self.root.child, self.root.shift, 1, true)?;
        if walk.leaf_depth != Some(self.height) {
            return Err(format!(
                "height is {}, leaves found at depth {:?}",
                self.height, walk.leaf_depth
            ));
        }
        if walk.total != self.total {
            return Err(format!(
                "leaves hold {} bytes, total size is {}",
                walk.total, self.total
            ));
        }
        Ok(())
    }
}
