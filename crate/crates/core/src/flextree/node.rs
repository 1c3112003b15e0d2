use super::Extent;

pub type NodeId = u32;

/// A pointer to a child node. Every entry below `child` has `shift` added
/// to its stored offset when its effective offset is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChildRef {
    pub shift: i64,
    pub child: NodeId,
}

#[derive(Clone, Debug)]
pub(crate) enum NodeKind {
    Leaf(Vec<Extent>),
    /// `pivots[i]` separates `children[i]` and `children[i + 1]`.
    Internal {
        children: Vec<ChildRef>,
        pivots: Vec<i64>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub kind: NodeKind,
    /// Modified since the last checkpoint cleared it.
    pub dirty: bool,
    /// Op stamp of the last shift/entry modification (dirtied-node counting).
    pub stamp: u64,
    /// Opaque persistence slot owned by the checkpoint writer.
    pub slot: Option<u64>,
}

impl Node {
    pub fn leaf(entries: Vec<Extent>) -> Self {
        Node {
            kind: NodeKind::Leaf(entries),
            dirty: true,
            stamp: 0,
            slot: None,
        }
    }

    pub fn internal(children: Vec<ChildRef>, pivots: Vec<i64>) -> Self {
        Node {
            kind: NodeKind::Internal { children, pivots },
            dirty: true,
            stamp: 0,
            slot: None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            NodeKind::Leaf(e) => e.len(),
            NodeKind::Internal { children, .. } => children.len(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf(_))
    }

    pub fn entries(&self) -> &Vec<Extent> {
        match &self.kind {
            NodeKind::Leaf(e) => e,
            NodeKind::Internal { .. } => panic!("expected leaf node"),
        }
    }

    pub fn entries_mut(&mut self) -> &mut Vec<Extent> {
        match &mut self.kind {
            NodeKind::Leaf(e) => e,
            NodeKind::Internal { .. } => panic!("expected leaf node"),
        }
    }

    pub fn children(&self) -> &Vec<ChildRef> {
        match &self.kind {
            NodeKind::Internal { children, .. } => children,
            NodeKind::Leaf(_) => panic!("expected internal node"),
        }
    }

    pub fn pivots(&self) -> &Vec<i64> {
        match &self.kind {
            NodeKind::Internal { pivots, .. } => pivots,
            NodeKind::Leaf(_) => panic!("expected internal node"),
        }
    }

    pub fn internal_mut(&mut self) -> (&mut Vec<ChildRef>, &mut Vec<i64>) {
        match &mut self.kind {
            NodeKind::Internal { children, pivots } => (children, pivots),
            NodeKind::Leaf(_) => panic!("expected internal node"),
        }
    }
}

/// Slab of nodes addressed by `NodeId`, with id reuse.
#[derive(Clone, Debug, Default)]
pub(crate) struct Arena {
    nodes: Vec<Option<Node>>,
    free: Vec<NodeId>,
    live: usize,
}

impl Arena {
    pub fn alloc(&mut self, node: Node) -> NodeId {
        self.live += 1;
        if let Some(id) = self.free.pop() {
            self.nodes[id as usize] = Some(node);
            id
        } else {
            self.nodes.push(Some(node));
            (self.nodes.len() - 1) as NodeId
        }
    }

    pub fn release(&mut self, id: NodeId) -> Node {
        let node = self.nodes[id as usize].take().expect("double free of tree node");
        self.free.push(id);
        self.live -= 1;
        node
    }

    #[inline]
    pub fn get(&self, id: NodeId) -> &Node {
        self.nodes[id as usize].as_ref().expect("dangling node id")
    }

    #[inline]
    pub fn get_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id as usize].as_mut().expect("dangling node id")
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.nodes.get(id as usize).is_some_and(|n| n.is_some())
    }

    pub fn live(&self) -> usize {
        self.live
    }
}
