//! FlexTree: a B+-tree extent index over a byte-granular logical address
//! space in which range insertion and removal shift all later mappings in
//! O(log N) node updates.
//!
//! Leaf entries store a *partial* offset and every child pointer carries a
//! signed shift. The effective offset of an entry is its partial offset plus
//! the sum of the shifts on its root-to-leaf path, so shifting everything
//! right of a point only touches the pointers and pivots that follow the
//! search path on each level.
//!
//! Holes are recorded explicitly as extents whose physical address is
//! [`UNMAPPED`]; the leaf level therefore always tiles `[0, total_size())`.

mod cursor;
mod layout;
mod maintenance;
mod node;

pub use cursor::Extents;
pub use layout::{LayoutNode, TreeLayout};
pub use node::{ChildRef, NodeId};

use node::{Arena, Node, NodeKind};
use thiserror::Error;

/// Physical address reserved for unmapped (hole) ranges.
pub const UNMAPPED: u64 = (1 << 48) - 1;

/// Exclusive bound of a 48-bit partial offset.
pub const PARTIAL_LIMIT: u64 = 1 << 48;

/// Leaf entry: `len` bytes starting at the entry's effective offset map to
/// `phys..phys + len`, or to nothing when `phys == UNMAPPED`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Extent {
    pub poff: u64,
    pub len: u32,
    pub phys: u64,
}

impl Extent {
    pub fn new(poff: u64, len: u32, phys: u64) -> Self {
        Extent { poff, len, phys }
    }

    pub fn is_mapped(&self) -> bool {
        self.phys != UNMAPPED
    }
}

/// One piece of a translated logical range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MappingRun {
    pub phys: u64,
    pub len: u64,
}

impl MappingRun {
    pub fn new(phys: u64, len: u64) -> Self {
        MappingRun { phys, len }
    }

    pub fn hole(len: u64) -> Self {
        MappingRun { phys: UNMAPPED, len }
    }

    pub fn is_mapped(&self) -> bool {
        self.phys != UNMAPPED
    }
}

/// The extent containing a logical offset, as returned by
/// [`FlexTree::find_extent`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtentInfo {
    pub start: u64,
    pub phys: u64,
    pub len: u32,
}

/// Rule for coalescing an inserted run into its left neighbour when the two
/// are physically contiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtentMerge {
    /// Merged extents never grow beyond this many bytes.
    pub max_len: u32,
    /// Merged extents never straddle a multiple of this physical boundary.
    pub phys_boundary: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeConfig {
    /// Maximum entries per node, for both leaves and internal nodes.
    pub node_capacity: usize,
    /// Exclusive upper bound for leaf partial offsets.
    pub partial_limit: u64,
    /// A leaf is rebased once its largest partial offset exceeds this.
    pub rebase_threshold: u64,
    pub extent_merge: Option<ExtentMerge>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            node_capacity: 64,
            partial_limit: PARTIAL_LIMIT,
            rebase_threshold: PARTIAL_LIMIT / 2,
            extent_merge: None,
        }
    }
}

impl TreeConfig {
    pub fn with_capacity(node_capacity: usize) -> Self {
        TreeConfig {
            node_capacity,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), TreeError> {
        if self.node_capacity < 4 {
            return Err(TreeError::InvalidConfig(format!(
                "node capacity {} is below the minimum of 4",
                self.node_capacity
            )));
        }
        if self.partial_limit == 0 || self.partial_limit > PARTIAL_LIMIT {
            return Err(TreeError::InvalidConfig("partial limit must be in (0, 2^48]".into()));
        }
        if self.rebase_threshold >= self.partial_limit {
            return Err(TreeError::InvalidConfig(
                "rebase threshold must be below the partial limit".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("range [{offset}, +{len}) is out of bounds for size {size}")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error("zero-length range")]
    EmptyRange,
    #[error("range [{offset}, +{len}) is not inside a single mapped extent")]
    NotWithinExtent { offset: u64, len: u64 },
    #[error("physical address {0:#x} does not fit in 48 bits")]
    PhysOutOfRange(u64),
    #[error("invalid tree layout: {0}")]
    InvalidLayout(String),
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
}

/// Structural maintenance counters, cumulative over the tree's lifetime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TreeCounters {
    pub splits: u64,
    pub merges: u64,
    pub rebases: u64,
}

/// Root-to-leaf search path: `(child index, shift)` per internal level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchPath {
    pub steps: Vec<(usize, i64)>,
    pub shift_sum: i64,
}

/// Borrowed view of one node, used by the checkpoint writer.
#[derive(Clone, Copy, Debug)]
pub enum NodeView<'a> {
    Leaf(&'a [Extent]),
    Internal {
        children: &'a [ChildRef],
        pivots: &'a [i64],
    },
}

#[derive(Clone, Copy, Debug)]
struct Step {
    node: NodeId,
    idx: usize,
}

#[derive(Clone, Debug)]
struct Path {
    steps: Vec<Step>,
    leaf: NodeId,
    sum: i64,
}

#[inline]
pub(crate) fn advance_phys(phys: u64, by: u64) -> u64 {
    if phys == UNMAPPED {
        UNMAPPED
    } else {
        phys + by
    }
}

#[derive(Clone, Debug)]
pub struct FlexTree {
    arena: Arena,
    /// Virtual pointer to the root; its shift applies to the whole tree.
    root: ChildRef,
    height: usize,
    total: u64,
    config: TreeConfig,
    op_stamp: u64,
    touched: Vec<NodeId>,
    last_dirtied: usize,
    retired_slots: Vec<u64>,
    counters: TreeCounters,
}

impl Default for FlexTree {
    fn default() -> Self {
        Self::new(TreeConfig::default()).expect("default config is valid")
    }
}

impl FlexTree {
    pub fn new(config: TreeConfig) -> Result<Self, TreeError> {
        config.validate()?;
        let mut arena = Arena::default();
        let root = arena.alloc(Node::leaf(Vec::new()));
        Ok(FlexTree {
            arena,
            root: ChildRef { shift: 0, child: root },
            height: 1,
            total: 0,
            config,
            op_stamp: 0,
            touched: Vec::new(),
            last_dirtied: 0,
            retired_slots: Vec::new(),
            counters: TreeCounters::default(),
        })
    }

    pub fn with_capacity(node_capacity: usize) -> Result<Self, TreeError> {
        Self::new(TreeConfig::with_capacity(node_capacity))
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn total_size(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of levels, counting the leaf level.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.arena.live()
    }

    pub fn extent_count(&self) -> usize {
        self.extents().count()
    }

    pub fn counters(&self) -> TreeCounters {
        self.counters
    }

    /// Distinct nodes whose entries, shifts or pivots were changed by the
    /// most recent mutating operation, excluding split/merge/rebase
    /// restructuring and nodes freed by it.
    pub fn last_op_dirtied(&self) -> usize {
        self.last_dirtied
    }

    // ---------------------------------------------------------------------
    // Mutating operations
    // ---------------------------------------------------------------------

    /// Inserts `len` bytes mapped to `phys` at `offset`, shifting every
    /// mapping at or after `offset` right by `len`.
    pub fn insert_range(&mut self, offset: u64, len: u64, phys: u64) -> Result<(), TreeError> {
        if len == 0 {
            return Err(TreeError::EmptyRange);
        }
        if offset > self.total {
            return Err(TreeError::OutOfRange {
                offset,
                len,
                size: self.total,
            });
        }
        check_phys(phys, len)?;
        self.begin_op();
        self.insert_inner(offset, len, phys);
        self.end_op();
        Ok(())
    }

    /// Removes `[offset, offset + len)` and shifts later mappings left by
    /// `len`. Returns the removed runs in logical order, holes included
    /// (reported as [`UNMAPPED`]).
    pub fn collapse_range(&mut self, offset: u64, len: u64) -> Result<Vec<MappingRun>, TreeError> {
        self.check_within(offset, len)?;
        if len == 0 {
            return Ok(Vec::new());
        }
        self.begin_op();
        let mut freed = Vec::new();
        self.collapse_inner(offset, len, &mut freed);
        self.end_op();
        Ok(freed)
    }

    /// Maps `[offset, offset + len)` to `phys` without shifting anything.
    /// Writing past the end first records the gap as a hole. Returns the
    /// runs that were replaced.
    pub fn write_range(&mut self, offset: u64, len: u64, phys: u64) -> Result<Vec<MappingRun>, TreeError> {
        if len == 0 {
            return Err(TreeError::EmptyRange);
        }
        check_phys(phys, len)?;
        offset.checked_add(len).ok_or(TreeError::OutOfRange {
            offset,
            len,
            size: self.total,
        })?;
        self.begin_op();
        let mut replaced = Vec::new();
        if offset > self.total {
            let gap = offset - self.total;
            self.insert_inner(self.total, gap, UNMAPPED);
        }
        let overlap = len.min(self.total - offset);
        if overlap > 0 {
            self.collapse_inner(offset, overlap, &mut replaced);
            self.insert_inner(offset, overlap, phys);
        }
        if len > overlap {
            self.insert_inner(offset + overlap, len - overlap, advance_phys(phys, overlap));
        }
        self.end_op();
        Ok(replaced)
    }

    /// Points `[offset, offset + len)`, which must lie inside one mapped
    /// extent, at `new_phys`. No effective offset changes.
    pub fn remap(&mut self, offset: u64, len: u64, new_phys: u64) -> Result<(), TreeError> {
        if len == 0 {
            return Err(TreeError::EmptyRange);
        }
        self.check_within(offset, len)?;
        if new_phys == UNMAPPED {
            return Err(TreeError::PhysOutOfRange(new_phys));
        }
        check_phys(new_phys, len)?;
        let info = self.find_extent(offset)?;
        if !info.phys_mapped() || offset + len > info.start + info.len as u64 {
            return Err(TreeError::NotWithinExtent { offset, len });
        }
        self.begin_op();
        let path = self.descend_mut(offset, true);
        let rel = (offset as i64 - path.sum) as u64;
        let stamp = self.op_stamp;
        let node = self.arena.get_mut(path.leaf);
        Self::stamp_node(node, stamp, &mut self.touched, path.leaf);
        let entries = node.entries_mut();
        let j = entries.partition_point(|e| e.poff <= rel) - 1;
        let e = entries[j];
        let head = rel - e.poff;
        let tail = e.len as u64 - head - len;
        let mut pieces = Vec::with_capacity(3);
        if head > 0 {
            pieces.push(Extent::new(e.poff, head as u32, e.phys));
        }
        pieces.push(Extent::new(rel, len as u32, new_phys));
        if tail > 0 {
            pieces.push(Extent::new(rel + len, tail as u32, e.phys + head + len));
        }
        entries.splice(j..=j, pieces);
        self.end_op();
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Read operations
    // ---------------------------------------------------------------------

    /// Translates `[offset, offset + len)` into physical runs, in order.
    pub fn query_range(&self, offset: u64, len: u64) -> Result<Vec<MappingRun>, TreeError> {
        self.check_within(offset, len)?;
        let mut out = Vec::new();
        if len == 0 {
            return Ok(out);
        }
        let mut it = self.extents_from(offset);
        let mut pos = offset;
        let end = offset + len;
        while pos < end {
            let (start, e) = it.next().expect("leaf level tiles the address space");
            let skip = pos - start;
            let take = (e.len as u64 - skip).min(end - pos);
            out.push(MappingRun::new(advance_phys(e.phys, skip), take));
            pos += take;
        }
        Ok(out)
    }

    /// The extent containing `offset`; a boundary offset resolves to the
    /// extent that starts there.
    pub fn find_extent(&self, offset: u64) -> Result<ExtentInfo, TreeError> {
        if offset >= self.total {
            return Err(TreeError::OutOfRange {
                offset,
                len: 1,
                size: self.total,
            });
        }
        let (start, e) = self
            .extents_from(offset)
            .next()
            .expect("offset below total size has an extent");
        Ok(ExtentInfo {
            start,
            phys: e.phys,
            len: e.len,
        })
    }

    /// Shift path to the leaf holding `offset` (clamped to the last byte).
    pub fn search_path(&self, offset: u64) -> SearchPath {
        let mut steps = Vec::new();
        let mut sum = self.root.shift;
        let mut id = self.root.child;
        loop {
            let node = self.arena.get(id);
            match &node.kind {
                NodeKind::Leaf(_) => break,
                NodeKind::Internal { children, pivots } => {
                    let idx = route(pivots, sum, offset);
                    let c = children[idx];
                    steps.push((idx, c.shift));
                    sum += c.shift;
                    id = c.child;
                }
            }
        }
        SearchPath { steps, shift_sum: sum }
    }

    /// Iterates all extents in logical order as `(effective start, extent)`.
    pub fn extents(&self) -> Extents<'_> {
        self.extents_from(0)
    }

    /// Iterates extents starting with the one containing `offset`.
    pub fn extents_from(&self, offset: u64) -> Extents<'_> {
        Extents::seek(self, offset)
    }

    // ---------------------------------------------------------------------
    // Persistence hooks
    // ---------------------------------------------------------------------

    pub fn root(&self) -> ChildRef {
        self.root
    }

    pub fn node_view(&self, id: NodeId) -> NodeView<'_> {
        match &self.arena.get(id).kind {
            NodeKind::Leaf(e) => NodeView::Leaf(e),
            NodeKind::Internal { children, pivots } => NodeView::Internal { children, pivots },
        }
    }

    pub fn node_dirty(&self, id: NodeId) -> bool {
        self.arena.get(id).dirty
    }

    pub fn node_slot(&self, id: NodeId) -> Option<u64> {
        self.arena.get(id).slot
    }

    /// Records where `id` was persisted and marks it clean. The previous
    /// slot, if any, is retired.
    pub fn set_node_slot(&mut self, id: NodeId, slot: u64) {
        let node = self.arena.get_mut(id);
        if let Some(old) = node.slot.replace(slot) {
            if old != slot {
                self.retired_slots.push(old);
            }
        }
        node.dirty = false;
    }

    /// Slots of nodes that were rewritten or freed since the last call.
    pub fn take_retired_slots(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.retired_slots)
    }

    /// Assigns persistence slots to nodes in pre-order (root first,
    /// children left to right) and marks every node clean.
    pub fn assign_slots_preorder(&mut self, slots: &[u64]) -> Result<(), TreeError> {
        let order = self.preorder_ids();
        if order.len() != slots.len() {
            return Err(TreeError::InvalidLayout(format!(
                "{} slots for {} nodes",
                slots.len(),
                order.len()
            )));
        }
        for (id, &slot) in order.into_iter().zip(slots) {
            let node = self.arena.get_mut(id);
            node.slot = Some(slot);
            node.dirty = false;
        }
        Ok(())
    }

    pub fn preorder_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.arena.live());
        let mut stack = vec![self.root.child];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let NodeKind::Internal { children, .. } = &self.arena.get(id).kind {
                stack.extend(children.iter().rev().map(|c| c.child));
            }
        }
        out
    }

    // ---------------------------------------------------------------------
    // Internals
    // ---------------------------------------------------------------------

    fn check_within(&self, offset: u64, len: u64) -> Result<(), TreeError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.total => Ok(()),
            _ => Err(TreeError::OutOfRange {
                offset,
                len,
                size: self.total,
            }),
        }
    }

    fn begin_op(&mut self) {
        self.op_stamp += 1;
        self.touched.clear();
    }

    fn end_op(&mut self) {
        let stamp = self.op_stamp;
        let arena = &self.arena;
        let mut n = 0;
        for &id in &self.touched {
            if arena.is_live(id) && arena.get(id).stamp == stamp {
                n += 1;
            }
        }
        self.last_dirtied = n;
    }

    #[inline]
    fn stamp_node(node: &mut Node, stamp: u64, touched: &mut Vec<NodeId>, id: NodeId) {
        node.dirty = true;
        if node.stamp != stamp {
            node.stamp = stamp;
            touched.push(id);
        }
    }

    fn is_full(&self, id: NodeId) -> bool {
        self.arena.get(id).len() + 1 >= self.config.node_capacity
    }

    /// Descends to the leaf holding `offset`. With `split`, every full node
    /// on the way is split first so the leaf can take two more entries.
    fn descend_mut(&mut self, offset: u64, split: bool) -> Path {
        if split && self.is_full(self.root.child) {
            self.grow_root();
        }
        let mut steps = Vec::with_capacity(self.height);
        let mut id = self.root.child;
        let mut sum = self.root.shift;
        loop {
            let node = self.arena.get(id);
            let (mut idx, child) = match &node.kind {
                NodeKind::Leaf(_) => break,
                NodeKind::Internal { children, pivots } => {
                    let idx = route(pivots, sum, offset);
                    (idx, children[idx].child)
                }
            };
            if split && self.is_full(child) {
                self.split_child(id, idx);
                idx = route(self.arena.get(id).pivots(), sum, offset);
            }
            let c = self.arena.get(id).children()[idx];
            steps.push(Step { node: id, idx });
            sum += c.shift;
            id = c.child;
        }
        Path { steps, leaf: id, sum }
    }

    fn insert_inner(&mut self, mut offset: u64, mut len: u64, mut phys: u64) {
        while len > 0 {
            let chunk = len.min(u32::MAX as u64) as u32;
            self.insert_chunk(offset, chunk, phys);
            offset += chunk as u64;
            len -= chunk as u64;
            phys = advance_phys(phys, chunk as u64);
        }
    }

    fn insert_chunk(&mut self, offset: u64, len: u32, phys: u64) {
        if self.total == 0 {
            self.root.shift = 0;
        }
        let path = self.descend_mut(offset, true);
        let rel = (offset as i64 - path.sum) as u64;
        let stamp = self.op_stamp;
        let merge_rule = self.config.extent_merge;
        let node = self.arena.get_mut(path.leaf);
        Self::stamp_node(node, stamp, &mut self.touched, path.leaf);
        let entries = node.entries_mut();

        let mut pos = entries.partition_point(|e| e.poff <= rel);
        if pos > 0 {
            let e = entries[pos - 1];
            if e.poff == rel {
                pos -= 1;
            } else if rel < e.poff + e.len as u64 {
                let head = (rel - e.poff) as u32;
                entries[pos - 1].len = head;
                entries.insert(pos, Extent::new(rel, e.len - head, advance_phys(e.phys, head as u64)));
            }
        }
        let first_shifted = if pos > 0 && can_merge(&entries[pos - 1], phys, len, merge_rule) {
            entries[pos - 1].len += len;
            pos
        } else {
            entries.insert(pos, Extent::new(rel, len, phys));
            pos + 1
        };
        for e in &mut entries[first_shifted..] {
            e.poff += len as u64;
        }
        self.shift_after_path(&path.steps, len as i64);
        self.total += len as u64;
        self.rebase_if_needed(&path);
    }

    fn collapse_inner(&mut self, offset: u64, len: u64, freed: &mut Vec<MappingRun>) {
        let mut remaining = len;
        while remaining > 0 {
            let path = self.descend_mut(offset, true);
            let rel = (offset as i64 - path.sum) as u64;
            let stamp = self.op_stamp;
            let node = self.arena.get_mut(path.leaf);
            Self::stamp_node(node, stamp, &mut self.touched, path.leaf);
            let entries = node.entries_mut();

            let mut j = entries.partition_point(|e| e.poff <= rel) - 1;
            let e = entries[j];
            if e.poff < rel {
                let head = (rel - e.poff) as u32;
                entries[j].len = head;
                entries.insert(j + 1, Extent::new(rel, e.len - head, advance_phys(e.phys, head as u64)));
                j += 1;
            }
            let mut removed = 0u64;
            while j < entries.len() && removed < remaining {
                let e = entries[j];
                let take = (e.len as u64).min(remaining - removed);
                freed.push(MappingRun::new(e.phys, take));
                removed += take;
                if take == e.len as u64 {
                    entries.remove(j);
                } else {
                    entries[j] = Extent::new(e.poff + take, e.len - take as u32, advance_phys(e.phys, take));
                }
            }
            for e in &mut entries[j..] {
                e.poff -= removed;
            }
            self.shift_after_path(&path.steps, -(removed as i64));
            self.total -= removed;
            remaining -= removed;
            self.fix_underflow(&path);
        }
        if self.total == 0 {
            self.reset_empty();
        }
    }

    /// Adds `delta` to every pointer and pivot that follows the path.
    fn shift_after_path(&mut self, steps: &[Step], delta: i64) {
        let stamp = self.op_stamp;
        for s in steps.iter().rev() {
            let node = self.arena.get_mut(s.node);
            let (children, pivots) = node.internal_mut();
            if s.idx + 1 >= children.len() {
                continue;
            }
            for c in &mut children[s.idx + 1..] {
                c.shift += delta;
            }
            for p in &mut pivots[s.idx..] {
                *p += delta;
            }
            Self::stamp_node(node, stamp, &mut self.touched, s.node);
        }
    }

    fn reset_empty(&mut self) {
        let root = self.root.child;
        let empty_leaf = matches!(&self.arena.get(root).kind, NodeKind::Leaf(e) if e.is_empty());
        if !empty_leaf {
            for id in self.preorder_ids() {
                self.release_node(id);
            }
            self.root.child = self.arena.alloc(Node::leaf(Vec::new()));
            self.height = 1;
        }
        self.root.shift = 0;
    }

    fn release_node(&mut self, id: NodeId) -> Node {
        let node = self.arena.release(id);
        if let Some(slot) = node.slot {
            self.retired_slots.push(slot);
        }
        node
    }
}

impl ExtentInfo {
    pub fn phys_mapped(&self) -> bool {
        self.phys != UNMAPPED
    }
}

#[inline]
fn route(pivots: &[i64], sum: i64, offset: u64) -> usize {
    let target = offset as i64;
    pivots.partition_point(|&p| sum + p <= target)
}

fn check_phys(phys: u64, len: u64) -> Result<(), TreeError> {
    if phys == UNMAPPED {
        return Ok(());
    }
    match phys.checked_add(len) {
        Some(end) if end <= UNMAPPED => Ok(()),
        _ => Err(TreeError::PhysOutOfRange(phys)),
    }
}

fn can_merge(prev: &Extent, phys: u64, len: u32, rule: Option<ExtentMerge>) -> bool {
    let combined = prev.len as u64 + len as u64;
    if !prev.is_mapped() || phys == UNMAPPED {
        return !prev.is_mapped() && phys == UNMAPPED && combined <= u32::MAX as u64;
    }
    let Some(rule) = rule else { return false };
    prev.phys + prev.len as u64 == phys
        && combined <= rule.max_len as u64
        && prev.phys / rule.phys_boundary == (phys + len as u64 - 1) / rule.phys_boundary
}
