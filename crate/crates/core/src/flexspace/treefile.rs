//! Copy-on-write persistence of the in-memory FlexTree.
//!
//! The file starts with a 4 KiB header block; nodes live in fixed-size
//! slots after it. A checkpoint writes every changed node into a slot that
//! is not referenced by the persisted version, then commits by rewriting
//! the header. Slots of the replaced version become reusable only after
//! that header write is durable. The free-slot set is not stored: on load
//! it is everything not reachable from the committed root.

use std::collections::BTreeSet;
use std::io;
use std::sync::Arc;

use super::log::read_u48;
use super::SpaceError;
use crate::flextree::{Extent, FlexTree, LayoutNode, NodeId, NodeView, TreeConfig, TreeLayout};
use crate::storage::Storage;

const MAGIC: &[u8; 4] = b"FTRE";
const FORMAT: u8 = 1;
pub const HEADER_BLOCK: u64 = 4096;
pub const CONFIG_LEN: usize = 64;
const HEADER_LEN: usize = 40 + CONFIG_LEN + 4;
const NODE_HEAD: usize = 9;
const KIND_LEAF: u8 = 1;
const KIND_INTERNAL: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u64,
    pub root_slot: u64,
    pub root_shift: i64,
    pub total_size: u64,
    pub config: [u8; CONFIG_LEN],
}

impl Header {
    fn encode(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(HEADER_LEN);
        h.extend_from_slice(MAGIC);
        h.push(FORMAT);
        h.extend_from_slice(&[0; 3]);
        h.extend_from_slice(&self.version.to_le_bytes());
        h.extend_from_slice(&self.root_slot.to_le_bytes());
        h.extend_from_slice(&self.root_shift.to_le_bytes());
        h.extend_from_slice(&self.total_size.to_le_bytes());
        h.extend_from_slice(&self.config);
        let crc = crc32fast::hash(&h);
        h.extend_from_slice(&crc.to_le_bytes());
        h
    }

    pub fn read(file: &Arc<dyn Storage>) -> Result<Header, SpaceError> {
        let mut h = [0u8; HEADER_LEN];
        let n = file.read_at(&mut h, 0)?;
        if n < HEADER_LEN {
            return Err(SpaceError::Unrecoverable("tree file header is truncated".into()));
        }
        let crc = u32::from_le_bytes(h[HEADER_LEN - 4..].try_into().unwrap());
        if crc32fast::hash(&h[..HEADER_LEN - 4]) != crc {
            return Err(SpaceError::Unrecoverable("tree file header checksum mismatch".into()));
        }
        if &h[0..4] != MAGIC || h[4] != FORMAT {
            return Err(SpaceError::Unrecoverable("not a tree file or unknown format".into()));
        }
        let u = |r: std::ops::Range<usize>| u64::from_le_bytes(h[r].try_into().unwrap());
        Ok(Header {
            version: u(8..16),
            root_slot: u(16..24),
            root_shift: u(24..32) as i64,
            total_size: u(32..40),
            config: h[40..40 + CONFIG_LEN].try_into().unwrap(),
        })
    }
}

/// Bytes reserved per node for a given node capacity.
pub fn slot_size(capacity: usize) -> u64 {
    let leaf = NODE_HEAD + 16 * capacity;
    let internal = NODE_HEAD + 16 * capacity + 8 * (capacity - 1);
    (leaf.max(internal) as u64).div_ceil(512) * 512
}

#[derive(Debug)]
pub struct TreeFile {
    file: Arc<dyn Storage>,
    slot_size: u64,
    free: BTreeSet<u64>,
    next_slot: u64,
}

impl TreeFile {
    pub fn new(file: Arc<dyn Storage>, capacity: usize) -> Self {
        TreeFile {
            file,
            slot_size: slot_size(capacity),
            free: BTreeSet::new(),
            next_slot: 0,
        }
    }

    fn slot_pos(&self, slot: u64) -> u64 {
        HEADER_BLOCK + slot * self.slot_size
    }

    fn alloc(&mut self) -> u64 {
        if let Some(s) = self.free.pop_first() {
            return s;
        }
        self.next_slot += 1;
        self.next_slot - 1
    }

    #[cfg(test)]
    pub fn live_slots(&self) -> u64 {
        self.next_slot - self.free.len() as u64
    }

    pub fn bytes_written(&self) -> u64 {
        self.file.bytes_written()
    }

    /// Writes all changed nodes, then durably commits a header naming
    /// `version`. Returns once the new version is the recoverable one.
    pub fn checkpoint(&mut self, tree: &mut FlexTree, version: u64, config: [u8; CONFIG_LEN]) -> io::Result<()> {
        // Slots of nodes freed since the last checkpoint are still part of
        // the committed version; hold them until the header lands.
        let mut retired = tree.take_retired_slots();
        let root = tree.root();
        self.write_subtree(tree, root.child)?;
        retired.extend(tree.take_retired_slots());
        self.file.sync()?;
        let header = Header {
            version,
            root_slot: tree.node_slot(root.child).expect("root was written"),
            root_shift: root.shift,
            total_size: tree.total_size(),
            config,
        };
        self.file.write_at(&header.encode(), 0)?;
        self.file.sync()?;
        self.free.extend(retired);
        Ok(())
    }

    /// Post-order: a node is rewritten if it changed, was never persisted,
    /// or any child moved to a new slot.
    fn write_subtree(&mut self, tree: &mut FlexTree, id: NodeId) -> io::Result<bool> {
        let mut child_moved = false;
        if let NodeView::Internal { children, .. } = tree.node_view(id) {
            let kids: Vec<NodeId> = children.iter().map(|c| c.child).collect();
            for k in kids {
                child_moved |= self.write_subtree(tree, k)?;
            }
        }
        if !child_moved && !tree.node_dirty(id) && tree.node_slot(id).is_some() {
            return Ok(false);
        }
        let buf = encode_node(tree, id);
        let slot = self.alloc();
        self.file.write_at(&buf, self.slot_pos(slot))?;
        tree.set_node_slot(id, slot);
        Ok(true)
    }

    /// Loads the version named by `header`.
    pub fn load(
        file: Arc<dyn Storage>,
        header: &Header,
        config: TreeConfig,
    ) -> Result<(TreeFile, FlexTree), SpaceError> {
        let capacity = config.node_capacity;
        let mut tf = TreeFile::new(file, capacity);
        let mut slots = Vec::new();
        let root = tf.read_subtree(header.root_slot, capacity, &mut slots, 0)?;
        let layout = TreeLayout {
            root_shift: header.root_shift,
            root,
        };
        let mut tree = FlexTree::from_layout(config, &layout)
            .map_err(|e| SpaceError::Unrecoverable(format!("persisted tree is invalid: {e}")))?;
        if tree.total_size() != header.total_size {
            return Err(SpaceError::Unrecoverable(format!(
                "persisted tree holds {} bytes, header says {}",
                tree.total_size(),
                header.total_size
            )));
        }
        tree.assign_slots_preorder(&slots)
            .map_err(|e| SpaceError::Unrecoverable(e.to_string()))?;
        let live: BTreeSet<u64> = slots.iter().copied().collect();
        let file_slots = tf.file.len()?.saturating_sub(HEADER_BLOCK).div_ceil(tf.slot_size);
        tf.next_slot = file_slots.max(live.last().map_or(0, |s| s + 1));
        tf.free = (0..tf.next_slot).filter(|s| !live.contains(s)).collect();
        Ok((tf, tree))
    }

    fn read_subtree(
        &self,
        slot: u64,
        capacity: usize,
        slots: &mut Vec<u64>,
        depth: usize,
    ) -> Result<LayoutNode, SpaceError> {
        if depth > 64 {
            return Err(SpaceError::Unrecoverable("tree file nodes form a cycle".into()));
        }
        slots.push(slot);
        let corrupt = |what: &str| SpaceError::Unrecoverable(format!("tree node in slot {slot}: {what}"));
        let mut buf = vec![0u8; self.slot_size as usize];
        let n = self.file.read_at(&mut buf, self.slot_pos(slot))?;
        if n < NODE_HEAD {
            return Err(corrupt("missing"));
        }
        let kind = buf[0];
        let count = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[5..9].try_into().unwrap());
        if count > capacity {
            return Err(corrupt("entry count exceeds capacity"));
        }
        let payload_len = match kind {
            KIND_LEAF => 16 * count,
            KIND_INTERNAL if count > 0 => 16 * count + 8 * (count - 1),
            _ => return Err(corrupt("bad node kind")),
        };
        let payload = &buf[NODE_HEAD..NODE_HEAD + payload_len];
        if NODE_HEAD + payload_len > n || crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        if kind == KIND_LEAF {
            let entries = payload
                .chunks_exact(16)
                .map(|c| {
                    Extent::new(
                        read_u48(&c[0..6]),
                        u32::from_le_bytes(c[6..10].try_into().unwrap()),
                        read_u48(&c[10..16]),
                    )
                })
                .collect();
            return Ok(LayoutNode::Leaf(entries));
        }
        let mut children = Vec::with_capacity(count);
        for c in payload[..16 * count].chunks_exact(16) {
            let shift = i64::from_le_bytes(c[0..8].try_into().unwrap());
            let child = u64::from_le_bytes(c[8..16].try_into().unwrap());
            children.push((shift, self.read_subtree(child, capacity, slots, depth + 1)?));
        }
        let pivots = payload[16 * count..]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(LayoutNode::Internal { children, pivots })
    }
}

fn encode_node(tree: &FlexTree, id: NodeId) -> Vec<u8> {
    let mut payload = Vec::new();
    let (kind, count) = match tree.node_view(id) {
        NodeView::Leaf(entries) => {
            for e in entries {
                payload.extend_from_slice(&e.poff.to_le_bytes()[..6]);
                payload.extend_from_slice(&e.len.to_le_bytes());
                payload.extend_from_slice(&e.phys.to_le_bytes()[..6]);
            }
            (KIND_LEAF, entries.len())
        }
        NodeView::Internal { children, pivots } => {
            for c in children {
                let slot = tree.node_slot(c.child).expect("children are written first");
                payload.extend_from_slice(&c.shift.to_le_bytes());
                payload.extend_from_slice(&slot.to_le_bytes());
            }
            for p in pivots {
                payload.extend_from_slice(&p.to_le_bytes());
            }
            (KIND_INTERNAL, children.len())
        }
    };
    let mut buf = Vec::with_capacity(NODE_HEAD + payload.len());
    buf.push(kind);
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flextree::UNMAPPED;
    use crate::storage::{SimFs, StorageDir};

    fn cfg() -> TreeConfig {
        TreeConfig::with_capacity(8)
    }

    #[test]
    fn checkpoint_roundtrip_reuses_only_retired_slots() {
        let fs = SimFs::new();
        let file = fs.dir("").open("tree").unwrap();
        let mut tree = FlexTree::new(cfg()).unwrap();
        for i in 0..200u64 {
            tree.insert_range((i * 7) % (tree.total_size() + 1), 3, i * 3).unwrap();
        }
        tree.write_range(10, 5, UNMAPPED).unwrap();
        let mut tf = TreeFile::new(Arc::clone(&file), 8);
        tf.checkpoint(&mut tree, 2, [7; CONFIG_LEN]).unwrap();
        let live_v2 = tf.live_slots();
        assert_eq!(live_v2 as usize, tree.node_count());

        let h = Header::read(&file).unwrap();
        assert_eq!(h.version, 2);
        assert_eq!(h.config, [7; CONFIG_LEN]);
        let (_, loaded) = TreeFile::load(Arc::clone(&file), &h, cfg()).unwrap();
        assert_eq!(loaded.to_layout(), tree.to_layout());

        // A small change rewrites only a root-to-leaf path.
        let before = file.bytes_written();
        tree.collapse_range(100, 2).unwrap();
        tf.checkpoint(&mut tree, 3, [7; CONFIG_LEN]).unwrap();
        let written = file.bytes_written() - before;
        assert!(written < (tree.height() as u64 + 2) * slot_size(8) + HEADER_LEN as u64);
        let h = Header::read(&file).unwrap();
        let (tf2, loaded) = TreeFile::load(Arc::clone(&file), &h, cfg()).unwrap();
        assert_eq!(loaded.to_layout(), tree.to_layout());
        assert_eq!(tf2.live_slots() as usize, tree.node_count());
    }

    #[test]
    fn uncommitted_nodes_leave_old_version_intact() {
        let fs = SimFs::new();
        let file = fs.dir("").open("tree").unwrap();
        let mut tree = FlexTree::new(cfg()).unwrap();
        for i in 0..100u64 {
            tree.insert_range(0, 1 + i % 5, i * 8).unwrap();
        }
        TreeFile::new(Arc::clone(&file), 8)
            .checkpoint(&mut tree, 1, [0; CONFIG_LEN])
            .unwrap();
        let committed = tree.to_layout();
        let base = fs.durable_image();

        // Sweep every crash point inside the second checkpoint.
        for k in 0.. {
            let img = base.durable_image();
            let f = img.dir("").open("tree").unwrap();
            let h = Header::read(&f).unwrap();
            let (mut tf, mut t) = TreeFile::load(Arc::clone(&f), &h, cfg()).unwrap();
            for i in 0..50u64 {
                t.insert_range(i, 2, 5000 + i).unwrap();
            }
            img.crash_after(k);
            let done = tf.checkpoint(&mut t, 2, [0; CONFIG_LEN]).is_ok();
            for seed in 0..4 {
                let after = img.crash_image(seed);
                let f = after.dir("").open("tree").unwrap();
                let h = Header::read(&f).unwrap();
                let (_, loaded) = TreeFile::load(f, &h, cfg()).unwrap();
                if h.version == 1 {
                    assert_eq!(loaded.to_layout(), committed);
                } else {
                    assert_eq!(loaded.to_layout(), t.to_layout());
                }
            }
            if done {
                assert!(k > 2);
                break;
            }
        }
    }

    #[test]
    fn corrupt_header_is_unrecoverable() {
        let fs = SimFs::new();
        let file = fs.dir("").open("tree").unwrap();
        let mut tree = FlexTree::new(cfg()).unwrap();
        TreeFile::new(Arc::clone(&file), 8)
            .checkpoint(&mut tree, 1, [0; CONFIG_LEN])
            .unwrap();
        fs.poke("tree", 9, &[0xEE]);
        assert!(matches!(Header::read(&file), Err(SpaceError::Unrecoverable(_))));
    }
}
