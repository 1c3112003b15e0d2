//! Volatile sparse index over key intervals.
//!
//! A B+-tree keyed by each interval's smallest key. Interval offsets are
//! stored like the extent tree's: a partial offset in the leaf plus signed
//! shifts on the pointers above it, so growing or shrinking one interval
//! moves every later interval in O(log N) without touching keys or pivots.

/// The first interval's index key. Real keys are never empty, so the empty
/// key sorts below all of them.
const FIRST: &[u8] = &[];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntervalEntry {
    /// Cache handle, unique for the lifetime of the index.
    pub id: u64,
    key: Vec<u8>,
    poff: i64,
    pub size: u64,
    pub count: u32,
    /// False for intervals rebuilt at recovery until their first load.
    pub count_known: bool,
    pub fragmented: bool,
}

impl IntervalEntry {
    /// `None` for the first interval.
    pub fn index_key(&self) -> Option<&[u8]> {
        if self.key.is_empty() {
            None
        } else {
            Some(&self.key)
        }
    }
}

/// What a caller supplies when adding an interval.
#[derive(Clone, Debug)]
pub struct NewInterval {
    pub key: Vec<u8>,
    pub size: u64,
    pub count: u32,
    pub count_known: bool,
    pub fragmented: bool,
}

#[derive(Debug)]
enum Node {
    Leaf(Vec<IntervalEntry>),
    /// `pivots[i]` is the smallest key under `children[i + 1]`.
    Internal {
        children: Vec<(i64, usize)>,
        pivots: Vec<Vec<u8>>,
    },
}

/// A located interval: the root-to-leaf path and the shift sum above it.
#[derive(Clone, Debug)]
pub struct Pos {
    path: Vec<(usize, usize, i64)>,
    leaf: usize,
    idx: usize,
    sum: i64,
}

#[derive(Debug)]
pub struct SparseIndex {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    root: usize,
    root_shift: i64,
    cap: usize,
    len: usize,
    next_id: u64,
}

impl Default for SparseIndex {
    fn default() -> Self {
        Self::new(64)
    }
}

impl SparseIndex {
    /// An index holding one empty first interval at offset 0.
    pub fn new(node_capacity: usize) -> Self {
        assert!(node_capacity >= 4);
        let first = IntervalEntry {
            id: 0,
            key: FIRST.to_vec(),
            poff: 0,
            size: 0,
            count: 0,
            count_known: true,
            fragmented: false,
        };
        SparseIndex {
            nodes: vec![Some(Node::Leaf(vec![first]))],
            free: Vec::new(),
            root: 0,
            root_shift: 0,
            cap: node_capacity,
            len: 1,
            next_id: 1,
        }
    }

    /// Number of intervals.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("live node")
    }

    fn leaf(&self, id: usize) -> &Vec<IntervalEntry> {
        match self.node(id) {
            Node::Leaf(e) => e,
            Node::Internal { .. } => unreachable!("not a leaf"),
        }
    }

    fn leaf_mut(&mut self, id: usize) -> &mut Vec<IntervalEntry> {
        match self.node_mut(id) {
            Node::Leaf(e) => e,
            Node::Internal { .. } => unreachable!("not a leaf"),
        }
    }

    fn alloc(&mut self, n: Node) -> usize {
        if let Some(id) = self.free.pop() {
            self.nodes[id] = Some(n);
            id
        } else {
            self.nodes.push(Some(n));
            self.nodes.len() - 1
        }
    }

    fn release(&mut self, id: usize) {
        self.nodes[id] = None;
        self.free.push(id);
    }

    /// The interval a key belongs to: the last one whose index key is not
    /// above it.
    pub fn seek(&self, key: &[u8]) -> Pos {
        let mut path = Vec::new();
        let mut id = self.root;
        let mut sum = self.root_shift;
        loop {
            match self.node(id) {
                Node::Internal { children, pivots } => {
                    let i = pivots.partition_point(|p| p.as_slice() <= key);
                    path.push((id, i, sum));
                    sum += children[i].0;
                    id = children[i].1;
                }
                Node::Leaf(entries) => {
                    // Pivots equal the first key below them, so only the
                    // leftmost leaf can be entered with a smaller key, and
                    // it starts with the first interval.
                    let idx = entries.partition_point(|e| e.key.as_slice() <= key) - 1;
                    return Pos {
                        path,
                        leaf: id,
                        idx,
                        sum,
                    };
                }
            }
        }
    }

    pub fn first(&self) -> Pos {
        self.seek(FIRST)
    }

    pub fn last(&self) -> Pos {
        let mut path = Vec::new();
        let mut id = self.root;
        let mut sum = self.root_shift;
        loop {
            match self.node(id) {
                Node::Internal { children, .. } => {
                    let i = children.len() - 1;
                    path.push((id, i, sum));
                    sum += children[i].0;
                    id = children[i].1;
                }
                Node::Leaf(entries) => {
                    return Pos {
                        path,
                        leaf: id,
                        idx: entries.len() - 1,
                        sum,
                    }
                }
            }
        }
    }

    pub fn entry(&self, pos: &Pos) -> &IntervalEntry {
        &self.leaf(pos.leaf)[pos.idx]
    }

    pub fn offset(&self, pos: &Pos) -> u64 {
        let o = pos.sum + self.entry(pos).poff;
        debug_assert!(o >= 0);
        o as u64
    }

    pub fn is_first(&self, pos: &Pos) -> bool {
        self.entry(pos).key.is_empty()
    }

    /// Advances to the next interval; false at the end.
    pub fn next(&self, pos: &mut Pos) -> bool {
        if pos.idx + 1 < self.leaf(pos.leaf).len() {
            pos.idx += 1;
            return true;
        }
        let mut depth = pos.path.len();
        while depth > 0 {
            let (id, i, sum) = pos.path[depth - 1];
            let Node::Internal { children, .. } = self.node(id) else {
                unreachable!()
            };
            if i + 1 < children.len() {
                pos.path.truncate(depth - 1);
                pos.path.push((id, i + 1, sum));
                let mut s = sum + children[i + 1].0;
                let mut child = children[i + 1].1;
                loop {
                    match self.node(child) {
                        Node::Internal { children, .. } => {
                            pos.path.push((child, 0, s));
                            s += children[0].0;
                            child = children[0].1;
                        }
                        Node::Leaf(_) => break,
                    }
                }
                pos.leaf = child;
                pos.idx = 0;
                pos.sum = s;
                return true;
            }
            depth -= 1;
        }
        false
    }

    /// Index key of the interval after `pos`, if any.
    pub fn next_key(&self, pos: &Pos) -> Option<Vec<u8>> {
        let mut p = pos.clone();
        if self.next(&mut p) {
            Some(self.entry(&p).key.clone())
        } else {
            None
        }
    }

    /// Sets the interval's index key. The new key must keep the intervals
    /// ordered; the first interval's key cannot change.
    pub fn set_key(&mut self, pos: &Pos, key: Vec<u8>) {
        let e = &mut self.leaf_mut(pos.leaf)[pos.idx];
        assert!(!e.key.is_empty() && !key.is_empty(), "first interval key is fixed");
        e.key = key.clone();
        if pos.idx == 0 {
            self.set_low_key(&pos.path, pos.path.len(), key);
        }
    }

    /// Records that the subtree reached through `path[..depth]` now starts
    /// with `key`, updating the one pivot that bounds it.
    fn set_low_key(&mut self, path: &[(usize, usize, i64)], depth: usize, key: Vec<u8>) {
        for &(id, i, _) in path[..depth].iter().rev() {
            if i > 0 {
                let Node::Internal { pivots, .. } = self.node_mut(id) else {
                    unreachable!()
                };
                pivots[i - 1] = key;
                return;
            }
        }
    }

    pub fn set_meta(&mut self, pos: &Pos, count: u32, count_known: bool, fragmented: bool) {
        let e = &mut self.leaf_mut(pos.leaf)[pos.idx];
        e.count = count;
        e.count_known = count_known;
        e.fragmented = fragmented;
    }

    /// Moves every interval after `pos` by `delta`.
    fn shift_after(&mut self, pos: &Pos, delta: i64) {
        if delta == 0 {
            return;
        }
        for e in &mut self.leaf_mut(pos.leaf)[pos.idx + 1..] {
            e.poff += delta;
        }
        for &(id, i, _) in &pos.path {
            let Node::Internal { children, .. } = self.node_mut(id) else {
                unreachable!()
            };
            for c in &mut children[i + 1..] {
                c.0 += delta;
            }
        }
    }

    /// Grows (or shrinks) an interval by `delta` bytes, shifting the rest.
    pub fn resize(&mut self, pos: &Pos, delta: i64) {
        let e = &mut self.leaf_mut(pos.leaf)[pos.idx];
        let size = e.size as i64 + delta;
        assert!(size >= 0, "interval size underflow");
        e.size = size as u64;
        self.shift_after(pos, delta);
    }

    /// Splits off the tail of the interval at `pos` as a new interval that
    /// starts `at` bytes into it. Returns the new interval's id.
    pub fn split(&mut self, pos: &Pos, at: u64, right: NewInterval) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let leaf = pos.leaf;
        let entries = self.leaf_mut(leaf);
        let cur = &mut entries[pos.idx];
        assert!(at <= cur.size && right.size == cur.size - at);
        assert!(right.key > cur.key, "split key must sort after the interval key");
        cur.size = at;
        let e = IntervalEntry {
            id,
            key: right.key,
            poff: cur.poff + at as i64,
            size: right.size,
            count: right.count,
            count_known: right.count_known,
            fragmented: right.fragmented,
        };
        entries.insert(pos.idx + 1, e);
        self.len += 1;
        self.fix_overflow(pos);
        id
    }

    /// Appends an interval at the end of the address range (bulk load).
    pub fn push(&mut self, iv: NewInterval) -> u64 {
        let pos = self.last();
        let size = self.entry(&pos).size;
        let total = iv.size;
        self.resize(&pos, total as i64);
        self.split(&pos, size, iv)
    }

    /// Removes the interval after `pos`, folding its bytes and records into
    /// the one at `pos`. Returns the removed entry.
    pub fn merge_next(&mut self, pos: &Pos) -> Option<IntervalEntry> {
        let mut np = pos.clone();
        if !self.next(&mut np) {
            return None;
        }
        let gone = self.entry(&np).clone();
        {
            let e = &mut self.leaf_mut(pos.leaf)[pos.idx];
            e.size += gone.size;
            e.count += gone.count;
            e.count_known &= gone.count_known;
            e.fragmented |= gone.fragmented;
        }
        self.remove_at(&np);
        Some(gone)
    }

    /// Drops an empty, non-first interval.
    pub fn remove_empty(&mut self, pos: &Pos) {
        let e = self.entry(pos);
        assert!(e.size == 0 && !e.key.is_empty());
        self.remove_at(pos);
    }

    fn remove_at(&mut self, pos: &Pos) {
        self.leaf_mut(pos.leaf).remove(pos.idx);
        self.len -= 1;
        if let Some(first) = self.leaf(pos.leaf).first() {
            if pos.idx == 0 {
                let k = first.key.clone();
                self.set_low_key(&pos.path, pos.path.len(), k);
            }
            return;
        }
        // Unlink empty nodes bottom-up.
        let mut gone = pos.leaf;
        for depth in (0..pos.path.len()).rev() {
            let (id, i, _) = pos.path[depth];
            self.release(gone);
            let Node::Internal { children, pivots } = self.node_mut(id) else {
                unreachable!()
            };
            children.remove(i);
            if i > 0 {
                pivots.remove(i - 1);
            } else if !pivots.is_empty() {
                let low = pivots.remove(0);
                self.set_low_key(&pos.path, depth, low);
                break;
            }
            if !children.is_empty() {
                break;
            }
            gone = id;
        }
        self.shrink_root();
    }

    fn shrink_root(&mut self) {
        loop {
            let Node::Internal { children, .. } = self.node(self.root) else {
                return;
            };
            if children.len() != 1 {
                return;
            }
            let (shift, child) = children[0];
            let old = self.root;
            self.root = child;
            self.root_shift += shift;
            self.release(old);
        }
    }

    fn fix_overflow(&mut self, pos: &Pos) {
        let mut id = pos.leaf;
        let mut depth = pos.path.len();
        let cap = self.cap;
        loop {
            let (right, pivot) = match self.node_mut(id) {
                Node::Leaf(entries) => {
                    if entries.len() <= cap {
                        return;
                    }
                    let r = entries.split_off(entries.len() / 2);
                    let pivot = r[0].key.clone();
                    (Node::Leaf(r), pivot)
                }
                Node::Internal { children, pivots } => {
                    if children.len() <= cap {
                        return;
                    }
                    let mid = children.len() / 2;
                    let rc = children.split_off(mid);
                    let mut rp = pivots.split_off(mid - 1);
                    let pivot = rp.remove(0);
                    (
                        Node::Internal {
                            children: rc,
                            pivots: rp,
                        },
                        pivot,
                    )
                }
            };
            let rid = self.alloc(right);
            if depth == 0 {
                // The old root keeps the root shift; both halves hang under
                // a fresh root with zero pointer shifts.
                let root = self.alloc(Node::Internal {
                    children: vec![(0, id), (0, rid)],
                    pivots: vec![pivot],
                });
                self.root = root;
                return;
            }
            let (parent, i, _) = pos.path[depth - 1];
            let Node::Internal { children, pivots } = self.node_mut(parent) else {
                unreachable!()
            };
            let shift = children[i].0;
            children.insert(i + 1, (shift, rid));
            pivots.insert(i, pivot);
            id = parent;
            depth -= 1;
        }
    }

    /// Every interval in order with its effective offset.
    pub fn intervals(&self) -> Vec<(u64, IntervalEntry)> {
        let mut out = Vec::with_capacity(self.len);
        let mut pos = self.first();
        loop {
            out.push((self.offset(&pos), self.entry(&pos).clone()));
            if !self.next(&mut pos) {
                return out;
            }
        }
    }

    /// Checks that intervals tile `[0, total)` and that keys and pivots are
    /// ordered.
    pub fn check(&self, total: u64) -> Result<(), String> {
        let ivs = self.intervals();
        if ivs.len() != self.len {
            return Err(format!("len {} but {} intervals", self.len, ivs.len()));
        }
        if !ivs[0].1.key.is_empty() {
            return Err("first interval has a key".into());
        }
        let mut expect = 0u64;
        for (i, (off, e)) in ivs.iter().enumerate() {
            if *off != expect {
                return Err(format!("interval {i} at {off}, expected {expect}"));
            }
            if i > 0 && e.key <= ivs[i - 1].1.key {
                return Err(format!("interval {i} key out of order"));
            }
            expect += e.size;
        }
        if expect != total {
            return Err(format!("intervals cover {expect}, space is {total}"));
        }
        self.check_pivots(self.root, None, None)
    }

    fn check_pivots(&self, id: usize, lo: Option<&[u8]>, hi: Option<&[u8]>) -> Result<(), String> {
        match self.node(id) {
            Node::Leaf(entries) => {
                if lo.is_some_and(|l| entries[0].key.as_slice() != l) {
                    return Err("pivot differs from the first key below it".into());
                }
                for e in entries {
                    if !e.key.is_empty()
                        && (lo.is_some_and(|l| e.key.as_slice() < l) || hi.is_some_and(|h| e.key.as_slice() >= h))
                    {
                        return Err("key outside pivot bounds".into());
                    }
                }
                Ok(())
            }
            Node::Internal { children, pivots } => {
                if pivots.len() + 1 != children.len() {
                    return Err("pivot count mismatch".into());
                }
                for (i, &(_, c)) in children.iter().enumerate() {
                    let l = if i == 0 { lo } else { Some(pivots[i - 1].as_slice()) };
                    let h = pivots.get(i).map(|p| p.as_slice()).or(hi);
                    self.check_pivots(c, l, h)?;
                }
                Ok(())
            }
        }
    }
}
