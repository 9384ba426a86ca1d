//! Named parameter groups, gradient buffers and gradient sinks.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Stable handle of a parameter group inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub u32);

/// What a group of parameters is for; phase gating works on roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CameraOffsets,
    NodeOffsets,
    ColorField,
    AlphaField,
    FlowField,
    ViewField,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::CameraOffsets,
        Role::NodeOffsets,
        Role::ColorField,
        Role::AlphaField,
        Role::FlowField,
        Role::ViewField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::CameraOffsets => "camera_offsets",
            Role::NodeOffsets => "node_offsets",
            Role::ColorField => "color_field",
            Role::AlphaField => "alpha_field",
            Role::FlowField => "flow_field",
            Role::ViewField => "view_field",
        }
    }
}

/// Storage flavor of a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    /// Spline control points.
    Offsets,
    /// Weights and biases of an MLP.
    Mlp,
    /// Feature tables of a hash encoding.
    HashTable,
}

pub type RoleSet = BTreeSet<Role>;

#[derive(Clone, PartialEq)]
pub struct ParamGroup<R: Real> {
    pub name: String,
    pub role: Role,
    pub part: Part,
    pub data: Arc<Vec<R>>,
}

impl<R: Real> fmt::Debug for ParamGroup<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamGroup")
            .field("name", &self.name)
            .field("role", &self.role)
            .field("part", &self.part)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Every learnable value of a scene graph, partitioned into disjoint groups.
///
/// Groups are reference counted so cloning a store (e.g. to produce an edited
/// snapshot) is cheap; writers go through [`ParamStore::data_mut`], which
/// copies on write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R: Real> {
    groups: Vec<Option<ParamGroup<R>>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        role: Role,
        part: Part,
        data: Vec<R>,
    ) -> GroupId {
        let id = GroupId(self.groups.len() as u32);
        self.groups.push(Some(ParamGroup {
            name: name.into(),
            role,
            part,
            data: Arc::new(data),
        }));
        id
    }

    /// Re-insert a group under an explicit id (used by checkpoint loading).
    pub(crate) fn insert_at(&mut self, id: GroupId, group: ParamGroup<R>) {
        let i = id.0 as usize;
        if self.groups.len() <= i {
            self.groups.resize(i + 1, None);
        }
        self.groups[i] = Some(group);
    }

    /// Make sure ids below `n` are never reissued.
    pub(crate) fn reserve_ids(&mut self, n: usize) {
        if self.groups.len() < n {
            self.groups.resize(n, None);
        }
    }

    pub fn remove(&mut self, id: GroupId) {
        if let Some(slot) = self.groups.get_mut(id.0 as usize) {
            *slot = None;
        }
    }

    /// Duplicate a group under a new name, sharing storage until written.
    pub fn duplicate(&mut self, id: GroupId, name: impl Into<String>) -> GroupId {
        let g = self.group(id).clone();
        let new = GroupId(self.groups.len() as u32);
        self.groups.push(Some(ParamGroup {
            name: name.into(),
            ..g
        }));
        new
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup<R> {
        self.groups[id.0 as usize]
            .as_ref()
            .expect("parameter group was removed")
    }

    pub fn get(&self, id: GroupId) -> Option<&ParamGroup<R>> {
        self.groups.get(id.0 as usize).and_then(|g| g.as_ref())
    }

    pub fn data(&self, id: GroupId) -> &[R] {
        &self.group(id).data
    }

    pub fn arc(&self, id: GroupId) -> Arc<Vec<R>> {
        self.group(id).data.clone()
    }

    pub fn data_mut(&mut self, id: GroupId) -> &mut Vec<R> {
        let g = self.groups[id.0 as usize]
            .as_mut()
            .expect("parameter group was removed");
        Arc::make_mut(&mut g.data)
    }

    /// Upper bound (exclusive) on group ids ever issued.
    pub fn capacity(&self) -> usize {
        self.groups.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &ParamGroup<R>)> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (GroupId(i as u32), g)))
    }

    pub fn total_len(&self) -> usize {
        self.iter().map(|(_, g)| g.data.len()).sum()
    }

    /// Convert every group to another precision.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            groups: self
                .groups
                .iter()
                .map(|g| {
                    g.as_ref().map(|g| ParamGroup {
                        name: g.name.clone(),
                        role: g.role,
                        part: g.part,
                        data: Arc::new(g.data.iter().map(|v| S::lit(v.as_f64())).collect()),
                    })
                })
                .collect(),
        }
    }
}

/// Receives parameter gradients from reverse sweeps.
pub trait GradSink<R: Real> {
    /// `grad[group][offset..offset + values.len()] += values`.
    fn add_dense(&mut self, group: GroupId, offset: usize, values: &[R]);
    /// `grad[group][idx] += value` for each entry, in order.
    fn add_sparse(&mut self, group: GroupId, entries: &[(u32, R)]);
}

/// Discards everything.
pub struct NullSink;

impl<R: Real> GradSink<R> for NullSink {
    fn add_dense(&mut self, _: GroupId, _: usize, _: &[R]) {}
    fn add_sparse(&mut self, _: GroupId, _: &[(u32, R)]) {}
}

/// Elements per activity block; storage for gradients and optimizer moments
/// is allocated in blocks of this size on first touch.
pub const BLOCK_LEN: usize = 16;
const NO_SLOT: u32 = u32::MAX;

/// Gradient accumulators aligned with a [`ParamStore`].
///
/// Storage is block sparse: only blocks that received a gradient since the
/// last [`GradBuffers::zero`] hold memory, which keeps huge, sparsely touched
/// hash tables cheap.
#[derive(Default)]
pub struct GradBuffers<R: Real> {
    bufs: Vec<Option<GradBuffer<R>>>,
    lens: Vec<usize>,
}

pub struct GradBuffer<R: Real> {
    len: usize,
    slot: Vec<u32>,
    /// `BLOCK_LEN` values per allocated block.
    data: Vec<R>,
    /// Block index of each allocated slot, in order of first touch.
    blocks: Vec<u32>,
}

impl<R: Real> GradBuffer<R> {
    fn new(len: usize) -> Self {
        Self {
            len,
            slot: vec![NO_SLOT; len.div_ceil(BLOCK_LEN)],
            data: Vec::new(),
            blocks: Vec::new(),
        }
    }

    #[inline(always)]
    fn cell(&mut self, idx: usize) -> &mut R {
        let b = idx / BLOCK_LEN;
        let mut s = self.slot[b];
        if s == NO_SLOT {
            s = self.blocks.len() as u32;
            self.slot[b] = s;
            self.blocks.push(b as u32);
            self.data.extend(std::iter::repeat_n(R::zero(), BLOCK_LEN));
        }
        &mut self.data[s as usize * BLOCK_LEN + idx % BLOCK_LEN]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, idx: usize) -> R {
        match self.slot[idx / BLOCK_LEN] {
            NO_SLOT => R::zero(),
            s => self.data[s as usize * BLOCK_LEN + idx % BLOCK_LEN],
        }
    }

    /// Values of block `b` if it was touched.
    #[inline]
    pub fn block(&self, b: usize) -> Option<&[R]> {
        match self.slot[b] {
            NO_SLOT => None,
            s => Some(&self.data[s as usize * BLOCK_LEN..(s as usize + 1) * BLOCK_LEN]),
        }
    }

    /// Touched blocks as `(block index, values)`; the last block of a group
    /// may extend past its length with zeros.
    pub fn touched(&self) -> impl Iterator<Item = (usize, &[R])> + '_ {
        self.blocks
            .iter()
            .zip(self.data.chunks_exact(BLOCK_LEN))
            .map(|(&b, v)| (b as usize, v))
    }

    pub fn to_dense(&self) -> Vec<R> {
        let mut out = vec![R::zero(); self.len];
        for (b, v) in self.touched() {
            let lo = b * BLOCK_LEN;
            let hi = (lo + BLOCK_LEN).min(self.len);
            out[lo..hi].copy_from_slice(&v[..hi - lo]);
        }
        out
    }

    fn clear(&mut self) {
        for &b in &self.blocks {
            self.slot[b as usize] = NO_SLOT;
        }
        self.blocks.clear();
        self.data.clear();
    }
}

impl<R: Real> GradBuffers<R> {
    pub fn for_store(store: &ParamStore<R>) -> Self {
        let mut lens = vec![0; store.capacity()];
        for (id, g) in store.iter() {
            lens[id.0 as usize] = g.data.len();
        }
        Self {
            bufs: (0..lens.len()).map(|_| None).collect(),
            lens,
        }
    }

    fn buf(&mut self, group: GroupId) -> &mut GradBuffer<R> {
        let i = group.0 as usize;
        let len = self.lens[i];
        self.bufs[i].get_or_insert_with(|| GradBuffer::new(len))
    }

    pub fn get(&self, group: GroupId) -> Option<&GradBuffer<R>> {
        self.bufs.get(group.0 as usize).and_then(|b| b.as_ref())
    }

    /// Dense copy of one group's gradient (zeros if never written).
    pub fn dense(&self, group: GroupId) -> Vec<R> {
        match self.get(group) {
            Some(b) => b.to_dense(),
            None => vec![R::zero(); self.lens[group.0 as usize]],
        }
    }

    pub fn value(&self, group: GroupId, idx: usize) -> R {
        self.get(group).map(|b| b.get(idx)).unwrap_or_else(R::zero)
    }

    /// Drop every accumulated value.
    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut().flatten() {
            b.clear();
        }
    }

    /// Groups that currently hold a buffer.
    pub fn groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.bufs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(i, _)| GroupId(i as u32))
    }
}

impl<R: Real> GradSink<R> for GradBuffers<R> {
    fn add_dense(&mut self, group: GroupId, offset: usize, values: &[R]) {
        let b = self.buf(group);
        for (k, v) in values.iter().enumerate() {
            *b.cell(offset + k) += *v;
        }
    }

    fn add_sparse(&mut self, group: GroupId, entries: &[(u32, R)]) {
        let b = self.buf(group);
        for &(i, v) in entries {
            *b.cell(i as usize) += v;
        }
    }
}

/// A recorded sequence of sink calls, replayable in order.
///
/// Parallel workers record into their own log; replaying the logs in a fixed
/// order performs exactly the same additions as a sequential run.
#[derive(Default)]
pub struct GradLog<R: Real> {
    ops: Vec<LogOp>,
    dense: Vec<R>,
    sparse: Vec<(u32, R)>,
}

enum LogOp {
    Dense {
        group: GroupId,
        offset: usize,
        start: usize,
        len: usize,
    },
    Sparse {
        group: GroupId,
        start: usize,
        len: usize,
    },
}

impl<R: Real> GradLog<R> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            dense: Vec::new(),
            sparse: Vec::new(),
        }
    }

    pub fn replay(&self, sink: &mut dyn GradSink<R>) {
        for op in &self.ops {
            match *op {
                LogOp::Dense {
                    group,
                    offset,
                    start,
                    len,
                } => sink.add_dense(group, offset, &self.dense[start..start + len]),
                LogOp::Sparse { group, start, len } => {
                    sink.add_sparse(group, &self.sparse[start..start + len])
                }
            }
        }
    }
}

impl<R: Real> GradSink<R> for GradLog<R> {
    fn add_dense(&mut self, group: GroupId, offset: usize, values: &[R]) {
        let start = self.dense.len();
        self.dense.extend_from_slice(values);
        self.ops.push(LogOp::Dense {
            group,
            offset,
            start,
            len: values.len(),
        });
    }

    fn add_sparse(&mut self, group: GroupId, entries: &[(u32, R)]) {
        let start = self.sparse.len();
        self.sparse.extend_from_slice(entries);
        self.ops.push(LogOp::Sparse {
            group,
            start,
            len: entries.len(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_are_disjoint_and_copy_on_write() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Role::ColorField, Part::Mlp, vec![1.0; 4]);
        let b = s.duplicate(a, "b");
        s.data_mut(b)[0] = 5.0;
        assert_eq!(s.data(a)[0], 1.0);
        assert_eq!(s.data(b)[0], 5.0);
        assert_eq!(s.total_len(), 8);
    }

    #[test]
    fn log_replay_matches_direct_accumulation() {
        let mut s = ParamStore::<f64>::new();
        let g = s.add("t", Role::FlowField, Part::HashTable, vec![0.0; 40]);
        let mut direct = GradBuffers::for_store(&s);
        let mut log = GradLog::new();
        let entries = [(3u32, 0.1), (3, 0.2), (39, -1.0)];
        direct.add_sparse(g, &entries);
        direct.add_dense(g, 10, &[1.0, 2.0]);
        log.add_sparse(g, &entries);
        log.add_dense(g, 10, &[1.0, 2.0]);
        let mut replayed = GradBuffers::for_store(&s);
        log.replay(&mut replayed);
        assert_eq!(direct.dense(g), replayed.dense(g));
        let blocks: Vec<usize> = direct.get(g).unwrap().touched().map(|(b, _)| b).collect();
        assert_eq!(blocks, vec![0, 2]);
        direct.zero();
        assert!(direct.dense(g).iter().all(|v| *v == 0.0));
    }
}
