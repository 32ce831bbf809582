//! Segmented containers: one logical array split across device arenas.
//!
//! A [`SegVector`] is a logically contiguous array whose storage lives in
//! per-device segments, laid out by a [`SplitPolicy`]. The descriptor knows
//! where every element lives, which is what lets the collectives and the
//! numerical kernels route work without the caller spelling out placement.

use std::ops::{Deref, DerefMut};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::runtime::{Environment, KernelCtx, Rank};

/// Element types a segmented container can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real32,
    Complex32,
}

impl Dtype {
    pub fn bytes(&self) -> usize {
        match self {
            Dtype::Real32 => 4,
            Dtype::Complex32 => 8,
        }
    }
}

/// Scalar stored in device memory: `f32` or interleaved `Complex32`.
pub trait Element:
    Copy
    + Send
    + Sync
    + Default
    + PartialEq
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + 'static
{
    const DTYPE: Dtype;

    fn zero() -> Self {
        Self::default()
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::Real32;
}

impl Element for Complex32 {
    const DTYPE: Dtype = Dtype::Complex32;
}

/// How a logical array is laid out across the device group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Even split; segment lengths differ by at most one element, remainder
    /// on the lowest ranks.
    Natural,
    /// Contiguous runs of `block_len`-sized blocks per device; only the last
    /// segment may hold a partial block.
    Blockwise { block_len: usize },
    /// Every device holds the full logical array.
    Clone,
    /// Row-block split of a `rows x cols` matrix where each segment also
    /// stores `halo` rows of each neighbouring segment.
    Overlap2D { rows: usize, cols: usize, halo: usize },
}

/// Location metadata of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentDescriptor {
    pub rank: Rank,
    /// Global element index of the first owned element.
    pub global_offset: usize,
    /// Owned (non-halo) element count.
    pub len: usize,
    /// Halo rows stored before the owned rows (Overlap2D only, else 0).
    pub halo_lo: usize,
    /// Halo rows stored after the owned rows (Overlap2D only, else 0).
    pub halo_hi: usize,
    /// Total elements in the device buffer, halos included.
    pub stored_len: usize,
}

pub(crate) struct Segment<T> {
    pub(crate) desc: SegmentDescriptor,
    pub(crate) data: Arc<RwLock<Box<[T]>>>,
    _lease: crate::runtime::ArenaLease,
}

/// A logically contiguous array physically split across device arenas.
///
/// Clones share the same storage; containers are cheap to capture in device
/// kernels.
#[derive(Clone)]
pub struct SegVector<T: Element> {
    env: Environment,
    logical_len: usize,
    policy: SplitPolicy,
    segments: Arc<Vec<Segment<T>>>,
}

/// Read view of a device's local segment, halos included.
pub struct LocalRead<'a, T> {
    guard: RwLockReadGuard<'a, Box<[T]>>,
}

impl<T> Deref for LocalRead<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.guard
    }
}

impl<T: std::fmt::Debug> std::fmt::Debug for LocalRead<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.guard.fmt(f)
    }
}

/// Write view of a device's local segment, halos included.
pub struct LocalWrite<'a, T> {
    guard: RwLockWriteGuard<'a, Box<[T]>>,
}

impl<T> Deref for LocalWrite<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.guard
    }
}

impl<T> DerefMut for LocalWrite<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.guard
    }
}

/// Front-loaded even split of `len` into `parts` ranges.
pub(crate) fn natural_ranges(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut offset = 0;
    for i in 0..parts {
        let l = base + usize::from(i < extra);
        out.push((offset, l));
        offset += l;
    }
    out
}

fn layout(
    policy: SplitPolicy,
    logical_len: usize,
    ranks: &[Rank],
) -> Result<Vec<SegmentDescriptor>> {
    let devices = ranks.len();
    let mut descs = Vec::new();
    match policy {
        SplitPolicy::Natural => {
            if logical_len < devices {
                return Err(Error::InfeasibleSplit(format!(
                    "natural split of {logical_len} elements over {devices} devices leaves empty segments"
                )));
            }
            for (i, (offset, len)) in natural_ranges(logical_len, devices).into_iter().enumerate() {
                descs.push(SegmentDescriptor {
                    rank: ranks[i],
                    global_offset: offset,
                    len,
                    halo_lo: 0,
                    halo_hi: 0,
                    stored_len: len,
                });
            }
        }
        SplitPolicy::Blockwise { block_len } => {
            if block_len == 0 {
                return Err(Error::InfeasibleSplit("block length must be positive".into()));
            }
            if logical_len == 0 {
                return Err(Error::InfeasibleSplit("cannot split an empty array".into()));
            }
            let blocks = logical_len.div_ceil(block_len);
            let mut block_cursor = 0;
            for (i, (_, nblocks)) in natural_ranges(blocks, devices.min(blocks)).into_iter().enumerate() {
                let start = block_cursor * block_len;
                let end = ((block_cursor + nblocks) * block_len).min(logical_len);
                descs.push(SegmentDescriptor {
                    rank: ranks[i],
                    global_offset: start,
                    len: end - start,
                    halo_lo: 0,
                    halo_hi: 0,
                    stored_len: end - start,
                });
                block_cursor += nblocks;
            }
        }
        SplitPolicy::Clone => {
            if logical_len == 0 {
                return Err(Error::InfeasibleSplit("cannot clone an empty array".into()));
            }
            for &rank in ranks {
                descs.push(SegmentDescriptor {
                    rank,
                    global_offset: 0,
                    len: logical_len,
                    halo_lo: 0,
                    halo_hi: 0,
                    stored_len: logical_len,
                });
            }
        }
        SplitPolicy::Overlap2D { rows, cols, halo } => {
            if rows * cols != logical_len {
                return Err(Error::shape(format!(
                    "overlap split declares {rows}x{cols} but the array holds {logical_len} elements"
                )));
            }
            if rows < devices {
                return Err(Error::InfeasibleSplit(format!(
                    "overlap split of {rows} rows over {devices} devices leaves empty segments"
                )));
            }
            for (i, (row0, nrows)) in natural_ranges(rows, devices).into_iter().enumerate() {
                let halo_lo = halo.min(row0);
                let halo_hi = halo.min(rows - row0 - nrows);
                descs.push(SegmentDescriptor {
                    rank: ranks[i],
                    global_offset: row0 * cols,
                    len: nrows * cols,
                    halo_lo,
                    halo_hi,
                    stored_len: (halo_lo + nrows + halo_hi) * cols,
                });
            }
        }
    }
    Ok(descs)
}

impl<T: Element> SegVector<T> {
    /// Allocate a segmented container. Contents start zeroed.
    pub fn new(env: &Environment, logical_len: usize, policy: SplitPolicy) -> Result<SegVector<T>> {
        let ranks: Vec<Rank> = env.group().ranks().collect();
        let descs = layout(policy, logical_len, &ranks)?;
        let mut segments = Vec::with_capacity(descs.len());
        for desc in descs {
            let lease = env.lease_arena(desc.rank, desc.stored_len * std::mem::size_of::<T>())?;
            segments.push(Segment {
                desc,
                data: Arc::new(RwLock::new(vec![T::zero(); desc.stored_len].into_boxed_slice())),
                _lease: lease,
            });
        }
        Ok(SegVector {
            env: env.clone(),
            logical_len,
            policy,
            segments: Arc::new(segments),
        })
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn policy(&self) -> SplitPolicy {
        self.policy
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// Descriptors of all segments, ordered by rank.
    pub fn descriptors(&self) -> impl Iterator<Item = &SegmentDescriptor> {
        self.segments.iter().map(|s| &s.desc)
    }

    /// Ranks that hold a segment of this container.
    pub fn participating_ranks(&self) -> Vec<Rank> {
        self.segments.iter().map(|s| s.desc.rank).collect()
    }

    /// Descriptor of `rank`'s segment; usage error when the rank holds none.
    pub fn local_range(&self, rank: Rank) -> Result<SegmentDescriptor> {
        self.segments
            .iter()
            .find(|s| s.desc.rank == rank)
            .map(|s| s.desc)
            .ok_or_else(|| Error::usage(format!("rank {rank} holds no segment of this container")))
    }

    pub(crate) fn segment(&self, rank: Rank) -> Result<&Segment<T>> {
        self.segments
            .iter()
            .find(|s| s.desc.rank == rank)
            .ok_or_else(|| Error::usage(format!("rank {rank} holds no segment of this container")))
    }

    /// Read view of the calling device's segment (halos included).
    ///
    /// Panics when the device holds no segment; inside a kernel that panic is
    /// reported through the fence.
    pub fn local<'a>(&'a self, ctx: &KernelCtx) -> LocalRead<'a, T> {
        self.read_rank(ctx.rank()).expect("device holds no segment of this container")
    }

    /// Write view of the calling device's segment (halos included).
    pub fn local_mut<'a>(&'a self, ctx: &KernelCtx) -> LocalWrite<'a, T> {
        self.write_rank(ctx.rank()).expect("device holds no segment of this container")
    }

    pub(crate) fn read_rank(&self, rank: Rank) -> Result<LocalRead<'_, T>> {
        let seg = self.segment(rank)?;
        Ok(LocalRead { guard: seg.data.read().unwrap() })
    }

    pub(crate) fn write_rank(&self, rank: Rank) -> Result<LocalWrite<'_, T>> {
        let seg = self.segment(rank)?;
        Ok(LocalWrite { guard: seg.data.write().unwrap() })
    }

    /// Global index of `rank`-local element `local_index` (halos map to the
    /// global row they mirror).
    pub fn global_of(&self, rank: Rank, local_index: usize) -> Result<usize> {
        let desc = self.local_range(rank)?;
        if local_index >= desc.stored_len {
            return Err(Error::usage(format!(
                "local index {local_index} outside segment of {} elements",
                desc.stored_len
            )));
        }
        match self.policy {
            SplitPolicy::Overlap2D { cols, .. } => {
                Ok(desc.global_offset - desc.halo_lo * cols + local_index)
            }
            _ => Ok(desc.global_offset + local_index),
        }
    }

    /// Owning segment of a global index, as `(rank, local_index)`. For the
    /// clone policy the canonical owner is the lowest participating rank.
    pub fn segment_of(&self, global_index: usize) -> Result<(Rank, usize)> {
        if global_index >= self.logical_len {
            return Err(Error::usage(format!(
                "global index {global_index} outside array of {} elements",
                self.logical_len
            )));
        }
        if matches!(self.policy, SplitPolicy::Clone) {
            return Ok((self.segments[0].desc.rank, global_index));
        }
        let seg = self
            .segments
            .iter()
            .find(|s| {
                global_index >= s.desc.global_offset
                    && global_index < s.desc.global_offset + s.desc.len
            })
            .expect("owned segments partition the logical array");
        let local = match self.policy {
            SplitPolicy::Overlap2D { cols, .. } => {
                global_index - seg.desc.global_offset + seg.desc.halo_lo * cols
            }
            _ => global_index - seg.desc.global_offset,
        };
        Ok((seg.desc.rank, local))
    }

    /// Spans each segment contributes to the logical array, as
    /// `(rank, global_offset, local_offset, len)`: owned elements only, with
    /// clone replicas represented by their canonical lowest rank and halo
    /// rows excluded.
    pub(crate) fn owned_spans(&self) -> Vec<(Rank, usize, usize, usize)> {
        let mut spans = Vec::new();
        match self.policy {
            SplitPolicy::Clone => {
                let d = &self.segments[0].desc;
                spans.push((d.rank, 0, 0, self.logical_len));
            }
            SplitPolicy::Overlap2D { cols, .. } => {
                for s in self.segments.iter() {
                    let d = &s.desc;
                    spans.push((d.rank, d.global_offset, d.halo_lo * cols, d.len));
                }
            }
            _ => {
                for s in self.segments.iter() {
                    let d = &s.desc;
                    spans.push((d.rank, d.global_offset, 0, d.len));
                }
            }
        }
        spans
    }

    /// True when `other` is a clone of this container (same storage).
    pub fn same_storage(&self, other: &SegVector<T>) -> bool {
        Arc::ptr_eq(&self.segments, &other.segments)
    }

    /// True when both containers have identical segment layout.
    pub fn same_segmentation<U: Element>(&self, other: &SegVector<U>) -> bool {
        self.logical_len == other.logical_len
            && self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(other.segments.iter())
                .all(|(a, b)| a.desc == b.desc)
    }
}

impl<T: Element> std::fmt::Debug for SegVector<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegVector")
            .field("logical_len", &self.logical_len)
            .field("policy", &self.policy)
            .field("segments", &self.segments.iter().map(|s| s.desc).collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::DevGroup;

    fn env(n: usize) -> Environment {
        Environment::create(n, None).unwrap()
    }

    #[test]
    fn natural_split_lengths_differ_by_at_most_one() {
        let v = SegVector::<f32>::new(&env(3), 10, SplitPolicy::Natural).unwrap();
        let lens: Vec<usize> = v.descriptors().map(|d| d.len).collect();
        assert_eq!(lens, vec![4, 3, 3]);
        let offsets: Vec<usize> = v.descriptors().map(|d| d.global_offset).collect();
        assert_eq!(offsets, vec![0, 4, 7]);
    }

    #[test]
    fn natural_split_needs_an_element_per_device() {
        let err = SegVector::<f32>::new(&env(4), 3, SplitPolicy::Natural).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSplit(_)), "got {err:?}");
    }

    #[test]
    fn blockwise_split_keeps_whole_matrices_together() {
        // 12 square complex matrices over 4 devices: 3 matrices per device.
        let side = 384;
        let v = SegVector::<Complex32>::new(
            &env(4),
            12 * side * side,
            SplitPolicy::Blockwise { block_len: side * side },
        )
        .unwrap();
        for d in v.descriptors() {
            assert_eq!(d.len, 3 * side * side);
            assert_eq!(d.len % (side * side), 0);
        }
    }

    #[test]
    fn blockwise_partial_last_block_and_idle_devices() {
        // 5 blocks of 4 over 3 devices -> 2,2,1 blocks; last block short.
        let v = SegVector::<f32>::new(&env(3), 18, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        let lens: Vec<usize> = v.descriptors().map(|d| d.len).collect();
        assert_eq!(lens, vec![8, 8, 2]);
        // One block over 4 devices: only the first rank participates.
        let v = SegVector::<f32>::new(&env(4), 4, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        assert_eq!(v.participating_ranks(), vec![0]);
    }

    #[test]
    fn clone_split_replicates_everywhere() {
        let v = SegVector::<f32>::new(&env(3), 7, SplitPolicy::Clone).unwrap();
        for d in v.descriptors() {
            assert_eq!(d.len, 7);
            assert_eq!(d.global_offset, 0);
        }
        assert_eq!(v.segment_of(5).unwrap(), (0, 5));
    }

    #[test]
    fn overlap_split_stores_neighbour_rows() {
        // 8x4 matrix over 2 devices with halo 1.
        let v = SegVector::<f32>::new(
            &env(2),
            32,
            SplitPolicy::Overlap2D { rows: 8, cols: 4, halo: 1 },
        )
        .unwrap();
        let descs: Vec<_> = v.descriptors().copied().collect();
        assert_eq!(descs[0].global_offset, 0);
        assert_eq!(descs[0].len, 16); // rows 0..4
        assert_eq!((descs[0].halo_lo, descs[0].halo_hi), (0, 1)); // plus row 4
        assert_eq!(descs[0].stored_len, 20);
        assert_eq!(descs[1].global_offset, 16); // rows 4..8
        assert_eq!((descs[1].halo_lo, descs[1].halo_hi), (1, 0)); // plus row 3
        assert_eq!(descs[1].stored_len, 20);
    }

    #[test]
    fn index_maps_are_mutually_inverse_on_owned_elements() {
        let v = SegVector::<f32>::new(&env(3), 10, SplitPolicy::Natural).unwrap();
        assert_eq!(v.segment_of(4).unwrap(), (1, 0));
        for g in 0..10 {
            let (rank, local) = v.segment_of(g).unwrap();
            assert_eq!(v.global_of(rank, local).unwrap(), g);
        }
        assert!(v.segment_of(10).is_err());
        assert!(v.global_of(0, 4).is_err());
    }

    #[test]
    fn overlap_index_maps_resolve_owners() {
        let v = SegVector::<f32>::new(
            &env(2),
            32,
            SplitPolicy::Overlap2D { rows: 8, cols: 4, halo: 1 },
        )
        .unwrap();
        for g in 0..32 {
            let (rank, local) = v.segment_of(g).unwrap();
            assert_eq!(v.global_of(rank, local).unwrap(), g, "index {g}");
        }
        // Halo rows map back to the global rows they mirror.
        assert_eq!(v.global_of(0, 16).unwrap(), 16); // rank 0's halo row is row 4
        assert_eq!(v.global_of(1, 0).unwrap(), 12); // rank 1's halo row is row 3
    }

    #[test]
    fn kernels_see_their_own_segment_only() {
        let e = env(3);
        let v = SegVector::<f32>::new(&e, 9, SplitPolicy::Natural).unwrap();
        let w = v.clone();
        e.invoke_kernel_all(move |ctx| {
            let mut local = w.local_mut(ctx);
            for x in local.iter_mut() {
                *x = ctx.rank() as f32;
            }
        })
        .unwrap()
        .wait()
        .unwrap();
        for rank in 0..3 {
            let local = v.read_rank(rank).unwrap();
            assert!(local.iter().all(|&x| x == rank as f32));
        }
    }

    #[test]
    fn single_rank_kernel_leaves_other_segments_untouched() {
        let e = env(3);
        let v = SegVector::<f32>::new(&e, 9, SplitPolicy::Natural).unwrap();
        let w = v.clone();
        e.invoke_kernel(1, move |ctx| {
            let mut local = w.local_mut(ctx);
            for x in local.iter_mut() {
                *x = 7.0;
            }
        })
        .unwrap()
        .wait()
        .unwrap();
        assert!(v.read_rank(0).unwrap().iter().all(|&x| x == 0.0));
        assert!(v.read_rank(1).unwrap().iter().all(|&x| x == 7.0));
        assert!(v.read_rank(2).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn local_range_on_rank_without_segment_is_usage_error() {
        let e = env(4);
        let v = SegVector::<f32>::new(&e, 4, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        assert!(v.local_range(0).is_ok());
        assert!(v.local_range(3).is_err());
    }

    #[test]
    fn allocation_failure_surfaces_at_creation() {
        let e = Environment::with_config(crate::runtime::EnvConfig {
            devices: 2,
            arena_capacity: Some(16),
            ..Default::default()
        })
        .unwrap();
        // 8 elements over 2 devices = 16 bytes per device: fits exactly.
        let ok = SegVector::<f32>::new(&e, 8, SplitPolicy::Natural);
        assert!(ok.is_ok());
        drop(ok);
        let err = SegVector::<f32>::new(&e, 10, SplitPolicy::Natural).unwrap_err();
        assert!(matches!(err, Error::Alloc { .. }), "got {err:?}");
    }

    #[test]
    fn segments_respect_subgroups() {
        let e = Environment::create(8, Some(DevGroup::from_to(2, 5))).unwrap();
        let v = SegVector::<f32>::new(&e, 9, SplitPolicy::Natural).unwrap();
        assert_eq!(v.participating_ranks(), vec![2, 3, 4]);
        assert_eq!(v.segment_of(0).unwrap().0, 2);
    }
}
