//! MPI-like transfer primitives over segmented containers.
//!
//! Every primitive routes its spans through the environment's topology and
//! records the moved bytes in the transfer ledger. Device-to-device
//! primitives are asynchronous: they enqueue commands on the involved queues
//! with cross-queue dependency fences and return a fence covering all of
//! them. Primitives that read into host memory (`gather`, `reduce`) complete
//! before returning and hand back an already-signalled fence.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::runtime::{Environment, Fence, Rank};
use crate::segvec::{natural_ranges, Element, SegVector, SplitPolicy};
use crate::topology::{Endpoint, PathKind};

/// Element-wise combination applied by the reduction collectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    /// Element-wise addition; on complex values this is pairwise float
    /// addition of the two components.
    Sum,
}

impl ReduceOp {
    fn apply<T: Element>(&self, acc: T, x: T) -> T {
        match self {
            ReduceOp::Sum => acc + x,
        }
    }
}

/// 2D sub-window of a `mat_rows x mat_cols` matrix, used to restrict
/// [`all_reduce_blockwise`] to a region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window2d {
    pub mat_rows: usize,
    pub mat_cols: usize,
    pub row_off: usize,
    pub col_off: usize,
    pub win_rows: usize,
    pub win_cols: usize,
}

impl Window2d {
    fn validate(&self, logical_len: usize) -> Result<()> {
        if self.mat_rows * self.mat_cols != logical_len {
            return Err(Error::shape(format!(
                "window declares a {}x{} matrix but the buffer holds {} elements",
                self.mat_rows, self.mat_cols, logical_len
            )));
        }
        if self.row_off + self.win_rows > self.mat_rows
            || self.col_off + self.win_cols > self.mat_cols
            || self.win_rows == 0
            || self.win_cols == 0
        {
            return Err(Error::shape("window outside matrix bounds"));
        }
        Ok(())
    }
}

fn elem_bytes<T: Element>(n: usize) -> u64 {
    (n * std::mem::size_of::<T>()) as u64
}

fn check_same_env<T: Element, U: Element>(a: &SegVector<T>, b: &SegVector<U>) -> Result<()> {
    if !a.env().ptr_eq(b.env()) {
        return Err(Error::usage("containers belong to different environments"));
    }
    Ok(())
}

/// Record a transfer and return its resolved path kind.
fn record(env: &Environment, src: Endpoint, dst: Endpoint, bytes: u64) -> Result<PathKind> {
    let path = env.topology().resolve_path(src, dst)?;
    env.ledger().record(src, dst, path, bytes);
    Ok(path)
}

/// Guard source queues against write-after-read hazards: commands submitted
/// to `rank` after this call will not run until `read_fence` completes, so
/// cross-device reads of `rank`'s buffers finish before later kernels can
/// overwrite them.
fn fence_queue_after(env: &Environment, rank: Rank, read_fence: &Fence) -> Result<()> {
    let joiner = Fence::completed();
    env.submit_raw(rank, vec![read_fence.clone()], &joiner, Box::new(|_| Ok(())))
}

/// Spans each segment must receive to make the container logically equal to
/// a source: clone replicas all receive the full array, overlap segments
/// their full stored range (halos included), others their owned range.
fn receive_spans<T: Element>(v: &SegVector<T>) -> Vec<(Rank, usize, usize, usize)> {
    let mut spans = Vec::new();
    match v.policy() {
        SplitPolicy::Clone => {
            for d in v.descriptors() {
                spans.push((d.rank, 0, 0, v.logical_len()));
            }
        }
        SplitPolicy::Overlap2D { cols, .. } => {
            for d in v.descriptors() {
                spans.push((
                    d.rank,
                    d.global_offset - d.halo_lo * cols,
                    0,
                    d.stored_len,
                ));
            }
        }
        _ => {
            for d in v.descriptors() {
                spans.push((d.rank, d.global_offset, 0, d.len));
            }
        }
    }
    spans
}

/// Copy one segmented container into another of equal logical length.
///
/// Same-rank aligned spans move on-device; cross-rank spans are routed via
/// the topology. Copying a container onto itself is a no-op.
pub fn copy_seg<T: Element>(src: &SegVector<T>, dst: &SegVector<T>) -> Result<Fence> {
    check_same_env(src, dst)?;
    if src.logical_len() != dst.logical_len() {
        return Err(Error::shape(format!(
            "copy between containers of {} and {} elements",
            src.logical_len(),
            dst.logical_len()
        )));
    }
    if src.same_storage(dst) {
        return Ok(Fence::completed());
    }

    let src_spans = src.owned_spans();
    let src_ranks: Vec<Rank> = src.participating_ranks();
    // Snapshot source tails before submitting anything: every command of this
    // copy signals one shared fence, so depending on a tail captured after an
    // earlier submission would deadlock on our own fence.
    let tails: std::collections::HashMap<Rank, Fence> = src_ranks
        .iter()
        .map(|&r| Ok((r, src.env().queue_tail(r)?)))
        .collect::<Result<_>>()?;
    let fence = Fence::completed();
    let mut read_ranks: Vec<Rank> = Vec::new();
    for (dst_rank, dst_g0, dst_local0, dst_len) in receive_spans(dst) {
        let dst_g1 = dst_g0 + dst_len;
        // Prefer a same-rank replica of a cloned source over the canonical owner.
        let local_clone_src = matches!(src.policy(), SplitPolicy::Clone)
            && src_ranks.contains(&dst_rank);
        for &(span_rank, span_g0, span_local0, span_len) in &src_spans {
            let src_rank = if local_clone_src { dst_rank } else { span_rank };
            if src_rank != dst_rank && !read_ranks.contains(&src_rank) {
                read_ranks.push(src_rank);
            }
            let lo = dst_g0.max(span_g0);
            let hi = dst_g1.min(span_g0 + span_len);
            if lo >= hi {
                continue;
            }
            let n = hi - lo;
            let src_off = span_local0 + (lo - span_g0);
            let dst_off = dst_local0 + (lo - dst_g0);
            let src_cl = src.clone();
            let dst_cl = dst.clone();
            let env = src.env().clone();
            let deps = if src_rank == dst_rank {
                Vec::new()
            } else {
                vec![tails[&src_rank].clone()]
            };
            src.env().submit_raw(
                dst_rank,
                deps,
                &fence,
                Box::new(move |ctx| {
                    let tmp: Vec<T> = {
                        let s = src_cl.read_rank(src_rank).map_err(|e| e.to_string())?;
                        s[src_off..src_off + n].to_vec()
                    };
                    {
                        let mut d = dst_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        d[dst_off..dst_off + n].copy_from_slice(&tmp);
                    }
                    record(&env, Endpoint::Device(src_rank), Endpoint::Device(ctx.rank()), elem_bytes::<T>(n))
                        .map_err(|e| e.to_string())?;
                    Ok(())
                }),
            )?;
        }
    }
    for rank in read_ranks {
        fence_queue_after(src.env(), rank, &fence)?;
    }
    Ok(fence)
}

/// Scatter a host array into a segmented container. Each segment receives
/// its global span (clone replicas the full array, overlap segments their
/// halo rows as well). Asynchronous; the payload is captured at call time.
pub fn scatter<T: Element>(src: &[T], dst: &SegVector<T>) -> Result<Fence> {
    if src.len() != dst.logical_len() {
        return Err(Error::shape(format!(
            "scatter of {} host elements into container of {}",
            src.len(),
            dst.logical_len()
        )));
    }
    let payload: Arc<[T]> = Arc::from(src);
    let fence = Fence::completed();
    for (rank, g0, local0, len) in receive_spans(dst) {
        let payload = Arc::clone(&payload);
        let dst_cl = dst.clone();
        let env = dst.env().clone();
        dst.env().submit_raw(
            rank,
            Vec::new(),
            &fence,
            Box::new(move |ctx| {
                {
                    let mut d = dst_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                    d[local0..local0 + len].copy_from_slice(&payload[g0..g0 + len]);
                }
                record(&env, Endpoint::Host, Endpoint::Device(ctx.rank()), elem_bytes::<T>(len))
                    .map_err(|e| e.to_string())?;
                Ok(())
            }),
        )?;
    }
    Ok(fence)
}

/// Gather a segmented container into a host array (owned elements; a cloned
/// source is read from its canonical lowest rank). Completes before
/// returning.
pub fn gather<T: Element>(src: &SegVector<T>, dst: &mut [T]) -> Result<Fence> {
    if dst.len() != src.logical_len() {
        return Err(Error::shape(format!(
            "gather of container of {} elements into {} host elements",
            src.logical_len(),
            dst.len()
        )));
    }
    for (rank, g0, local0, len) in src.owned_spans() {
        src.env().queue_tail(rank)?.wait()?;
        let s = src.read_rank(rank)?;
        dst[g0..g0 + len].copy_from_slice(&s[local0..local0 + len]);
        record(src.env(), Endpoint::Device(rank), Endpoint::Host, elem_bytes::<T>(len))?;
    }
    Ok(Fence::completed())
}

/// Broadcast a host array to every replica of a clone-split container.
pub fn broadcast<T: Element>(src: &[T], dst: &SegVector<T>) -> Result<Fence> {
    if !matches!(dst.policy(), SplitPolicy::Clone) {
        return Err(Error::usage("broadcast requires a clone-split destination"));
    }
    scatter(src, dst)
}

/// Reduce a clone-split container to a host array.
///
/// Within each IOH the lowest participating rank acts as leader: it reads
/// its peers' replicas over peer-to-peer paths, combines them in ascending
/// rank order, and ships one partial to the host. With more than one IOH the
/// final combination happens on the host (and is flagged in the ledger).
/// Completes before returning.
pub fn reduce<T: Element>(src: &SegVector<T>, dst: &mut [T], op: ReduceOp) -> Result<Fence> {
    if !matches!(src.policy(), SplitPolicy::Clone) {
        return Err(Error::usage("reduce requires a clone-split source"));
    }
    if dst.len() != src.logical_len() {
        return Err(Error::shape(format!(
            "reduce of container of {} elements into {} host elements",
            src.logical_len(),
            dst.len()
        )));
    }
    let env = src.env();
    let ranks = src.participating_ranks();
    for &rank in &ranks {
        env.queue_tail(rank)?.wait()?;
    }
    let groups = env.topology().ioh_groups(&ranks)?;
    let len = src.logical_len();
    let mut combined: Option<Vec<T>> = None;
    for group in &groups {
        let leader = group[0];
        let mut partial: Vec<T> = {
            let s = src.read_rank(leader)?;
            s[..len].to_vec()
        };
        for &peer in &group[1..] {
            {
                let s = src.read_rank(peer)?;
                for (acc, &x) in partial.iter_mut().zip(s.iter()) {
                    *acc = op.apply(*acc, x);
                }
            }
            record(env, Endpoint::Device(peer), Endpoint::Device(leader), elem_bytes::<T>(len))?;
        }
        record(env, Endpoint::Device(leader), Endpoint::Host, elem_bytes::<T>(len))?;
        combined = Some(match combined {
            None => partial,
            Some(mut acc) => {
                for (a, &x) in acc.iter_mut().zip(partial.iter()) {
                    *a = op.apply(*a, x);
                }
                acc
            }
        });
    }
    if groups.len() > 1 {
        env.ledger().record_host_combine();
    }
    dst.copy_from_slice(&combined.expect("clone container has at least one replica"));
    Ok(Fence::completed())
}

/// Combine per-rank scalar partials through the same leader structure as
/// [`reduce`], recording one scalar-sized transfer per hop. Used by the
/// distributed scalar product.
pub(crate) fn combine_scalar_partials(
    env: &Environment,
    partials: &[(Rank, num_complex::Complex64)],
    scalar_bytes: u64,
) -> Result<num_complex::Complex64> {
    let ranks: Vec<Rank> = partials.iter().map(|&(r, _)| r).collect();
    let groups = env.topology().ioh_groups(&ranks)?;
    let value_of = |rank: Rank| {
        partials
            .iter()
            .find(|&&(r, _)| r == rank)
            .map(|&(_, v)| v)
            .expect("partial for rank")
    };
    let mut total = num_complex::Complex64::new(0.0, 0.0);
    for group in &groups {
        let leader = group[0];
        let mut partial = value_of(leader);
        for &peer in &group[1..] {
            partial += value_of(peer);
            record(env, Endpoint::Device(peer), Endpoint::Device(leader), scalar_bytes)?;
        }
        record(env, Endpoint::Device(leader), Endpoint::Host, scalar_bytes)?;
        total += partial;
    }
    if groups.len() > 1 {
        env.ledger().record_host_combine();
    }
    Ok(total)
}

/// Element spans (offset, len) of one device's block of an all-reduce.
fn block_spans(
    len: usize,
    device_index: usize,
    device_count: usize,
    window: Option<Window2d>,
) -> Vec<(usize, usize)> {
    match window {
        None => {
            let (offset, n) = natural_ranges(len, device_count)[device_index];
            if n == 0 {
                Vec::new()
            } else {
                vec![(offset, n)]
            }
        }
        Some(w) => {
            let (wrow0, nrows) = natural_ranges(w.win_rows, device_count)[device_index];
            (0..nrows)
                .map(|i| {
                    let row = w.row_off + wrow0 + i;
                    (row * w.mat_cols + w.col_off, w.win_cols)
                })
                .collect()
        }
    }
}

/// Block-wise all-reduce over per-device full-length buffers.
///
/// Device `g` computes block `g` of the combined result by reading block `g`
/// of every peer's `parts` buffer, then the finished blocks are exchanged so
/// every `out` replica holds the full combination. `parts` and `out` must be
/// distinct buffers (double buffering), and all devices must sit under one
/// IOH; spanning hubs is rejected as unsupported. An optional window
/// restricts the combined region; elements outside it are left untouched.
pub fn all_reduce_blockwise<T: Element>(
    parts: &SegVector<T>,
    out: &SegVector<T>,
    op: ReduceOp,
    window: Option<Window2d>,
) -> Result<Fence> {
    check_same_env(parts, out)?;
    if !matches!(parts.policy(), SplitPolicy::Clone) || !matches!(out.policy(), SplitPolicy::Clone) {
        return Err(Error::usage("all-reduce operates on clone-split buffers"));
    }
    if parts.logical_len() != out.logical_len() {
        return Err(Error::shape("all-reduce buffers differ in length"));
    }
    if parts.same_storage(out) {
        return Err(Error::usage(
            "all-reduce requires distinct input and output buffers (double buffering)",
        ));
    }
    if let Some(w) = window {
        w.validate(parts.logical_len())?;
    }
    let env = parts.env().clone();
    let ranks = parts.participating_ranks();
    if env.topology().ioh_groups(&ranks)?.len() > 1 {
        return Err(Error::Unsupported(
            "all-reduce spans multiple IOHs; peer-to-peer access is only possible under one hub"
                .into(),
        ));
    }

    let len = parts.logical_len();
    let device_count = ranks.len();
    let tails: Vec<Fence> = ranks
        .iter()
        .map(|&r| env.queue_tail(r))
        .collect::<Result<_>>()?;

    // Stage 1: each device combines its own block across all parts buffers.
    let stage1 = Fence::completed();
    for (gi, &g) in ranks.iter().enumerate() {
        let spans = block_spans(len, gi, device_count, window);
        let parts_cl = parts.clone();
        let out_cl = out.clone();
        let env_cl = env.clone();
        let ranks_cl = ranks.clone();
        env.submit_raw(
            g,
            tails.clone(),
            &stage1,
            Box::new(move |ctx| {
                let total: usize = spans.iter().map(|&(_, n)| n).sum();
                let mut acc: Vec<T> = Vec::with_capacity(total);
                for (ri, &r) in ranks_cl.iter().enumerate() {
                    let s = parts_cl.read_rank(r).map_err(|e| e.to_string())?;
                    if ri == 0 {
                        for &(off, n) in &spans {
                            acc.extend_from_slice(&s[off..off + n]);
                        }
                    } else {
                        let mut cursor = 0;
                        for &(off, n) in &spans {
                            for (a, &x) in acc[cursor..cursor + n].iter_mut().zip(&s[off..off + n]) {
                                *a = op.apply(*a, x);
                            }
                            cursor += n;
                        }
                    }
                    drop(s);
                    let bytes = elem_bytes::<T>(total);
                    if bytes > 0 {
                        record(&env_cl, Endpoint::Device(r), Endpoint::Device(ctx.rank()), bytes)
                            .map_err(|e| e.to_string())?;
                    }
                }
                let mut d = out_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                let mut cursor = 0;
                for &(off, n) in &spans {
                    d[off..off + n].copy_from_slice(&acc[cursor..cursor + n]);
                    cursor += n;
                }
                Ok(())
            }),
        )?;
    }

    if device_count == 1 {
        return Ok(stage1);
    }

    // Stage 1 reads every peer's `parts`; later commands on any queue must
    // not overwrite them before those reads finish.
    for &g in &ranks {
        fence_queue_after(&env, g, &stage1)?;
    }

    // Stage 2: exchange finished blocks so every replica holds the full sum.
    let stage2 = Fence::completed();
    for &g in &ranks {
        let parts_owner_spans: Vec<(Rank, Vec<(usize, usize)>)> = ranks
            .iter()
            .enumerate()
            .filter(|&(_, &h)| h != g)
            .map(|(hi, &h)| (h, block_spans(len, hi, device_count, window)))
            .collect();
        let out_cl = out.clone();
        let env_cl = env.clone();
        env.submit_raw(
            g,
            vec![stage1.clone()],
            &stage2,
            Box::new(move |ctx| {
                for (h, spans) in &parts_owner_spans {
                    let total: usize = spans.iter().map(|&(_, n)| n).sum();
                    if total == 0 {
                        continue;
                    }
                    let mut tmp: Vec<T> = Vec::with_capacity(total);
                    {
                        let s = out_cl.read_rank(*h).map_err(|e| e.to_string())?;
                        for &(off, n) in spans {
                            tmp.extend_from_slice(&s[off..off + n]);
                        }
                    }
                    {
                        let mut d = out_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        let mut cursor = 0;
                        for &(off, n) in spans {
                            d[off..off + n].copy_from_slice(&tmp[cursor..cursor + n]);
                            cursor += n;
                        }
                    }
                    record(&env_cl, Endpoint::Device(*h), Endpoint::Device(ctx.rank()), elem_bytes::<T>(total))
                        .map_err(|e| e.to_string())?;
                }
                Ok(())
            }),
        )?;
    }
    // Stage 2 reads every peer's finished `out` blocks.
    for &g in &ranks {
        fence_queue_after(&env, g, &stage2)?;
    }
    Ok(stage2)
}

/// Refresh every halo row of an overlap-split container from its owner.
pub fn halo_exchange<T: Element>(v: &SegVector<T>) -> Result<Fence> {
    let cols = match v.policy() {
        SplitPolicy::Overlap2D { cols, .. } => cols,
        _ => return Err(Error::usage("halo exchange requires an overlap-split container")),
    };
    let tails: std::collections::HashMap<Rank, Fence> = v
        .participating_ranks()
        .iter()
        .map(|&r| Ok((r, v.env().queue_tail(r)?)))
        .collect::<Result<_>>()?;
    let fence = Fence::completed();
    let descs: Vec<_> = v.descriptors().copied().collect();
    for desc in &descs {
        let first_owned_row = desc.global_offset / cols;
        let owned_rows = desc.len / cols;
        let halo_rows = (0..desc.halo_lo)
            .map(|i| (i, first_owned_row - desc.halo_lo + i))
            .chain((0..desc.halo_hi).map(|i| {
                (desc.halo_lo + owned_rows + i, first_owned_row + owned_rows + i)
            }));
        for (local_row, global_row) in halo_rows {
            let (owner, owner_local) = v.segment_of(global_row * cols)?;
            let dst_off = local_row * cols;
            let v_cl = v.clone();
            let env = v.env().clone();
            let deps = if owner == desc.rank {
                Vec::new()
            } else {
                vec![tails[&owner].clone()]
            };
            v.env().submit_raw(
                desc.rank,
                deps,
                &fence,
                Box::new(move |ctx| {
                    let tmp: Vec<T> = {
                        let s = v_cl.read_rank(owner).map_err(|e| e.to_string())?;
                        s[owner_local..owner_local + cols].to_vec()
                    };
                    {
                        let mut d = v_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        d[dst_off..dst_off + cols].copy_from_slice(&tmp);
                    }
                    record(&env, Endpoint::Device(owner), Endpoint::Device(ctx.rank()), elem_bytes::<T>(cols))
                        .map_err(|e| e.to_string())?;
                    Ok(())
                }),
            )?;
        }
    }
    // Owners are read from neighbouring ranks' commands.
    for rank in v.participating_ranks() {
        fence_queue_after(v.env(), rank, &fence)?;
    }
    Ok(fence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::EnvConfig;
    use crate::topology::Topology;
    use num_complex::Complex32;

    fn env(n: usize) -> Environment {
        Environment::create(n, None).unwrap()
    }

    fn env_fig2() -> Environment {
        Environment::with_config(EnvConfig {
            devices: 8,
            topology: Some(Topology::new(vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 0, 1, 1]).unwrap()),
            ..Default::default()
        })
        .unwrap()
    }

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| i as f32).collect()
    }

    #[test]
    fn copy_between_identical_splits_stays_on_device() {
        let e = env(3);
        let a = SegVector::<f32>::new(&e, 10, SplitPolicy::Natural).unwrap();
        let b = SegVector::<f32>::new(&e, 10, SplitPolicy::Natural).unwrap();
        scatter(&ramp(10), &a).unwrap();
        copy_seg(&a, &b).unwrap().wait().unwrap();
        let mut out = vec![0.0; 10];
        gather(&b, &mut out).unwrap();
        assert_eq!(out, ramp(10));
        let on_device = e.ledger().by_path(PathKind::OnDevice);
        assert_eq!(on_device.count, 3);
        assert_eq!(e.ledger().by_path(PathKind::PeerToPeer).bytes, 0);
        assert_eq!(e.ledger().by_path(PathKind::HostStaged).bytes, 0);
    }

    #[test]
    fn copy_between_different_splits_moves_only_misplaced_spans() {
        let e = env(4);
        // Source lives on two ranks (two 4-element blocks), destination on four.
        let src = SegVector::<f32>::new(&e, 8, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        let dst = SegVector::<f32>::new(&e, 8, SplitPolicy::Natural).unwrap();
        scatter(&ramp(8), &src).unwrap();
        e.ledger().reset();
        copy_seg(&src, &dst).unwrap().wait().unwrap();
        let mut out = vec![0.0; 8];
        gather(&dst, &mut out).unwrap();
        assert_eq!(out, ramp(8));
        // Only ranks 1, 2, 3 receive halves they do not already hold:
        // r0<-r0 stays on-device, r1<-r0, r2<-r1, r3<-r1 cross ranks.
        let cross = e.ledger().by_path(PathKind::PeerToPeer);
        assert_eq!(cross.bytes, 3 * 2 * 4);
        assert_eq!(e.ledger().by_path(PathKind::OnDevice).count, 1);
    }

    #[test]
    fn copy_alias_is_a_no_op() {
        let e = env(2);
        let a = SegVector::<f32>::new(&e, 6, SplitPolicy::Natural).unwrap();
        scatter(&ramp(6), &a).unwrap();
        e.ledger().reset();
        let alias = a.clone();
        copy_seg(&a, &alias).unwrap().wait().unwrap();
        assert_eq!(e.ledger().total().count, 0);
    }

    #[test]
    fn scatter_places_global_spans() {
        let e = env(3);
        let v = SegVector::<f32>::new(&e, 10, SplitPolicy::Natural).unwrap();
        scatter(&ramp(10), &v).unwrap().wait().unwrap();
        let local = v.read_rank(1).unwrap();
        assert_eq!(&local[..], &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn scatter_to_clone_fills_every_replica() {
        let e = env(4);
        let v = SegVector::<f32>::new(&e, 5, SplitPolicy::Clone).unwrap();
        scatter(&ramp(5), &v).unwrap().wait().unwrap();
        for rank in 0..4 {
            let local = v.read_rank(rank).unwrap();
            assert_eq!(&local[..], &ramp(5)[..]);
        }
    }

    #[test]
    fn gather_scatter_round_trip_all_policies() {
        let e = env(3);
        let data = ramp(24);
        for policy in [
            SplitPolicy::Natural,
            SplitPolicy::Blockwise { block_len: 5 },
            SplitPolicy::Clone,
            SplitPolicy::Overlap2D { rows: 6, cols: 4, halo: 1 },
        ] {
            let v = SegVector::<f32>::new(&e, 24, policy).unwrap();
            scatter(&data, &v).unwrap();
            let mut out = vec![0.0; 24];
            gather(&v, &mut out).unwrap();
            assert_eq!(out, data, "round trip failed for {policy:?}");
        }
    }

    #[test]
    fn broadcast_requires_clone_and_records_per_replica_bytes() {
        let e = env(4);
        let n = 384 * 384;
        let v = SegVector::<Complex32>::new(&e, n, SplitPolicy::Clone).unwrap();
        let data = vec![Complex32::new(1.0, -2.0); n];
        broadcast(&data, &v).unwrap().wait().unwrap();
        let h2d = e.ledger().by_path(PathKind::HostToDevice);
        assert_eq!(h2d.bytes, 4 * (n as u64) * 8);
        assert_eq!(h2d.count, 4);
        for rank in 0..4 {
            let local = v.read_rank(rank).unwrap();
            assert!(local.iter().all(|&z| z == Complex32::new(1.0, -2.0)));
        }

        let not_clone = SegVector::<Complex32>::new(&e, n, SplitPolicy::Natural).unwrap();
        assert!(broadcast(&data, &not_clone).is_err());
    }

    #[test]
    fn reduce_sums_replicas() {
        let e = env(3);
        let v = SegVector::<f32>::new(&e, 4, SplitPolicy::Clone).unwrap();
        scatter(&[1.0, 2.0, 3.0, 4.0], &v).unwrap();
        let mut out = vec![0.0; 4];
        reduce(&v, &mut out, ReduceOp::Sum).unwrap();
        assert_eq!(out, vec![3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn reduce_single_device_is_identity() {
        let e = env(1);
        let v = SegVector::<f32>::new(&e, 4, SplitPolicy::Clone).unwrap();
        scatter(&ramp(4), &v).unwrap();
        let mut out = vec![0.0; 4];
        reduce(&v, &mut out, ReduceOp::Sum).unwrap();
        assert_eq!(out, ramp(4));
    }

    #[test]
    fn reduce_routing_matches_the_octo_gpu_topology() {
        let e = env_fig2();
        let v = SegVector::<f32>::new(&e, 16, SplitPolicy::Clone).unwrap();
        scatter(&[1.0; 16], &v).unwrap();
        e.ledger().reset();
        let mut out = vec![0.0; 16];
        reduce(&v, &mut out, ReduceOp::Sum).unwrap();
        assert!(out.iter().all(|&x| x == 8.0));
        // Peer reads stay inside each IOH; one partial per IOH reaches the host.
        let ledger = e.ledger();
        assert_eq!(ledger.by_path(PathKind::HostStaged).bytes, 0);
        assert_eq!(ledger.by_path(PathKind::DeviceToHost).count, 2);
        assert_eq!(ledger.host_combines(), 1);
        let cross_ioh_p2p = ledger.query(|src, dst, path| {
            path == PathKind::PeerToPeer
                && match (src, dst) {
                    (Endpoint::Device(a), Endpoint::Device(b)) => {
                        e.topology().ioh(a).unwrap() != e.topology().ioh(b).unwrap()
                    }
                    _ => false,
                }
        });
        assert_eq!(cross_ioh_p2p.bytes, 0);
    }

    #[test]
    fn reduce_of_broadcast_scales_by_device_count() {
        let e = env(4);
        let v = SegVector::<f32>::new(&e, 6, SplitPolicy::Clone).unwrap();
        let x = ramp(6);
        broadcast(&x, &v).unwrap();
        let mut out = vec![0.0; 6];
        reduce(&v, &mut out, ReduceOp::Sum).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert_eq!(*o, 4.0 * xi);
        }
    }

    #[test]
    fn all_reduce_single_device_copies_parts() {
        let e = env(1);
        let parts = SegVector::<f32>::new(&e, 5, SplitPolicy::Clone).unwrap();
        let out = SegVector::<f32>::new(&e, 5, SplitPolicy::Clone).unwrap();
        scatter(&ramp(5), &parts).unwrap();
        all_reduce_blockwise(&parts, &out, ReduceOp::Sum, None).unwrap().wait().unwrap();
        let local = out.read_rank(0).unwrap();
        assert_eq!(&local[..], &ramp(5)[..]);
        assert!(e.ledger().by_path(PathKind::OnDevice).bytes > 0);
    }

    #[test]
    fn all_reduce_combines_every_rank() {
        let e = env(4);
        let parts = SegVector::<f32>::new(&e, 6, SplitPolicy::Clone).unwrap();
        let out = SegVector::<f32>::new(&e, 6, SplitPolicy::Clone).unwrap();
        let p = parts.clone();
        e.invoke_kernel_all(move |ctx| {
            let mut local = p.local_mut(ctx);
            for x in local.iter_mut() {
                *x = ctx.rank() as f32;
            }
        })
        .unwrap();
        all_reduce_blockwise(&parts, &out, ReduceOp::Sum, None).unwrap().wait().unwrap();
        for rank in 0..4 {
            let local = out.read_rank(rank).unwrap();
            assert!(local.iter().all(|&x| x == 6.0), "rank {rank}: {local:?}");
        }
        assert_eq!(e.ledger().by_path(PathKind::HostStaged).bytes, 0);
    }

    #[test]
    fn all_reduce_window_leaves_outside_untouched() {
        let e = env(2);
        let n = 8 * 8;
        let parts = SegVector::<f32>::new(&e, n, SplitPolicy::Clone).unwrap();
        let out = SegVector::<f32>::new(&e, n, SplitPolicy::Clone).unwrap();
        scatter(&vec![1.0; n], &parts).unwrap();
        let window = Window2d {
            mat_rows: 8,
            mat_cols: 8,
            row_off: 2,
            col_off: 2,
            win_rows: 4,
            win_cols: 4,
        };
        all_reduce_blockwise(&parts, &out, ReduceOp::Sum, Some(window)).unwrap().wait().unwrap();
        for rank in 0..2 {
            let local = out.read_rank(rank).unwrap();
            for row in 0..8 {
                for col in 0..8 {
                    let inside = (2..6).contains(&row) && (2..6).contains(&col);
                    let expect = if inside { 2.0 } else { 0.0 };
                    assert_eq!(local[row * 8 + col], expect, "rank {rank} ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn all_reduce_rejects_aliasing_and_multiple_iohs() {
        let e = env(2);
        let parts = SegVector::<f32>::new(&e, 4, SplitPolicy::Clone).unwrap();
        let alias = parts.clone();
        let err = all_reduce_blockwise(&parts, &alias, ReduceOp::Sum, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");

        let e8 = env_fig2();
        let parts = SegVector::<f32>::new(&e8, 4, SplitPolicy::Clone).unwrap();
        let out = SegVector::<f32>::new(&e8, 4, SplitPolicy::Clone).unwrap();
        let err = all_reduce_blockwise(&parts, &out, ReduceOp::Sum, None).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "got {err:?}");
    }

    #[test]
    fn chained_collectives_without_host_syncs_stay_consistent() {
        // Repeated rewrite-then-all-reduce rounds with no intermediate host
        // waits; the queues must order peer reads against later overwrites.
        let e = env(4);
        let len = 256;
        let parts = SegVector::<f32>::new(&e, len, SplitPolicy::Clone).unwrap();
        let out = SegVector::<f32>::new(&e, len, SplitPolicy::Clone).unwrap();
        let mut expected = 0.0f32;
        for round in 0..50 {
            let value = round as f32 + 1.0;
            let p = parts.clone();
            e.invoke_kernel_all(move |ctx| {
                let mut local = p.local_mut(ctx);
                for x in local.iter_mut() {
                    *x = value + ctx.rank() as f32;
                }
            })
            .unwrap();
            all_reduce_blockwise(&parts, &out, ReduceOp::Sum, None).unwrap();
            expected = 4.0 * value + 6.0; // ranks 0+1+2+3
        }
        e.barrier_fence().unwrap();
        for rank in 0..4 {
            let local = out.read_rank(rank).unwrap();
            assert!(
                local.iter().all(|&x| x == expected),
                "rank {rank} holds {:?}, expected {expected}",
                &local[..4]
            );
        }
    }

    #[test]
    fn halo_exchange_mirrors_owner_rows() {
        let e = env(2);
        let v = SegVector::<f32>::new(&e, 32, SplitPolicy::Overlap2D { rows: 8, cols: 4, halo: 1 })
            .unwrap();
        // Write rank-dependent values into owned rows only.
        let w = v.clone();
        e.invoke_kernel_all(move |ctx| {
            let desc = w.local_range(ctx.rank()).unwrap();
            let mut local = w.local_mut(ctx);
            let start = desc.halo_lo * 4;
            for (i, x) in local[start..start + desc.len].iter_mut().enumerate() {
                *x = (desc.global_offset + i) as f32;
            }
        })
        .unwrap();
        halo_exchange(&v).unwrap().wait().unwrap();
        // Rank 0's trailing halo row must hold global row 4 = elements 16..20.
        let r0 = v.read_rank(0).unwrap();
        assert_eq!(&r0[16..20], &[16.0, 17.0, 18.0, 19.0]);
        // Rank 1's leading halo row must hold global row 3 = elements 12..16.
        let r1 = v.read_rank(1).unwrap();
        assert_eq!(&r1[0..4], &[12.0, 13.0, 14.0, 15.0]);
        assert!(halo_exchange(&SegVector::<f32>::new(&e, 8, SplitPolicy::Natural).unwrap()).is_err());
    }
}
