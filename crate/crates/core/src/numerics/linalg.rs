//! Scalar products with inter-device reduction, and a small dense matrix
//! product over row-block decomposed operands.

use num_complex::{Complex32, Complex64};

use crate::comm;
use crate::error::{Error, Result};
use crate::runtime::Fence;
use crate::segvec::{SegVector, SplitPolicy};

use super::launch;

/// Distributed scalar product `sum(conj(x_i) * y_i)`.
///
/// Each device reduces its owned elements into a double-precision partial;
/// the partials travel the same leader route as [`comm::reduce`] (ascending
/// rank order) and are recorded in the ledger as scalar-sized transfers.
/// Synchronizes internally and returns the combined value.
pub fn dot(x: &SegVector<Complex32>, y: &SegVector<Complex32>) -> Result<Complex64> {
    if !x.env().ptr_eq(y.env()) {
        return Err(Error::usage("containers belong to different environments"));
    }
    if !x.same_segmentation(y) {
        return Err(Error::shape("dot operands must share a segmentation"));
    }
    let env = x.env();
    let mut partials = Vec::new();
    for (rank, _g0, local0, len) in x.owned_spans() {
        env.queue_tail(rank)?.wait()?;
        let xl = x.read_rank(rank)?;
        let yl = y.read_rank(rank)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (xi, yi) in xl[local0..local0 + len].iter().zip(&yl[local0..local0 + len]) {
            let xc = Complex64::new(xi.re as f64, xi.im as f64);
            let yc = Complex64::new(yi.re as f64, yi.im as f64);
            acc += xc.conj() * yc;
        }
        partials.push((rank, acc));
    }
    // One complex single-precision scalar per hop.
    comm::combine_scalar_partials(env, &partials, 8)
}

/// Euclidean norm derived from [`dot`].
pub fn norm(x: &SegVector<Complex32>) -> Result<f64> {
    Ok(dot(x, x)?.re.max(0.0).sqrt())
}

/// `C = A * B` with `A` (`m x k`) and `C` (`m x n`) row-block split across
/// the same ranks and `B` (`k x n`) cloned on every device.
///
/// The row-block decomposition needs no reduction step: every device owns
/// the `C` rows it computes, and reads its local replica of `B`, so the only
/// traffic attributable to the product is the broadcast that filled `B`.
pub fn gemm(
    a: &SegVector<Complex32>,
    b: &SegVector<Complex32>,
    c: &SegVector<Complex32>,
    m: usize,
    k: usize,
    n: usize,
) -> Result<Fence> {
    if !a.env().ptr_eq(b.env()) || !a.env().ptr_eq(c.env()) {
        return Err(Error::usage("containers belong to different environments"));
    }
    if a.logical_len() != m * k || b.logical_len() != k * n || c.logical_len() != m * n {
        return Err(Error::shape(format!(
            "gemm shapes: |A|={} |B|={} |C|={} vs m={m} k={k} n={n}",
            a.logical_len(),
            b.logical_len(),
            c.logical_len()
        )));
    }
    if !matches!(b.policy(), SplitPolicy::Clone) {
        return Err(Error::usage("gemm requires a clone-split B"));
    }
    let a_descs: Vec<_> = a.descriptors().copied().collect();
    let c_descs: Vec<_> = c.descriptors().copied().collect();
    if a_descs.len() != c_descs.len() {
        return Err(Error::shape("A and C must be split across the same ranks"));
    }
    for (da, dc) in a_descs.iter().zip(&c_descs) {
        if da.rank != dc.rank
            || da.global_offset % k != 0
            || da.len % k != 0
            || dc.global_offset % n != 0
            || dc.len % n != 0
            || da.global_offset / k != dc.global_offset / n
            || da.len / k != dc.len / n
        {
            return Err(Error::shape(
                "A and C must be row-block split with matching row ranges",
            ));
        }
    }

    let (a, b, c) = (a.clone(), b.clone(), c.clone());
    launch(a.env().clone(), a.participating_ranks(), move |ctx| {
        let al = a.local(ctx);
        let bl = b.local(ctx);
        let mut cl = c.local_mut(ctx);
        let rows = al.len() / k;
        for i in 0..rows {
            for j in 0..n {
                let mut acc = Complex32::new(0.0, 0.0);
                for l in 0..k {
                    acc += al[i * k + l] * bl[l * n + j];
                }
                cl[i * n + j] = acc;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{broadcast, gather, scatter};
    use crate::runtime::Environment;
    use crate::topology::PathKind;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_c32(len: usize, seed: u64) -> Vec<Complex32> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..len)
            .map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn dot_of_ones_counts_elements() {
        let env = Environment::create(3, None).unwrap();
        let v = SegVector::<Complex32>::new(&env, 10, SplitPolicy::Natural).unwrap();
        scatter(&[Complex32::new(1.0, 0.0); 10], &v).unwrap();
        let d = dot(&v, &v).unwrap();
        assert!((d.re - 10.0).abs() < 1e-12 && d.im.abs() < 1e-12);
    }

    #[test]
    fn dot_matches_double_precision_reference() {
        let env = Environment::create(4, None).unwrap();
        let xs = random_c32(1000, 1);
        let ys = random_c32(1000, 2);
        let x = SegVector::<Complex32>::new(&env, 1000, SplitPolicy::Natural).unwrap();
        let y = SegVector::<Complex32>::new(&env, 1000, SplitPolicy::Natural).unwrap();
        scatter(&xs, &x).unwrap();
        scatter(&ys, &y).unwrap();
        let d = dot(&x, &y).unwrap();
        let mut reference = Complex64::new(0.0, 0.0);
        for (xi, yi) in xs.iter().zip(&ys) {
            reference += Complex64::new(xi.re as f64, xi.im as f64).conj()
                * Complex64::new(yi.re as f64, yi.im as f64);
        }
        let scale: f64 = xs.iter().map(|z| z.norm() as f64).sum::<f64>().max(1.0);
        assert!((d - reference).norm() <= 1e-5 * scale, "{d} vs {reference}");
    }

    #[test]
    fn dot_records_reduction_traffic() {
        let env = Environment::create(4, None).unwrap();
        let x = SegVector::<Complex32>::new(&env, 16, SplitPolicy::Natural).unwrap();
        scatter(&random_c32(16, 3), &x).unwrap();
        env.ledger().reset();
        dot(&x, &x).unwrap();
        // Three peers ship a scalar to the leader, the leader ships to host.
        assert_eq!(env.ledger().by_path(PathKind::PeerToPeer).count, 3);
        assert_eq!(env.ledger().by_path(PathKind::DeviceToHost).count, 1);
    }

    fn host_gemm(a: &[Complex32], b: &[Complex32], m: usize, k: usize, n: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..k {
                    let x = a[i * k + l];
                    let y = b[l * n + j];
                    acc += Complex64::new(x.re as f64, x.im as f64)
                        * Complex64::new(y.re as f64, y.im as f64);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn run_gemm(devices: usize, m: usize, k: usize, n: usize, seed: u64) -> Vec<Complex32> {
        let env = Environment::create(devices, None).unwrap();
        let a_data = random_c32(m * k, seed);
        let b_data = random_c32(k * n, seed + 1);
        let a = SegVector::<Complex32>::new(&env, m * k, SplitPolicy::Blockwise { block_len: k }).unwrap();
        let b = SegVector::<Complex32>::new(&env, k * n, SplitPolicy::Clone).unwrap();
        let c = SegVector::<Complex32>::new(&env, m * n, SplitPolicy::Blockwise { block_len: n }).unwrap();
        scatter(&a_data, &a).unwrap();
        broadcast(&b_data, &b).unwrap();
        env.barrier_fence().unwrap();
        env.ledger().reset();
        gemm(&a, &b, &c, m, k, n).unwrap().wait().unwrap();
        // Row-block product itself moves nothing between devices.
        assert_eq!(env.ledger().total().bytes, 0);
        let mut out = vec![Complex32::default(); m * n];
        gather(&c, &mut out).unwrap();
        out
    }

    #[test]
    fn identity_times_b_is_b() {
        let env = Environment::create(2, None).unwrap();
        let n = 6;
        let mut eye = vec![Complex32::default(); n * n];
        for i in 0..n {
            eye[i * n + i] = Complex32::new(1.0, 0.0);
        }
        let b_data = random_c32(n * n, 4);
        let a = SegVector::<Complex32>::new(&env, n * n, SplitPolicy::Blockwise { block_len: n }).unwrap();
        let b = SegVector::<Complex32>::new(&env, n * n, SplitPolicy::Clone).unwrap();
        let c = SegVector::<Complex32>::new(&env, n * n, SplitPolicy::Blockwise { block_len: n }).unwrap();
        scatter(&eye, &a).unwrap();
        broadcast(&b_data, &b).unwrap();
        gemm(&a, &b, &c, n, n, n).unwrap().wait().unwrap();
        let mut out = vec![Complex32::default(); n * n];
        gather(&c, &mut out).unwrap();
        assert_eq!(out, b_data);
    }

    #[test]
    fn gemm_matches_host_oracle() {
        let (m, k, n) = (8, 8, 8);
        let out = run_gemm(3, m, k, n, 5);
        let a_data = random_c32(m * k, 5);
        let b_data = random_c32(k * n, 6);
        let reference = host_gemm(&a_data, &b_data, m, k, n);
        let scale: f64 = reference.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
        for (got, want) in out.iter().zip(&reference) {
            let g = Complex64::new(got.re as f64, got.im as f64);
            assert!((g - want).norm() <= 1e-4 * scale, "{g} vs {want}");
        }
    }

    #[test]
    fn gemm_is_device_count_invariant() {
        let (m, k, n) = (12, 8, 10);
        let single = run_gemm(1, m, k, n, 7);
        for devices in [2, 3, 4] {
            let multi = run_gemm(devices, m, k, n, 7);
            let scale: f32 = single.iter().map(|z| z.norm()).fold(0.0, f32::max).max(1.0);
            for (a, b) in single.iter().zip(&multi) {
                assert!((a - b).norm() <= 1e-5 * scale, "G={devices}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gemm_rejects_bad_layouts() {
        let env = Environment::create(2, None).unwrap();
        let a = SegVector::<Complex32>::new(&env, 16, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        let b = SegVector::<Complex32>::new(&env, 16, SplitPolicy::Natural).unwrap();
        let c = SegVector::<Complex32>::new(&env, 16, SplitPolicy::Blockwise { block_len: 4 }).unwrap();
        assert!(gemm(&a, &b, &c, 4, 4, 4).is_err()); // B not cloned
    }
}
