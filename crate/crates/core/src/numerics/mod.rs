//! Segment-aware numerical kernels: batched 2D FFT, element-wise BLAS-like
//! operations, scalar products with inter-device reduction, and a dense
//! matrix product over row-block operands.

mod elementwise;
mod fft;
mod linalg;

pub use elementwise::{add, apply_mask, axpy, copy_to, fill, pointwise_conj_mul, pointwise_mul, scale};
pub use fft::{fft2d, BatchedFftPlan, FftDirection};
pub use linalg::{dot, gemm, norm};

use std::sync::Arc;

use crate::error::Result;
use crate::runtime::{Environment, Fence, KernelCtx, Rank};

/// Enqueue the same kernel on each listed rank under one fence.
pub(crate) fn launch<F>(env: Environment, ranks: Vec<Rank>, f: F) -> Result<Fence>
where
    F: Fn(&mut KernelCtx) -> std::result::Result<(), String> + Send + Sync + 'static,
{
    let f = Arc::new(f);
    let fence = Fence::completed();
    for rank in ranks {
        let f = Arc::clone(&f);
        env.submit_raw(rank, Vec::new(), &fence, Box::new(move |ctx| f(ctx)))?;
    }
    Ok(fence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{gather, scatter};
    use crate::runtime::Environment;
    use crate::segvec::{SegVector, SplitPolicy};
    use num_complex::Complex32;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_c32(len: usize, seed: u64) -> Vec<Complex32> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..len)
            .map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn max_abs_diff(a: &[Complex32], b: &[Complex32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f32::max)
    }

    /// The same program text must produce matching results for any device
    /// count: axpy, batched FFT and dot compared against a single device.
    #[test]
    fn results_scale_up_unchanged_from_one_to_many_devices() {
        let (nx, ny, batch) = (16, 16, 4);
        let len = nx * ny * batch;
        let xs = random_c32(len, 21);
        let ys = random_c32(len, 22);

        let run = |devices: usize| -> (Vec<Complex32>, Vec<Complex32>, num_complex::Complex64) {
            let env = Environment::create(devices, None).unwrap();
            let x = SegVector::<Complex32>::new(&env, len, SplitPolicy::Blockwise { block_len: nx * ny })
                .unwrap();
            let y = SegVector::<Complex32>::new(&env, len, SplitPolicy::Blockwise { block_len: nx * ny })
                .unwrap();
            scatter(&xs, &x).unwrap();
            scatter(&ys, &y).unwrap();
            axpy(Complex32::new(0.5, -0.25), &x, &y).unwrap();
            let plan = BatchedFftPlan::new(nx, ny, batch).unwrap();
            plan.forward(&x, &x).unwrap();
            let d = dot(&x, &y).unwrap();
            let mut xh = vec![Complex32::default(); len];
            let mut yh = vec![Complex32::default(); len];
            gather(&x, &mut xh).unwrap();
            gather(&y, &mut yh).unwrap();
            (xh, yh, d)
        };

        let (x1, y1, d1) = run(1);
        for devices in [2, 3, 4, 6, 8] {
            let (xg, yg, dg) = run(devices);
            let scale = x1.iter().map(|z| z.norm()).fold(0.0f32, f32::max);
            assert!(max_abs_diff(&x1, &xg) <= 1e-5 * scale, "fft differs at G={devices}");
            assert!(max_abs_diff(&y1, &yg) <= 1e-5, "axpy differs at G={devices}");
            assert!((d1 - dg).norm() <= 1e-5 * d1.norm().max(1.0), "dot differs at G={devices}");
        }
    }

    /// Linearity of the transform: fft(a*x + y) = a*fft(x) + fft(y).
    #[test]
    fn fft_is_linear() {
        let (nx, ny) = (32, 32);
        let len = nx * ny;
        let a = Complex32::new(0.7, -0.4);
        let env = Environment::create(2, None).unwrap();
        let plan = BatchedFftPlan::new(nx, ny, 1).unwrap();
        let new_seg = |data: &[Complex32]| {
            let v = SegVector::<Complex32>::new(&env, len, SplitPolicy::Blockwise { block_len: len })
                .unwrap();
            scatter(data, &v).unwrap();
            v
        };
        let xs = random_c32(len, 31);
        let ys = random_c32(len, 32);

        // Left side: transform of a*x + y.
        let lhs = new_seg(&ys);
        let x = new_seg(&xs);
        axpy(a, &x, &lhs).unwrap();
        plan.forward(&lhs, &lhs).unwrap();

        // Right side: a*fft(x) + fft(y).
        let fx = new_seg(&xs);
        plan.forward(&fx, &fx).unwrap();
        let rhs = new_seg(&ys);
        plan.forward(&rhs, &rhs).unwrap();
        axpy(a, &fx, &rhs).unwrap();

        let mut l = vec![Complex32::default(); len];
        let mut r = vec![Complex32::default(); len];
        gather(&lhs, &mut l).unwrap();
        gather(&rhs, &mut r).unwrap();
        let scale = l.iter().map(|z| z.norm()).fold(0.0f32, f32::max);
        assert!(max_abs_diff(&l, &r) <= 1e-4 * scale);
    }

    /// Parseval: ||fft(x)||^2 = (nx*ny) * ||x||^2.
    #[test]
    fn forward_transform_preserves_scaled_energy() {
        let (nx, ny) = (32, 32);
        let len = nx * ny;
        let env = Environment::create(3, None).unwrap();
        let v = SegVector::<Complex32>::new(&env, len, SplitPolicy::Blockwise { block_len: len }).unwrap();
        scatter(&random_c32(len, 33), &v).unwrap();
        let before = dot(&v, &v).unwrap().re;
        let plan = BatchedFftPlan::new(nx, ny, 1).unwrap();
        plan.forward(&v, &v).unwrap();
        let after = dot(&v, &v).unwrap().re;
        let expected = (len as f64) * before;
        assert!(
            (after - expected).abs() <= 1e-4 * expected,
            "energy {after} vs {expected}"
        );
    }
}
