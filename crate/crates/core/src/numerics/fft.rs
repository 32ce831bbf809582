//! Batched 2D FFT over segmented containers.
//!
//! Iterative radix-2 decimation-in-time; sizes are restricted to powers of
//! two. Convention used throughout the crate: the forward transform uses the
//! negative exponent and is unnormalized, the inverse uses the positive
//! exponent and scales by `1/(nx*ny)`, so `inverse(forward(x)) == x`.
//!
//! The scalar 2D kernel ([`fft2d`]) is exposed for host-side use; the device
//! path runs the exact same butterflies per matrix, so host simulation and
//! device execution agree bit for bit. Individual transforms are never split
//! across devices: a segment must hold whole matrices.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::runtime::Fence;
use crate::segvec::SegVector;

/// Transform direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

fn make_twiddles(n: usize, dir: FftDirection) -> Vec<Complex32> {
    let sign = match dir {
        FftDirection::Forward => -1.0,
        FftDirection::Inverse => 1.0,
    };
    (0..n / 2)
        .map(|k| {
            let angle = sign * 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
            Complex32::new(angle.cos() as f32, angle.sin() as f32)
        })
        .collect()
}

type TwiddleCache = Mutex<HashMap<(usize, bool), Arc<Vec<Complex32>>>>;

fn twiddles(n: usize, dir: FftDirection) -> Arc<Vec<Complex32>> {
    static CACHE: OnceLock<TwiddleCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, matches!(dir, FftDirection::Forward));
    let mut cache = cache.lock().unwrap();
    Arc::clone(cache.entry(key).or_insert_with(|| Arc::new(make_twiddles(n, dir))))
}

fn bit_reverse_permute(data: &mut [Complex32]) {
    let n = data.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
}

/// In-place radix-2 transform; `tw` holds `n/2` roots of unity for the
/// chosen direction. No normalization.
fn fft1d_inplace(data: &mut [Complex32], tw: &[Complex32]) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(data);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        let mut base = 0;
        while base < n {
            for k in 0..half {
                let w = tw[k * step];
                let u = data[base + k];
                let v = data[base + k + half] * w;
                data[base + k] = u + v;
                data[base + k + half] = u - v;
            }
            base += len;
        }
        len <<= 1;
    }
}

/// In-place 2D transform of one row-major `ny x nx` matrix.
///
/// The inverse direction applies the `1/(nx*ny)` normalization.
pub fn fft2d(data: &mut [Complex32], nx: usize, ny: usize, dir: FftDirection) {
    debug_assert_eq!(data.len(), nx * ny);
    let row_tw = twiddles(nx, dir);
    let col_tw = twiddles(ny, dir);
    fft2d_with(data, nx, ny, dir, &row_tw, &col_tw, &mut vec![Complex32::default(); ny]);
}

fn fft2d_with(
    data: &mut [Complex32],
    nx: usize,
    ny: usize,
    dir: FftDirection,
    row_tw: &[Complex32],
    col_tw: &[Complex32],
    col_scratch: &mut [Complex32],
) {
    for row in data.chunks_exact_mut(nx) {
        fft1d_inplace(row, row_tw);
    }
    for c in 0..nx {
        for r in 0..ny {
            col_scratch[r] = data[r * nx + c];
        }
        fft1d_inplace(col_scratch, col_tw);
        for r in 0..ny {
            data[r * nx + c] = col_scratch[r];
        }
    }
    if matches!(dir, FftDirection::Inverse) {
        let scale = 1.0 / ((nx * ny) as f32);
        for z in data.iter_mut() {
            *z *= scale;
        }
    }
}

/// Plan for batched 2D transforms of `batch` row-major `ny x nx` matrices
/// spread across a segmented container.
#[derive(Debug, Clone)]
pub struct BatchedFftPlan {
    nx: usize,
    ny: usize,
    batch: usize,
}

impl BatchedFftPlan {
    pub fn new(nx: usize, ny: usize, batch: usize) -> Result<BatchedFftPlan> {
        if !nx.is_power_of_two() || !ny.is_power_of_two() {
            return Err(Error::config(format!(
                "transform size {nx}x{ny} is not a power of two"
            )));
        }
        if batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        Ok(BatchedFftPlan { nx, ny, batch })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn matrix_len(&self) -> usize {
        self.nx * self.ny
    }

    fn check(&self, src: &SegVector<Complex32>, dst: &SegVector<Complex32>) -> Result<()> {
        if src.logical_len() != self.nx * self.ny * self.batch {
            return Err(Error::shape(format!(
                "container of {} elements does not hold {} matrices of {}x{}",
                src.logical_len(),
                self.batch,
                self.ny,
                self.nx
            )));
        }
        if !src.same_segmentation(dst) {
            return Err(Error::shape("fft source and destination segmentation differ"));
        }
        let m = self.matrix_len();
        for d in src.descriptors() {
            if d.halo_lo != 0 || d.halo_hi != 0 || d.len % m != 0 || d.global_offset % m != 0 {
                return Err(Error::shape(format!(
                    "segment on rank {} is not aligned to whole {}x{} matrices; transforms cannot be split across devices",
                    d.rank, self.ny, self.nx
                )));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        src: &SegVector<Complex32>,
        dst: &SegVector<Complex32>,
        dir: FftDirection,
    ) -> Result<Fence> {
        self.check(src, dst)?;
        let (nx, ny) = (self.nx, self.ny);
        let m = self.matrix_len();
        let row_tw = twiddles(nx, dir);
        let col_tw = twiddles(ny, dir);
        let in_place = src.same_storage(dst);
        let fence = Fence::completed();
        for rank in src.participating_ranks() {
            let src_cl = src.clone();
            let dst_cl = dst.clone();
            let row_tw = Arc::clone(&row_tw);
            let col_tw = Arc::clone(&col_tw);
            src.env().submit_raw(
                rank,
                Vec::new(),
                &fence,
                Box::new(move |ctx| {
                    let mut scratch = vec![Complex32::default(); ny];
                    if in_place {
                        let mut d = dst_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        for mat in d.chunks_exact_mut(m) {
                            fft2d_with(mat, nx, ny, dir, &row_tw, &col_tw, &mut scratch);
                        }
                    } else {
                        let s = src_cl.read_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        let mut tmp = s.to_vec();
                        drop(s);
                        for mat in tmp.chunks_exact_mut(m) {
                            fft2d_with(mat, nx, ny, dir, &row_tw, &col_tw, &mut scratch);
                        }
                        let mut d = dst_cl.write_rank(ctx.rank()).map_err(|e| e.to_string())?;
                        d.copy_from_slice(&tmp);
                    }
                    Ok(())
                }),
            )?;
        }
        Ok(fence)
    }

    /// Unnormalized forward transform of every matrix; `src` and `dst` may
    /// share storage for an in-place transform.
    pub fn forward(&self, src: &SegVector<Complex32>, dst: &SegVector<Complex32>) -> Result<Fence> {
        self.run(src, dst, FftDirection::Forward)
    }

    /// Inverse transform scaled by `1/(nx*ny)`.
    pub fn inverse(&self, src: &SegVector<Complex32>, dst: &SegVector<Complex32>) -> Result<Fence> {
        self.run(src, dst, FftDirection::Inverse)
    }
}
