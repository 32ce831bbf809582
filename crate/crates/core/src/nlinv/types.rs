//! Problem geometry, weights, schedules and operator counters.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use num_complex::Complex32;

use crate::error::{Error, Result};

/// Reconstruction geometry: a square base image of `n` pixels per side,
/// reconstructed on a doubled `ng = 2n` grid so the point-spread-function
/// convolution is non-periodic over the field of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconGrid {
    n: usize,
    ng: usize,
}

impl ReconGrid {
    pub fn new(n: usize) -> Result<ReconGrid> {
        if !n.is_power_of_two() || n < 4 {
            return Err(Error::config(format!(
                "base grid size {n} must be a power of two of at least 4"
            )));
        }
        Ok(ReconGrid { n, ng: 2 * n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Doubled reconstruction grid size.
    pub fn ng(&self) -> usize {
        self.ng
    }

    pub fn ng_len(&self) -> usize {
        self.ng * self.ng
    }

    /// First row/column of the centered `n x n` field of view on the
    /// doubled grid.
    pub fn fov_offset(&self) -> usize {
        (self.ng - self.n) / 2
    }

    /// Field-of-view mask on the doubled grid: 1 inside the centered
    /// `n x n` region, 0 outside.
    pub fn fov_mask(&self) -> Vec<f32> {
        let (n, ng, off) = (self.n, self.ng, self.fov_offset());
        let mut mask = vec![0.0f32; ng * ng];
        for r in off..off + n {
            for c in off..off + n {
                mask[r * ng + c] = 1.0;
            }
        }
        mask
    }

    /// Crop the centered `n x n` field of view out of a doubled-grid image.
    pub fn crop_fov(&self, full: &[Complex32]) -> Vec<Complex32> {
        let (n, ng, off) = (self.n, self.ng, self.fov_offset());
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            let row = (off + r) * ng + off;
            out.extend_from_slice(&full[row..row + n]);
        }
        out
    }

    /// Embed an `n x n` image into the center of a zeroed doubled grid.
    pub fn embed_fov(&self, image: &[Complex32]) -> Vec<Complex32> {
        let (n, ng, off) = (self.n, self.ng, self.fov_offset());
        assert_eq!(image.len(), n * n);
        let mut out = vec![Complex32::default(); ng * ng];
        for r in 0..n {
            let row = (off + r) * ng + off;
            out[row..row + n].copy_from_slice(&image[r * n..(r + 1) * n]);
        }
        out
    }
}

/// Binary k-space sampling pattern on the doubled grid.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    ng: usize,
    data: Vec<f32>,
}

impl SamplingMask {
    pub fn new(ng: usize, data: Vec<f32>) -> Result<SamplingMask> {
        if data.len() != ng * ng {
            return Err(Error::shape(format!(
                "mask of {} entries on a {ng}x{ng} grid",
                data.len()
            )));
        }
        if !data.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::config("sampling mask entries must be 0 or 1"));
        }
        if !data.contains(&1.0) {
            return Err(Error::config("sampling mask selects no positions"));
        }
        Ok(SamplingMask { ng, data })
    }

    pub fn full(ng: usize) -> SamplingMask {
        SamplingMask { ng, data: vec![1.0; ng * ng] }
    }

    pub fn ng(&self) -> usize {
        self.ng
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / (self.data.len() as f64)
    }
}

/// Parameters of the smoothness weight `w(k) = (1 + a*|k|^2)^(b/2)` applied
/// to the coil sensitivities in their Fourier representation.
#[derive(Debug, Clone, Copy)]
pub struct WeightParams {
    pub a: f64,
    pub b: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams { a: 220.0, b: 32.0 }
    }
}

impl WeightParams {
    /// The weight grid in unshifted DFT layout (`k` normalized to
    /// `[-1/2, 1/2)` per axis, DC at index 0): `w(0) = 1`, `w >= 1`.
    pub fn weight_grid(&self, ng: usize) -> Vec<f32> {
        let freq = |i: usize| -> f64 {
            if i < ng / 2 {
                i as f64 / ng as f64
            } else {
                (i as f64 - ng as f64) / ng as f64
            }
        };
        let mut w = Vec::with_capacity(ng * ng);
        for r in 0..ng {
            for c in 0..ng {
                let k2 = freq(r).powi(2) + freq(c).powi(2);
                w.push((1.0 + self.a * k2).powf(self.b / 2.0) as f32);
            }
        }
        w
    }

    /// Reciprocal weight grid, used by `W^{-1}` and `W^{-H}`.
    pub fn inverse_weight_grid(&self, ng: usize) -> Vec<f32> {
        self.weight_grid(ng).into_iter().map(|w| 1.0 / w).collect()
    }
}

/// Geometric regularization schedule `alpha_n = alpha0 * q^n`.
#[derive(Debug, Clone, Copy)]
pub struct RegSchedule {
    pub alpha0: f64,
    pub q: f64,
    pub newton_steps: usize,
}

impl Default for RegSchedule {
    fn default() -> Self {
        RegSchedule { alpha0: 1.0, q: 1.0 / 3.0, newton_steps: 6 }
    }
}

impl RegSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0 <= 0.0 || !(0.0..1.0).contains(&self.q) || self.q <= 0.0 {
            return Err(Error::config(format!(
                "regularization schedule needs alpha0 > 0 and q in (0,1); got alpha0={} q={}",
                self.alpha0, self.q
            )));
        }
        if self.newton_steps == 0 {
            return Err(Error::config("at least one Newton step is required"));
        }
        Ok(())
    }

    pub fn alpha(&self, step: usize) -> f64 {
        self.alpha0 * self.q.powi(step as i32)
    }
}

/// Inner conjugate-gradient solve limits.
#[derive(Debug, Clone, Copy)]
pub struct CgParams {
    pub max_iters: usize,
    /// Relative residual threshold.
    pub tolerance: f64,
}

impl Default for CgParams {
    fn default() -> Self {
        CgParams { max_iters: 30, tolerance: 1e-2 }
    }
}

impl CgParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("cg needs at least one iteration"));
        }
        Ok(())
    }
}

/// Host-side description of one reconstruction frame.
#[derive(Debug, Clone)]
pub struct ReconProblem {
    pub grid: ReconGrid,
    /// Receive channel count `J`.
    pub channels: usize,
    /// Measured data: `J` channel-major `ng x ng` matrices, nonzero only on
    /// sampled positions.
    pub y: Vec<Complex32>,
    pub mask: SamplingMask,
    pub weights: WeightParams,
    pub reg: RegSchedule,
    pub cg: CgParams,
}

impl ReconProblem {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("at least one receive channel is required"));
        }
        if self.y.len() != self.channels * self.grid.ng_len() {
            return Err(Error::shape(format!(
                "data of {} samples does not hold {} channels on a {}x{} grid",
                self.y.len(),
                self.channels,
                self.grid.ng(),
                self.grid.ng()
            )));
        }
        if self.mask.ng() != self.grid.ng() {
            return Err(Error::shape(format!(
                "mask on a {} grid does not match reconstruction grid {}",
                self.mask.ng(),
                self.grid.ng()
            )));
        }
        self.reg.validate()?;
        self.cg.validate()?;
        Ok(())
    }
}

/// Per-operator work counts: batched FFT invocations, element-wise kernel
/// launches, channel summations, scalar products and all-reduce steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub fft: u32,
    pub elementwise: u32,
    pub channel_sum: u32,
    pub dot: u32,
    pub allreduce: u32,
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            fft: self.fft - rhs.fft,
            elementwise: self.elementwise - rhs.elementwise,
            channel_sum: self.channel_sum - rhs.channel_sum,
            dot: self.dot - rhs.dot,
            allreduce: self.allreduce - rhs.allreduce,
        }
    }
}

/// Shared, resettable counter cell; incremented at kernel submission time so
/// counts are deterministic.
#[derive(Debug, Default)]
pub struct Counters {
    fft: AtomicU32,
    elementwise: AtomicU32,
    channel_sum: AtomicU32,
    dot: AtomicU32,
    allreduce: AtomicU32,
}

impl Counters {
    pub fn new() -> Arc<Counters> {
        Arc::new(Counters::default())
    }

    pub(crate) fn add_fft(&self) {
        self.fft.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_elementwise(&self) {
        self.elementwise.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_channel_sum(&self) {
        self.channel_sum.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_dot(&self) {
        self.dot.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_allreduce(&self) {
        self.allreduce.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            fft: self.fft.load(Ordering::Relaxed),
            elementwise: self.elementwise.load(Ordering::Relaxed),
            channel_sum: self.channel_sum.load(Ordering::Relaxed),
            dot: self.dot.load(Ordering::Relaxed),
            allreduce: self.allreduce.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.fft.store(0, Ordering::Relaxed);
        self.elementwise.store(0, Ordering::Relaxed);
        self.channel_sum.store(0, Ordering::Relaxed);
        self.dot.store(0, Ordering::Relaxed);
        self.allreduce.store(0, Ordering::Relaxed);
    }
}
