//! Device realization of one reconstruction problem: masks and weight grids
//! replicated on every device, measured data distributed by channel, and the
//! operators `F`, `DF`, `DF^H` with instrumented work counters.
//!
//! Transform conventions: the forward DFT is unnormalized and the inverse
//! carries `1/N` (`N = ng*ng`). `W` maps a sensitivity to its weighted
//! Fourier representation, `chat = w .* FFT(c)`; its inverse and adjoint
//! reuse the same machinery. The adjoint `DF^H` is the exact adjoint of `DF`
//! under the plain Euclidean inner product, which places one factor `N` on
//! the backprojected data term (`u = N * IFFT(mask .* dy) .* fov`, the
//! unnormalized adjoint transform).

use std::sync::{Arc, Mutex};

use num_complex::Complex32;

use crate::comm::{self, ReduceOp, Window2d};
use crate::error::{Error, Result};
use crate::numerics::{self, launch, BatchedFftPlan};
use crate::runtime::Environment;
use crate::segvec::{SegVector, SplitPolicy};

use super::state::Unknowns;
use super::types::{Counters, ReconGrid, ReconProblem};

/// Decoded state at a linearization point `x_n`: the replicated image and
/// the image-domain sensitivities `c_j = W^{-1} chat_j`, computed once per
/// Newton step and reused by every `DF`/`DF^H` application.
pub struct Linearization {
    pub(crate) rho: SegVector<Complex32>,
    pub(crate) coils: SegVector<Complex32>,
}

struct Scratch {
    /// Per-channel workspace of `DF^H`.
    u: SegVector<Complex32>,
    /// Per-device image partials, the all-reduce input (double buffer).
    parts: SegVector<Complex32>,
}

pub struct NlinvContext {
    env: Environment,
    grid: ReconGrid,
    channels: usize,
    counters: Arc<Counters>,
    plan_channels: BatchedFftPlan,
    plan_single: BatchedFftPlan,
    mask: SegVector<f32>,
    fov: SegVector<f32>,
    weight: SegVector<f32>,
    weight_inv: SegVector<f32>,
    y: SegVector<Complex32>,
    window: Window2d,
    scratch: Mutex<Scratch>,
    pub(crate) reg: super::types::RegSchedule,
    pub(crate) cg: super::types::CgParams,
}

impl NlinvContext {
    pub fn new(env: &Environment, problem: &ReconProblem) -> Result<NlinvContext> {
        problem.validate()?;
        let grid = problem.grid;
        let ng = grid.ng();
        let len = grid.ng_len();
        let channels = problem.channels;
        let counters = Counters::new();

        let upload_real = |data: &[f32]| -> Result<SegVector<f32>> {
            let v = SegVector::new(env, len, SplitPolicy::Clone)?;
            comm::broadcast(data, &v)?;
            Ok(v)
        };
        let mask = upload_real(problem.mask.data())?;
        let fov = upload_real(&grid.fov_mask())?;
        let weight = upload_real(&problem.weights.weight_grid(ng))?;
        let weight_inv = upload_real(&problem.weights.inverse_weight_grid(ng))?;

        // Measured data, zeroed outside the sampling support on ingestion.
        let mut y_host = problem.y.clone();
        for (j, chunk) in y_host.chunks_exact_mut(len).enumerate() {
            let _ = j;
            for (v, &m) in chunk.iter_mut().zip(problem.mask.data()) {
                *v *= m;
            }
        }
        let y = SegVector::new(env, channels * len, SplitPolicy::Blockwise { block_len: len })?;
        comm::scatter(&y_host, &y)?;

        let n = grid.n();
        let window = Window2d {
            mat_rows: ng,
            mat_cols: ng,
            row_off: grid.fov_offset(),
            col_off: grid.fov_offset(),
            win_rows: n,
            win_cols: n,
        };
        let scratch = Scratch {
            u: SegVector::new(env, channels * len, SplitPolicy::Blockwise { block_len: len })?,
            parts: SegVector::new(env, len, SplitPolicy::Clone)?,
        };
        env.barrier_fence()?;

        Ok(NlinvContext {
            env: env.clone(),
            grid,
            channels,
            counters,
            plan_channels: BatchedFftPlan::new(ng, ng, channels)?,
            plan_single: BatchedFftPlan::new(ng, ng, 1)?,
            mask,
            fov,
            weight,
            weight_inv,
            y,
            window,
            scratch: Mutex::new(scratch),
            reg: problem.reg,
            cg: problem.cg,
        })
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn grid(&self) -> ReconGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub(crate) fn data(&self) -> &SegVector<Complex32> {
        &self.y
    }

    /// A channel container matching the measured data layout.
    pub fn alloc_channel(&self) -> Result<SegVector<Complex32>> {
        SegVector::new(
            &self.env,
            self.channels * self.grid.ng_len(),
            SplitPolicy::Blockwise { block_len: self.grid.ng_len() },
        )
    }

    /// A clone-replicated image container on the doubled grid.
    pub fn alloc_image(&self) -> Result<SegVector<Complex32>> {
        SegVector::new(&self.env, self.grid.ng_len(), SplitPolicy::Clone)
    }

    pub fn alloc_unknowns(&self) -> Result<Unknowns> {
        Unknowns::alloc(&self.env, self.grid.ng_len(), self.channels, Arc::clone(&self.counters))
    }

    /// Initial guess of the first frame: `rho = 1`, `chat = 0`.
    pub fn initial_guess(&self) -> Result<Unknowns> {
        let x = self.alloc_unknowns()?;
        self.counters.add_elementwise();
        numerics::fill(Complex32::new(1.0, 0.0), &x.rho)?;
        Ok(x)
    }

    // ----- counter-tracked building blocks -------------------------------

    fn fft_forward(&self, plan: &BatchedFftPlan, v: &SegVector<Complex32>) -> Result<()> {
        self.counters.add_fft();
        plan.forward(v, v)?;
        Ok(())
    }

    fn fft_inverse(&self, plan: &BatchedFftPlan, v: &SegVector<Complex32>) -> Result<()> {
        self.counters.add_fft();
        plan.inverse(v, v)?;
        Ok(())
    }

    fn copy_channels(&self, src: &SegVector<Complex32>, dst: &SegVector<Complex32>) -> Result<()> {
        self.counters.add_elementwise();
        numerics::copy_to(src, dst)?;
        Ok(())
    }

    /// `data_j <- scale * field .* data_j`, the field replicated per device.
    fn mul_field(&self, field: &SegVector<f32>, data: &SegVector<Complex32>, scale: f32) -> Result<()> {
        self.counters.add_elementwise();
        let m = self.grid.ng_len();
        let (field, data) = (field.clone(), data.clone());
        launch(self.env.clone(), data.participating_ranks(), move |ctx| {
            let f = field.local(ctx);
            let mut d = data.local_mut(ctx);
            for chunk in d.chunks_exact_mut(m) {
                for (v, &w) in chunk.iter_mut().zip(f.iter()) {
                    *v *= w * scale;
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    /// `data_j <- fov .* (rho .* data_j)`.
    fn mul_image_fov(&self, rho: &SegVector<Complex32>, data: &SegVector<Complex32>) -> Result<()> {
        self.counters.add_elementwise();
        let m = self.grid.ng_len();
        let (rho, fov, data) = (rho.clone(), self.fov.clone(), data.clone());
        launch(self.env.clone(), data.participating_ranks(), move |ctx| {
            let r = rho.local(ctx);
            let f = fov.local(ctx);
            let mut d = data.local_mut(ctx);
            for chunk in d.chunks_exact_mut(m) {
                for ((v, &ri), &fi) in chunk.iter_mut().zip(r.iter()).zip(f.iter()) {
                    *v = fi * (ri * *v);
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    /// Linearized image term: `data_j <- fov .* (drho .* c_j + rho .* data_j)`
    /// where `data` holds `dc_j` on entry.
    fn mul_dz(
        &self,
        drho: &SegVector<Complex32>,
        lin: &Linearization,
        data: &SegVector<Complex32>,
    ) -> Result<()> {
        self.counters.add_elementwise();
        let m = self.grid.ng_len();
        let (drho, rho, coils) = (drho.clone(), lin.rho.clone(), lin.coils.clone());
        let (fov, data) = (self.fov.clone(), data.clone());
        launch(self.env.clone(), data.participating_ranks(), move |ctx| {
            let dr = drho.local(ctx);
            let r = rho.local(ctx);
            let f = fov.local(ctx);
            let c = coils.local(ctx);
            let mut d = data.local_mut(ctx);
            for (chunk, cchunk) in d.chunks_exact_mut(m).zip(c.chunks_exact(m)) {
                for i in 0..m {
                    chunk[i] = f[i] * (dr[i] * cchunk[i] + r[i] * chunk[i]);
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    /// `data_j <- conj(rho) .* data_j`.
    fn mul_conj_image(&self, rho: &SegVector<Complex32>, data: &SegVector<Complex32>) -> Result<()> {
        self.counters.add_elementwise();
        let m = self.grid.ng_len();
        let (rho, data) = (rho.clone(), data.clone());
        launch(self.env.clone(), data.participating_ranks(), move |ctx| {
            let r = rho.local(ctx);
            let mut d = data.local_mut(ctx);
            for chunk in d.chunks_exact_mut(m) {
                for (v, &ri) in chunk.iter_mut().zip(r.iter()) {
                    *v = ri.conj() * *v;
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    /// Channel summation: every device folds its local channels into its
    /// replica of `parts`, `parts_g = sum_{j on g} conj(c_j) .* u_j`.
    /// Devices without channels contribute a zero partial.
    fn channel_partials(
        &self,
        coils: &SegVector<Complex32>,
        u: &SegVector<Complex32>,
        parts: &SegVector<Complex32>,
    ) -> Result<()> {
        self.counters.add_channel_sum();
        let m = self.grid.ng_len();
        let (coils, u, parts) = (coils.clone(), u.clone(), parts.clone());
        launch(self.env.clone(), parts.participating_ranks(), move |ctx| {
            let mut p = parts.local_mut(ctx);
            p.fill(Complex32::new(0.0, 0.0));
            if u.local_range(ctx.rank()).is_ok() {
                let ul = u.local(ctx);
                let cl = coils.local(ctx);
                for (uchunk, cchunk) in ul.chunks_exact(m).zip(cl.chunks_exact(m)) {
                    for i in 0..m {
                        p[i] += cchunk[i].conj() * uchunk[i];
                    }
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    // ----- weighted Fourier representation of the sensitivities ----------

    /// `W`: `chat_j = w .* FFT(c_j)`.
    pub fn apply_weight(&self, c: &SegVector<Complex32>, out: &SegVector<Complex32>) -> Result<()> {
        self.copy_channels(c, out)?;
        self.fft_forward(&self.plan_channels, out)?;
        self.mul_field(&self.weight, out, 1.0)?;
        Ok(())
    }

    /// `W^{-1}`: `c_j = IFFT(w^{-1} .* chat_j)`.
    pub fn apply_weight_inv(&self, chat: &SegVector<Complex32>, out: &SegVector<Complex32>) -> Result<()> {
        self.copy_channels(chat, out)?;
        self.mul_field(&self.weight_inv, out, 1.0)?;
        self.fft_inverse(&self.plan_channels, out)?;
        Ok(())
    }

    /// `W^{-H}`: `(1/N) * w^{-1} .* FFT(c_j)`, the adjoint of `W^{-1}`.
    pub fn apply_weight_inv_adjoint(
        &self,
        c: &SegVector<Complex32>,
        out: &SegVector<Complex32>,
    ) -> Result<()> {
        let n_inv = 1.0 / (self.grid.ng_len() as f32);
        self.copy_channels(c, out)?;
        self.fft_forward(&self.plan_channels, out)?;
        self.mul_field(&self.weight_inv, out, n_inv)?;
        Ok(())
    }

    // ----- the nonlinear operator and its derivative ----------------------

    /// `F(x)`: per channel `out_j = mask .* FFT(fov .* (rho .* W^{-1} chat_j))`.
    /// Exactly two batched transforms per application.
    pub fn forward(&self, x: &Unknowns, out: &SegVector<Complex32>) -> Result<()> {
        self.forward_inner(x, out, None)
    }

    /// `F(x)` that also captures the decoded sensitivities as the
    /// linearization point for subsequent `DF`/`DF^H` applications.
    pub fn forward_linearized(&self, x: &Unknowns, out: &SegVector<Complex32>) -> Result<Linearization> {
        let coils = self.alloc_channel()?;
        self.forward_inner(x, out, Some(&coils))?;
        Ok(Linearization { rho: x.rho.clone(), coils })
    }

    fn forward_inner(
        &self,
        x: &Unknowns,
        out: &SegVector<Complex32>,
        capture_coils: Option<&SegVector<Complex32>>,
    ) -> Result<()> {
        self.apply_weight_inv(&x.chat, out)?;
        if let Some(coils) = capture_coils {
            self.copy_channels(out, coils)?;
        }
        self.mul_image_fov(&x.rho, out)?;
        self.fft_forward(&self.plan_channels, out)?;
        self.mul_field(&self.mask, out, 1.0)?;
        Ok(())
    }

    /// `DF(x_n) dx`: per channel
    /// `dy_j = mask .* FFT(fov .* (drho .* c_j + rho .* W^{-1} dchat_j))`.
    pub fn derivative(&self, lin: &Linearization, dx: &Unknowns, out: &SegVector<Complex32>) -> Result<()> {
        self.apply_weight_inv(&dx.chat, out)?;
        self.mul_dz(&dx.rho, lin, out)?;
        self.fft_forward(&self.plan_channels, out)?;
        self.mul_field(&self.mask, out, 1.0)?;
        Ok(())
    }

    /// `DF(x_n)^H dy`, the exact adjoint of [`Self::derivative`].
    ///
    /// Per channel `u_j = N * IFFT(mask .* dy_j) .* fov`; the image partials
    /// `sum_{j on g} conj(c_j) .* u_j` are combined with a block-wise
    /// all-reduce restricted to the field-of-view window (values outside it
    /// are identically zero), and `dchat_j = W^{-H}(conj(rho) .* u_j)`.
    pub fn adjoint(&self, lin: &Linearization, dy: &SegVector<Complex32>, out: &mut Unknowns) -> Result<()> {
        let n = self.grid.ng_len() as f32;
        let scratch = self.scratch.lock().unwrap();
        self.copy_channels(dy, &scratch.u)?;
        self.mul_field(&self.mask, &scratch.u, 1.0)?;
        self.fft_inverse(&self.plan_channels, &scratch.u)?;
        self.mul_field(&self.fov, &scratch.u, n)?;

        self.channel_partials(&lin.coils, &scratch.u, &scratch.parts)?;
        self.counters.add_elementwise();
        numerics::fill(Complex32::new(0.0, 0.0), &out.rho)?;
        self.counters.add_allreduce();
        comm::all_reduce_blockwise(&scratch.parts, &out.rho, ReduceOp::Sum, Some(self.window))?;

        self.mul_conj_image(&lin.rho, &scratch.u)?;
        self.fft_forward(&self.plan_channels, &scratch.u)?;
        self.mul_field(&self.weight_inv, &scratch.u, 1.0 / n)?;
        self.copy_channels(&scratch.u, &out.chat)?;
        Ok(())
    }

    /// Normal operator of the regularized Gauss-Newton step:
    /// `out = DF^H(DF(dx)) + alpha * dx`, with `dy_scratch` holding the
    /// intermediate data-space vector.
    pub fn normal_apply(
        &self,
        lin: &Linearization,
        alpha: f64,
        dx: &Unknowns,
        dy_scratch: &SegVector<Complex32>,
        out: &mut Unknowns,
    ) -> Result<()> {
        self.derivative(lin, dx, dy_scratch)?;
        self.adjoint(lin, dy_scratch, out)?;
        use super::cg::CgVector;
        out.axpy(alpha, dx)?;
        Ok(())
    }

    /// Point-spread-function convolution `z <- IFFT(mask .* FFT(z))` on a
    /// replicated image, exactly two transforms.
    pub fn psf_convolve(&self, z: &SegVector<Complex32>) -> Result<()> {
        if !matches!(z.policy(), SplitPolicy::Clone) {
            return Err(Error::usage("psf convolution expects a replicated image"));
        }
        self.fft_forward(&self.plan_single, z)?;
        self.counters.add_elementwise();
        numerics::apply_mask(&self.mask, z)?;
        self.fft_inverse(&self.plan_single, z)?;
        Ok(())
    }

    /// Measured-data scalar product helper, counter-tracked.
    pub(crate) fn data_dot(
        &self,
        a: &SegVector<Complex32>,
        b: &SegVector<Complex32>,
    ) -> Result<num_complex::Complex64> {
        self.counters.add_dot();
        numerics::dot(a, b)
    }
}
