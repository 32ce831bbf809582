//! Iteratively regularized Gauss-Newton outer loop with the conjugate
//! gradient inner solve, frame sequencing with temporal regularization, and
//! the zero-filled baseline used for quality comparisons.

use num_complex::Complex32;

use crate::comm;
use crate::error::{Error, Result};
use crate::numerics::{self, fft2d, FftDirection};
use crate::runtime::Environment;

use super::cg::{cg_solve, CgVector};
use super::context::NlinvContext;
use super::state::Unknowns;
use super::types::{OpCounts, ReconProblem};

/// Diagnostics of one Newton step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: usize,
    pub alpha: f64,
    /// Relative data residual `||F(x_n) - y|| / ||y||` at the step's start.
    pub residual: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub cg_breakdown: bool,
    /// Work performed during this step.
    pub counts: OpCounts,
}

/// Output of one frame reconstruction.
pub struct FrameResult {
    /// Reconstructed image restricted to the field of view, scaled by the
    /// root-sum-of-squares of the final sensitivities.
    pub image: Vec<Complex32>,
    pub steps: Vec<StepInfo>,
    /// Relative data residual after the last Newton step.
    pub final_residual: f64,
    /// Total work over the frame.
    pub total_counts: OpCounts,
    /// Final unknowns, reusable as reference and initialization of the next
    /// frame.
    pub state: Unknowns,
}

impl NlinvContext {
    /// Run the Newton iteration for one frame. `warm_start` provides both
    /// the initialization and the temporal reference `x_ref`; without it the
    /// frame starts from `rho = 1, chat = 0`.
    ///
    /// The regularized normal equations are solved in internally rescaled
    /// variables: the coil block uses `chat/sqrt(N)` (the bookkeeping factor
    /// between the unnormalized transform convention and a unitary one), so
    /// the Tikhonov term weighs image and coil updates comparably; and the
    /// schedule's `alpha_n` is calibrated by `N` to the data-term curvature.
    /// Both rescalings are exact reparameterizations of Tikhonov-regularized
    /// Gauss-Newton; the exposed operators are untouched.
    pub fn reconstruct(&self, warm_start: Option<&Unknowns>) -> Result<FrameResult> {
        let t0 = self.counters().snapshot();
        let len = self.grid().ng_len() as f64;
        let chat_scale = len.sqrt();
        let alpha_scale = len;

        let mut x = match warm_start {
            Some(prev) => prev.duplicate()?,
            None => self.initial_guess()?,
        };
        // The temporal reference is the frame's starting point; only its
        // scaled form enters the normal equations.
        let xref_scaled = x.duplicate()?;
        xref_scaled.scale_chat(1.0 / chat_scale)?;

        let y = self.data();
        let y_norm = self.data_dot(y, y)?.re.max(0.0).sqrt();
        if y_norm == 0.0 {
            return Err(Error::config("measured data is identically zero"));
        }

        let fx = self.alloc_channel()?;
        let dy_scratch = self.alloc_channel()?;
        let mut p_unscaled = self.alloc_unknowns()?;
        let mut steps = Vec::with_capacity(self.reg.newton_steps);
        let mut best_residual = f64::INFINITY;

        for step in 0..self.reg.newton_steps {
            let alpha = self.reg.alpha(step) * alpha_scale;
            let before = self.counters().snapshot();

            let lin = self.forward_linearized(&x, &fx)?;
            let residual = {
                // fx <- y - F(x)
                self.counters().add_elementwise();
                numerics::scale(Complex32::new(-1.0, 0.0), &fx)?;
                numerics::axpy(Complex32::new(1.0, 0.0), y, &fx)?;
                self.data_dot(&fx, &fx)?.re.max(0.0).sqrt() / y_norm
            };
            if residual > 10.0 * best_residual {
                return Err(Error::Numerical(format!(
                    "diverged at Newton step {step}: relative residual {residual:.3e} grew more \
                     than tenfold over the best {best_residual:.3e}"
                )));
            }
            best_residual = best_residual.min(residual);

            // rhs = DF^H(y - F(x_n)) - alpha * (x_n - x_ref), in scaled
            // variables.
            let mut rhs = self.alloc_unknowns()?;
            self.adjoint(&lin, &fx, &mut rhs)?;
            rhs.scale_chat(chat_scale)?;
            let x_scaled = x.duplicate()?;
            x_scaled.scale_chat(1.0 / chat_scale)?;
            rhs.axpy(-alpha, &x_scaled)?;
            rhs.axpy(alpha, &xref_scaled)?;

            let (dx, cg_report) = cg_solve(
                |p, out| {
                    p_unscaled.copy_from(p)?;
                    p_unscaled.scale_chat(chat_scale)?;
                    self.derivative(&lin, &p_unscaled, &dy_scratch)?;
                    self.adjoint(&lin, &dy_scratch, out)?;
                    out.scale_chat(chat_scale)?;
                    out.axpy(alpha, p)?;
                    Ok(())
                },
                &rhs,
                &self.cg,
            )?;
            dx.scale_chat(chat_scale)?;
            x.axpy(1.0, &dx)?;

            steps.push(StepInfo {
                step,
                alpha,
                residual,
                cg_iterations: cg_report.iterations,
                cg_converged: cg_report.converged,
                cg_breakdown: cg_report.breakdown,
                counts: self.counters().snapshot() - before,
            });
        }

        // Residual after the final update.
        let lin = self.forward_linearized(&x, &fx)?;
        self.counters().add_elementwise();
        numerics::scale(Complex32::new(-1.0, 0.0), &fx)?;
        numerics::axpy(Complex32::new(1.0, 0.0), y, &fx)?;
        let final_residual = self.data_dot(&fx, &fx)?.re.max(0.0).sqrt() / y_norm;

        let image = self.render_image(&x, &lin.coils)?;
        self.env().barrier_fence()?;

        Ok(FrameResult {
            image,
            steps,
            final_residual,
            total_counts: self.counters().snapshot() - t0,
            state: x,
        })
    }

    /// `rho` restricted to the field of view, scaled per pixel by the
    /// root-sum-of-squares of the sensitivities so the output does not
    /// depend on the arbitrary image/coil scale split.
    fn render_image(&self, x: &Unknowns, coils: &crate::segvec::SegVector<Complex32>) -> Result<Vec<Complex32>> {
        let len = self.grid().ng_len();
        let mut rho_host = vec![Complex32::default(); len];
        comm::gather(x.rho(), &mut rho_host)?;
        let mut coils_host = vec![Complex32::default(); self.channels() * len];
        comm::gather(coils, &mut coils_host)?;
        let mut full = vec![Complex32::default(); len];
        for i in 0..len {
            let rss: f32 = coils_host
                .chunks_exact(len)
                .map(|c| c[i].norm_sqr())
                .sum::<f32>()
                .sqrt();
            full[i] = rho_host[i] * rss;
        }
        Ok(self.grid().crop_fov(&full))
    }
}

/// Reconstruct a single frame from a cold start.
pub fn reconstruct_frame(env: &Environment, problem: &ReconProblem) -> Result<FrameResult> {
    NlinvContext::new(env, problem)?.reconstruct(None)
}

/// Reconstruct a frame series sequentially; each frame is initialized from
/// and temporally regularized against the previous result.
pub fn reconstruct_series(env: &Environment, frames: &[ReconProblem]) -> Result<Vec<FrameResult>> {
    let mut results: Vec<FrameResult> = Vec::with_capacity(frames.len());
    for (t, problem) in frames.iter().enumerate() {
        if t > 0 {
            let first = &frames[0];
            if problem.grid != first.grid || problem.channels != first.channels {
                return Err(Error::config(format!(
                    "frame {t} changes grid or channel count mid-series"
                )));
            }
        }
        let ctx = NlinvContext::new(env, problem)?;
        let warm = results.last().map(|r| &r.state);
        results.push(ctx.reconstruct(warm)?);
    }
    Ok(results)
}

/// Zero-filled baseline: inverse transform of the measured data, channels
/// combined by root-sum-of-squares, restricted to the field of view.
pub fn zero_filled_rss(problem: &ReconProblem) -> Vec<f32> {
    let ng = problem.grid.ng();
    let len = problem.grid.ng_len();
    let mut rss2 = vec![0.0f32; len];
    for channel in problem.y.chunks_exact(len) {
        let mut img = channel.to_vec();
        fft2d(&mut img, ng, ng, FftDirection::Inverse);
        for (acc, z) in rss2.iter_mut().zip(&img) {
            *acc += z.norm_sqr();
        }
    }
    let full: Vec<Complex32> = rss2
        .iter()
        .map(|&v| Complex32::new(v.sqrt(), 0.0))
        .collect();
    problem
        .grid
        .crop_fov(&full)
        .into_iter()
        .map(|z| z.re)
        .collect()
}
