//! `recon`: reconstruct a frame series from the data files written by
//! `phantom`, with optional channel compression, emitting images and
//! machine-readable reports.

use anyhow::{bail, Context, Result};
use num_complex::Complex32;
use segdev::nlinv::{
    compress_channels, NlinvContext, ReconGrid, ReconProblem, SamplingMask,
};
use segdev::phantom::relative_error;

use crate::config::RunConfig;
use crate::format::{read_array, write_array, Array};

pub fn run(config: &RunConfig) -> Result<()> {
    let env = config.environment()?;
    let grid = ReconGrid::new(config.n)?;
    let ng = grid.ng();
    let dir = &config.out;

    let mut residuals_csv = String::from("frame,step,alpha,relative_residual,cg_iterations,cg_converged\n");
    let mut counters_csv = String::from("frame,scope,fft,elementwise,channel_sum,dot,allreduce\n");
    let mut metrics_csv = String::from(
        "frame,devices,channels_used,nlinv_error,zero_filled_error,final_residual,pca_energy_fraction,image_l2,image_sum_re,image_sum_im\n",
    );

    let mut warm: Option<segdev::nlinv::Unknowns> = None;
    let mut conformance_ok = true;

    for frame in 0..config.frames {
        let y_file = dir.join(format!("y_f{frame:03}.segv"));
        let y_arr = read_array(&y_file)?;
        if y_arr.dims != vec![config.channels, ng, ng] {
            bail!(
                "{}: dims {:?} do not match channels={} grid {ng}x{ng}",
                y_file.display(),
                y_arr.dims,
                config.channels
            );
        }
        let mask_arr = read_array(&dir.join(format!("mask_f{frame:03}.segv")))?;
        let mask = SamplingMask::new(ng, mask_arr.expect_real()?.to_vec())?;
        let mut y = y_arr.expect_complex()?.to_vec();

        // Optional principal-component channel compression.
        let mut channels_used = config.channels;
        let mut energy_fraction = 1.0;
        let target = config.target_channels.unwrap_or(config.channels);
        if target < config.channels {
            let (compressed, info) = compress_channels(&y, config.channels, target)?;
            y = compressed;
            channels_used = target;
            energy_fraction = info.energy_fraction;
        }

        let problem = ReconProblem {
            grid,
            channels: channels_used,
            y,
            mask,
            weights: config.weights,
            reg: config.reg,
            cg: config.cg,
        };
        let ctx = NlinvContext::new(&env, &problem)?;

        // Per-operator conformance counts, measured on this problem before
        // the reconstruction itself.
        if frame == 0 {
            conformance_ok &= write_operator_counts(&ctx, &mut counters_csv)?;
        }

        let result = ctx.reconstruct(warm.as_ref())?;

        for s in &result.steps {
            residuals_csv.push_str(&format!(
                "{frame},{},{:.6e},{:.8e},{},{}\n",
                s.step, s.alpha, s.residual, s.cg_iterations, s.cg_converged
            ));
            counters_csv.push_str(&format!(
                "{frame},step{},{},{},{},{},{}\n",
                s.step,
                s.counts.fft,
                s.counts.elementwise,
                s.counts.channel_sum,
                s.counts.dot,
                s.counts.allreduce
            ));
        }
        counters_csv.push_str(&format!(
            "{frame},total,{},{},{},{},{}\n",
            result.total_counts.fft,
            result.total_counts.elementwise,
            result.total_counts.channel_sum,
            result.total_counts.dot,
            result.total_counts.allreduce
        ));

        write_array(
            &dir.join(format!("image_f{frame:03}.segv")),
            &Array::complex(vec![config.n, config.n], result.image.clone()),
        )?;

        // Quality metrics against the ground truth when it is available.
        let truth_file = dir.join(format!("truth_f{frame:03}.segv"));
        let (nlinv_err, zf_err) = if truth_file.exists() {
            let truth = read_array(&truth_file)?.expect_real()?.to_vec();
            let zf = segdev::nlinv::zero_filled_rss(&problem);
            let zf_img: Vec<Complex32> = zf.iter().map(|&v| Complex32::new(v, 0.0)).collect();
            (relative_error(&result.image, &truth), relative_error(&zf_img, &truth))
        } else {
            (f64::NAN, f64::NAN)
        };

        // Digest for cross-run (device-count) comparisons.
        let l2: f64 = result.image.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt();
        let sum_re: f64 = result.image.iter().map(|z| z.re as f64).sum();
        let sum_im: f64 = result.image.iter().map(|z| z.im as f64).sum();
        metrics_csv.push_str(&format!(
            "{frame},{},{},{:.8e},{:.8e},{:.8e},{:.8},{:.8e},{:.8e},{:.8e}\n",
            config.devices,
            channels_used,
            nlinv_err,
            zf_err,
            result.final_residual,
            energy_fraction,
            l2,
            sum_re,
            sum_im
        ));

        println!(
            "recon frame {frame}: residual {:.3e} -> {:.3e} over {} steps, error vs truth {}",
            result.steps.first().map(|s| s.residual).unwrap_or(f64::NAN),
            result.final_residual,
            result.steps.len(),
            if nlinv_err.is_nan() { "n/a".to_string() } else { format!("{nlinv_err:.4}") },
        );
        warm = Some(result.state);
    }

    std::fs::write(dir.join("residuals.csv"), residuals_csv).context("writing residuals.csv")?;
    std::fs::write(dir.join("counters.csv"), counters_csv).context("writing counters.csv")?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv).context("writing metrics.csv")?;

    if !conformance_ok {
        bail!("operator counter conformance failed (see counters.csv)");
    }
    Ok(())
}

/// Measure one application of each operator and append the rows; returns
/// whether the counts match the expected breakdown.
fn write_operator_counts(ctx: &NlinvContext, csv: &mut String) -> Result<bool> {
    let x = ctx.initial_guess()?;
    let fx = ctx.alloc_channel()?;

    ctx.counters().reset();
    ctx.forward(&x, &fx)?;
    let f = ctx.counters().snapshot();

    let lin = ctx.forward_linearized(&x, &fx)?;
    let dx = ctx.alloc_unknowns()?;
    let dy = ctx.alloc_channel()?;
    ctx.counters().reset();
    ctx.derivative(&lin, &dx, &dy)?;
    let df = ctx.counters().snapshot();

    let mut adj = ctx.alloc_unknowns()?;
    ctx.counters().reset();
    ctx.adjoint(&lin, &dy, &mut adj)?;
    let dfh = ctx.counters().snapshot();
    ctx.counters().reset();

    for (scope, c) in [("op_F", f), ("op_DF", df), ("op_DFH", dfh)] {
        csv.push_str(&format!(
            "0,{scope},{},{},{},{},{}\n",
            c.fft, c.elementwise, c.channel_sum, c.dot, c.allreduce
        ));
    }
    let ok = f.fft == 2
        && df.fft == 2
        && dfh.fft == 2
        && dfh.channel_sum == 1
        && dfh.allreduce == 1;
    csv.push_str(&format!("0,conformance,{},,,,\n", if ok { "pass" } else { "fail" }));
    Ok(ok)
}
