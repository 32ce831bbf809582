//! `phantom`: generate ground truth, sensitivities, masks and simulated
//! k-space data for a frame series.

use anyhow::{Context, Result};
use num_complex::Complex32;
use segdev::nlinv::ReconGrid;
use segdev::phantom::{
    make_coils, make_mask, make_phantom, simulate_acquisition, CoilSpec, Motion, PhantomSpec,
};

use crate::config::RunConfig;
use crate::format::{write_array, Array};

pub fn run(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)
        .with_context(|| format!("creating output directory {}", config.out.display()))?;
    let grid = ReconGrid::new(config.n)?;
    let ng = grid.ng();

    let mut spec = PhantomSpec::standard(config.n);
    if config.motion_dx != 0.0 || config.motion_dy != 0.0 {
        spec = spec.with_motion(Motion {
            dx_per_frame: config.motion_dx,
            dy_per_frame: config.motion_dy,
            dilation_per_frame: 0.0,
        });
    }
    let coils = make_coils(&CoilSpec::standard(config.channels), &grid);
    write_array(
        &config.out.join("coils.segv"),
        &Array::complex(vec![config.channels, ng, ng], coils.clone()),
    )?;

    for frame in 0..config.frames {
        let truth = make_phantom(&spec, frame);
        let mask = make_mask(ng, config.mask_density, config.center_band, config.seed + frame as u64)?;
        let y = simulate_acquisition(
            &truth,
            &coils,
            &mask,
            &grid,
            config.noise_sigma,
            config.seed + 1000 + frame as u64,
        )?;
        write_array(
            &config.out.join(format!("truth_f{frame:03}.segv")),
            &Array::real(vec![config.n, config.n], truth),
        )?;
        write_array(
            &config.out.join(format!("mask_f{frame:03}.segv")),
            &Array::real(vec![ng, ng], mask.data().to_vec()),
        )?;
        write_array(
            &config.out.join(format!("y_f{frame:03}.segv")),
            &Array::complex(vec![config.channels, ng, ng], y),
        )?;
        let sampled = mask.sampled_fraction();
        println!(
            "phantom frame {frame}: n={} channels={} sampled fraction {sampled:.3} noise {} -> {}",
            config.n,
            config.channels,
            config.noise_sigma,
            config.out.display()
        );
    }

    // Quick self-check: the data files round-trip through the format.
    let back = crate::format::read_array(&config.out.join("y_f000.segv"))?;
    let y0: &[Complex32] = back.expect_complex()?;
    anyhow::ensure!(
        back.dims == vec![config.channels, ng, ng] && !y0.is_empty(),
        "data file failed its round-trip check"
    );
    Ok(())
}
