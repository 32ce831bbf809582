//! End-to-end reconstruction behaviour on synthetic phantoms.

use segdev::nlinv::{
    reconstruct_frame, reconstruct_series, zero_filled_rss, CgParams, ReconGrid, ReconProblem,
    RegSchedule, SamplingMask, WeightParams,
};
use segdev::phantom::{
    make_coils, make_mask, make_phantom, make_uniform_coils, relative_error, simulate_acquisition,
    CoilSpec, Motion, PhantomSpec,
};
use segdev::Environment;

#[allow(clippy::too_many_arguments)]
fn problem(
    n: usize,
    channels: usize,
    density: Option<f64>,
    uniform_coils: bool,
    noise: f64,
    seed: u64,
    frame: usize,
    motion: Option<Motion>,
) -> (ReconProblem, Vec<f32>) {
    let grid = ReconGrid::new(n).unwrap();
    let mut spec = PhantomSpec::standard(n);
    if let Some(m) = motion {
        spec = spec.with_motion(m);
    }
    let truth = make_phantom(&spec, frame);
    let coils = if uniform_coils {
        make_uniform_coils(channels, &grid)
    } else {
        make_coils(&CoilSpec::standard(channels), &grid)
    };
    let mask = match density {
        Some(d) => make_mask(grid.ng(), d, n / 8, seed).unwrap(),
        None => SamplingMask::full(grid.ng()),
    };
    let y = simulate_acquisition(&truth, &coils, &mask, &grid, noise, seed + 1).unwrap();
    (
        ReconProblem {
            grid,
            channels,
            y,
            mask,
            weights: WeightParams::default(),
            reg: RegSchedule::default(),
            cg: CgParams::default(),
        },
        truth,
    )
}

#[test]
fn fully_sampled_single_uniform_coil_recovers_the_phantom() {
    let env = Environment::create(1, None).unwrap();
    let (p, truth) = problem(32, 1, None, true, 0.0, 11, 0, None);
    let result = reconstruct_frame(&env, &p).unwrap();
    let err = relative_error(&result.image, &truth);
    assert!(err <= 5e-2, "relative error {err} after 6 Newton steps");
}

#[test]
fn residual_is_non_increasing_and_beats_zero_filling() {
    let env = Environment::create(2, None).unwrap();
    let (p, truth) = problem(32, 4, Some(0.25), false, 0.0, 5, 0, None);
    let result = reconstruct_frame(&env, &p).unwrap();

    let mut residuals: Vec<f64> = result.steps.iter().map(|s| s.residual).collect();
    residuals.push(result.final_residual);
    for w in residuals.windows(2) {
        assert!(
            w[1] <= w[0] * (1.0 + 1e-6),
            "residual increased: {residuals:?}"
        );
    }

    let nlinv_err = relative_error(&result.image, &truth);
    let zf = zero_filled_rss(&p);
    let zf_img: Vec<num_complex::Complex32> =
        zf.iter().map(|&v| num_complex::Complex32::new(v, 0.0)).collect();
    let zf_err = relative_error(&zf_img, &truth);
    assert!(
        nlinv_err < zf_err,
        "nlinv error {nlinv_err} not better than zero-filled {zf_err}"
    );
}

#[test]
fn warm_start_changes_the_result_on_a_moving_phantom() {
    let env = Environment::create(2, None).unwrap();
    let motion = Motion { dx_per_frame: 0.08, dy_per_frame: 0.03, dilation_per_frame: 0.0 };
    let frames: Vec<ReconProblem> = (0..2)
        .map(|t| problem(32, 4, Some(0.25), false, 0.0, 9, t, Some(motion)).0)
        .collect();

    let series = reconstruct_series(&env, &frames).unwrap();
    let independent = reconstruct_frame(&env, &frames[1]).unwrap();

    let diff: f32 = series[1]
        .image
        .iter()
        .zip(&independent.image)
        .map(|(a, b)| (a - b).norm())
        .sum();
    assert!(
        diff > 1e-3,
        "temporal regularization had no effect (difference {diff})"
    );
}

#[test]
fn device_counts_agree_on_a_small_instance() {
    let (p, _) = problem(32, 4, Some(0.3), false, 0.0, 3, 0, None);
    let run = |devices: usize| {
        let env = Environment::create(devices, None).unwrap();
        reconstruct_frame(&env, &p).unwrap().image
    };
    let single = run(1);
    let scale: f64 = single.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt();
    for devices in [2, 4] {
        let multi = run(devices);
        let diff: f64 = single
            .iter()
            .zip(&multi)
            .map(|(a, b)| (a - b).norm_sqr() as f64)
            .sum::<f64>()
            .sqrt();
        assert!(
            diff <= 1e-4 * scale,
            "G={devices} differs from single device by {} relative",
            diff / scale
        );
    }
}
