//! `bench-algos`: batched FFT, axpy and the matrix product over matrix
//! sizes and device counts, reporting per-device element counts and ledger
//! bytes, and asserting the locality invariants.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use num_complex::Complex32;
use segdev::comm::{broadcast, scatter};
use segdev::numerics::{axpy, gemm, BatchedFftPlan};
use segdev::{Environment, PathKind, SegVector, SplitPolicy};

use crate::config::RunConfig;

const MATRICES: usize = 12;
const SIZES: [usize; 4] = [64, 128, 256, 512];

pub fn run(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)?;
    let mut csv = String::from("op,size,devices,elems_per_device,cross_device_bytes,host_device_bytes,wall_ms\n");

    for devices in 1..=config.devices.min(4) {
        let env = Environment::create(devices, None)?;
        for &side in &SIZES {
            let len = MATRICES * side * side;
            let data: Vec<Complex32> =
                (0..len).map(|i| Complex32::new((i % 31) as f32 * 0.1, 0.2)).collect();

            // Batched transform, forward plus inverse per matrix.
            let v = SegVector::<Complex32>::new(&env, len, SplitPolicy::Blockwise { block_len: side * side })?;
            scatter(&data, &v)?;
            env.barrier_fence()?;
            env.ledger().reset();
            let plan = BatchedFftPlan::new(side, side, MATRICES)?;
            let start = Instant::now();
            plan.forward(&v, &v)?;
            plan.inverse(&v, &v)?;
            env.barrier_fence()?;
            record(&mut csv, &env, "fft", side, devices, len, start)?;
            assert_local(&env, "fft", side, devices)?;

            // a*X + Y.
            let x = SegVector::<Complex32>::new(&env, len, SplitPolicy::Natural)?;
            let y = SegVector::<Complex32>::new(&env, len, SplitPolicy::Natural)?;
            scatter(&data, &x)?;
            scatter(&data, &y)?;
            env.barrier_fence()?;
            env.ledger().reset();
            let start = Instant::now();
            axpy(Complex32::new(0.5, -0.5), &x, &y)?;
            env.barrier_fence()?;
            record(&mut csv, &env, "axpy", side, devices, len, start)?;
            assert_local(&env, "axpy", side, devices)?;

            // A*B with row-block A and C, cloned B; skip the largest size to
            // keep the cubic loop affordable.
            if side <= 256 {
                let m = side;
                let a = SegVector::<Complex32>::new(&env, m * m, SplitPolicy::Blockwise { block_len: m })?;
                let b = SegVector::<Complex32>::new(&env, m * m, SplitPolicy::Clone)?;
                let c = SegVector::<Complex32>::new(&env, m * m, SplitPolicy::Blockwise { block_len: m })?;
                scatter(&data[..m * m], &a)?;
                broadcast(&data[..m * m], &b)?;
                env.barrier_fence()?;
                env.ledger().reset();
                let start = Instant::now();
                gemm(&a, &b, &c, m, m, m)?;
                env.barrier_fence()?;
                record(&mut csv, &env, "gemm", side, devices, m * m, start)?;
                // The product itself moves nothing; only the B broadcast may
                // appear, and it was excluded by the reset above.
                let cross = env.ledger().by_path(PathKind::PeerToPeer).bytes
                    + env.ledger().by_path(PathKind::HostStaged).bytes;
                if cross != 0 {
                    bail!("gemm moved {cross} cross-device bytes at size {side}, G={devices}");
                }
            }
        }
    }

    let path = config.out.join("bench_algos.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("bench-algos: wrote {}", path.display());
    Ok(())
}

fn record(
    csv: &mut String,
    env: &Environment,
    op: &str,
    side: usize,
    devices: usize,
    total_elems: usize,
    start: Instant,
) -> Result<()> {
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let cross = env.ledger().by_path(PathKind::PeerToPeer).bytes
        + env.ledger().by_path(PathKind::HostStaged).bytes;
    let host = env.ledger().by_path(PathKind::HostToDevice).bytes
        + env.ledger().by_path(PathKind::DeviceToHost).bytes;
    csv.push_str(&format!(
        "{op},{side},{devices},{},{cross},{host},{wall_ms:.3}\n",
        total_elems.div_ceil(devices)
    ));
    println!("bench-algos {op} {side}x{side} G={devices}: {wall_ms:.1} ms");
    Ok(())
}

/// Element-wise and per-matrix transforms must not move bytes between
/// devices.
fn assert_local(env: &Environment, op: &str, side: usize, devices: usize) -> Result<()> {
    for path in [PathKind::PeerToPeer, PathKind::HostStaged, PathKind::HostToDevice, PathKind::DeviceToHost] {
        let bytes = env.ledger().by_path(path).bytes;
        if bytes != 0 {
            bail!("{op} at {side}x{side}, G={devices}: locality violated, {bytes} bytes on {path:?}");
        }
    }
    Ok(())
}
