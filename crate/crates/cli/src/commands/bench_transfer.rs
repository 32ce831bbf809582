//! `bench-transfer`: transfer-primitive scenarios over a growing device
//! count, reporting ledger byte totals by path kind plus informational
//! wall-clock times.
//!
//! Strong copy scatters a fixed payload; weak copy grows the payload with
//! the device count; broadcast replicates one payload everywhere; reduce
//! combines per-device replicas back to the host.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use num_complex::Complex32;
use segdev::comm::{broadcast, gather, reduce, scatter, ReduceOp};
use segdev::{EnvConfig, Environment, PathKind, SegVector, SplitPolicy};

use crate::config::RunConfig;

/// Matrices per payload and matrix side, matching the micro-benchmark shape
/// of twelve complex square single-precision matrices.
const MATRICES: usize = 12;
const SIDE: usize = 256;

pub fn run(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)?;
    let payload = MATRICES * SIDE * SIDE;
    let data: Vec<Complex32> = (0..payload)
        .map(|i| Complex32::new((i % 97) as f32, (i % 89) as f32))
        .collect();

    let mut csv = String::from("scenario,devices,path,bytes,transfers,wall_ms\n");
    for devices in 1..=config.devices {
        let env = build_env(config, devices)?;

        run_scenario(&mut csv, "strong_copy", devices, &env, || {
            let v = SegVector::<Complex32>::new(&env, payload, SplitPolicy::Natural)?;
            scatter(&data, &v)?;
            env.barrier_fence()?;
            Ok(())
        })?;

        run_scenario(&mut csv, "weak_copy", devices, &env, || {
            let grown = vec![Complex32::new(1.0, 0.0); payload * devices];
            let v = SegVector::<Complex32>::new(&env, payload * devices, SplitPolicy::Natural)?;
            scatter(&grown, &v)?;
            env.barrier_fence()?;
            Ok(())
        })?;

        run_scenario(&mut csv, "broadcast", devices, &env, || {
            let v = SegVector::<Complex32>::new(&env, payload, SplitPolicy::Clone)?;
            broadcast(&data, &v)?;
            env.barrier_fence()?;
            Ok(())
        })?;

        run_scenario(&mut csv, "reduce", devices, &env, || {
            let v = SegVector::<Complex32>::new(&env, payload, SplitPolicy::Clone)?;
            broadcast(&data, &v)?;
            env.barrier_fence()?;
            env.ledger().reset();
            let mut out = vec![Complex32::default(); payload];
            reduce(&v, &mut out, ReduceOp::Sum)?;
            Ok(())
        })?;

        // Sanity: a scatter/gather round trip on this environment.
        let v = SegVector::<Complex32>::new(&env, payload, SplitPolicy::Natural)?;
        scatter(&data, &v)?;
        let mut back = vec![Complex32::default(); payload];
        gather(&v, &mut back)?;
        if back != data {
            bail!("scatter/gather round trip failed at G={devices}");
        }
    }

    let path = config.out.join("bench_transfer.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("bench-transfer: wrote {}", path.display());
    Ok(())
}

fn build_env(config: &RunConfig, devices: usize) -> Result<Environment> {
    let topology = match &config.topology {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(segdev::Topology::parse(&text)?)
        }
        None => None,
    };
    Ok(Environment::with_config(EnvConfig {
        devices,
        group: None,
        topology,
        arena_capacity: None,
    })?)
}

fn run_scenario(
    csv: &mut String,
    name: &str,
    devices: usize,
    env: &Environment,
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    env.ledger().reset();
    let start = Instant::now();
    body()?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    for path in PathKind::ALL {
        let totals = env.ledger().by_path(path);
        if totals.count == 0 {
            continue;
        }
        csv.push_str(&format!(
            "{name},{devices},{},{},{},{wall_ms:.3}\n",
            path.name(),
            totals.bytes,
            totals.count
        ));
    }
    println!(
        "bench-transfer {name} G={devices}: {} bytes in {:.1} ms",
        env.ledger().total().bytes,
        wall_ms
    );
    Ok(())
}
