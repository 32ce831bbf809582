//! `report`: summarize the CSV reports found in a run directory.

use std::path::Path;

use anyhow::{bail, Result};

pub fn run(dir: &Path) -> Result<()> {
    let mut found = false;

    let residuals = dir.join("residuals.csv");
    if residuals.exists() {
        found = true;
        println!("== residual per Newton step ({}) ==", residuals.display());
        let text = std::fs::read_to_string(&residuals)?;
        let mut current_frame = String::new();
        let mut line_out = String::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 4 {
                continue;
            }
            if cols[0] != current_frame {
                if !line_out.is_empty() {
                    println!("{line_out}");
                }
                current_frame = cols[0].to_string();
                line_out = format!("frame {current_frame}:");
            }
            line_out.push_str(&format!(" {:.4}", cols[3].parse::<f64>().unwrap_or(f64::NAN)));
        }
        if !line_out.is_empty() {
            println!("{line_out}");
        }
    }

    let counters = dir.join("counters.csv");
    if counters.exists() {
        found = true;
        println!("\n== operator work counters ({}) ==", counters.display());
        let text = std::fs::read_to_string(&counters)?;
        println!("{:<14} {:>6} {:>12} {:>12} {:>6} {:>10}", "scope", "fft", "elementwise", "channel_sum", "dot", "allreduce");
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 7 && (cols[1].starts_with("op_") || cols[1] == "total" || cols[1] == "conformance") {
                println!(
                    "{:<14} {:>6} {:>12} {:>12} {:>6} {:>10}",
                    cols[1], cols[2], cols[3], cols[4], cols[5], cols[6]
                );
            }
        }
    }

    let metrics = dir.join("metrics.csv");
    if metrics.exists() {
        found = true;
        println!("\n== reconstruction metrics ({}) ==", metrics.display());
        let text = std::fs::read_to_string(&metrics)?;
        println!(
            "{:<6} {:>8} {:>12} {:>12} {:>14} {:>14}",
            "frame", "devices", "nlinv_err", "zf_err", "final_resid", "image_l2"
        );
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 8 {
                println!(
                    "{:<6} {:>8} {:>12} {:>12} {:>14} {:>14}",
                    cols[0], cols[1], cols[3], cols[4], cols[5], cols[7]
                );
            }
        }
    }

    for bench in ["bench_transfer.csv", "bench_algos.csv"] {
        let path = dir.join(bench);
        if path.exists() {
            found = true;
            println!("\n== {} ==", path.display());
            print!("{}", std::fs::read_to_string(&path)?);
        }
    }

    if !found {
        bail!("no report files found in {}", dir.display());
    }
    Ok(())
}
