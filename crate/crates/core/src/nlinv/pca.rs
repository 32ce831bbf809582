//! Principal-component channel compression.
//!
//! Forms the `J x J` Hermitian channel covariance of the measured data,
//! diagonalizes it with a cyclic Jacobi sweep and projects the channels onto
//! the leading eigenvectors.

use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};

/// Result metadata of a channel compression.
#[derive(Debug, Clone)]
pub struct CompressionInfo {
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Fraction of total channel energy captured by the kept components.
    pub energy_fraction: f64,
}

/// Cyclic Jacobi diagonalization of a Hermitian matrix (row-major `n x n`).
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns,
/// sorted by descending eigenvalue. Deterministic: fixed sweep order and a
/// phase convention making each vector's largest component real positive.
fn eigh(mut a: Vec<Complex64>, n: usize) -> (Vec<f64>, Vec<Complex64>) {
    let mut q = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        q[i * n + i] = Complex64::new(1.0, 0.0);
    }
    let off = |a: &[Complex64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for r in p + 1..n {
                s += a[p * n + r].norm_sqr();
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| a[i * n + i].re.abs()).sum::<f64>().max(1e-300);
    for _sweep in 0..60 {
        if off(&a) <= 1e-26 * scale * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apq = a[p * n + r];
                if apq.norm() == 0.0 {
                    continue;
                }
                // Phase that makes the pivot real, then a real Jacobi rotation.
                let m = apq.conj() / apq.norm();
                let g = apq.norm();
                let app = a[p * n + p].re;
                let aqq = a[r * n + r].re;
                let tau = (aqq - app) / (2.0 * g);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Column transform V on (p, r): [c, s*m.conj(); -s*m, c] applied
                // as A <- V^H A V, Q <- Q V.
                let vpp = Complex64::new(c, 0.0);
                let vpq = m.conj() * s;
                let vqp = -m * s;
                let vqq = Complex64::new(c, 0.0);
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + r];
                    a[i * n + p] = aip * vpp + aiq * vqp;
                    a[i * n + r] = aip * vpq + aiq * vqq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[r * n + j];
                    a[p * n + j] = vpp.conj() * apj + vqp.conj() * aqj;
                    a[r * n + j] = vpq.conj() * apj + vqq.conj() * aqj;
                }
                for i in 0..n {
                    let qip = q[i * n + p];
                    let qiq = q[i * n + r];
                    q[i * n + p] = qip * vpp + qiq * vqp;
                    q[i * n + r] = qip * vpq + qiq * vqq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i].re).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![Complex64::new(0.0, 0.0); n * n];
    for (col, &src) in order.iter().enumerate() {
        values.push(eig[src]);
        // Phase convention: largest-magnitude component real positive.
        let mut best = 0;
        let mut best_norm = 0.0;
        for i in 0..n {
            let v = q[i * n + src].norm();
            if v > best_norm {
                best_norm = v;
                best = i;
            }
        }
        let pivot = q[best * n + src];
        let phase = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        for i in 0..n {
            vectors[i * n + col] = q[i * n + src] * phase;
        }
    }
    (values, vectors)
}

/// Compress `channels` channel matrices (channel-major, `samples` entries
/// each) to `target` virtual channels along the leading principal
/// components of the channel covariance.
pub fn compress_channels(
    data: &[Complex32],
    channels: usize,
    target: usize,
) -> Result<(Vec<Complex32>, CompressionInfo)> {
    if channels == 0 || !data.len().is_multiple_of(channels) {
        return Err(Error::shape(format!(
            "{} samples do not form whole channels of {channels}",
            data.len()
        )));
    }
    if target == 0 || target > channels {
        return Err(Error::usage(format!(
            "target channel count {target} outside 1..={channels}"
        )));
    }
    let samples = data.len() / channels;

    // Channel covariance C[a][b] = sum_s x_a[s] * conj(x_b[s]).
    let mut cov = vec![Complex64::new(0.0, 0.0); channels * channels];
    for a in 0..channels {
        for b in a..channels {
            let mut acc = Complex64::new(0.0, 0.0);
            for s in 0..samples {
                let xa = data[a * samples + s];
                let xb = data[b * samples + s];
                acc += Complex64::new(xa.re as f64, xa.im as f64)
                    * Complex64::new(xb.re as f64, xb.im as f64).conj();
            }
            cov[a * channels + b] = acc;
            cov[b * channels + a] = acc.conj();
        }
    }

    let (eigenvalues, vectors) = eigh(cov, channels);
    let total: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let kept: f64 = eigenvalues.iter().take(target).map(|&l| l.max(0.0)).sum();
    let energy_fraction = if total > 0.0 { kept / total } else { 1.0 };

    // Project: out_j[s] = sum_a conj(V[a][j]) * x_a[s].
    let mut out = vec![Complex32::default(); target * samples];
    for j in 0..target {
        for s in 0..samples {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..channels {
                let x = data[a * samples + s];
                acc += vectors[a * channels + j].conj()
                    * Complex64::new(x.re as f64, x.im as f64);
            }
            out[j * samples + s] = Complex32::new(acc.re as f32, acc.im as f32);
        }
    }
    Ok((out, CompressionInfo { eigenvalues, energy_fraction }))
}
