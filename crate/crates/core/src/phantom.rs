//! Synthetic ground truth: phantom images, smooth coil sensitivities,
//! sampling masks and simulated k-space data.
//!
//! Data is generated with the same discrete operators the reconstruction
//! uses (deliberately an inverse-crime setup: the point is validating the
//! solver and the runtime, not imaging physics). All generators are
//! deterministic given their seeds.

use num_complex::Complex32;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nlinv::{ReconGrid, SamplingMask};
use crate::numerics::{fft2d, FftDirection};

/// One ellipse of a phantom, in coordinates normalized to `[-1, 1]` over
/// the base field of view.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes.
    pub axes: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
    pub intensity: f32,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

/// Per-frame rigid motion applied to the ellipse centers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Motion {
    pub dx_per_frame: f64,
    pub dy_per_frame: f64,
    /// Multiplicative axis growth per frame.
    pub dilation_per_frame: f64,
}

/// Phantom description: base size plus an ellipse list.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub n: usize,
    pub ellipses: Vec<Ellipse>,
    pub motion: Option<Motion>,
}

impl PhantomSpec {
    /// A deterministic multi-ellipse phantom with structure at several
    /// scales.
    pub fn standard(n: usize) -> PhantomSpec {
        PhantomSpec {
            n,
            ellipses: vec![
                Ellipse { center: (0.0, 0.0), axes: (0.72, 0.85), angle: 0.0, intensity: 1.0 },
                Ellipse { center: (0.0, 0.02), axes: (0.62, 0.75), angle: 0.0, intensity: -0.35 },
                Ellipse { center: (0.25, 0.15), axes: (0.18, 0.30), angle: -0.4, intensity: 0.25 },
                Ellipse { center: (-0.25, 0.15), axes: (0.15, 0.26), angle: 0.4, intensity: 0.2 },
                Ellipse { center: (0.0, -0.35), axes: (0.22, 0.12), angle: 0.0, intensity: 0.3 },
                Ellipse { center: (0.05, 0.45), axes: (0.06, 0.06), angle: 0.0, intensity: 0.45 },
                Ellipse { center: (-0.12, -0.05), axes: (0.04, 0.09), angle: 0.2, intensity: -0.2 },
            ],
            motion: None,
        }
    }

    pub fn with_motion(mut self, motion: Motion) -> PhantomSpec {
        self.motion = Some(motion);
        self
    }
}

/// Rasterize the phantom for one frame: `n x n` real intensities, ellipse
/// contributions summed, clamped to be nonnegative.
pub fn make_phantom(spec: &PhantomSpec, frame: usize) -> Vec<f32> {
    let n = spec.n;
    let motion = spec.motion.unwrap_or_default();
    let t = frame as f64;
    let dilate = (1.0 + motion.dilation_per_frame).powf(t);
    let mut img = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            // Pixel centers in [-1, 1].
            let y = (r as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let x = (c as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let mut v = 0.0f32;
            for e in &spec.ellipses {
                let moved = Ellipse {
                    center: (
                        e.center.0 + t * motion.dx_per_frame,
                        e.center.1 + t * motion.dy_per_frame,
                    ),
                    axes: (e.axes.0 * dilate, e.axes.1 * dilate),
                    ..*e
                };
                if moved.contains(x, y) {
                    v += e.intensity;
                }
            }
            img[r * n + c] = v.max(0.0);
        }
    }
    img
}

/// Coil layout: `channels` complex Gaussian lobes centered on a ring around
/// the field of view.
#[derive(Debug, Clone, Copy)]
pub struct CoilSpec {
    pub channels: usize,
    /// Lobe width in FOV-normalized units.
    pub sigma: f64,
    /// Ring radius in FOV-normalized units (1.0 = FOV edge).
    pub ring_radius: f64,
}

impl CoilSpec {
    pub fn standard(channels: usize) -> CoilSpec {
        CoilSpec { channels, sigma: 0.9, ring_radius: 1.15 }
    }
}

/// Smooth complex sensitivity maps on the doubled grid, channel-major,
/// normalized so the maximum root-sum-of-squares is 1.
pub fn make_coils(spec: &CoilSpec, grid: &ReconGrid) -> Vec<Complex32> {
    let ng = grid.ng();
    let len = grid.ng_len();
    let j = spec.channels;
    let mut maps = vec![Complex32::default(); j * len];
    for ch in 0..j {
        let theta = 2.0 * std::f64::consts::PI * (ch as f64) / (j as f64);
        let (cx, cy) = (spec.ring_radius * theta.cos(), spec.ring_radius * theta.sin());
        for r in 0..ng {
            for c in 0..ng {
                // The doubled grid spans [-2, 2] in FOV units.
                let y = (r as f64 + 0.5) / ng as f64 * 4.0 - 2.0;
                let x = (c as f64 + 0.5) / ng as f64 * 4.0 - 2.0;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let mag = (-d2 / (2.0 * spec.sigma * spec.sigma)).exp();
                // Smooth, channel-dependent phase ramp.
                let phase = 0.5 * (x * theta.cos() + y * theta.sin());
                maps[ch * len + r * ng + c] =
                    Complex32::new((mag * phase.cos()) as f32, (mag * phase.sin()) as f32);
            }
        }
    }
    let mut max_rss = 0.0f32;
    for i in 0..len {
        let rss: f32 = (0..j).map(|ch| maps[ch * len + i].norm_sqr()).sum::<f32>().sqrt();
        max_rss = max_rss.max(rss);
    }
    if max_rss > 0.0 {
        let s = 1.0 / max_rss;
        for v in maps.iter_mut() {
            *v *= s;
        }
    }
    maps
}

/// Uniform sensitivities (`c_j = 1/sqrt(J)`), for tests that want a trivial
/// coil model with RSS identically 1.
pub fn make_uniform_coils(channels: usize, grid: &ReconGrid) -> Vec<Complex32> {
    let v = 1.0 / (channels as f32).sqrt();
    vec![Complex32::new(v, 0.0); channels * grid.ng_len()]
}

/// Cartesian variable-density random column mask with a fully sampled
/// center band. `density` is the expected fraction of sampled columns; the
/// column distribution favors low frequencies quadratically.
pub fn make_mask(ng: usize, density: f64, center_band: usize, seed: u64) -> Result<SamplingMask> {
    if !(0.0..=1.0).contains(&density) || density == 0.0 {
        return Err(Error::config(format!("mask density {density} outside (0, 1]")));
    }
    if density == 1.0 {
        return Ok(SamplingMask::full(ng));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = |i: usize| -> f64 {
        if i < ng / 2 {
            i as f64 / ng as f64
        } else {
            (i as f64 - ng as f64) / ng as f64
        }
    };
    let weights: Vec<f64> = (0..ng).map(|i| (1.0 - 2.0 * freq(i).abs()).powi(2)).collect();
    let mean_w: f64 = weights.iter().sum::<f64>() / ng as f64;
    let mut columns = vec![false; ng];
    for (i, keep) in columns.iter_mut().enumerate() {
        let p = (density * weights[i] / mean_w).min(1.0);
        let in_band = freq(i).abs() * (ng as f64) <= (center_band as f64) / 2.0;
        *keep = in_band || rng.gen_range(0.0..1.0) < p;
    }
    let mut data = vec![0.0f32; ng * ng];
    for r in 0..ng {
        for (c, &keep) in columns.iter().enumerate() {
            if keep {
                data[r * ng + c] = 1.0;
            }
        }
    }
    SamplingMask::new(ng, data)
}

/// Simulate the acquisition: embed the image in the doubled grid, weight by
/// each sensitivity, restrict to the field of view, transform, sample, and
/// add complex Gaussian noise of standard deviation `noise_sigma` per
/// component on the sampled positions.
///
/// Uses the same transform code path as the reconstruction operators, so
/// the forward model applied to the ground-truth unknowns reproduces this
/// data (up to the `W^{-1}W` round trip).
pub fn simulate_acquisition(
    image: &[f32],
    coils: &[Complex32],
    mask: &SamplingMask,
    grid: &ReconGrid,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Complex32>> {
    let n = grid.n();
    let ng = grid.ng();
    let len = grid.ng_len();
    if image.len() != n * n {
        return Err(Error::shape(format!("image of {} pixels on a base grid of {n}", image.len())));
    }
    if coils.is_empty() || !coils.len().is_multiple_of(len) {
        return Err(Error::shape("sensitivities do not cover whole channels"));
    }
    if mask.ng() != ng {
        return Err(Error::shape("mask grid does not match reconstruction grid"));
    }
    let channels = coils.len() / len;
    let embedded =
        grid.embed_fov(&image.iter().map(|&v| Complex32::new(v, 0.0)).collect::<Vec<_>>());
    let fov = grid.fov_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![Complex32::default(); channels * len];
    for ch in 0..channels {
        let out = &mut y[ch * len..(ch + 1) * len];
        for i in 0..len {
            out[i] = fov[i] * (embedded[i] * coils[ch * len + i]);
        }
        fft2d(out, ng, ng, FftDirection::Forward);
        for (v, &m) in out.iter_mut().zip(mask.data()) {
            *v *= m;
            if m != 0.0 && noise_sigma > 0.0 {
                let (g0, g1) = gaussian_pair(&mut rng);
                *v += Complex32::new((noise_sigma * g0) as f32, (noise_sigma * g1) as f32);
            }
        }
    }
    Ok(y)
}

/// Box-Muller standard normal pair.
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

/// Relative L2 error of `got` against `want` after the least-squares scalar
/// match, compared by magnitude.
pub fn relative_error(got: &[Complex32], want: &[f32]) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut gw = 0.0f64;
    let mut gg = 0.0f64;
    let mut ww = 0.0f64;
    for (g, &w) in got.iter().zip(want) {
        let gm = g.norm() as f64;
        gw += gm * w as f64;
        gg += gm * gm;
        ww += (w as f64) * (w as f64);
    }
    if ww == 0.0 {
        return if gg == 0.0 { 0.0 } else { f64::INFINITY };
    }
    let s = if gg > 0.0 { gw / gg } else { 0.0 };
    let mut err2 = 0.0f64;
    for (g, &w) in got.iter().zip(want) {
        let d = s * g.norm() as f64 - w as f64;
        err2 += d * d;
    }
    (err2 / ww).sqrt()
}
