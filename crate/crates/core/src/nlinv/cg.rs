//! Conjugate gradient for Hermitian positive definite operators, generic
//! over the vector storage so the same loop drives both device-backed
//! unknowns and plain host vectors.

use num_complex::Complex64;

use crate::error::Result;

use super::types::CgParams;

/// Storage the CG loop can run on.
pub trait CgVector: Sized {
    fn alloc_like(&self) -> Result<Self>;
    fn set_zero(&mut self) -> Result<()>;
    fn copy_from(&mut self, other: &Self) -> Result<()>;
    /// `self += a * x`.
    fn axpy(&mut self, a: f64, x: &Self) -> Result<()>;
    /// `self = x + a * self`.
    fn xpay(&mut self, a: f64, x: &Self) -> Result<()>;
    fn dot(&self, other: &Self) -> Result<Complex64>;
}

/// Outcome of a CG solve.
#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub converged: bool,
    /// Curvature collapsed (division by ~0); the best iterate so far was
    /// returned.
    pub breakdown: bool,
    /// Final residual relative to the right-hand side.
    pub relative_residual: f64,
}

/// Solve `A x = rhs` from a zero initial guess, where `apply` evaluates the
/// Hermitian positive definite operator `A`. Stops at `max_iters` or when
/// the residual drops below `tolerance * ||rhs||`.
pub fn cg_solve<V, F>(mut apply: F, rhs: &V, params: &CgParams) -> Result<(V, CgReport)>
where
    V: CgVector,
    F: FnMut(&V, &mut V) -> Result<()>,
{
    params.validate()?;
    let mut x = rhs.alloc_like()?;
    x.set_zero()?;
    let mut r = rhs.alloc_like()?;
    r.copy_from(rhs)?;
    let mut p = rhs.alloc_like()?;
    p.copy_from(rhs)?;
    let mut ap = rhs.alloc_like()?;

    let rhs_norm2 = rhs.dot(rhs)?.re.max(0.0);
    let mut rr = rhs_norm2;
    if rhs_norm2 == 0.0 {
        return Ok((
            x,
            CgReport { iterations: 0, converged: true, breakdown: false, relative_residual: 0.0 },
        ));
    }
    let target2 = params.tolerance * params.tolerance * rhs_norm2;

    let mut iterations = 0;
    let mut breakdown = false;
    while iterations < params.max_iters && rr > target2 {
        apply(&p, &mut ap)?;
        let pap = p.dot(&ap)?.re;
        if !pap.is_finite() || pap <= f64::EPSILON * rr {
            breakdown = true;
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        let rr_next = r.dot(&r)?.re.max(0.0);
        let beta = rr_next / rr;
        p.xpay(beta, &r)?;
        rr = rr_next;
        iterations += 1;
    }

    Ok((
        x,
        CgReport {
            iterations,
            converged: rr <= target2,
            breakdown,
            relative_residual: (rr / rhs_norm2).sqrt(),
        },
    ))
}

impl CgVector for Vec<Complex64> {
    fn alloc_like(&self) -> Result<Self> {
        Ok(vec![Complex64::new(0.0, 0.0); self.len()])
    }

    fn set_zero(&mut self) -> Result<()> {
        self.fill(Complex64::new(0.0, 0.0));
        Ok(())
    }

    fn copy_from(&mut self, other: &Self) -> Result<()> {
        self.copy_from_slice(other);
        Ok(())
    }

    fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        for (v, xi) in self.iter_mut().zip(x) {
            *v += a * xi;
        }
        Ok(())
    }

    fn xpay(&mut self, a: f64, x: &Self) -> Result<()> {
        for (v, xi) in self.iter_mut().zip(x) {
            *v = xi + a * *v;
        }
        Ok(())
    }

    fn dot(&self, other: &Self) -> Result<Complex64> {
        Ok(self
            .iter()
            .zip(other)
            .map(|(a, b)| a.conj() * b)
            .fold(Complex64::new(0.0, 0.0), |acc, z| acc + z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(a: &[Vec<Complex64>]) -> impl Fn(&Vec<Complex64>, &mut Vec<Complex64>) -> Result<()> + '_ {
        move |x, out| {
            for (i, row) in a.iter().enumerate() {
                out[i] = row.iter().zip(x).map(|(m, v)| m * v).sum();
            }
            Ok(())
        }
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let rhs = vec![Complex64::new(0.0, 0.0); 4];
        let (x, report) = cg_solve(
            |p: &Vec<Complex64>, out: &mut Vec<Complex64>| {
                out.copy_from(p)?;
                Ok(())
            },
            &rhs,
            &CgParams::default(),
        )
        .unwrap();
        assert!(x.iter().all(|z| z.norm() == 0.0));
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn scaled_identity_converges_in_one_iteration() {
        let alpha = 2.5;
        let rhs: Vec<Complex64> = (0..5).map(|i| Complex64::new(i as f64, -1.0)).collect();
        let (x, report) = cg_solve(
            |p: &Vec<Complex64>, out: &mut Vec<Complex64>| {
                for (o, v) in out.iter_mut().zip(p) {
                    *o = alpha * v;
                }
                Ok(())
            },
            &rhs,
            &CgParams { max_iters: 10, tolerance: 1e-10 },
        )
        .unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        for (xi, bi) in x.iter().zip(&rhs) {
            assert!((xi - bi / alpha).norm() < 1e-12);
        }
    }

    #[test]
    fn solves_a_small_hermitian_system() {
        // A = M^H M + I for a fixed small M, guaranteed positive definite.
        let m = [
            [Complex64::new(1.0, 0.5), Complex64::new(0.2, -0.1), Complex64::new(0.0, 0.3)],
            [Complex64::new(-0.4, 0.0), Complex64::new(2.0, 0.0), Complex64::new(0.5, 0.5)],
            [Complex64::new(0.1, -0.2), Complex64::new(0.3, 0.1), Complex64::new(1.5, 0.0)],
        ];
        let n = 3;
        let mut a = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for row in &m {
                    acc += row[i].conj() * row[j];
                }
                a[i][j] = acc + if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) };
            }
        }
        let x_true: Vec<Complex64> =
            (0..n).map(|i| Complex64::new(1.0 + i as f64, -0.5 * i as f64)).collect();
        let mut rhs = vec![Complex64::new(0.0, 0.0); n];
        matvec(&a)(&x_true, &mut rhs).unwrap();
        let (x, report) =
            cg_solve(matvec(&a), &rhs, &CgParams { max_iters: 50, tolerance: 1e-12 }).unwrap();
        assert!(report.converged, "{report:?}");
        for (got, want) in x.iter().zip(&x_true) {
            assert!((got - want).norm() < 1e-9, "{got} vs {want}");
        }
    }
}
