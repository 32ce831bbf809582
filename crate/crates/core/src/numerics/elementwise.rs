//! Segment-local element-wise kernels. None of these move data between
//! devices; the transfer ledger stays untouched.

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::runtime::Fence;
use crate::segvec::{Element, SegVector};

use super::launch;

fn check_same_seg<T: Element, U: Element>(a: &SegVector<T>, b: &SegVector<U>) -> Result<()> {
    if !a.env().ptr_eq(b.env()) {
        return Err(Error::usage("containers belong to different environments"));
    }
    if !a.same_segmentation(b) {
        return Err(Error::shape("element-wise operands must share a segmentation"));
    }
    Ok(())
}

/// `z = f(x, y)` element-wise, handling any aliasing among the operands.
fn binary_op(
    x: &SegVector<Complex32>,
    y: &SegVector<Complex32>,
    z: &SegVector<Complex32>,
    f: impl Fn(Complex32, Complex32) -> Complex32 + Send + Sync + 'static,
) -> Result<Fence> {
    check_same_seg(x, y)?;
    check_same_seg(x, z)?;
    let (x, y, z) = (x.clone(), y.clone(), z.clone());
    launch(z.env().clone(), z.participating_ranks(), move |ctx| {
        let zx = z.same_storage(&x);
        let zy = z.same_storage(&y);
        if zx && zy {
            let mut zl = z.local_mut(ctx);
            for v in zl.iter_mut() {
                *v = f(*v, *v);
            }
        } else if zx {
            let yl = y.local(ctx);
            let mut zl = z.local_mut(ctx);
            for (v, &yi) in zl.iter_mut().zip(yl.iter()) {
                *v = f(*v, yi);
            }
        } else if zy {
            let xl = x.local(ctx);
            let mut zl = z.local_mut(ctx);
            for (v, &xi) in zl.iter_mut().zip(xl.iter()) {
                *v = f(xi, *v);
            }
        } else if x.same_storage(&y) {
            let xl = x.local(ctx);
            let mut zl = z.local_mut(ctx);
            for (v, &xi) in zl.iter_mut().zip(xl.iter()) {
                *v = f(xi, xi);
            }
        } else {
            let xl = x.local(ctx);
            let yl = y.local(ctx);
            let mut zl = z.local_mut(ctx);
            for ((v, &xi), &yi) in zl.iter_mut().zip(xl.iter()).zip(yl.iter()) {
                *v = f(xi, yi);
            }
        }
        Ok(())
    })
}

/// `y <- a*x + y`.
pub fn axpy(a: Complex32, x: &SegVector<Complex32>, y: &SegVector<Complex32>) -> Result<Fence> {
    check_same_seg(x, y)?;
    let (x, y) = (x.clone(), y.clone());
    launch(y.env().clone(), y.participating_ranks(), move |ctx| {
        if x.same_storage(&y) {
            let mut yl = y.local_mut(ctx);
            for v in yl.iter_mut() {
                *v += a * *v;
            }
        } else {
            let xl = x.local(ctx);
            let mut yl = y.local_mut(ctx);
            for (v, &xi) in yl.iter_mut().zip(xl.iter()) {
                *v += a * xi;
            }
        }
        Ok(())
    })
}

/// `x <- a*x`.
pub fn scale(a: Complex32, x: &SegVector<Complex32>) -> Result<Fence> {
    let x = x.clone();
    launch(x.env().clone(), x.participating_ranks(), move |ctx| {
        let mut xl = x.local_mut(ctx);
        for v in xl.iter_mut() {
            *v *= a;
        }
        Ok(())
    })
}

/// `z = x + y`.
pub fn add(
    x: &SegVector<Complex32>,
    y: &SegVector<Complex32>,
    z: &SegVector<Complex32>,
) -> Result<Fence> {
    binary_op(x, y, z, |a, b| a + b)
}

/// `z = x .* y`.
pub fn pointwise_mul(
    x: &SegVector<Complex32>,
    y: &SegVector<Complex32>,
    z: &SegVector<Complex32>,
) -> Result<Fence> {
    binary_op(x, y, z, |a, b| a * b)
}

/// `z = conj(x) .* y`.
pub fn pointwise_conj_mul(
    x: &SegVector<Complex32>,
    y: &SegVector<Complex32>,
    z: &SegVector<Complex32>,
) -> Result<Fence> {
    binary_op(x, y, z, |a, b| a.conj() * b)
}

/// `x <- a` everywhere.
pub fn fill(a: Complex32, x: &SegVector<Complex32>) -> Result<Fence> {
    let x = x.clone();
    launch(x.env().clone(), x.participating_ranks(), move |ctx| {
        let mut xl = x.local_mut(ctx);
        for v in xl.iter_mut() {
            *v = a;
        }
        Ok(())
    })
}

/// `y <- x`, segment-local.
pub fn copy_to(x: &SegVector<Complex32>, y: &SegVector<Complex32>) -> Result<Fence> {
    check_same_seg(x, y)?;
    if x.same_storage(y) {
        return Ok(crate::runtime::Fence::completed());
    }
    let (x, y) = (x.clone(), y.clone());
    launch(y.env().clone(), y.participating_ranks(), move |ctx| {
        let xl = x.local(ctx);
        let mut yl = y.local_mut(ctx);
        yl.copy_from_slice(&xl);
        Ok(())
    })
}

/// `x <- m .* x` with a real mask.
pub fn apply_mask(m: &SegVector<f32>, x: &SegVector<Complex32>) -> Result<Fence> {
    check_same_seg(m, x)?;
    let (m, x) = (m.clone(), x.clone());
    launch(x.env().clone(), x.participating_ranks(), move |ctx| {
        let ml = m.local(ctx);
        let mut xl = x.local_mut(ctx);
        for (v, &mi) in xl.iter_mut().zip(ml.iter()) {
            *v *= mi;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{gather, scatter};
    use crate::runtime::Environment;
    use crate::segvec::SplitPolicy;
    use crate::topology::PathKind;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_c32(n: usize, seed: u64) -> Vec<Complex32> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn seg_from(env: &Environment, data: &[Complex32]) -> SegVector<Complex32> {
        let v = SegVector::new(env, data.len(), SplitPolicy::Natural).unwrap();
        scatter(data, &v).unwrap();
        v
    }

    fn to_host(v: &SegVector<Complex32>) -> Vec<Complex32> {
        let mut out = vec![Complex32::default(); v.logical_len()];
        gather(v, &mut out).unwrap();
        out
    }

    #[test]
    fn axpy_with_zero_scalar_is_identity() {
        let env = Environment::create(3, None).unwrap();
        let x = seg_from(&env, &random_c32(10, 1));
        let y_data = random_c32(10, 2);
        let y = seg_from(&env, &y_data);
        axpy(Complex32::new(0.0, 0.0), &x, &y).unwrap().wait().unwrap();
        assert_eq!(to_host(&y), y_data);
    }

    #[test]
    fn axpy_of_ones_doubles() {
        let env = Environment::create(2, None).unwrap();
        let ones = [Complex32::new(1.0, 0.0); 8];
        let x = seg_from(&env, &ones);
        let y = seg_from(&env, &ones);
        axpy(Complex32::new(1.0, 0.0), &x, &y).unwrap().wait().unwrap();
        assert!(to_host(&y).iter().all(|&v| v == Complex32::new(2.0, 0.0)));
    }

    #[test]
    fn axpy_matches_host_reference_exactly() {
        let env = Environment::create(3, None).unwrap();
        let a = Complex32::new(0.3, -1.2);
        let xs = random_c32(31, 3);
        let ys = random_c32(31, 4);
        let x = seg_from(&env, &xs);
        let y = seg_from(&env, &ys);
        axpy(a, &x, &y).unwrap().wait().unwrap();
        let expect: Vec<Complex32> = xs.iter().zip(&ys).map(|(&xi, &yi)| yi + a * xi).collect();
        assert_eq!(to_host(&y), expect, "same f32 operation order must match bit for bit");
    }

    #[test]
    fn conj_mul_on_real_input_equals_mul() {
        let env = Environment::create(2, None).unwrap();
        let xs: Vec<Complex32> = (0..12).map(|i| Complex32::new(i as f32, 0.0)).collect();
        let ys = random_c32(12, 5);
        let x = seg_from(&env, &xs);
        let y = seg_from(&env, &ys);
        let zeros = vec![Complex32::default(); 12];
        let z1 = seg_from(&env, &zeros);
        let z2 = seg_from(&env, &zeros);
        pointwise_mul(&x, &y, &z1).unwrap().wait().unwrap();
        pointwise_conj_mul(&x, &y, &z2).unwrap().wait().unwrap();
        assert_eq!(to_host(&z1), to_host(&z2));
    }

    #[test]
    fn mask_of_ones_is_identity() {
        let env = Environment::create(2, None).unwrap();
        let xs = random_c32(9, 6);
        let x = seg_from(&env, &xs);
        let m = SegVector::<f32>::new(&env, 9, SplitPolicy::Natural).unwrap();
        scatter(&[1.0; 9], &m).unwrap();
        apply_mask(&m, &x).unwrap().wait().unwrap();
        assert_eq!(to_host(&x), xs);
    }

    #[test]
    fn binary_ops_handle_aliases() {
        let env = Environment::create(2, None).unwrap();
        let xs = random_c32(8, 7);
        let x = seg_from(&env, &xs);
        let alias = x.clone();
        add(&x, &x, &alias).unwrap().wait().unwrap();
        let expect: Vec<Complex32> = xs.iter().map(|&v| v + v).collect();
        assert_eq!(to_host(&x), expect);
    }

    #[test]
    fn elementwise_ops_move_no_bytes_between_devices() {
        let env = Environment::create(4, None).unwrap();
        let x = seg_from(&env, &random_c32(16, 8));
        let y = seg_from(&env, &random_c32(16, 9));
        let z = seg_from(&env, &[Complex32::default(); 16]);
        env.barrier_fence().unwrap();
        env.ledger().reset();
        axpy(Complex32::new(2.0, 1.0), &x, &y).unwrap().wait().unwrap();
        pointwise_mul(&x, &y, &z).unwrap().wait().unwrap();
        pointwise_conj_mul(&x, &y, &z).unwrap().wait().unwrap();
        scale(Complex32::new(0.5, 0.0), &z).unwrap().wait().unwrap();
        add(&x, &y, &z).unwrap().wait().unwrap();
        for path in PathKind::ALL {
            assert_eq!(env.ledger().by_path(path).bytes, 0, "{path:?} leaked bytes");
        }
    }

    #[test]
    fn mismatched_segmentation_is_rejected() {
        let env = Environment::create(2, None).unwrap();
        let x = SegVector::<Complex32>::new(&env, 8, SplitPolicy::Natural).unwrap();
        let y = SegVector::<Complex32>::new(&env, 8, SplitPolicy::Clone).unwrap();
        assert!(axpy(Complex32::new(1.0, 0.0), &x, &y).is_err());
    }
}
