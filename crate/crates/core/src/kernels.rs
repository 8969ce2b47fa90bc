//! Dense compute primitives shared by the forward and backward passes.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::Scalar;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Worker count for kernels that split work across independent batches.
///
/// The default of 1 keeps every kernel on the calling thread. Results do not
/// depend on this value: work is split only along axes whose outputs are
/// computed independently.
pub fn set_num_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn num_threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// `c[m,n] (+)= op(a) * op(b)` with `op(a)` of shape `[m,k]` and `op(b)` of
/// shape `[k,n]`. `ta` means `a` is stored as `[k,m]`, `tb` that `b` is
/// stored as `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the slices cover the strided extents checked above and `c`
    // is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `batch` independent products; `a`, `b` and `c` advance by one matrix per
/// batch entry.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    if sc == 0 {
        return;
    }
    let run = |i: usize, ci: &mut [T]| {
        gemm(
            m,
            k,
            n,
            &a[i * sa..(i + 1) * sa],
            ta,
            &b[i * sb..(i + 1) * sb],
            tb,
            ci,
            accumulate,
        )
    };
    if num_threads() > 1 && batch > 1 {
        c[..batch * sc]
            .par_chunks_mut(sc)
            .enumerate()
            .for_each(|(i, ci)| run(i, ci));
    } else {
        for (i, ci) in c[..batch * sc].chunks_mut(sc).enumerate() {
            run(i, ci);
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `log(sum(exp(x)))` of one row.
pub(crate) fn logsumexp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
