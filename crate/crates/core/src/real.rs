//! Scalar abstraction shared by the gradient engine and the network.
//!
//! Training runs in `f32`; gradient checks and oracles run in `f64`. Both go
//! through the same code paths, only the dense kernels below differ.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::OnceLock;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable on a [`Tape`](crate::autodiff::Tape).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name written into reports ("f32" / "f64").
    const NAME: &'static str;

    /// `c = beta * c + op(a) * op(b)` for row-major operands.
    ///
    /// `op(a)` is `m×k`; when `trans_a` is set `a` is stored as `k×m`.
    /// `op(b)` is `k×n`; when `trans_b` is set `b` is stored as `n×k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Writes `sin(omega * x)` and `cos(omega * x)` for every element.
    fn sin_cos_scaled(x: &[Self], omega: Self, sin_out: &mut [Self], cos_out: &mut [Self]);

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // (row stride, column stride) of the logical operand
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn wide_simd() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(crate::sgemm::available)
}

fn check_gemm_lens(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "gemm: lhs has {a} elements, need {}", m * k);
    assert!(b >= k * n, "gemm: rhs has {b} elements, need {}", k * n);
    assert!(c >= m * n, "gemm: output has {c} elements, need {}", m * n);
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        trans_a: bool,
        b: &[f32],
        trans_b: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = gemm_strides(m, k, trans_a);
        let (rsb, csb) = gemm_strides(k, n, trans_b);
        // outputs narrower than half a register tile waste most of the
        // packed kernel's work
        if wide_simd() && n >= 16 {
            // SAFETY: AVX-512F detected; lengths checked above cover every
            // index reachable with these strides.
            unsafe {
                crate::sgemm::sgemm(
                    m,
                    k,
                    n,
                    a,
                    rsa as usize,
                    csa as usize,
                    b,
                    rsb as usize,
                    csb as usize,
                    beta,
                    c,
                );
            }
            return;
        }
        // SAFETY: lengths checked above cover every index reachable with these strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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

    fn sin_cos_scaled(x: &[f32], omega: f32, sin_out: &mut [f32], cos_out: &mut [f32]) {
        fast_sin_cos_f32(x, omega, sin_out, cos_out);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        trans_a: bool,
        b: &[f64],
        trans_b: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = gemm_strides(m, k, trans_a);
        let (rsb, csb) = gemm_strides(k, n, trans_b);
        // SAFETY: lengths checked above cover every index reachable with these strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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

    fn sin_cos_scaled(x: &[f64], omega: f64, sin_out: &mut [f64], cos_out: &mut [f64]) {
        assert!(x.len() == sin_out.len() && x.len() == cos_out.len());
        for ((&v, s), c) in x.iter().zip(sin_out.iter_mut()).zip(cos_out.iter_mut()) {
            let (sv, cv) = (omega * v).sin_cos();
            *s = sv;
            *c = cv;
        }
    }
}

// Cody-Waite split of pi/2; the first two parts have short mantissas so
// `j * PART` is exact for |j| < 2^12.
const PIO2_1: f32 = 1.570_312_5;
const PIO2_2: f32 = 4.837_513e-4;
const PIO2_3: f32 = 7.549_79e-8;
const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23

/// Branch-free single precision sine/cosine; autovectorizes.
///
/// Absolute error stays below 2e-7 for |omega * x| < 1e4, beyond which the
/// range reduction degrades gracefully rather than failing.
#[inline]
fn sin_cos_kernel(v: f32) -> (f32, f32) {
    let q = v * std::f32::consts::FRAC_2_PI;
    let n = (q + ROUND_MAGIC) - ROUND_MAGIC;
    let j = n as i32;
    let r = ((v - n * PIO2_1) - n * PIO2_2) - n * PIO2_3;
    let r2 = r * r;
    let s = r + r * r2 * (-1.666_665_5e-1 + r2 * (8.332_161e-3 + r2 * (-1.951_529_6e-4)));
    let c = 1.0 - 0.5 * r2
        + r2 * r2 * (4.166_664_6e-2 + r2 * (-1.388_731_6e-3 + r2 * 2.443_315_7e-5));
    let swap = j & 1 != 0;
    let (sv, cv) = if swap { (c, s) } else { (s, c) };
    let sin_neg = j & 2 != 0;
    let cos_neg = (j + 1) & 2 != 0;
    (
        if sin_neg { -sv } else { sv },
        if cos_neg { -cv } else { cv },
    )
}

fn fast_sin_cos_f32(x: &[f32], omega: f32, sin_out: &mut [f32], cos_out: &mut [f32]) {
    assert!(x.len() == sin_out.len() && x.len() == cos_out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if wide_simd() {
            // SAFETY: AVX-512F presence checked at runtime.
            unsafe { sin_cos_avx512(x, omega, sin_out, cos_out) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: feature presence checked at runtime.
            unsafe { sin_cos_avx2(x, omega, sin_out, cos_out) };
            return;
        }
    }
    sin_cos_portable(x, omega, sin_out, cos_out);
}

#[inline(always)]
fn sin_cos_portable(x: &[f32], omega: f32, sin_out: &mut [f32], cos_out: &mut [f32]) {
    for ((&v, s), c) in x.iter().zip(sin_out.iter_mut()).zip(cos_out.iter_mut()) {
        let (sv, cv) = sin_cos_kernel(omega * v);
        *s = sv;
        *c = cv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn sin_cos_avx2(x: &[f32], omega: f32, sin_out: &mut [f32], cos_out: &mut [f32]) {
    sin_cos_portable(x, omega, sin_out, cos_out);
}

/// [`sin_cos_kernel`] sixteen lanes at a time with the same operation
/// sequence (no contraction), so results match the scalar path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn sin_cos_avx512(x: &[f32], omega: f32, sin_out: &mut [f32], cos_out: &mut [f32]) {
    use std::arch::x86_64::*;
    let n = x.len();
    let body = n - n % 16;
    let om = _mm512_set1_ps(omega);
    let two_pi = _mm512_set1_ps(std::f32::consts::FRAC_2_PI);
    let magic = _mm512_set1_ps(ROUND_MAGIC);
    let p1 = _mm512_set1_ps(PIO2_1);
    let p2 = _mm512_set1_ps(PIO2_2);
    let p3 = _mm512_set1_ps(PIO2_3);
    let one = _mm512_set1_ps(1.0);
    let half = _mm512_set1_ps(0.5);
    let sign = _mm512_set1_epi32(i32::MIN);
    let mut i = 0;
    while i < body {
        let v = _mm512_mul_ps(om, _mm512_loadu_ps(x.as_ptr().add(i)));
        let q = _mm512_mul_ps(v, two_pi);
        let nf = _mm512_sub_ps(_mm512_add_ps(q, magic), magic);
        let j = _mm512_cvttps_epi32(nf);
        let r = _mm512_sub_ps(
            _mm512_sub_ps(_mm512_sub_ps(v, _mm512_mul_ps(nf, p1)), _mm512_mul_ps(nf, p2)),
            _mm512_mul_ps(nf, p3),
        );
        let r2 = _mm512_mul_ps(r, r);
        let sp = _mm512_add_ps(
            _mm512_set1_ps(-1.666_665_5e-1),
            _mm512_mul_ps(
                r2,
                _mm512_add_ps(
                    _mm512_set1_ps(8.332_161e-3),
                    _mm512_mul_ps(r2, _mm512_set1_ps(-1.951_529_6e-4)),
                ),
            ),
        );
        let s = _mm512_add_ps(r, _mm512_mul_ps(_mm512_mul_ps(r, r2), sp));
        let cp = _mm512_add_ps(
            _mm512_set1_ps(4.166_664_6e-2),
            _mm512_mul_ps(
                r2,
                _mm512_add_ps(
                    _mm512_set1_ps(-1.388_731_6e-3),
                    _mm512_mul_ps(r2, _mm512_set1_ps(2.443_315_7e-5)),
                ),
            ),
        );
        let c = _mm512_add_ps(
            _mm512_sub_ps(one, _mm512_mul_ps(half, r2)),
            _mm512_mul_ps(_mm512_mul_ps(r2, r2), cp),
        );
        let swap = _mm512_test_epi32_mask(j, _mm512_set1_epi32(1));
        let sv = _mm512_mask_blend_ps(swap, s, c);
        let cv = _mm512_mask_blend_ps(swap, c, s);
        let sin_sign = _mm512_and_si512(_mm512_slli_epi32::<30>(j), sign);
        let cos_sign = _mm512_and_si512(
            _mm512_slli_epi32::<30>(_mm512_add_epi32(j, _mm512_set1_epi32(1))),
            sign,
        );
        let so = _mm512_castsi512_ps(_mm512_xor_si512(_mm512_castps_si512(sv), sin_sign));
        let co = _mm512_castsi512_ps(_mm512_xor_si512(_mm512_castps_si512(cv), cos_sign));
        _mm512_storeu_ps(sin_out.as_mut_ptr().add(i), so);
        _mm512_storeu_ps(cos_out.as_mut_ptr().add(i), co);
        i += 16;
    }
    sin_cos_portable(&x[body..], omega, &mut sin_out[body..], &mut cos_out[body..]);
}
