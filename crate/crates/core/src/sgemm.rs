//! Single-precision matrix product for hosts with AVX-512.
//!
//! Operands are packed into zero-padded panels (`MR` rows of `A`, `NR`
//! columns of `B`, `KC` deep) and multiplied by a register-blocked kernel.
//! Every output element accumulates its `k` products in increasing `k`
//! order, independent of `m` and of its position in a tile, so a row of the
//! result does not depend on how many rows are computed together.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::x86_64::*;
    use std::cell::RefCell;

    const MR: usize = 12;
    const NR: usize = 32;
    const KC: usize = 256;
    const MC: usize = 8 * MR;
    const NC: usize = 16 * NR;

    #[derive(Clone, Copy)]
    #[repr(C, align(64))]
    struct Line([f32; 16]);

    thread_local! {
        static PACK: RefCell<(Vec<Line>, Vec<Line>)> = const { RefCell::new((Vec::new(), Vec::new())) };
    }

    fn lines(buf: &mut Vec<Line>, floats: usize) -> *mut f32 {
        let need = floats.div_ceil(16);
        if buf.len() < need {
            buf.resize(need, Line([0.0; 16]));
        }
        buf.as_mut_ptr() as *mut f32
    }

    pub fn available() -> bool {
        is_x86_feature_detected!("avx512f")
    }

    /// `c = beta c + A B` with `A(i, p) = a[i rsa + p csa]`,
    /// `B(p, j) = b[p rsb + j csb]` and `c` row-major `m×n`.
    ///
    /// # Safety
    /// The host must support AVX-512F and every addressed element must lie
    /// inside its slice.
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn sgemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: usize,
        csa: usize,
        b: &[f32],
        rsb: usize,
        csb: usize,
        beta: f32,
        c: &mut [f32],
    ) {
        if k == 0 {
            for v in c[..m * n].iter_mut() {
                *v = if beta == 0.0 { 0.0 } else { beta * *v };
            }
            return;
        }
        PACK.with(|cell| {
            let mut guard = cell.borrow_mut();
            let (abuf, bbuf) = &mut *guard;
            let bp = lines(bbuf, KC * NC);
            let ap = lines(abuf, KC * MC);
            let cp = c.as_mut_ptr();
            for jc in (0..n).step_by(NC) {
                let nc = NC.min(n - jc);
                for pc in (0..k).step_by(KC) {
                    let kc = KC.min(k - pc);
                    pack_b(b, rsb, csb, pc, kc, jc, nc, bp);
                    let beta_eff = if pc == 0 { beta } else { 1.0 };
                    for ic in (0..m).step_by(MC) {
                        let mc = MC.min(m - ic);
                        pack_a(a, rsa, csa, ic, mc, pc, kc, ap);
                        for jr in (0..nc).step_by(NR) {
                            let nr = NR.min(nc - jr);
                            let bpanel = bp.add(jr * kc);
                            for ir in (0..mc).step_by(MR) {
                                let mr = MR.min(mc - ir);
                                kernel(
                                    kc,
                                    ap.add(ir * kc),
                                    bpanel,
                                    cp.add((ic + ir) * n + jc + jr),
                                    n,
                                    mr,
                                    nr,
                                    beta_eff,
                                );
                            }
                        }
                    }
                }
            }
        });
    }

    /// Panels of `NR` columns, each `kc × NR` row-major, zero padded.
    #[allow(clippy::too_many_arguments)]
    unsafe fn pack_b(b: &[f32], rs: usize, cs: usize, pc: usize, kc: usize, jc: usize, nc: usize, out: *mut f32) {
        for jr in (0..nc).step_by(NR) {
            let nr = NR.min(nc - jr);
            let panel = out.add(jr * kc);
            for p in 0..kc {
                let row = panel.add(p * NR);
                let base = (pc + p) * rs + (jc + jr) * cs;
                if cs == 1 {
                    std::ptr::copy_nonoverlapping(b.as_ptr().add(base), row, nr);
                } else {
                    for j in 0..nr {
                        *row.add(j) = *b.get_unchecked(base + j * cs);
                    }
                }
                for j in nr..NR {
                    *row.add(j) = 0.0;
                }
            }
        }
    }

    /// Panels of `MR` rows, each `kc × MR` (k-major), zero padded.
    #[allow(clippy::too_many_arguments)]
    unsafe fn pack_a(a: &[f32], rs: usize, cs: usize, ic: usize, mc: usize, pc: usize, kc: usize, out: *mut f32) {
        for ir in (0..mc).step_by(MR) {
            let mr = MR.min(mc - ir);
            let panel = out.add(ir * kc);
            for p in 0..kc {
                let col = panel.add(p * MR);
                let base = (ic + ir) * rs + (pc + p) * cs;
                if rs == 1 {
                    std::ptr::copy_nonoverlapping(a.as_ptr().add(base), col, mr);
                } else {
                    for i in 0..mr {
                        *col.add(i) = *a.get_unchecked(base + i * rs);
                    }
                }
                for i in mr..MR {
                    *col.add(i) = 0.0;
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn kernel(
        kc: usize,
        a: *const f32,
        b: *const f32,
        c: *mut f32,
        ldc: usize,
        mr: usize,
        nr: usize,
        beta: f32,
    ) {
        let mut acc = [[_mm512_setzero_ps(); 2]; MR];
        for p in 0..kc {
            let b0 = _mm512_load_ps(b.add(p * NR));
            let b1 = _mm512_load_ps(b.add(p * NR + 16));
            let ar = a.add(p * MR);
            for r in 0..MR {
                let av = _mm512_set1_ps(*ar.add(r));
                acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
                acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
            }
        }
        if mr == MR && nr == NR {
            let bv = _mm512_set1_ps(beta);
            for (r, row) in acc.iter().enumerate() {
                let out = c.add(r * ldc);
                for (h, v) in row.iter().enumerate() {
                    let dst = out.add(16 * h);
                    let res = if beta == 0.0 {
                        *v
                    } else if beta == 1.0 {
                        _mm512_add_ps(_mm512_loadu_ps(dst), *v)
                    } else {
                        _mm512_fmadd_ps(_mm512_loadu_ps(dst), bv, *v)
                    };
                    _mm512_storeu_ps(dst, res);
                }
            }
        } else {
            let mut tmp = [Line([0.0; 16]); 2 * MR];
            for (r, row) in acc.iter().enumerate() {
                _mm512_store_ps(tmp[2 * r].0.as_mut_ptr(), row[0]);
                _mm512_store_ps(tmp[2 * r + 1].0.as_mut_ptr(), row[1]);
            }
            for r in 0..mr {
                let out = c.add(r * ldc);
                for j in 0..nr {
                    let v = tmp[2 * r + j / 16].0[j % 16];
                    let dst = out.add(j);
                    *dst = if beta == 0.0 {
                        v
                    } else if beta == 1.0 {
                        *dst + v
                    } else {
                        (*dst).mul_add(beta, v)
                    };
                }
            }
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub fn available() -> bool {
        false
    }

    #[allow(clippy::too_many_arguments)]
    pub unsafe fn sgemm(
        _m: usize,
        _k: usize,
        _n: usize,
        _a: &[f32],
        _rsa: usize,
        _csa: usize,
        _b: &[f32],
        _rsb: usize,
        _csb: usize,
        _beta: f32,
        _c: &mut [f32],
    ) {
        unreachable!("no AVX-512 kernel on this target")
    }
}

pub(crate) use imp::{available, sgemm};
