//! f64 matrix products on raw slices, with an optional deterministic
//! row-split across threads for large problems.
//!
//! Determinism: each output row is written by exactly one task with a fixed
//! partition, so results are bitwise identical with and without the
//! `parallel` feature.

/// Below this many multiply-adds the parallel split is not worth the fork.
const PAR_FLOP_THRESHOLD: usize = 1 << 21;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Operand used as stored (row-major r×c).
    Normal,
    /// Operand used as the transpose of its row-major storage.
    Transposed,
}

fn strides(layout: Layout, stored_cols: usize) -> (isize, isize) {
    match layout {
        Layout::Normal => (stored_cols as isize, 1),
        Layout::Transposed => (1, stored_cols as isize),
    }
}

/// c = a·b (or c += a·b when `accumulate`) with optional transposition of
/// either operand. Logical dimensions are always a: m×k, b: k×n, c: m×n;
/// `Transposed` means the operand's row-major storage is the transpose of
/// its logical shape.
pub fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = strides(a_layout, if a_layout == Layout::Normal { k } else { m });
    let (rsb, csb) = strides(b_layout, if b_layout == Layout::Normal { n } else { k });
    let beta = if accumulate { 1.0 } else { 0.0 };

    #[cfg(feature = "parallel")]
    {
        let flops = m * k * n;
        let threads = rayon::current_num_threads();
        if flops >= PAR_FLOP_THRESHOLD && threads > 1 && m >= threads {
            let rows_per = m.div_ceil(threads);
            let a_ptr = AssertSend(a.as_ptr());
            rayon::scope(|s| {
                for (ti, chunk) in c.chunks_mut(rows_per * n).enumerate() {
                    let rows = chunk.len() / n;
                    let row0 = ti * rows_per;
                    let a_ptr = &a_ptr;
                    s.spawn(move |_| unsafe {
                        matrixmultiply::dgemm(
                            rows,
                            k,
                            n,
                            1.0,
                            a_ptr.0.offset(row0 as isize * rsa),
                            rsa,
                            csa,
                            b.as_ptr(),
                            rsb,
                            csb,
                            beta,
                            chunk.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    });
                }
            });
            return;
        }
    }

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

#[cfg(feature = "parallel")]
struct AssertSend(*const f64);
#[cfg(feature = "parallel")]
unsafe impl Send for AssertSend {}
#[cfg(feature = "parallel")]
unsafe impl Sync for AssertSend {}

/// Convenience allocating form: a[m×k]·b[k×n].
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm(m, k, n, a, Layout::Normal, b, Layout::Normal, &mut c, false);
    c
}
