//! Dense kernels on row-major slices.
//!
//! Every output element of [`matmul`] is accumulated in ascending order of the
//! inner index, starting from `0.0`, with no fused multiply-add. Results are
//! therefore bitwise identical to a textbook triple loop, independent of how
//! rows are blocked.

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let mut rows = c.chunks_exact_mut(n).enumerate();
    // Four output rows share each streamed row of `b`.
    while let (Some((i0, c0)), Some((_, c1)), Some((_, c2)), Some((_, c3))) =
        (rows.next(), rows.next(), rows.next(), rows.next())
    {
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
        let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
        for p in 0..k {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            if x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let lanes = c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut());
            for ((((y0, y1), y2), y3), &bv) in lanes.zip(brow) {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
                *y2 += x2 * bv;
                *y3 += x3 * bv;
            }
        }
    }
    // Tail rows (fewer than four left). The iterator above may have consumed
    // up to three rows that were not processed, so redo the tail explicitly.
    let done = (m / 4) * 4;
    for i in done..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += x * bv;
            }
        }
    }
    c
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
