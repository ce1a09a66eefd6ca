//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! row-major slices; shape validation happens in the op layer.

use alloc::vec;
use alloc::vec::Vec;

/// `op(A) · op(B)` where `A` is `a_rows × a_cols`, `B` is `b_rows × b_cols`
/// and `op` transposes when the matching flag is set. Returns `(m, n, C)`.
#[allow(unsafe_code)]
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
) -> (usize, usize, Vec<f64>) {
    let (m, k, rsa, csa) = if ta {
        (a_cols, a_rows, 1isize, a_cols as isize)
    } else {
        (a_rows, a_cols, a_cols as isize, 1isize)
    };
    let (n, rsb, csb) = if tb {
        (b_rows, 1isize, b_cols as isize)
    } else {
        (b_cols, b_cols as isize, 1isize)
    };
    debug_assert_eq!(k, if tb { b_cols } else { b_rows });
    debug_assert_eq!(a.len(), a_rows * a_cols);
    debug_assert_eq!(b.len(), b_rows * b_cols);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return (m, n, c);
    }
    // SAFETY: the strides above address exactly the `a_rows × a_cols` and
    // `b_rows × b_cols` row-major buffers whose lengths are asserted, and
    // `c` holds `m × n` elements written with row stride `n`.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (m, n, c)
}

/// Unfolds one `C × H × W` image into the `(C·9) × (H·W)` patch matrix of a
/// 3×3, stride 1, zero-padding 1 convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for a in 0..3 {
            for b in 0..3 {
                let row = &mut cols[(ch * 9 + a * 3 + b) * hw..(ch * 9 + a * 3 + b + 1) * hw];
                for i in 0..h {
                    let si = i as isize + a as isize - 1;
                    let out = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, o) in out.iter_mut().enumerate() {
                        let sj = j as isize + b as isize - 1;
                        *o = if sj < 0 || sj >= w as isize {
                            0.0
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// 3×3 same-padding convolution. `x` is `N × Cin × H × W`, `weight` is
/// `Cout × Cin × 3 × 3`.
pub(crate) fn conv2d(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = Vec::with_capacity(n * cout * hw);
    let mut cols = vec![0.0; cin * 9 * hw];
    for s in 0..n {
        im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut cols);
        let (_, _, y) = matmul(weight, cout, cin * 9, false, &cols, cin * 9, hw, false);
        out.extend_from_slice(&y);
    }
    out
}

/// Weight gradient of `conv2d`: `Σ_n G_n · cols(x_n)ᵀ`, shaped
/// `Cout × Cin × 3 × 3`.
pub(crate) fn conv2d_weight_grad(
    x: &[f64],
    g: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut acc = vec![0.0; cout * cin * 9];
    let mut cols = vec![0.0; cin * 9 * hw];
    for s in 0..n {
        im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, &mut cols);
        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
        let (_, _, part) = matmul(gs, cout, hw, false, &cols, cin * 9, hw, true);
        acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
    }
    acc
}

/// `W[o,c,a,b] -> W'[c,o,2-a,2-b]`: converts a forward kernel into the
/// kernel whose convolution computes the input gradient. It is an
/// involution.
pub(crate) fn conv_flip_transpose(weight: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut out = vec![0.0; weight.len()];
    for o in 0..cout {
        for c in 0..cin {
            for a in 0..3 {
                for b in 0..3 {
                    out[((c * cout + o) * 3 + (2 - a)) * 3 + (2 - b)] =
                        weight[((o * cin + c) * 3 + a) * 3 + b];
                }
            }
        }
    }
    out
}
