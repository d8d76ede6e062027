//! Flat-slice matrix kernels behind the tensor ops.
//!
//! Three GEMM variants cover every forward and backward product the model
//! needs. Loop orders are chosen so the innermost loop runs over contiguous
//! memory and auto-vectorizes.

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products of rows)
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c_row[j] += dot(a_row, b_row);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Four-accumulator dot product; vectorizes without reassociation flags.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Unfold one C×H×W image for a 3×3, stride-1, pad-1 convolution.
///
/// Output layout: rows indexed by (c, dy, dx), columns by output pixel
/// (y * w + x); `col` must hold `c_in * 9 * h * w` elements.
pub fn im2col_3x3(img: &[f32], c_in: usize, h: usize, w: usize, col: &mut [f32]) {
    debug_assert_eq!(img.len(), c_in * h * w);
    debug_assert_eq!(col.len(), c_in * 9 * h * w);
    let plane = h * w;
    for c in 0..c_in {
        let src = &img[c * plane..(c + 1) * plane];
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = &mut col[(c * 9 + dy * 3 + dx) * plane..(c * 9 + dy * 3 + dx + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    // x + dx - 1 ranges over [dx-1, w-2+dx); clip to [0, w).
                    match dx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src_row),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src_row[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column gradient back into image layout (adjoint of im2col).
pub fn col2im_3x3(col: &[f32], c_in: usize, h: usize, w: usize, img: &mut [f32]) {
    debug_assert_eq!(img.len(), c_in * h * w);
    debug_assert_eq!(col.len(), c_in * 9 * h * w);
    let plane = h * w;
    for c in 0..c_in {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = &col[(c * 9 + dy * 3 + dx) * plane..(c * 9 + dy * 3 + dx + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &row[y * w..(y + 1) * w];
                    match dx {
                        0 => {
                            for x in 1..w {
                                dst_row[x - 1] += src_row[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst_row[x] += src_row[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst_row[x + 1] += src_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f32> {
        let mut c = alloc::vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let m = 5;
        let k = 7;
        let n = 6;
        let a: alloc::vec::Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.61).sin()).collect();
        let want = naive_nn(&a, &b, m, k, n);

        let mut c = alloc::vec![0.0f32; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        assert_close(&c, &want);

        // A * B == A * (B^T)^T
        let mut bt = alloc::vec![0.0f32; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = alloc::vec![0.0f32; m * n];
        gemm_nt(&a, &bt, &mut c2, m, k, n);
        assert_close(&c2, &want);

        // A * B == (A^T)^T * B
        let mut at = alloc::vec![0.0f32; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = alloc::vec![0.0f32; m * n];
        gemm_tn(&at, &b, &mut c3, k, m, n);
        assert_close(&c3, &want);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w) = (2, 4, 4);
        let x: alloc::vec::Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.173).sin()).collect();
        let y: alloc::vec::Vec<f32> = (0..c * 9 * h * w).map(|i| (i as f32 * 0.071).sin()).collect();
        let mut cx = alloc::vec![0.0f32; c * 9 * h * w];
        im2col_3x3(&x, c, h, w, &mut cx);
        let mut ay = alloc::vec![0.0f32; c * h * w];
        col2im_3x3(&y, c, h, w, &mut ay);
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(ay.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    fn assert_close(a: &[f32], b: &[f32]) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}
