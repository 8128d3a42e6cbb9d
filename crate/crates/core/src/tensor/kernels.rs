//! Plain-loop numeric kernels shared by forward and backward passes.
//! All `*_acc` kernels accumulate into `out`.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m×n] += aᵀ · b, with a stored as k×m and b as k×n.
pub(crate) fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// out[m×n] += a · bᵀ, with a stored as m×k and b as n×k.
pub(crate) fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// Output extent of a 3×3, pad-1 convolution along one axis.
pub(crate) fn conv3x3_out_extent(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Unfolds `x[C×H×W]` into `cols[(C·9)×(Ho·Wo)]` for a 3×3, pad-1 convolution.
pub(crate) fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let ho = conv3x3_out_extent(h, stride);
    let wo = conv3x3_out_extent(w, stride);
    let plane = ho * wo;
    let mut cols = vec![0.0; c * 9 * plane];
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = xs[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: folds column gradients back onto `dx[C×H×W]`.
pub(crate) fn col2im3x3_acc(
    dx: &mut [f64],
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
) {
    let ho = conv3x3_out_extent(h, stride);
    let wo = conv3x3_out_extent(w, stride);
    let plane = ho * wo;
    for ch in 0..c {
        let xs = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xs[iy * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &a, &b, m, k, n);
        assert_eq!(out, want);

        let mut out = vec![0.0; m * n];
        matmul_tn_acc(&mut out, &transpose(&a, m, k), &b, m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, &a, &transpose(&b, k, n), m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn stride_two_extent_is_ceil_half() {
        for n in 1..20 {
            assert_eq!(conv3x3_out_extent(n, 2), n.div_ceil(2));
            assert_eq!(conv3x3_out_extent(n, 1), n);
        }
    }
}
