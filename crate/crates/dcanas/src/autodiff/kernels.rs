//! Dense compute kernels shared by the tape primitives.
//!
//! All loops are sequential with a fixed accumulation order, so results are
//! bit-reproducible run to run.

use super::scalar::Scalar;

/// Output extent of a conv/pool window, or `None` if the kernel does not fit.
pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let eff = (k - 1) * dilation + 1;
    let span = h + 2 * pad;
    if span < eff {
        return None;
    }
    Some((span - eff) / stride + 1)
}

/// `a [m,k] × b [k,n] -> [m,n]`.
pub fn mm<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * *bj;
            }
        }
    }
    c
}

/// `a [m,k] × bᵀ where b is [n,k] -> [m,n]`.
pub fn mm_abt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ × b where a is [k,m], b is [k,n] -> [m,n]`.
pub fn mm_atb<E: Scalar>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * *bj;
            }
        }
    }
    c
}

/// Lower one image `[c,h,w]` into a `[c·kh·kw, oh·ow]` patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Vec<E> {
    let oh = conv_out_dim(h, kh, stride, pad, dilation).expect("checked by caller");
    let ow = conv_out_dim(w, kw, stride, pad, dilation).expect("checked by caller");
    let plane_out = oh * ow;
    let mut cols = vec![E::zero(); c * kh * kw * plane_out];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * plane_out;
                for oy in 0..oh {
                    let y = (oy * stride + ky * dilation) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = (ci * h + y as usize) * w;
                    for ox in 0..ow {
                        let xq = (ox * stride + kx * dilation) as isize - pad as isize;
                        if xq < 0 || xq >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = x[src + xq as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`]: accumulate patch-matrix gradients
/// back into an image gradient buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im<E: Scalar>(
    cols: &[E],
    dx: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) {
    let oh = conv_out_dim(h, kh, stride, pad, dilation).expect("checked by caller");
    let ow = conv_out_dim(w, kw, stride, pad, dilation).expect("checked by caller");
    let plane_out = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * plane_out;
                for oy in 0..oh {
                    let y = (oy * stride + ky * dilation) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + y as usize) * w;
                    for ox in 0..ow {
                        let xq = (ox * stride + kx * dilation) as isize - pad as isize;
                        if xq < 0 || xq >= w as isize {
                            continue;
                        }
                        dx[dst + xq as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}
