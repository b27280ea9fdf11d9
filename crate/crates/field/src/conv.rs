//! 3×3 zero-padded convolution lowering.

use crate::scalar::Scalar;

pub fn conv_out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// `[cin, h, w]` → `[cin·9, ho·wo]`, row `ci·9 + ky·3 + kx`.
pub fn im2col<S: Scalar>(x: &[S], cin: usize, h: usize, w: usize, stride: usize) -> Vec<S> {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let p = ho * wo;
    let mut col = vec![S::zero(); cin * 9 * p];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `dx`.
pub fn col2im_add<S: Scalar>(col: &[S], cin: usize, h: usize, w: usize, stride: usize, dx: &mut [S]) {
    let (ho, wo) = (conv_out_size(h, stride), conv_out_size(w, stride));
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}
