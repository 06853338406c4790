//! Raw NCHW compute kernels backing the autodiff graph: im2col/GEMM
//! convolutions, pooling, nearest upsampling, pixel shuffle and bilinear
//! grid sampling. Everything is single-threaded and deterministic.

use crate::tensor::{gemm, Scalar, Tensor};

/// Output extent of a 3x3 convolution with padding 1: `ceil(i / stride)`.
pub(crate) fn conv_out(i: usize, stride: usize) -> usize {
    (i - 1) / stride + 1
}

/// Expand one image (C,H,W) into patch rows: `col[(oy*wo+ox), c*9+ky*3+kx]`.
fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize, col: &mut [T]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let ck = c * 9;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * ck;
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            T::ZERO
                        };
                        col[row + ci * 9 + ky * 3 + kx] = v;
                    }
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients back into an image gradient.
fn col2im3<T: Scalar>(dcol: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let ck = c * 9;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * ck;
            for ci in 0..c {
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            dx[ci * h * w + iy as usize * w + ix as usize] +=
                                dcol[row + ci * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, padding 1. `w` has shape (out_c, in_c*9).
pub(crate) fn conv3_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (n, c, h, wd) = nchw(x);
    let out_c = w.dim(0);
    debug_assert_eq!(w.dim(1), c * 9);
    let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
    let mut col = vec![T::ZERO; ho * wo * c * 9];
    let mut y = vec![T::ZERO; n * out_c * ho * wo];
    for i in 0..n {
        im2col3(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, stride, &mut col);
        let yn = &mut y[i * out_c * ho * wo..(i + 1) * out_c * ho * wo];
        // y_n (out_c x HoWo) = w (out_c x ck) * col^T (ck x HoWo)
        gemm(
            out_c,
            c * 9,
            ho * wo,
            T::ONE,
            w.data(),
            (c * 9) as isize,
            1,
            &col,
            1,
            (c * 9) as isize,
            T::ZERO,
            yn,
            (ho * wo) as isize,
            1,
        );
    }
    Tensor::from_vec(&[n, out_c, ho, wo], y)
}

/// Backward of [`conv3_forward`]; returns (dx, dw).
pub(crate) fn conv3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = nchw(x);
    let out_c = w.dim(0);
    let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
    let ck = c * 9;
    let mut col = vec![T::ZERO; ho * wo * ck];
    let mut dcol = vec![T::ZERO; ho * wo * ck];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        im2col3(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, stride, &mut col);
        let dyn_ = &dy.data()[i * out_c * ho * wo..(i + 1) * out_c * ho * wo];
        // dw += dy_n (out_c x HoWo) * col (HoWo x ck)
        gemm(
            out_c,
            ho * wo,
            ck,
            T::ONE,
            dyn_,
            (ho * wo) as isize,
            1,
            &col,
            ck as isize,
            1,
            T::ONE,
            dw.data_mut(),
            ck as isize,
            1,
        );
        // dcol (HoWo x ck) = dy_n^T (HoWo x out_c) * w (out_c x ck)
        gemm(
            ho * wo,
            out_c,
            ck,
            T::ONE,
            dyn_,
            1,
            (ho * wo) as isize,
            w.data(),
            ck as isize,
            1,
            T::ZERO,
            &mut dcol,
            ck as isize,
            1,
        );
        col2im3(&dcol, c, h, wd, stride, &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd]);
    }
    (dx, dw)
}

/// 1x1 convolution. `w` has shape (out_c, in_c).
pub(crate) fn conv1_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, wd) = nchw(x);
    let out_c = w.dim(0);
    debug_assert_eq!(w.dim(1), c);
    let hw = h * wd;
    let mut y = vec![T::ZERO; n * out_c * hw];
    for i in 0..n {
        gemm(
            out_c,
            c,
            hw,
            T::ONE,
            w.data(),
            c as isize,
            1,
            &x.data()[i * c * hw..(i + 1) * c * hw],
            hw as isize,
            1,
            T::ZERO,
            &mut y[i * out_c * hw..(i + 1) * out_c * hw],
            hw as isize,
            1,
        );
    }
    Tensor::from_vec(&[n, out_c, h, wd], y)
}

/// Backward of [`conv1_forward`]; returns (dx, dw).
pub(crate) fn conv1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, wd) = nchw(x);
    let out_c = w.dim(0);
    let hw = h * wd;
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        let dyn_ = &dy.data()[i * out_c * hw..(i + 1) * out_c * hw];
        let xn = &x.data()[i * c * hw..(i + 1) * c * hw];
        // dw += dy_n (out_c x hw) * x_n^T (hw x c)
        gemm(out_c, hw, c, T::ONE, dyn_, hw as isize, 1, xn, 1, hw as isize, T::ONE, dw.data_mut(), c as isize, 1);
        // dx_n (c x hw) = w^T (c x out_c) * dy_n (out_c x hw)
        gemm(
            c,
            out_c,
            hw,
            T::ONE,
            w.data(),
            1,
            c as isize,
            dyn_,
            hw as isize,
            1,
            T::ZERO,
            &mut dx.data_mut()[i * c * hw..(i + 1) * c * hw],
            hw as isize,
            1,
        );
    }
    (dx, dw)
}

/// 2x2 max pooling with stride 2 and ceil-mode output (windows clipped at
/// the border, minimum output extent 1). Returns (values, argmax indices).
pub(crate) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = nchw(x);
    let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
    let mut y = vec![T::ZERO; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for i in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            let base = (i * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = 0u32;
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            if iy < h && ix < w {
                                let v = plane[iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_idx = (iy * w + ix) as u32;
                                }
                            }
                        }
                    }
                    y[base + oy * wo + ox] = best;
                    arg[base + oy * wo + ox] = best_idx;
                }
            }
        }
    }
    (Tensor::from_vec(&[n, c, ho, wo], y), arg)
}

/// Nearest-neighbour resize to (oh, ow): source index `floor(o * in / out)`.
pub(crate) fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = nchw(x);
    let mut y = vec![T::ZERO; n * c * oh * ow];
    for i in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            let out = &mut y[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    out[oy * ow + ox] = plane[iy * w + ox * w / ow];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], y)
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    x_shape: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = Tensor::zeros(x_shape);
    {
        let dxd = dx.data_mut();
        for i in 0..n {
            for ci in 0..c {
                let dout = &dy.data()[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    let iy = oy * h / oh;
                    for ox in 0..ow {
                        dxd[base + iy * w + ox * w / ow] += dout[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Depth-to-space by 2 with optional crop: (N, 4C, H, W) -> (N, C, oh, ow)
/// where `oh <= 2H`, `ow <= 2W`.
pub(crate) fn pixel_shuffle2_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c4, h, w) = nchw(x);
    debug_assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    debug_assert!(oh <= 2 * h && ow <= 2 * w);
    let mut y = vec![T::ZERO; n * c * oh * ow];
    for i in 0..n {
        for ci in 0..c {
            let out = &mut y[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
            for oy in 0..oh {
                let (iy, dy_) = (oy / 2, oy % 2);
                for ox in 0..ow {
                    let (ix, dx_) = (ox / 2, ox % 2);
                    let src = ((i * c4 + ci * 4 + dy_ * 2 + dx_) * h + iy) * w + ix;
                    out[oy * ow + ox] = x.data()[src];
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], y)
}

pub(crate) fn pixel_shuffle2_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c4, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let c = c4 / 4;
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    let mut dx = Tensor::zeros(x_shape);
    {
        let dxd = dx.data_mut();
        for i in 0..n {
            for ci in 0..c {
                let dout = &dy.data()[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
                for dy_ in 0..2usize {
                    for dx_ in 0..2usize {
                        let plane = (i * c4 + ci * 4 + dy_ * 2 + dx_) * h * w;
                        for iy in 0..h {
                            let oy = 2 * iy + dy_;
                            if oy >= oh {
                                continue;
                            }
                            for ix in 0..w {
                                let ox = 2 * ix + dx_;
                                if ox < ow {
                                    dxd[plane + iy * w + ix] = dout[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear sampling of `img` (N,C,H,W) at `grid` (N,Ho,Wo,2) positions in
/// normalized [-1,1] coordinates (align_corners = false); out-of-bounds taps
/// read `padding`.
pub(crate) fn grid_sample_forward<T: Scalar>(
    img: &Tensor<T>,
    grid: &Tensor<T>,
    padding: T,
) -> Tensor<T> {
    let (n, c, h, w) = nchw(img);
    let (ho, wo) = (grid.dim(1), grid.dim(2));
    let mut y = vec![T::ZERO; n * c * ho * wo];
    for i in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = (i * ho * wo + oy * wo + ox) * 2;
                let px = (grid.data()[g].to_f64() + 1.0) * 0.5 * w as f64 - 0.5;
                let py = (grid.data()[g + 1].to_f64() + 1.0) * 0.5 * h as f64 - 0.5;
                let (x0, y0) = (px.floor(), py.floor());
                let (wx, wy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ci in 0..c {
                    let plane = &img.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    let tap = |yy: isize, xx: isize| -> f64 {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            plane[yy as usize * w + xx as usize].to_f64()
                        } else {
                            padding.to_f64()
                        }
                    };
                    let v = (1.0 - wy) * ((1.0 - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1))
                        + wy * ((1.0 - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1));
                    y[(i * c + ci) * ho * wo + oy * wo + ox] = T::from_f64(v);
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], y)
}

/// Backward of [`grid_sample_forward`]; returns (dimg, dgrid).
pub(crate) fn grid_sample_backward<T: Scalar>(
    img: &Tensor<T>,
    grid: &Tensor<T>,
    padding: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = nchw(img);
    let (ho, wo) = (grid.dim(1), grid.dim(2));
    let mut dimg = vec![0f64; n * c * h * w];
    let mut dgrid = vec![0f64; n * ho * wo * 2];
    for i in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = (i * ho * wo + oy * wo + ox) * 2;
                let px = (grid.data()[g].to_f64() + 1.0) * 0.5 * w as f64 - 0.5;
                let py = (grid.data()[g + 1].to_f64() + 1.0) * 0.5 * h as f64 - 0.5;
                let (x0f, y0f) = (px.floor(), py.floor());
                let (wx, wy) = (px - x0f, py - y0f);
                let (x0, y0) = (x0f as isize, y0f as isize);
                let mut dpx = 0.0;
                let mut dpy = 0.0;
                for ci in 0..c {
                    let base = (i * c + ci) * h * w;
                    let plane = &img.data()[base..base + h * w];
                    let tap = |yy: isize, xx: isize| -> f64 {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            plane[yy as usize * w + xx as usize].to_f64()
                        } else {
                            padding.to_f64()
                        }
                    };
                    let go = dy.data()[(i * c + ci) * ho * wo + oy * wo + ox].to_f64();
                    let (v00, v01) = (tap(y0, x0), tap(y0, x0 + 1));
                    let (v10, v11) = (tap(y0 + 1, x0), tap(y0 + 1, x0 + 1));
                    // Image gradient: scatter the four tap weights.
                    let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            dimg[base + yy as usize * w + xx as usize] += wgt * go;
                        }
                    };
                    scatter(y0, x0, (1.0 - wy) * (1.0 - wx));
                    scatter(y0, x0 + 1, (1.0 - wy) * wx);
                    scatter(y0 + 1, x0, wy * (1.0 - wx));
                    scatter(y0 + 1, x0 + 1, wy * wx);
                    // Position gradient via the bilinear surface slope.
                    dpx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                    dpy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                }
                dgrid[g] += dpx * 0.5 * w as f64;
                dgrid[g + 1] += dpy * 0.5 * h as f64;
            }
        }
    }
    let dimg_t = Tensor::from_vec(img.shape(), dimg.iter().map(|&v| T::from_f64(v)).collect());
    let dgrid_t = Tensor::from_vec(grid.shape(), dgrid.iter().map(|&v| T::from_f64(v)).collect());
    (dimg_t, dgrid_t)
}

/// Split an NCHW shape tuple.
pub(crate) fn nchw<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    debug_assert_eq!(x.shape().len(), 4, "expected NCHW, got {:?}", x.shape());
    (x.dim(0), x.dim(1), x.dim(2), x.dim(3))
}
