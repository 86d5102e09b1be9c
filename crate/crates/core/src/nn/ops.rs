//! Per-image (`C x H x W`) tensor ops with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, NdFloat};

/// Column range `[x0, x1)` of output pixels whose tap `kx` lands inside a row of width `w`.
fn tap_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// Unfold 3x3 zero-padded neighbourhoods into a `(C*9) x (H*W)` matrix.
pub fn im2col<T: NdFloat>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * 9, h * w));
    let dst_all = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst_all[(ch * 9 + ky * 3 + kx) * h * w..][..h * w];
                let (x0, x1) = tap_range(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    row[y * w + x0..y * w + x1].copy_from_slice(&plane[s0 + x0 + kx - 1..s0 + x1 + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C x H x W` tensor.
pub fn col2im<T: NdFloat>(cols: ArrayView2<'_, T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros((c, h, w));
    let dst_all = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let plane = &mut dst_all[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ch * 9 + ky * 3 + kx) * h * w..][..h * w];
                let (x0, x1) = tap_range(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d0 = sy as usize * w + x0 + kx - 1;
                    let dst = &mut plane[d0..d0 + x1 - x0];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += *v;
                    }
                }
            }
        }
    }
    x
}

/// 3x3 same-padding convolution on an already unfolded input. `weight` is
/// `Cout x (Cin*9)`.
pub fn conv3x3_cols<T: NdFloat>(
    cols: ArrayView2<'_, T>,
    weight: ArrayView2<'_, T>,
    bias: ArrayView1<'_, T>,
    h: usize,
    w: usize,
) -> Array3<T> {
    let cout = weight.nrows();
    let mut out = Array2::<T>::zeros((cout, h * w));
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias.iter()) {
        row.fill(b);
    }
    general_mat_mul(T::one(), &weight, &cols, T::one(), &mut out);
    out.into_shape_with_order((cout, h, w)).expect("contiguous output")
}

/// 3x3 same-padding convolution. `weight` is `Cout x (Cin*9)`.
pub fn conv3x3<T: NdFloat>(x: ArrayView3<'_, T>, weight: ArrayView2<'_, T>, bias: ArrayView1<'_, T>) -> Array3<T> {
    let (_, h, w) = x.dim();
    conv3x3_cols(im2col(x).view(), weight, bias, h, w)
}

/// Backward of [`conv3x3_cols`]: accumulates into `dweight`/`dbias` and returns
/// the gradient w.r.t. the `c x h x w` input when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_cols_backward<T: NdFloat>(
    cols: ArrayView2<'_, T>,
    (c, h, w): (usize, usize, usize),
    weight: ArrayView2<'_, T>,
    dy: ArrayView3<'_, T>,
    mut dweight: ArrayViewMut2<'_, T>,
    mut dbias: ArrayViewMut1<'_, T>,
    need_dx: bool,
) -> Option<Array3<T>> {
    let cout = weight.nrows();
    let dy = dy.as_standard_layout();
    let dy2 = dy.view().into_shape_with_order((cout, h * w)).expect("contiguous gradient");
    for (db, row) in dbias.iter_mut().zip(dy2.rows()) {
        *db += row.sum();
    }
    general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dweight);
    need_dx.then(|| {
        let mut dcols = Array2::<T>::zeros((c * 9, h * w));
        general_mat_mul(T::one(), &weight.t(), &dy2, T::zero(), &mut dcols);
        col2im(dcols.view(), c, h, w)
    })
}

/// Backward of [`conv3x3`]: accumulates into `dweight`/`dbias` and returns `dx`.
pub fn conv3x3_backward<T: NdFloat>(
    x: ArrayView3<'_, T>,
    weight: ArrayView2<'_, T>,
    dy: ArrayView3<'_, T>,
    dweight: ArrayViewMut2<'_, T>,
    dbias: ArrayViewMut1<'_, T>,
    need_dx: bool,
) -> Option<Array3<T>> {
    conv3x3_cols_backward(im2col(x).view(), x.dim(), weight, dy, dweight, dbias, need_dx)
}

pub fn leaky_relu_inplace<T: NdFloat>(x: &mut Array3<T>, slope: T) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
}

/// Backward through a leaky ReLU given its output (the sign is preserved).
pub fn leaky_relu_backward_inplace<T: NdFloat>(y: ArrayView3<'_, T>, dy: &mut Array3<T>, slope: T) {
    dy.zip_mut_with(&y, |g, &v| {
        if v <= T::zero() {
            *g = *g * slope;
        }
    });
}

/// 2x2 max pool; returns the pooled tensor and the winning index (0..4) per output.
pub fn maxpool2<T: NdFloat>(x: ArrayView3<'_, T>) -> (Array3<T>, Array3<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let mut arg = Array3::<u8>::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = x[[ch, 2 * y, 2 * xx]];
                let mut bi = 0u8;
                for k in 1..4u8 {
                    let v = x[[ch, 2 * y + (k as usize) / 2, 2 * xx + (k as usize) % 2]];
                    if v > best {
                        best = v;
                        bi = k;
                    }
                }
                out[[ch, y, xx]] = best;
                arg[[ch, y, xx]] = bi;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: NdFloat>(dy: ArrayView3<'_, T>, arg: &Array3<u8>, h: usize, w: usize) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let k = arg[[ch, y, xx]] as usize;
                dx[[ch, 2 * y + k / 2, 2 * xx + k % 2]] += dy[[ch, y, xx]];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: NdFloat>(x: ArrayView3<'_, T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample2_backward<T: NdFloat>(dy: ArrayView3<'_, T>) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, h / 2, w / 2));
    for ((ch, y, xx), &g) in dy.indexed_iter() {
        dx[[ch, y / 2, xx / 2]] += g;
    }
    dx
}

/// Concatenate along channels.
pub fn concat<T: NdFloat>(parts: &[ArrayView3<'_, T>]) -> Array3<T> {
    ndarray::concatenate(ndarray::Axis(0), parts).expect("matching spatial dims")
}
