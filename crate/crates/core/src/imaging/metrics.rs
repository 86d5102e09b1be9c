use ndarray::{s, ArrayView3, Axis};
use ndarray::NdFloat;

use super::Image;
use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

/// Per-channel moments over a `C x h x w` view: (mean_a, mean_b, var_a, var_b, cov).
fn channel_moments<T: NdFloat>(a: ArrayView3<'_, T>, b: ArrayView3<'_, T>, c: usize) -> [T; 5] {
    let pa = a.index_axis(Axis(0), c);
    let pb = b.index_axis(Axis(0), c);
    let n: T = cast(pa.len() as f64);
    let ma = pa.sum() / n;
    let mb = pb.sum() / n;
    let (mut va, mut vb, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in pa.iter().zip(pb.iter()) {
        let dx = x - ma;
        let dy = y - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    [ma, mb, va / n, vb / n, cov / n]
}

/// Single-window SSIM over a whole `C x h x w` patch, averaged across channels.
pub fn ssim_global_chw<T: NdFloat>(a: ArrayView3<'_, T>, b: ArrayView3<'_, T>) -> T {
    let (c1, c2) = (cast::<T>(SSIM_C1), cast::<T>(SSIM_C2));
    let two: T = cast(2.0);
    let channels = a.dim().0;
    let total = (0..channels).fold(T::zero(), |acc, c| {
        let [ma, mb, va, vb, cov] = channel_moments(a, b, c);
        acc + ((two * ma * mb + c1) * (two * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    });
    total / cast(channels as f64)
}

/// Population variance per channel of a `C x h x w` patch, averaged across channels.
pub fn variance_chw<T: NdFloat>(a: ArrayView3<'_, T>) -> T {
    let channels = a.dim().0;
    let total = (0..channels).fold(T::zero(), |acc, c| {
        let p = a.index_axis(Axis(0), c);
        let n: T = cast(p.len() as f64);
        let m = p.sum() / n;
        acc + p.fold(T::zero(), |s, &x| s + (x - m) * (x - m)) / n
    });
    total / cast(channels as f64)
}

/// Global SSIM between two equally shaped `H x W x C` images or patches.
pub fn ssim_global(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let a64 = a.permuted_axes([2, 0, 1]).mapv(f64::from);
    let b64 = b.permuted_axes([2, 0, 1]).mapv(f64::from);
    Ok(ssim_global_chw(a64.view(), b64.view()))
}

/// Mean of [`ssim_global`] over non-overlapping `tile x tile` windows. A simplified
/// stand-in for Gaussian-windowed SSIM, used for reporting.
pub fn tiled_ssim(a: &Image, b: &Image, tile: usize) -> Result<f64> {
    a.same_shape(b)?;
    let tile = tile.min(a.height()).min(a.width());
    let (rows, cols) = (a.height() / tile, a.width() / tile);
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let win = s![r * tile..(r + 1) * tile, c * tile..(c + 1) * tile, ..];
            total += ssim_global(a.data().slice(win), b.data().slice(win))?;
        }
    }
    Ok(total / (rows * cols) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ColorSpace;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn constant(v: f32) -> Image {
        Image::filled(8, 8, 3, v, ColorSpace::Srgb)
    }

    fn ramp() -> Array3<f32> {
        Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            (y * 16 + x) as f32 / 400.0 + c as f32 * 0.05
        })
    }

    /// Straight-from-formula SSIM in f64 over flat slices, one channel at a time.
    fn ssim_oracle(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        let (h, w, ch) = a.dim();
        let mut acc = 0.0;
        for c in 0..ch {
            let xs: Vec<f64> = (0..h * w).map(|i| a[[i / w, i % w, c]] as f64).collect();
            let ys: Vec<f64> = (0..h * w).map(|i| b[[i / w, i % w, c]] as f64).collect();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            let (c1, c2) = (1e-4, 9e-4);
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        acc / ch as f64
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&constant(0.3), &constant(0.3), 1.0).unwrap(), PSNR_CAP_DB);
        assert_abs_diff_eq!(
            psnr(&constant(0.2), &constant(0.3), 1.0).unwrap(),
            20.0,
            epsilon = 1e-4
        );
        assert_abs_diff_eq!(
            psnr(&constant(0.0), &constant(0.5), 1.0).unwrap(),
            10.0 * 4f64.log10(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            psnr(&constant(0.0), &constant(0.5), 1.0).unwrap(),
            6.0206,
            epsilon = 1e-4
        );
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Image::filled(4, 4, 1, 0.0, ColorSpace::Srgb);
        let b = Image::filled(4, 2, 1, 0.0, ColorSpace::Srgb);
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_symmetric_and_decreasing() {
        let base = constant(0.4);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let other = constant(0.4 + k as f32 * 0.02);
            let p = psnr(&base, &other, 1.0).unwrap();
            assert_eq!(p, psnr(&other, &base, 1.0).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let r = ramp();
        assert_abs_diff_eq!(ssim_global(r.view(), r.view()).unwrap(), 1.0, epsilon = 1e-12);
        let c = Array3::from_elem((8, 8, 1), 0.5f32);
        assert_abs_diff_eq!(ssim_global(c.view(), c.view()).unwrap(), 1.0, epsilon = 1e-12);

        let shifted = r.mapv(|v| v + 0.1);
        let got = ssim_global(r.view(), shifted.view()).unwrap();
        let want = ssim_oracle(&r, &shifted);
        assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_symmetric() {
        let r = ramp();
        let other = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let ab = ssim_global(r.view(), other.view()).unwrap();
        let ba = ssim_global(other.view(), r.view()).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert_abs_diff_eq!(ab, ssim_oracle(&r, &other), epsilon = 1e-9);
    }

    #[test]
    fn tiled_ssim_of_identical_is_one() {
        let img = Image::new(ramp(), ColorSpace::Srgb).unwrap();
        assert_abs_diff_eq!(tiled_ssim(&img, &img, 8).unwrap(), 1.0, epsilon = 1e-12);
    }
}
