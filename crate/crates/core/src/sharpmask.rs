//! Per-patch detection of approximately sharp regions in the blurry image, gated
//! jointly by SSIM against a denoised reference and by a variance gap.

use ndarray::{s, Array2, Array3, ArrayView3, ArrayView4, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ssim_global_chw, variance_chw, Image, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Patch side at the resolution the mask is computed on.
    pub patch_size: usize,
    pub eps_s: f64,
    pub eps_v: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            eps_s: 0.99,
            eps_v: 1e-5,
        }
    }
}

/// Binary per-patch mask `m^n` over a [`PatchGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SharpMask {
    values: Array2<u8>,
    grid: PatchGrid,
    pub eps_s: f64,
    pub eps_v: f64,
}

impl SharpMask {
    pub fn from_values(values: Array2<u8>, grid: PatchGrid, eps_s: f64, eps_v: f64) -> Result<Self> {
        if values.dim() != (grid.n_rows, grid.n_cols) {
            return Err(Error::Shape(format!(
                "mask {:?} for a {}x{} grid",
                values.dim(),
                grid.n_rows,
                grid.n_cols
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParam("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            values,
            grid,
            eps_s,
            eps_v,
        })
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.grid.patch_size
    }

    pub fn selected(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn fill_ratio(&self) -> f64 {
        self.selected() as f64 / self.grid.len().max(1) as f64
    }

    /// Value for patch `n` in raster order.
    pub fn get(&self, n: usize) -> u8 {
        self.values[[n / self.grid.n_cols, n % self.grid.n_cols]]
    }
}

/// `sgn(max(0, x))`: 1 for strictly positive `x`, else 0.
fn step(x: f64) -> u8 {
    u8::from(x > 0.0)
}

struct PatchStats {
    ssim: f64,
    var_blurry: f64,
    var_reference: f64,
}

/// Per-patch statistics for `C x H x W` inputs, patches laid on a centered grid.
fn patch_stats<T: NdFloat>(
    blurry: ArrayView3<'_, T>,
    reference: ArrayView3<'_, T>,
    grid: &PatchGrid,
) -> Result<Vec<PatchStats>> {
    if blurry.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "blurry {:?} vs reference {:?}",
            blurry.dim(),
            reference.dim()
        )));
    }
    let (_, h, w) = blurry.dim();
    if grid.covered_height() > h || grid.covered_width() > w {
        return Err(Error::Shape(format!(
            "grid {}x{} of {} px does not fit {h}x{w}",
            grid.n_rows, grid.n_cols, grid.patch_size
        )));
    }
    let (oy, ox) = grid.center_offset(h, w);
    let p = grid.patch_size;
    let to64 = |v: ArrayView3<'_, T>| v.mapv(|x| x.to_f64().unwrap_or(f64::NAN));
    Ok((0..grid.len())
        .map(|n| {
            let (y, x) = grid.origin(n);
            let win = s![.., oy + y..oy + y + p, ox + x..ox + x + p];
            let a: Array3<f64> = to64(blurry.slice(win));
            let b: Array3<f64> = to64(reference.slice(win));
            PatchStats {
                ssim: ssim_global_chw(a.view(), b.view()),
                var_blurry: variance_chw(a.view()),
                var_reference: variance_chw(b.view()),
            }
        })
        .collect())
}

fn to_grid(values: Vec<u8>, grid: &PatchGrid) -> Array2<u8> {
    Array2::from_shape_vec((grid.n_rows, grid.n_cols), values).expect("one value per patch")
}

fn chw(img: &Image) -> ArrayView3<'_, f32> {
    img.data().view().permuted_axes([2, 0, 1])
}

fn image_grid(blurry: &Image, reference: &Image, patch_size: usize) -> Result<PatchGrid> {
    blurry.same_shape(reference)?;
    PatchGrid::for_dims(blurry.height(), blurry.width(), patch_size)
}

/// 1 where `SSIM(blurry^n, reference^n) > eps_s`.
pub fn similarity_mask(blurry: &Image, reference: &Image, grid: &PatchGrid, eps_s: f64) -> Result<Array2<u8>> {
    blurry.same_shape(reference)?;
    let stats = patch_stats(chw(blurry), chw(reference), grid)?;
    Ok(to_grid(stats.iter().map(|s| step(s.ssim - eps_s)).collect(), grid))
}

/// 1 where `var(blurry^n) - var(reference^n) > eps_v`.
pub fn variance_mask(blurry: &Image, reference: &Image, grid: &PatchGrid, eps_v: f64) -> Result<Array2<u8>> {
    blurry.same_shape(reference)?;
    let stats = patch_stats(chw(blurry), chw(reference), grid)?;
    Ok(to_grid(
        stats
            .iter()
            .map(|s| step(s.var_blurry - s.var_reference - eps_v))
            .collect(),
        grid,
    ))
}

fn combined<T: NdFloat>(
    blurry: ArrayView3<'_, T>,
    reference: ArrayView3<'_, T>,
    grid: PatchGrid,
    eps_s: f64,
    eps_v: f64,
) -> Result<SharpMask> {
    let stats = patch_stats(blurry, reference, &grid)?;
    let values = stats
        .iter()
        .map(|s| step(s.ssim - eps_s) * step(s.var_blurry - s.var_reference - eps_v))
        .collect();
    SharpMask::from_values(to_grid(values, &grid), grid, eps_s, eps_v)
}

/// Logical AND of [`similarity_mask`] and [`variance_mask`].
pub fn sharp_mask(blurry: &Image, reference: &Image, patch_size: usize, eps_s: f64, eps_v: f64) -> Result<SharpMask> {
    let grid = image_grid(blurry, reference, patch_size)?;
    combined(chw(blurry), chw(reference), grid, eps_s, eps_v)
}

/// Masks for a `N x C x H x W` batch of sub-sampled blurry inputs against the
/// network's no-gradient restoration of the same inputs. Purely a function of
/// tensor values, so no gradient can flow through it.
pub fn training_mask<T: NdFloat>(
    g1_blur: ArrayView4<'_, T>,
    restored_nograd: ArrayView4<'_, T>,
    cfg: &MaskConfig,
) -> Result<Vec<SharpMask>> {
    if g1_blur.dim() != restored_nograd.dim() {
        return Err(Error::Shape(format!(
            "sub-sampled blurry {:?} vs restored {:?}",
            g1_blur.dim(),
            restored_nograd.dim()
        )));
    }
    let (_, _, h, w) = g1_blur.dim();
    let grid = PatchGrid::for_dims(h, w, cfg.patch_size)?;
    g1_blur
        .axis_iter(Axis(0))
        .zip(restored_nograd.axis_iter(Axis(0)))
        .map(|(b, r)| combined(b, r, grid, cfg.eps_s, cfg.eps_v))
        .collect()
}

/// 3x3 box filter with replicated borders: the non-learned reference used for
/// standalone mask computation outside training.
pub fn box_smooth(img: &Image) -> Image {
    let (h, w, c) = img.dims();
    let src = img.data();
    let out = Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        let mut acc = 0.0f32;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                acc += src[[yy, xx, k]];
            }
        }
        acc / 9.0
    });
    img.map_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ssim_global, ColorSpace};
    use proptest::prelude::*;

    fn texture(n: usize, seed: u64) -> Image {
        let data = Array3::from_shape_fn((n, n, 3), |(y, x, c)| {
            let v = (y as u64 * 7919 + x as u64 * 104_729 + c as u64 * 31 + seed).wrapping_mul(0x9e37_79b9);
            0.25 + 0.5 * ((v >> 11) % 1000) as f32 / 999.0
        });
        Image::new(data, ColorSpace::Srgb).unwrap()
    }

    /// Separable Gaussian blur with replicated borders.
    fn gaussian_blur(img: &Image, std: f64) -> Image {
        let r = (3.0 * std).ceil() as i64;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * std * std)).exp()).collect();
        let ks: f64 = k.iter().sum();
        let (h, w, c) = img.dims();
        let pass = |src: &Array3<f32>, horizontal: bool| {
            Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let d = j as i64 - r;
                    let (yy, xx) = if horizontal {
                        (y as i64, (x as i64 + d).clamp(0, w as i64 - 1))
                    } else {
                        ((y as i64 + d).clamp(0, h as i64 - 1), x as i64)
                    };
                    acc += kv * src[[yy as usize, xx as usize, ch]] as f64;
                }
                (acc / ks) as f32
            })
        };
        let once = pass(img.data(), true);
        img.map_data(pass(&once, false))
    }

    fn contrast(img: &Image, factor: f32) -> Image {
        let mean = img.data().mean().unwrap();
        img.map_data(img.data().mapv(|v| mean + factor * (v - mean)))
    }

    #[test]
    fn identical_textured_is_similar_but_not_variance_sharp() {
        let t = texture(32, 1);
        let grid = PatchGrid::for_dims(32, 32, 16).unwrap();
        assert!(similarity_mask(&t, &t, &grid, 0.99).unwrap().iter().all(|&v| v == 1));
        assert!(variance_mask(&t, &t, &grid, 1e-5).unwrap().iter().all(|&v| v == 0));
        let m = sharp_mask(&t, &t, 16, 0.99, 1e-5).unwrap();
        assert_eq!(m.selected(), 0);
    }

    #[test]
    fn heavy_blur_fails_similarity() {
        let t = texture(32, 2);
        let b = gaussian_blur(&t, 3.0);
        let grid = PatchGrid::for_dims(32, 32, 16).unwrap();
        let ssim = ssim_global(b.view(), t.view()).unwrap();
        assert!(ssim < 0.99, "{ssim}");
        assert!(similarity_mask(&b, &t, &grid, 0.99).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn constant_patches() {
        let c = Image::filled(16, 16, 3, 0.5, ColorSpace::Srgb);
        let grid = PatchGrid::for_dims(16, 16, 16).unwrap();
        assert_eq!(similarity_mask(&c, &c, &grid, 0.99).unwrap()[[0, 0]], 1);
        assert_eq!(variance_mask(&c, &c, &grid, 1e-5).unwrap()[[0, 0]], 0);
        assert_eq!(sharp_mask(&c, &c, 16, 0.99, 1e-5).unwrap().selected(), 0);
    }

    #[test]
    fn smoothed_reference_variance_gap() {
        let t = texture(16, 3);
        let smooth = gaussian_blur(&t, 2.0);
        let grid = PatchGrid::for_dims(16, 16, 16).unwrap();
        let chw_t = t.data().view().permuted_axes([2, 0, 1]).mapv(f64::from);
        let chw_s = smooth.data().view().permuted_axes([2, 0, 1]).mapv(f64::from);
        assert!(variance_chw(chw_t.view()) - variance_chw(chw_s.view()) > 1e-5);
        assert_eq!(variance_mask(&t, &smooth, &grid, 1e-5).unwrap()[[0, 0]], 1);
    }

    #[test]
    fn slightly_smoothed_reference_marks_textured_patches_only() {
        // left half textured, right half flat
        let t = texture(32, 4);
        let mut data = t.data().clone();
        data.slice_mut(s![.., 16.., ..]).fill(0.5);
        let blurry = t.map_data(data);
        let reference = contrast(&blurry, 0.97);
        let m = sharp_mask(&blurry, &reference, 16, 0.99, 1e-5).unwrap();
        assert_eq!(m.values(), &ndarray::arr2(&[[1u8, 0], [1, 0]]));
    }

    #[test]
    fn ringing_patch_rejected() {
        // over-shot kernel: sharp texture plus strong oscillating halo
        let t = texture(16, 5);
        let ringing = t.map_data(Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            let base = t.data()[[y, x, c]];
            base + 0.2 * if (x / 2 + y / 3) % 2 == 0 { 1.0 } else { -1.0 }
        }));
        let reference = contrast(&t, 0.97);
        let grid = PatchGrid::for_dims(16, 16, 16).unwrap();
        assert_eq!(variance_mask(&ringing, &reference, &grid, 1e-5).unwrap()[[0, 0]], 1);
        assert_eq!(similarity_mask(&ringing, &reference, &grid, 0.99).unwrap()[[0, 0]], 0);
        assert_eq!(sharp_mask(&ringing, &reference, 16, 0.99, 1e-5).unwrap().selected(), 0);
    }

    #[test]
    fn training_mask_batch_and_strictness() {
        let t = texture(32, 6);
        let flat = Image::filled(32, 32, 3, 0.4, ColorSpace::Srgb);
        let to_batch = |imgs: &[&Image]| {
            let mut b = ndarray::Array4::<f32>::zeros((imgs.len(), 3, 32, 32));
            for (i, im) in imgs.iter().enumerate() {
                b.index_axis_mut(Axis(0), i).assign(&im.data().view().permuted_axes([2, 0, 1]));
            }
            b
        };
        let blur = to_batch(&[&t, &t]);
        // restored == blurry: SSIM 1 but zero variance gap, so nothing selected
        let masks = training_mask(blur.view(), blur.view(), &MaskConfig::default()).unwrap();
        assert_eq!(masks.len(), 2);
        assert!(masks.iter().all(|m| m.selected() == 0 && m.grid().len() == 4));
        // near-constant restoration of a flat scene
        let fb = to_batch(&[&flat]);
        let masks = training_mask(fb.view(), fb.view(), &MaskConfig::default()).unwrap();
        assert_eq!(masks[0].selected(), 0);
        let small = ndarray::Array4::<f32>::zeros((2, 3, 16, 16));
        assert!(training_mask(blur.view(), small.view(), &MaskConfig::default()).is_err());
    }

    #[test]
    fn mask_errors() {
        let a = texture(32, 0);
        let b = texture(16, 0);
        assert!(sharp_mask(&a, &b, 16, 0.99, 1e-5).is_err());
        assert!(sharp_mask(&b, &b, 32, 0.99, 1e-5).is_err());
        let grid = PatchGrid::for_dims(32, 32, 16).unwrap();
        assert!(similarity_mask(&b, &b, &grid, 0.99).is_err());
    }

    #[test]
    fn box_smooth_preserves_constants() {
        let c = Image::filled(6, 6, 3, 0.3, ColorSpace::Srgb);
        let s = box_smooth(&c);
        assert!(s.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn and_semantics_and_threshold_monotonicity(seed in any::<u64>(), f in 0.5f32..1.5, es in 0.9f64..0.999, ev in 0.0f64..1e-3) {
            let blurry = texture(32, seed);
            let reference = gaussian_blur(&contrast(&blurry, f), 0.6);
            let grid = PatchGrid::for_dims(32, 32, 16).unwrap();
            let m = sharp_mask(&blurry, &reference, 16, es, ev).unwrap();
            let sm = similarity_mask(&blurry, &reference, &grid, es).unwrap();
            let vm = variance_mask(&blurry, &reference, &grid, ev).unwrap();
            for ((a, b), c) in m.values().iter().zip(sm.iter()).zip(vm.iter()) {
                prop_assert!(a <= b && a <= c);
                prop_assert!(*a <= 1);
            }
            let stricter = sharp_mask(&blurry, &reference, 16, es + 0.0005, ev * 2.0 + 1e-6).unwrap();
            for (hi, lo) in stricter.values().iter().zip(m.values().iter()) {
                prop_assert!(hi <= lo);
            }
        }
    }
}
