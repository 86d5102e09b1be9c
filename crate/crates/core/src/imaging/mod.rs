//! Image containers, patch arithmetic, quality metrics and file I/O.

mod io;
mod metrics;
pub mod sirt;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_image, load_sirt_unclamped, save_image, save_png, save_sirt_unclamped, ImageFormat};
pub use metrics::{psnr, ssim_global, ssim_global_chw, tiled_ssim, variance_chw, PSNR_CAP_DB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Srgb,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitOrigin {
    F32,
    U8,
    U16,
}

/// An `H x W x C` image with a colorspace tag.
///
/// Loaded and synthesized images hold values in `[0, 1]`. Noisy loss targets are
/// allowed to leave that range (they are kept unclamped so the noise stays
/// zero-mean); only finiteness is enforced by the constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
    colorspace: ColorSpace,
    bit_origin: BitOrigin,
}

impl Image {
    pub fn new(data: Array3<f32>, colorspace: ColorSpace) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidImage(format!("zero-sized image {h}x{w}x{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite pixel value".into()));
        }
        Ok(Self {
            data,
            colorspace,
            bit_origin: BitOrigin::F32,
        })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32, colorspace: ColorSpace) -> Self {
        Self {
            data: Array3::from_elem((h, w, c), value),
            colorspace,
            bit_origin: BitOrigin::F32,
        }
    }

    pub fn with_bit_origin(mut self, origin: BitOrigin) -> Self {
        self.bit_origin = origin;
        self
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn bit_origin(&self) -> BitOrigin {
        self.bit_origin
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Replace the pixel data, keeping the tags. Caller guarantees finiteness.
    /// Channel-first copy (`C x H x W`) for the network.
    pub fn to_chw(&self) -> Array3<f32> {
        self.data.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
    }

    /// Build from a channel-first tensor. Values are kept as given.
    pub fn from_chw(chw: ArrayView3<'_, f32>, colorspace: ColorSpace) -> Result<Self> {
        Self::new(chw.permuted_axes([1, 2, 0]).as_standard_layout().into_owned(), colorspace)
    }

    pub(crate) fn map_data(&self, data: Array3<f32>) -> Self {
        Self {
            data,
            colorspace: self.colorspace,
            bit_origin: self.bit_origin,
        }
    }

    pub(crate) fn retag(mut self, colorspace: ColorSpace) -> Self {
        self.colorspace = colorspace;
        self
    }

    pub fn expect_colorspace(&self, expected: ColorSpace) -> Result<()> {
        if self.colorspace != expected {
            return Err(Error::ColorSpace {
                expected,
                found: self.colorspace,
            });
        }
        Ok(())
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        self.map_data(self.data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Window `[y, y+h) x [x, x+w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height() || x + w > self.width() || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y},{x}) outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(self.map_data(self.data.slice(s![y..y + h, x..x + w, ..]).to_owned()))
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height() || w > self.width() {
            return Err(Error::Shape(format!(
                "center crop {h}x{w} larger than {}x{}",
                self.height(),
                self.width()
            )));
        }
        self.crop((self.height() - h) / 2, (self.width() - w) / 2, h, w)
    }

    /// Center-crop so both sides are multiples of `m`.
    pub fn crop_to_multiple(&self, m: usize) -> Result<Self> {
        let h = self.height() / m * m;
        let w = self.width() / m * m;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{}x{} image smaller than {m}",
                self.height(),
                self.width()
            )));
        }
        if h == self.height() && w == self.width() {
            return Ok(self.clone());
        }
        self.center_crop(h, w)
    }

    pub fn flip_horizontal(&self) -> Self {
        self.map_data(self.data.slice(s![.., ..;-1, ..]).to_owned())
    }

    pub fn flip_vertical(&self) -> Self {
        self.map_data(self.data.slice(s![..;-1, .., ..]).to_owned())
    }
}

/// Non-overlapping square tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

pub const MIN_PATCH_SIZE: usize = 4;

impl PatchGrid {
    /// Grid covering the largest multiple of `patch_size` that fits in `h x w`.
    pub fn for_dims(h: usize, w: usize, patch_size: usize) -> Result<Self> {
        if patch_size < MIN_PATCH_SIZE {
            return Err(Error::InvalidParam(format!(
                "patch size {patch_size} below minimum {MIN_PATCH_SIZE}"
            )));
        }
        if patch_size > h || patch_size > w {
            return Err(Error::Shape(format!(
                "patch size {patch_size} larger than {h}x{w} image"
            )));
        }
        Ok(Self {
            patch_size,
            n_rows: h / patch_size,
            n_cols: w / patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covered_height(&self) -> usize {
        self.n_rows * self.patch_size
    }

    pub fn covered_width(&self) -> usize {
        self.n_cols * self.patch_size
    }

    /// Offset `(y, x)` of the covered region when centered in an `h x w` image.
    pub fn center_offset(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.covered_height()) / 2, (w - self.covered_width()) / 2)
    }

    /// Pixel origin `(y, x)` of patch `n` in raster order.
    pub fn origin(&self, n: usize) -> (usize, usize) {
        ((n / self.n_cols) * self.patch_size, (n % self.n_cols) * self.patch_size)
    }
}

/// Split into raster-ordered `patch_size x patch_size x C` tiles after center-cropping
/// to a multiple of the patch size.
pub fn split_patches(img: &Image, patch_size: usize) -> Result<(Vec<Array3<f32>>, PatchGrid)> {
    let grid = PatchGrid::for_dims(img.height(), img.width(), patch_size)?;
    let cropped = img.center_crop(grid.covered_height(), grid.covered_width())?;
    let patches = (0..grid.len())
        .map(|n| {
            let (y, x) = grid.origin(n);
            cropped
                .data
                .slice(s![y..y + patch_size, x..x + patch_size, ..])
                .to_owned()
        })
        .collect();
    Ok((patches, grid))
}

pub fn reassemble_patches(patches: &[Array3<f32>], grid: &PatchGrid) -> Result<Array3<f32>> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    let c = patches.first().map(|p| p.dim().2).unwrap_or(0);
    let p = grid.patch_size;
    let mut out = Array3::zeros((grid.covered_height(), grid.covered_width(), c));
    for (n, patch) in patches.iter().enumerate() {
        if patch.dim() != (p, p, c) {
            return Err(Error::Shape(format!("patch {n} has shape {:?}", patch.dim())));
        }
        let (y, x) = grid.origin(n);
        out.slice_mut(s![y..y + p, x..x + p, ..]).assign(patch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = Array3::from_shape_fn((h, w, c), |(y, x, k)| {
            ((y * w + x) * c + k) as f32 / (h * w * c) as f32
        });
        Image::new(data, ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn patch_counts() {
        let (p, g) = split_patches(&ramp(32, 32, 1), 16).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!((g.n_rows, g.n_cols), (2, 2));

        let (p, g) = split_patches(&ramp(33, 32, 1), 16).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!((g.covered_height(), g.covered_width()), (32, 32));

        let (p, _) = split_patches(&ramp(128, 128, 3), 16).unwrap();
        assert_eq!(p.len(), (128 / 16) * (128 / 16));
    }

    #[test]
    fn patch_errors() {
        assert!(matches!(
            split_patches(&ramp(8, 8, 1), 16),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            split_patches(&ramp(8, 8, 1), 3),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn zero_sized_and_non_finite_rejected() {
        assert!(Image::new(Array3::zeros((0, 4, 1)), ColorSpace::Srgb).is_err());
        let mut d = Array3::zeros((2, 2, 1));
        d[[0, 0, 0]] = f32::NAN;
        assert!(Image::new(d, ColorSpace::Srgb).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(6, 4, 2);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().data()[[0, 0, 0]], img.data()[[0, 3, 0]]);
    }

    proptest! {
        #[test]
        fn split_then_reassemble_is_identity(h in 4usize..40, w in 4usize..40, p in 4usize..12, seed in 0u64..1000) {
            prop_assume!(p <= h && p <= w);
            let data = Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
                (((y * 31 + x * 17 + c * 7) as u64 ^ seed) % 97) as f32 / 96.0
            });
            let img = Image::new(data, ColorSpace::Linear).unwrap();
            let (patches, grid) = split_patches(&img, p).unwrap();
            let back = reassemble_patches(&patches, &grid).unwrap();
            let cropped = img.center_crop(grid.covered_height(), grid.covered_width()).unwrap();
            prop_assert_eq!(&back, cropped.data());
        }
    }
}
